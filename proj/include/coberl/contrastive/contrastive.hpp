#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coberl/config.hpp"
#include "coberl/numerics/parameters.hpp"

namespace coberl::contrastive {

using numerics::ParameterBinding;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Tensor;
using numerics::Var;

/// ceil(rate * length), with a small slack so 0.15 * 80 gives 12.
std::size_t mask_count(double rate, std::size_t length);

/// Masked time indices per sequence (sorted, unique).
struct MaskPlan {
  std::size_t batch = 0;
  std::size_t length = 0;
  double rate = 0.0;
  std::vector<std::vector<std::size_t>> indices;

  /// Flattened [B*T] indicator, sequence-major.
  std::vector<std::uint8_t> mask_ext() const;
};

/// Draws ceil(rate * n_b) positions without replacement per sequence, where
/// n_b is the number of valid steps of sequence b (all T when `valid` is empty).
MaskPlan plan_masks(std::size_t batch, std::size_t length, double rate, Rng& rng,
                    std::span<const std::uint8_t> valid = {});

struct MaskedBatch {
  Var masked_inputs;  // [B*T, d]
  Var targets;        // [B*T, d]
  std::vector<std::uint8_t> mask_ext;
};

/// Parameters: "contrastive/mask_token" ([1, d_model], trainable mode only) and "critic/w".
void add_parameters(ParameterSet& params, const ContrastiveConfig& config, std::size_t d_model, Rng& rng);

Var mask_token(ParameterBinding& p, const ContrastiveConfig& config, std::size_t d_model);
MaskedBatch apply_masking(ParameterBinding& p, const ContrastiveConfig& config, Var inputs, const MaskPlan& plan);

struct MaskedValues {
  Tensor masked_inputs;
  Tensor targets;
  Tensor mask_ext;  // [B, T]
  MaskPlan plan;
};
/// Value form over [B, T, d] inputs with an explicit token of width d.
MaskedValues apply_masking(const Tensor& inputs, double rate, Rng& rng, const Tensor& token);

/// Linear critic without bias followed by row L2 normalisation.
Var critic_embed(ParameterBinding& p, Var v);
Tensor critic_embed(const ParameterSet& params, const Tensor& v);

/// Row-wise KL(softmax(p) || softmax(q)), [N,1]. Wrap `p` in stop_gradient to cut its gradient.
Var kl_with_logits(Var p_logits, Var q_logits);
double kl_with_logits(std::span<const double> p_logits, std::span<const double> q_logits);

/// Per-row invariance penalty from the four logit matrices; the first
/// argument of every KL term is taken from the `sg_*` inputs under stop_gradient.
Var invariance_penalty(Var sg11, Var sg12, Var sg21, Var l11, Var l22, Var l21);

struct AuxLoss {
  Var loss;       // scalar: mean over positions of mask * (infonce + kl_weight * penalty)
  Var penalty;    // [N,1], unmasked per-row penalty
  Var infonce;    // [N,1], unmasked per-row loss_12 + loss_21
};
/// Rows of `x_out` and `y_in` are critic embeddings, sequence-major.
AuxLoss compute_aux_loss(Var x_out, Var y_in, std::span<const std::uint8_t> mask_ext, double kl_weight = 1.0);

struct AuxLossValue {
  double loss = 0.0;
  double penalty = 0.0;  // mean over positions of the masked penalty
  double infonce = 0.0;  // mean over positions of the masked InfoNCE terms
};
/// Checked value form. x_out, y_in: [B, T, d] or [N, d] with unit rows; mask_ext: N entries of 0/1.
AuxLossValue compute_aux_loss(const Tensor& x_out, const Tensor& y_in, const Tensor& mask_ext,
                              double kl_weight = 1.0);

}  // namespace coberl::contrastive
