#include "coberl/contrastive/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coberl/error.hpp"

namespace coberl::contrastive {

using namespace numerics;

std::size_t mask_count(double rate, std::size_t length) {
  if (!(rate > 0.0) || rate > 1.0) throw ConfigError("masking rate must lie in (0, 1], got " + std::to_string(rate));
  if (length == 0) return 0;
  const double raw = rate * static_cast<double>(length);
  auto count = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(count, 1, length);
}

std::vector<std::uint8_t> MaskPlan::mask_ext() const {
  std::vector<std::uint8_t> m(batch * length, 0);
  for (std::size_t b = 0; b < indices.size(); ++b)
    for (std::size_t t : indices[b]) m[b * length + t] = 1;
  return m;
}

MaskPlan plan_masks(std::size_t batch, std::size_t length, double rate, Rng& rng, std::span<const std::uint8_t> valid) {
  if (!(rate > 0.0) || rate > 1.0) throw ConfigError("masking rate must lie in (0, 1], got " + std::to_string(rate));
  if (length == 0) throw ConfigError("masking needs T >= 1");
  if (!valid.empty() && valid.size() != batch * length) throw InputError("masking: validity mask size mismatch");
  MaskPlan plan{batch, length, rate, {}};
  plan.indices.resize(batch);
  std::vector<std::size_t> pool;
  for (std::size_t b = 0; b < batch; ++b) {
    pool.clear();
    for (std::size_t t = 0; t < length; ++t)
      if (valid.empty() || valid[b * length + t]) pool.push_back(t);
    const std::size_t k = mask_count(rate, pool.size());
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    plan.indices[b].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(plan.indices[b].begin(), plan.indices[b].end());
  }
  return plan;
}

void add_parameters(ParameterSet& params, const ContrastiveConfig& config, std::size_t d_model, Rng& rng) {
  if (config.mask_token == MaskTokenMode::kTrainable)
    params.add("contrastive/mask_token", truncated_normal(1, d_model, d_model, rng));
  params.add("critic/w", truncated_normal(d_model, config.critic_size, d_model, rng));
}

Var mask_token(ParameterBinding& p, const ContrastiveConfig& config, std::size_t d_model) {
  if (config.mask_token == MaskTokenMode::kTrainable) return p("contrastive/mask_token");
  return p.tape().constant(Tensor::zeros(1, d_model));
}

MaskedBatch apply_masking(ParameterBinding& p, const ContrastiveConfig& config, Var inputs, const MaskPlan& plan) {
  if (inputs.rows() != plan.batch * plan.length) throw InputError("masking: plan does not match input rows");
  MaskedBatch m;
  m.mask_ext = plan.mask_ext();
  m.targets = inputs;
  m.masked_inputs = replace_rows(inputs, mask_token(p, config, inputs.cols()), m.mask_ext);
  return m;
}

MaskedValues apply_masking(const Tensor& inputs, double rate, Rng& rng, const Tensor& token) {
  if (inputs.rank() != 3) throw InputError("masking: inputs must be [B, T, d]");
  const std::size_t B = inputs.shape()[0], T = inputs.shape()[1], d = inputs.shape()[2];
  if (token.size() != d) throw InputError("masking: token width mismatch");
  MaskedValues out;
  out.plan = plan_masks(B, T, rate, rng);
  Tape tape(false);
  const auto ext = out.plan.mask_ext();
  Var masked = replace_rows(tape.constant(inputs.reshaped({B * T, d})), tape.constant(token.reshaped({1, d})), ext);
  out.masked_inputs = masked.value().reshaped({B, T, d});
  out.targets = inputs;
  out.mask_ext = Tensor({B, T});
  for (std::size_t i = 0; i < ext.size(); ++i) out.mask_ext[i] = ext[i];
  return out;
}

Var critic_embed(ParameterBinding& p, Var v) { return l2_normalize_rows(matmul(v, p("critic/w"))); }

Tensor critic_embed(const ParameterSet& params, const Tensor& v) {
  Tape tape(false);
  ParameterBinding p(tape, params, false);
  const std::size_t d = params.at("critic/w").rows();
  if (v.size() % d != 0) throw ConfigError("critic: input width mismatch");
  return critic_embed(p, tape.constant(v.reshaped({v.size() / d, d}))).value();
}

Var kl_with_logits(Var p_logits, Var q_logits) {
  Var lp = log_softmax_rows(p_logits);
  return sum_cols(mul(softmax_rows(p_logits), sub(lp, log_softmax_rows(q_logits))));
}

double kl_with_logits(std::span<const double> p_logits, std::span<const double> q_logits) {
  if (p_logits.size() != q_logits.size()) throw InputError("kl_with_logits: length mismatch");
  Tape tape(false);
  Var p = tape.constant(Tensor::row(p_logits));
  Var q = tape.constant(Tensor::row(q_logits));
  return kl_with_logits(p, q).value()[0];
}

Var invariance_penalty(Var sg11, Var sg12, Var sg21, Var l11, Var l22, Var l21) {
  Var pen = kl_with_logits(stop_gradient(sg11), l22);
  pen = add(pen, kl_with_logits(stop_gradient(sg12), l22));
  pen = add(pen, kl_with_logits(stop_gradient(sg21), l11));
  pen = add(pen, kl_with_logits(stop_gradient(sg12), l21));
  return scale(pen, 0.25);
}

AuxLoss compute_aux_loss(Var x_out, Var y_in, std::span<const std::uint8_t> mask_ext, double kl_weight) {
  const std::size_t N = x_out.rows();
  if (y_in.rows() != N || y_in.cols() != x_out.cols())
    throw InputError("aux loss: input shapes differ");
  if (mask_ext.size() != N) throw InputError("aux loss: mask has " + std::to_string(mask_ext.size()) + " entries, expected " + std::to_string(N));
  Tape& tape = *x_out.tape;

  Var l11 = matmul_nt(x_out, x_out);
  Var l22 = matmul_nt(y_in, y_in);
  Var l12 = matmul_nt(x_out, y_in);
  Var l21 = matmul_nt(y_in, x_out);

  AuxLoss r;
  r.penalty = invariance_penalty(l11, l12, l21, l11, l22, l21);

  Tensor suppress({N, N});
  for (std::size_t i = 0; i < N; ++i) suppress(i, i) = -1e9;
  Var diag = tape.constant(std::move(suppress));
  const Var row1[] = {l12, add(l11, diag)};
  const Var row2[] = {l21, add(l22, diag)};
  std::vector<std::size_t> labels(N);
  std::iota(labels.begin(), labels.end(), 0);
  Var loss12 = gather_cols(log_softmax_rows(concat_cols(row1)), labels);
  Var loss21 = gather_cols(log_softmax_rows(concat_cols(row2)), labels);
  r.infonce = scale(add(loss12, loss21), -1.0);

  Tensor mask({N, 1});
  for (std::size_t i = 0; i < N; ++i) mask[i] = mask_ext[i] ? 1.0 : 0.0;
  Var m = tape.constant(std::move(mask));
  Var per = mul(add(r.infonce, scale(r.penalty, kl_weight)), m);
  r.loss = mean_all(per);
  return r;
}

AuxLossValue compute_aux_loss(const Tensor& x_out, const Tensor& y_in, const Tensor& mask_ext, double kl_weight) {
  if (x_out.shape() != y_in.shape()) throw InputError("aux loss: shape " + shape_string(x_out.shape()) + " vs " + shape_string(y_in.shape()));
  if (x_out.rank() != 2 && x_out.rank() != 3) throw InputError("aux loss: inputs must be [B, T, d] or [N, d]");
  const std::size_t d = x_out.shape().back();
  const std::size_t N = x_out.size() / d;
  if (mask_ext.size() != N) throw InputError("aux loss: mask size mismatch");
  for (double v : mask_ext.values())
    if (v != 0.0 && v != 1.0) throw InputError("aux loss: mask entries must be 0 or 1");
  for (const Tensor* t : {&x_out, &y_in})
    for (std::size_t i = 0; i < N; ++i) {
      double ss = 0.0;
      for (std::size_t k = 0; k < d; ++k) ss += (*t)[i * d + k] * (*t)[i * d + k];
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-3)
        throw InputError("aux loss: row " + std::to_string(i) + " has norm " + std::to_string(std::sqrt(ss)));
    }
  std::vector<std::uint8_t> mask(N);
  for (std::size_t i = 0; i < N; ++i) mask[i] = mask_ext[i] != 0.0;
  Tape tape(false);
  AuxLoss r = compute_aux_loss(tape.constant(x_out.reshaped({N, d})), tape.constant(y_in.reshaped({N, d})), mask,
                               kl_weight);
  AuxLossValue v;
  v.loss = r.loss.value()[0];
  for (std::size_t i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    v.penalty += r.penalty.value()[i];
    v.infonce += r.infonce.value()[i];
  }
  v.penalty /= static_cast<double>(N);
  v.infonce /= static_cast<double>(N);
  return v;
}

}  // namespace coberl::contrastive
