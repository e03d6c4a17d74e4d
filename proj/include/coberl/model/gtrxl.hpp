#pragma once

#include <string>
#include <utility>
#include <vector>

#include "coberl/config.hpp"
#include "coberl/numerics/parameters.hpp"

namespace coberl::gtrxl {

using numerics::ParameterBinding;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Tensor;
using numerics::Var;

/// Per-layer cached inputs of one sequence, each [memory_size, d_model], oldest first.
struct TransformerMemory {
  std::vector<Tensor> layers;
  friend bool operator==(const TransformerMemory&, const TransformerMemory&) = default;
};

TransformerMemory reset_memory(const TransformerConfig& config);

/// Gated Transformer-XL with relative-position attention.
///
/// Rows of every [B*T, d] input are sequence-major (row b*T + t). Memory for
/// a batch is one [B*M, d] tensor per layer, treated as a constant.
class GatedTransformerXL {
 public:
  explicit GatedTransformerXL(const TransformerConfig& config);

  const TransformerConfig& config() const { return config_; }
  void init_parameters(ParameterSet& params, Rng& rng) const;

  struct BatchResult {
    Var output;
    std::vector<Tensor> memory;
  };
  BatchResult forward(ParameterBinding& p, Var inputs, std::size_t batch, const std::vector<Tensor>& memory,
                      bool causal) const;

  /// Single sequence, unrecorded tape.
  std::pair<Tensor, TransformerMemory> forward(const ParameterSet& params, const Tensor& inputs,
                                               const TransformerMemory& memory, bool causal) const;

  std::vector<Tensor> stack_memory(const std::vector<const TransformerMemory*>& memories) const;
  TransformerMemory unstack_memory(const std::vector<Tensor>& memory, std::size_t index) const;

 private:
  Var layer(ParameterBinding& p, std::size_t index, Var x, const Tensor& memory, std::size_t batch,
            std::size_t length, bool causal) const;

  TransformerConfig config_;
};

/// Sinusoidal embedding of relative distances d - (length - 1), d in [0, count).
Tensor relative_position_table(std::size_t count, std::size_t length, std::size_t width);

}  // namespace coberl::gtrxl
