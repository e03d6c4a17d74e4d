#include "coberl/model/gtrxl.hpp"

#include <cmath>

#include "coberl/error.hpp"
#include "coberl/model/gate.hpp"

namespace coberl::gtrxl {

namespace {

std::string layer_name(std::size_t l) { return "gtrxl/layer" + std::to_string(l); }

void add_dense(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               bool bias) {
  params.add(name + "/w", numerics::truncated_normal(in, out, in, rng));
  if (bias) params.add(name + "/b", Tensor::zeros(1, out));
}

}  // namespace

TransformerMemory reset_memory(const TransformerConfig& config) {
  TransformerMemory m;
  m.layers.assign(config.num_layers, Tensor::zeros(config.memory_size, config.d_model));
  return m;
}

Tensor relative_position_table(std::size_t count, std::size_t length, std::size_t width) {
  Tensor table({count, width});
  const std::size_t half = (width + 1) / 2;
  for (std::size_t d = 0; d < count; ++d) {
    const double dist = static_cast<double>(d) - static_cast<double>(length) + 1.0;
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(width));
      table(d, k) = std::sin(dist * freq);
      if (half + k < width) table(d, half + k) = std::cos(dist * freq);
    }
  }
  return table;
}

GatedTransformerXL::GatedTransformerXL(const TransformerConfig& config) : config_(config) {
  if (config_.num_heads == 0 || config_.head_size == 0) throw ConfigError("gtrxl: heads and head size must be positive");
  if (config_.d_model == 0) throw ConfigError("gtrxl: d_model must be positive");
}

void GatedTransformerXL::init_parameters(ParameterSet& params, Rng& rng) const {
  const std::size_t d = config_.d_model, hd = config_.num_heads * config_.head_size;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string n = layer_name(l);
    params.add(n + "/ln1/gamma", Tensor({1, d}, 1.0));
    params.add(n + "/ln1/beta", Tensor::zeros(1, d));
    add_dense(params, n + "/query", d, hd, rng, false);
    add_dense(params, n + "/key", d, hd, rng, false);
    add_dense(params, n + "/value", d, hd, rng, false);
    add_dense(params, n + "/position", d, hd, rng, false);
    params.add(n + "/content_bias", Tensor::zeros(1, hd));
    params.add(n + "/position_bias", Tensor::zeros(1, hd));
    add_dense(params, n + "/output", hd, d, rng, false);
    core::GateParameters::random(d, config_.gate_bias, rng).add_to(params, n + "/gate1");
    params.add(n + "/ln2/gamma", Tensor({1, d}, 1.0));
    params.add(n + "/ln2/beta", Tensor::zeros(1, d));
    add_dense(params, n + "/mlp1", d, config_.mlp_size, rng, true);
    add_dense(params, n + "/mlp2", config_.mlp_size, d, rng, true);
    core::GateParameters::random(d, config_.gate_bias, rng).add_to(params, n + "/gate2");
  }
}

Var GatedTransformerXL::layer(ParameterBinding& p, std::size_t index, Var x, const Tensor& memory,
                              std::size_t batch, std::size_t length, bool causal) const {
  using namespace numerics;
  Tape& tape = p.tape();
  const std::string n = layer_name(index);
  const std::size_t M = config_.memory_size;
  const std::size_t hd = config_.num_heads * config_.head_size;

  Var gamma = p(n + "/ln1/gamma"), beta = p(n + "/ln1/beta");
  Var xn = layer_norm_rows(x, gamma, beta);
  Var q = matmul(xn, p(n + "/query/w"));
  Var k_seg = matmul(xn, p(n + "/key/w"));
  Var v_seg = matmul(xn, p(n + "/value/w"));
  Var k_mem, v_mem;
  if (M > 0) {
    Var mn = layer_norm_rows(tape.constant(memory), gamma, beta);
    k_mem = matmul(mn, p(n + "/key/w"));
    v_mem = matmul(mn, p(n + "/value/w"));
  } else {
    k_mem = v_mem = tape.constant(Tensor::zeros(0, hd));
  }
  AttentionLayout layout{batch, length, M, config_.num_heads, config_.head_size, causal, M};
  Var table = tape.constant(relative_position_table(layout.num_distances(), length, config_.d_model));
  Var pos = matmul(table, p(n + "/position/w"));
  Var attn = relative_attention(q, k_mem, k_seg, v_mem, v_seg, pos, p(n + "/content_bias"),
                                p(n + "/position_bias"), layout);
  Var y = core::gate(p, n + "/gate1", x, relu(matmul(attn, p(n + "/output/w"))));

  Var yn = layer_norm_rows(y, p(n + "/ln2/gamma"), p(n + "/ln2/beta"));
  Var h = add_row(matmul(yn, p(n + "/mlp1/w")), p(n + "/mlp1/b"));
  h = config_.activation == Activation::kGelu ? gelu(h) : relu(h);
  h = add_row(matmul(h, p(n + "/mlp2/w")), p(n + "/mlp2/b"));
  return core::gate(p, n + "/gate2", y, relu(h));
}

GatedTransformerXL::BatchResult GatedTransformerXL::forward(ParameterBinding& p, Var inputs, std::size_t batch,
                                                            const std::vector<Tensor>& memory, bool causal) const {
  const std::size_t d = config_.d_model, M = config_.memory_size;
  if (inputs.cols() != d)
    throw ConfigError("gtrxl: input width " + std::to_string(inputs.cols()) + " != d_model " + std::to_string(d));
  if (memory.size() != config_.num_layers)
    throw ConfigError("gtrxl: memory has " + std::to_string(memory.size()) + " layers, config has " +
                      std::to_string(config_.num_layers));
  if (batch == 0 || inputs.rows() % batch != 0) throw InputError("gtrxl: rows not divisible by batch");
  const std::size_t T = inputs.rows() / batch;
  for (const auto& m : memory)
    if (m.rows() != batch * M || (M > 0 && m.cols() != d)) throw ConfigError("gtrxl: memory shape mismatch");

  BatchResult result;
  result.memory.reserve(config_.num_layers);
  Var x = inputs;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    // Memory for the next segment: last M rows of [memory ; layer input].
    Tensor next({batch * M, d});
    const Tensor& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t r = 0; r < M; ++r) {
        const std::size_t src = r + T;  // index into [mem(M) ; seg(T)]
        const double* row = src < M ? memory[l].data() + (b * M + src) * d : xv.data() + (b * T + src - M) * d;
        std::copy(row, row + d, next.data() + (b * M + r) * d);
      }
    x = layer(p, l, x, memory[l], batch, T, causal);
    result.memory.push_back(std::move(next));
  }
  result.output = x;
  return result;
}

std::pair<Tensor, TransformerMemory> GatedTransformerXL::forward(const ParameterSet& params, const Tensor& inputs,
                                                                 const TransformerMemory& memory, bool causal) const {
  numerics::Tape tape(false);
  ParameterBinding p(tape, params, false);
  if (inputs.rank() != 2) throw ConfigError("gtrxl: inputs must be [T, d_model]");
  auto r = forward(p, tape.constant(inputs), 1, memory.layers, causal);
  return {r.output.value(), TransformerMemory{std::move(r.memory)}};
}

std::vector<Tensor> GatedTransformerXL::stack_memory(const std::vector<const TransformerMemory*>& memories) const {
  const std::size_t d = config_.d_model, M = config_.memory_size, B = memories.size();
  std::vector<Tensor> out(config_.num_layers, Tensor::zeros(B * M, d));
  for (std::size_t b = 0; b < B; ++b) {
    if (memories[b]->layers.size() != config_.num_layers) throw ConfigError("gtrxl: memory layer count mismatch");
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const Tensor& m = memories[b]->layers[l];
      if (m.size() != M * d) throw ConfigError("gtrxl: memory shape mismatch");
      std::copy(m.data(), m.data() + M * d, out[l].data() + b * M * d);
    }
  }
  return out;
}

TransformerMemory GatedTransformerXL::unstack_memory(const std::vector<Tensor>& memory, std::size_t index) const {
  const std::size_t d = config_.d_model, M = config_.memory_size;
  TransformerMemory m;
  for (const auto& t : memory) {
    Tensor layer = Tensor::zeros(M, d);
    std::copy(t.data() + index * M * d, t.data() + (index + 1) * M * d, layer.data());
    m.layers.push_back(std::move(layer));
  }
  return m;
}

}  // namespace coberl::gtrxl
