#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "coberl/numerics/tensor.hpp"

namespace coberl::numerics {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode autodiff tape over rank-2 tensors.
///
/// Nodes are appended in evaluation order, so a reverse sweep is a valid
/// topological order. A tape built with `record = false` keeps values only;
/// this is the mode used for acting and for target-network evaluation.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out, const Tensor& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient accumulated by backward(); an all-zero tensor if none reached the node.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once. `loss` must be 1x1.
  void backward(Var loss);

  /// Appends an op result. `fn` is kept only if some parent requires grad.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);

  /// Gradient buffer of `v` for accumulation, or nullptr if `v` needs none.
  Tensor* grad_buffer(Var v);

  // Finite differences treat sg(x) as a function of x; the analytic gradient
  // treats it as a constant. To compare the two, a probe replays the values
  // captured at the base point for every stop_gradient() call, in order.
  void capture_stop_gradients(std::vector<Tensor>* sink) { sg_sink_ = sink; }
  void replay_stop_gradients(const std::vector<Tensor>* values) {
    sg_replay_ = values;
    sg_next_ = 0;
  }
  Tensor stop_gradient_value(const Tensor& value);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;
  std::vector<Tensor>* sg_sink_ = nullptr;
  const std::vector<Tensor>* sg_replay_ = nullptr;
  std::size_t sg_next_ = 0;
};

// Linear algebra.
Var matmul(Var a, Var b);     // [n,k] x [k,m]
Var matmul_nt(Var a, Var b);  // [n,k] x [m,k]^T

// Elementwise and broadcasting arithmetic.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);  // row: [1,m] broadcast over rows
Var add_col(Var a, Var col);  // col: [n,1] broadcast over columns
Var mul_col(Var a, Var col);

// Activations.
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var gelu(Var a);

// Reductions.
Var sum_all(Var a);
Var mean_all(Var a);
Var sum_cols(Var a);   // [n,m] -> [n,1]
Var mean_cols(Var a);  // [n,m] -> [n,1]

// Row-wise normalisations.
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
Var l2_normalize_rows(Var x, double eps = 1e-12);

// Structure.
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var select_rows(Var a, std::span<const std::size_t> rows);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var gather_cols(Var a, std::span<const std::size_t> col_per_row);  // -> [n,1]
/// Rows where `mask[i] != 0` are replaced by `token` ([1,m]).
Var replace_rows(Var x, Var token, std::span<const std::uint8_t> mask);
Var stop_gradient(Var a);

// Convolution support. Images are stored as [batch*height*width, channels].
struct ImageLayout {
  std::size_t batch = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;
};
std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride);
Var im2col(Var x, const ImageLayout& layout, std::size_t kernel, std::size_t stride);
Var group_norm(Var x, Var gamma, Var beta, std::size_t batch, std::size_t channels_per_group,
               double eps = 1e-5);

/// Multi-head attention with content and relative-position terms.
///
/// Per sequence, keys are [memory ; segment]. Query i sits at absolute
/// position i and key j at j - memory_len, so the relative distance is
/// i + memory_len - j. Row d of `pos` embeds distance d - (query_len - 1).
/// Score(i,j) = scale * ((q_i + u).k_j + (q_i + w).pos[dist]).
/// Causal layouts keep only keys with 0 <= distance <= window.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t memory_len = 0;
  std::size_t num_heads = 1;
  std::size_t head_size = 1;
  bool causal = true;
  std::size_t window = 0;

  std::size_t key_len() const { return memory_len + query_len; }
  std::size_t num_distances() const { return memory_len + 2 * query_len - 1; }
  bool allowed(std::size_t i, std::size_t j) const;
  std::size_t distance_index(std::size_t i, std::size_t j) const { return i + memory_len - j + query_len - 1; }
};
Var relative_attention(Var q, Var k_mem, Var k_seg, Var v_mem, Var v_seg, Var pos, Var u, Var w,
                       const AttentionLayout& layout);

}  // namespace coberl::numerics
