#include "coberl/replay/replay.hpp"

#include <algorithm>
#include <cmath>

#include "coberl/error.hpp"

namespace coberl::replay {

std::size_t TransitionSequence::valid_length() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

void validate_sequence(const TransitionSequence& s, const SequenceShape& shape) {
  const std::size_t L = shape.trace_length;
  auto fail = [](const std::string& what) { throw InputError("transition sequence: " + what); };
  if (s.actions.size() != L || s.rewards.size() != L || s.terminal.size() != L || s.valid.size() != L)
    fail("per-step fields must have length " + std::to_string(L));
  if (s.prev_actions.size() != L + 1 || s.prev_rewards.size() != L + 1) fail("input fields must have length L+1");
  if (s.observations.rows() != L + 1 || s.observations.cols() != shape.observation_size)
    fail("observation block has shape " + numerics::shape_string(s.observations.shape()));
  if (s.behaviour_q.size() != 0 && s.behaviour_q.size() != L * shape.num_actions) fail("behaviour Q shape");
  bool seen_invalid = false;
  std::size_t terminals = 0;
  for (std::size_t k = 0; k < L; ++k) {
    if (!s.valid[k]) seen_invalid = true;
    else if (seen_invalid) fail("validity mask must be a prefix");
    if (s.valid[k] && s.actions[k] >= shape.num_actions) fail("action out of range");
    if (s.terminal[k]) {
      ++terminals;
      if (!s.valid[k] || (k + 1 < L && s.valid[k + 1])) fail("terminal step must be the last valid step");
    }
  }
  if (s.valid.empty() || !s.valid[0]) fail("sequence has no valid steps");
  if (terminals > 1) fail("sequence spans more than one episode");
  if (seen_invalid && terminals == 0) fail("padded sequence must end on a terminal step");
  if (s.initial_state.lstm_hidden.size() != shape.lstm_size || s.initial_state.lstm_cell.size() != shape.lstm_size)
    fail("stored LSTM state width mismatch");
  if (s.initial_state.memory.layers.size() != shape.memory_layers) fail("stored memory layer count mismatch");
  for (const auto& m : s.initial_state.memory.layers)
    if (m.size() != shape.memory_rows * shape.d_model) fail("stored memory shape mismatch");
}

PrioritizedReplay::PrioritizedReplay(std::size_t capacity, std::size_t min_start, double sampling_exponent,
                                     SequenceShape shape)
    : capacity_(capacity), min_start_(min_start), exponent_(sampling_exponent), shape_(shape) {
  if (capacity_ == 0) throw ConfigError("replay: capacity must be positive");
  if (!(exponent_ >= 0)) throw ConfigError("replay: sampling exponent must be non-negative");
  while (leaves_ < capacity_) leaves_ *= 2;
  slots_.resize(capacity_);
  priorities_.assign(capacity_, 0.0);
  sum_tree_.assign(2 * leaves_, 0.0);
  max_tree_.assign(2 * leaves_, 0.0);
}

void PrioritizedReplay::set_leaf(std::size_t slot, double priority) {
  priorities_[slot] = priority;
  std::size_t i = slot + leaves_;
  sum_tree_[i] = slots_[slot] ? std::pow(priority, exponent_) : 0.0;
  max_tree_[i] = slots_[slot] ? priority : 0.0;
  for (i /= 2; i >= 1; i /= 2) {
    sum_tree_[i] = sum_tree_[2 * i] + sum_tree_[2 * i + 1];
    max_tree_[i] = std::max(max_tree_[2 * i], max_tree_[2 * i + 1]);
  }
}

bool PrioritizedReplay::live(std::uint64_t ref) const {
  return ref < next_ref_ && next_ref_ - ref <= capacity_ && slots_[ref % capacity_] != nullptr;
}

double PrioritizedReplay::max_locked() const {
  const std::size_t n = std::min<std::uint64_t>(next_ref_, capacity_);
  return n == 0 ? 1.0 : max_tree_[1];
}

std::uint64_t PrioritizedReplay::insert_locked(TransitionSequence seq, double priority) {
  if (!(priority >= 0) || !std::isfinite(priority)) throw InputError("replay: priority must be finite and >= 0");
  validate_sequence(seq, shape_);
  const std::uint64_t ref = next_ref_++;
  const std::size_t slot = ref % capacity_;
  slots_[slot] = std::make_shared<const TransitionSequence>(std::move(seq));
  set_leaf(slot, priority);
  return ref;
}

std::uint64_t PrioritizedReplay::insert(TransitionSequence seq) {
  std::lock_guard lock(mutex_);
  return insert_locked(std::move(seq), max_locked());
}

std::uint64_t PrioritizedReplay::insert(TransitionSequence seq, double priority) {
  std::lock_guard lock(mutex_);
  return insert_locked(std::move(seq), priority);
}

std::optional<std::vector<PrioritizedSample>> PrioritizedReplay::sample(std::size_t batch_size, double beta,
                                                                        Rng& rng) const {
  std::lock_guard lock(mutex_);
  const std::size_t n = std::min<std::uint64_t>(next_ref_, capacity_);
  if (n < std::max<std::size_t>(min_start_, 1) || batch_size == 0) return std::nullopt;
  const double total = sum_tree_[1];
  const bool uniform = !(total > 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<PrioritizedSample> out;
  out.reserve(batch_size);
  double max_w = 0.0;
  while (out.size() < batch_size) {
    std::size_t slot;
    if (uniform) {
      slot = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    } else {
      double u = unit(rng) * total;
      std::size_t i = 1;
      while (i < leaves_) {
        if (u < sum_tree_[2 * i]) {
          i = 2 * i;
        } else {
          u -= sum_tree_[2 * i];
          i = 2 * i + 1;
        }
      }
      slot = i - leaves_;
      if (slot >= capacity_ || !slots_[slot] || !(sum_tree_[i] > 0)) continue;  // rounding at the right edge
    }
    const double p = uniform ? 1.0 / static_cast<double>(n) : sum_tree_[slot + leaves_] / total;
    const double w = std::pow(static_cast<double>(n) * p, -beta);
    max_w = std::max(max_w, w);
    // Reconstruct the ref from the slot: the newest ref mapping to it.
    const std::uint64_t base = next_ref_ - 1;
    const std::uint64_t back = (base % capacity_ + capacity_ - slot) % capacity_;
    out.push_back({base - back, p, w, slots_[slot]});
  }
  for (auto& s : out) s.weight /= max_w;
  return out;
}

void PrioritizedReplay::update_priorities(std::span<const std::uint64_t> refs, std::span<const double> priorities) {
  if (refs.size() != priorities.size()) throw InputError("replay: refs/priorities length mismatch");
  for (double p : priorities)
    if (!(p >= 0) || !std::isfinite(p)) throw InputError("replay: priority must be finite and >= 0");
  std::lock_guard lock(mutex_);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!live(refs[i])) {
      ++stale_;
      continue;
    }
    set_leaf(refs[i] % capacity_, priorities[i]);
  }
}

std::size_t PrioritizedReplay::size() const {
  std::lock_guard lock(mutex_);
  return std::min<std::uint64_t>(next_ref_, capacity_);
}

std::size_t PrioritizedReplay::stale_updates() const {
  std::lock_guard lock(mutex_);
  return stale_;
}

std::uint64_t PrioritizedReplay::inserted() const {
  std::lock_guard lock(mutex_);
  return next_ref_;
}

double PrioritizedReplay::max_priority() const {
  std::lock_guard lock(mutex_);
  return max_locked();
}

std::optional<double> PrioritizedReplay::priority(std::uint64_t ref) const {
  std::lock_guard lock(mutex_);
  if (!live(ref)) return std::nullopt;
  return priorities_[ref % capacity_];
}

std::optional<double> PrioritizedReplay::probability(std::uint64_t ref) const {
  std::lock_guard lock(mutex_);
  if (!live(ref)) return std::nullopt;
  const std::size_t n = std::min<std::uint64_t>(next_ref_, capacity_);
  if (!(sum_tree_[1] > 0)) return 1.0 / static_cast<double>(n);
  return sum_tree_[ref % capacity_ + leaves_] / sum_tree_[1];
}

bool PrioritizedReplay::contains(std::uint64_t ref) const {
  std::lock_guard lock(mutex_);
  return live(ref);
}

}  // namespace coberl::replay
