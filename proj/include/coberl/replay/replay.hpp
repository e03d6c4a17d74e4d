#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "coberl/model/core.hpp"
#include "coberl/numerics/parameters.hpp"

namespace coberl::replay {

using numerics::Rng;
using numerics::Tensor;

/// A fixed-length slice of one episode. Step k of the trace holds
/// (a_{k-1}, r_{k-1}, x_k) in the input rows and (a_k, r_k, terminal_k) in the
/// per-step fields. Input row L is the bootstrap input after the last step.
/// Tails shorter than L are zero-padded and marked invalid.
struct TransitionSequence {
  Tensor observations;                   // [L+1, obs_size]
  std::vector<std::size_t> prev_actions; // L+1
  std::vector<double> prev_rewards;      // L+1
  std::vector<std::size_t> actions;      // L
  std::vector<double> rewards;           // L
  std::vector<std::uint8_t> terminal;    // L
  std::vector<std::uint8_t> valid;       // L, a prefix of ones
  core::AgentState initial_state;        // state before step 0
  Tensor behaviour_q;                    // [L, A], Q-values seen when acting
  std::uint64_t episode_id = 0;
  std::size_t actor_id = 0;
  std::size_t start_step = 0;            // step index within the episode

  std::size_t length() const { return actions.size(); }
  std::size_t valid_length() const;
};

struct SequenceShape {
  std::size_t trace_length = 0;
  std::size_t observation_size = 0;
  std::size_t num_actions = 0;
  std::size_t lstm_size = 0;
  std::size_t memory_layers = 0;
  std::size_t memory_rows = 0;
  std::size_t d_model = 0;
};

/// Throws InputError describing the first malformed field.
void validate_sequence(const TransitionSequence& seq, const SequenceShape& shape);

struct PrioritizedSample {
  std::uint64_t ref = 0;
  double probability = 0.0;
  double weight = 1.0;
  std::shared_ptr<const TransitionSequence> sequence;
};

/// Prioritized FIFO buffer. Every public method is atomic.
class PrioritizedReplay {
 public:
  PrioritizedReplay(std::size_t capacity, std::size_t min_start, double sampling_exponent, SequenceShape shape);

  /// Stores with the current maximum priority (1.0 when empty).
  std::uint64_t insert(TransitionSequence seq);
  std::uint64_t insert(TransitionSequence seq, double priority);

  /// Empty optional while fewer than min_start sequences are stored.
  std::optional<std::vector<PrioritizedSample>> sample(std::size_t batch_size, double beta, Rng& rng) const;

  /// Stale refs (evicted sequences) are skipped and counted.
  void update_priorities(std::span<const std::uint64_t> refs, std::span<const double> priorities);

  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  std::size_t stale_updates() const;
  std::uint64_t inserted() const;
  double max_priority() const;
  std::optional<double> priority(std::uint64_t ref) const;
  /// P(i) for a live ref under the current priorities.
  std::optional<double> probability(std::uint64_t ref) const;
  bool contains(std::uint64_t ref) const;

 private:
  std::uint64_t insert_locked(TransitionSequence seq, double priority);
  void set_leaf(std::size_t slot, double priority);
  bool live(std::uint64_t ref) const;
  double max_locked() const;

  std::size_t capacity_;
  std::size_t min_start_;
  double exponent_;
  SequenceShape shape_;

  mutable std::mutex mutex_;
  std::vector<std::shared_ptr<const TransitionSequence>> slots_;
  std::vector<double> priorities_;
  std::vector<double> sum_tree_;  // 2 * leaves
  std::vector<double> max_tree_;
  std::size_t leaves_ = 1;
  std::uint64_t next_ref_ = 0;
  std::size_t stale_ = 0;
};

}  // namespace coberl::replay
