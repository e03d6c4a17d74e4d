// Acceptance suite. Prints one PASS/FAIL line per criterion; exits non-zero on any failure.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "coberl/config.hpp"
#include "coberl/contrastive/contrastive.hpp"
#include "coberl/envs/envs.hpp"
#include "coberl/harness/actor.hpp"
#include "coberl/harness/learner.hpp"
#include "coberl/harness/runner.hpp"
#include "coberl/metrics/metrics.hpp"
#include "coberl/model/gate.hpp"
#include "coberl/model/gtrxl.hpp"
#include "coberl/numerics/grad_check.hpp"
#include "coberl/replay/replay.hpp"
#include "coberl/rl/losses.hpp"
#include "contrastive_oracle.hpp"
#include "peng_oracle.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace coberl;
using numerics::ParameterBinding;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Tensor;
using testing::random_tensor;
using testing::unit_rows;

namespace tol {
constexpr double kGradRelative = 1e-4;
constexpr double kGradFloor = 1e-5;
constexpr double kGradSeconds = 120.0;
constexpr double kOracle = 1e-10;
constexpr double kHandCase = 1e-6;
constexpr double kSingleMask = 1e-3;
constexpr double kPeng = 1e-10;
constexpr double kInverse = 1e-8;
constexpr double kTransformExample = 1e-12;
constexpr double kGateKeep = 5e-6;
constexpr double kSegment = 1e-5;
constexpr double kSigmas = 3.0;
constexpr double kIsWeight = 1e-5;
constexpr double kEpsilonEnd = 1e-15;
constexpr double kReturnTarget = 0.8;
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kSeedsNeeded = 4;
constexpr double kRunMinutes = 30.0;
}  // namespace tol

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << "failed: ";
      else detail << "; ";
      detail << what;
      pass = false;
    }
  }
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1. gradient fidelity ------------------------------------------------------------

Config grad_config() {
  Config c;
  c.encoder.preset = EncoderPreset::kFlat;
  apply_encoder_preset(c.encoder);
  c.encoder.action_reward_size = 4;
  c.transformer.num_layers = 2;
  c.transformer.d_model = 16;
  c.transformer.num_heads = 2;
  c.transformer.head_size = 8;
  c.transformer.mlp_size = 16;
  c.transformer.memory_size = 4;
  c.core.lstm_size = 8;
  c.core.head_hidden = 8;
  c.contrastive.critic_size = 8;
  c.contrastive.mask_rate = 0.25;
  c.replay.trace_length = 8;
  c.replay.replay_period = 4;
  c.replay.burn_in = 0;
  c.replay.batch_size = 2;
  c.env.horizon = 6;
  c.env.num_cues = 3;
  c.validate();
  return c;
}

std::vector<replay::TransitionSequence> collect(const model::CoberlNetwork& net, const ParameterSet& params,
                                                std::size_t count, std::uint64_t seed, double epsilon) {
  harness::Actor actor(0, epsilon, envs::make_environment(net.config().env, seed), net, seed + 1);
  harness::InferenceService svc(net);
  std::vector<replay::TransitionSequence> out;
  while (out.size() < count) {
    actor.advance(svc.infer(params, {actor.request()})[0]);
    for (auto& s : actor.take_sequences()) out.push_back(std::move(s));
  }
  return out;
}

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const Config c = grad_config();
  const auto net = harness::make_network(c);
  Rng rng(101);
  ParameterSet online = net->init_parameters(rng);
  const ParameterSet target = net->init_parameters(rng);
  // away from init so gates, biases and the mask token are all generic
  for (auto& [name, t] : online.entries())
    for (auto& v : t.values()) v += 0.1 * std::normal_distribution<double>()(rng);

  // sequence 1 ends its episode mid-trace, so terminals and padding are covered
  const auto seqs = collect(*net, online, 3, 7, 0.5);
  harness::TrainingBatch batch;
  for (std::size_t i : {0u, 2u}) {
    batch.sequences.push_back(std::make_shared<const replay::TransitionSequence>(seqs[i]));
    batch.weights.push_back(i == 0 ? 1.0 : 0.7);
  }
  const auto plan = harness::plan_training_masks(*net, batch, rng);

  auto loss = [&](ParameterBinding& b) { return harness::training_loss(*net, b, target, batch, plan).total; };
  numerics::GradCheckOptions opts;
  opts.floor = tol::kGradFloor;
  const auto report = numerics::grad_check(loss, online, tol::kGradRelative, opts);
  const double secs = seconds_since(t0);

  std::size_t scalars = 0;
  for (const auto& [name, t] : online.entries()) scalars += t.size();
  const numerics::GradCheckEntry* worst = nullptr;
  for (const auto& e : report.entries)
    if (!worst || e.max_rel_error > worst->max_rel_error) worst = &e;
  for (const auto& e : report.entries)
    o.check(e.max_rel_error <= tol::kGradRelative, e.name + " rel " + fmt(e.max_rel_error));
  o.check(secs < tol::kGradSeconds, "runtime " + fmt(secs) + " s");
  o.detail << (o.pass ? "" : " | ") << report.entries.size() << " tensors, " << scalars
           << " scalars, worst " << (worst ? worst->name + " " + fmt(worst->max_rel_error, 3) : "-") << ", "
           << fmt(secs, 3) << " s";
  return o;
}

// ---- 2-4. contrastive loss ---------------------------------------------------------------

std::vector<double> as_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Outcome contrastive_oracle() {
  Outcome o;
  Rng rng(202);
  std::bernoulli_distribution coin(0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + trial % 2, T = 1 + (trial / 2) % 4, d = 2 + trial % 5;
    const Tensor x = unit_rows(random_tensor(B * T, d, rng)), y = unit_rows(random_tensor(B * T, d, rng));
    Tensor mask({B * T});
    for (auto& v : mask.values()) v = coin(rng);
    mask[trial % (B * T)] = 1.0;
    const double w = trial % 4 == 0 ? 0.5 : 1.0;
    const auto got = contrastive::compute_aux_loss(x.reshaped({B, T, d}), y.reshaped({B, T, d}), mask, w);
    const auto ref = testing::oracle_aux_loss(x, y, as_vector(mask), w);
    worst = std::max({worst, std::abs(got.loss - ref.loss), std::abs(got.penalty - ref.penalty),
                      std::abs(got.infonce - ref.infonce)});
  }
  o.check(worst <= tol::kOracle, "oracle gap " + fmt(worst));

  const Tensor x = Tensor({2, 1}, std::vector<double>{1.0, -1.0});
  const double hand = contrastive::compute_aux_loss(x, x, Tensor({2}, 1.0)).loss;
  const double closed = 2.0 * std::log(1.0 + 2.0 * std::exp(-2.0));
  o.check(std::abs(hand - closed) <= tol::kHandCase, "hand case " + fmt(hand, 10));
  o.check(std::abs(closed - 0.4791) < 5e-5, "closed form " + fmt(closed, 10));
  o.detail << (o.pass ? "" : " | ") << "max gap " << fmt(worst, 3) << " over 100 instances, hand case "
           << fmt(hand, 8);
  return o;
}

Outcome degenerate_losses() {
  Outcome o;
  Rng rng(303);
  double single = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = unit_rows(random_tensor(1, 4, rng)), y = unit_rows(random_tensor(1, 4, rng));
    single = std::max(single, contrastive::compute_aux_loss(x.reshaped({1, 1, 4}), y.reshaped({1, 1, 4}),
                                                            Tensor({1}, 1.0)).loss);
  }
  o.check(single <= tol::kSingleMask, "single-mask loss " + fmt(single));
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = unit_rows(random_tensor(8, 5, rng));
    const double pen = contrastive::compute_aux_loss(x.reshaped({2, 4, 5}), x.reshaped({2, 4, 5}),
                                                     Tensor({8}, 1.0)).penalty;
    if (pen != 0.0) o.check(false, "x=y penalty " + fmt(pen));
  }
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = unit_rows(random_tensor(8, 5, rng)), y = unit_rows(random_tensor(8, 5, rng));
    const auto v = contrastive::compute_aux_loss(x.reshaped({2, 4, 5}), y.reshaped({2, 4, 5}), Tensor({8}));
    if (v.loss != 0.0) o.check(false, "zero-mask loss " + fmt(v.loss));
  }
  o.detail << (o.pass ? "" : " | ") << "single-mask max " << fmt(single, 3);
  return o;
}

Outcome stop_gradient() {
  Outcome o;
  Rng rng(404);
  const std::size_t n = 6;
  ParameterSet p;
  for (const char* name : {"sg11", "sg12", "sg21", "l11", "l22", "l21"}) p.add(name, random_tensor(n, n, rng, 2.0));
  auto penalty = [](ParameterBinding& b) {
    return numerics::sum_all(
        contrastive::invariance_penalty(b("sg11"), b("sg12"), b("sg21"), b("l11"), b("l22"), b("l21")));
  };
  numerics::Tape tape;
  ParameterBinding bind(tape, p);
  const auto out = penalty(bind);
  tape.backward(out);
  const auto grads = bind.gradients();
  const double base = out.value()[0];
  for (const char* name : {"sg11", "sg12", "sg21"}) {
    o.check(numerics::max_abs(grads.at(name)) == 0.0, std::string(name) + " gradient nonzero");
    for (std::size_t k = 0; k < 5; ++k) {
      ParameterSet moved = p;
      moved.at(name)(k, (k + 1) % n) += 0.5;
      if (numerics::evaluate_loss(penalty, moved) == base) o.check(false, std::string(name) + " value unchanged");
    }
  }
  for (const char* name : {"l11", "l22", "l21"})
    o.check(numerics::max_abs(grads.at(name)) > 0.0, std::string(name) + " gradient zero");
  o.detail << (o.pass ? "" : " | ") << "penalty " << fmt(base, 6) << ", three stop-gradient inputs";
  return o;
}

// ---- 5-6. RL losses -------------------------------------------------------------------

struct ToyMdp {
  double reward[3][2] = {{0.5, -1.0}, {2.0, 0.25}, {-0.75, 1.5}};
  double q_max[3] = {1.25, -0.5, 3.0};
  std::size_t next(std::size_t s, std::size_t a) const { return (s + a + 1) % 3; }
  bool ends(std::size_t s, std::size_t a) const { return s == 1 && next(s, a) == 2; }
};

struct Trace {
  std::vector<double> rewards, q;
  std::vector<std::uint8_t> terminal;
};

void enumerate(const ToyMdp& m, std::size_t max_len, const std::function<void(const Trace&)>& visit) {
  std::function<void(std::size_t, Trace)> grow = [&](std::size_t s, Trace tr) {
    if (!tr.rewards.empty()) visit(tr);
    if (tr.rewards.size() == max_len || (!tr.terminal.empty() && tr.terminal.back())) return;
    for (std::size_t a = 0; a < 2; ++a) {
      Trace nx = tr;
      nx.rewards.push_back(m.reward[s][a]);
      nx.terminal.push_back(m.ends(s, a));
      nx.q.push_back(m.q_max[m.next(s, a)]);
      grow(m.next(s, a), nx);
    }
  };
  for (std::size_t s0 = 0; s0 < 3; ++s0) {
    Trace start;
    start.q.push_back(m.q_max[s0]);
    grow(s0, start);
  }
}

Outcome peng() {
  Outcome o;
  const ToyMdp m;
  std::size_t traces = 0;
  double worst = 0.0;
  bool zero_exact = true, one_exact = true;
  for (double gamma : {0.5, 0.9, 0.997}) {
    for (double lambda : {0.0, 0.3, 0.8, 1.0})
      enumerate(m, 5, [&](const Trace& tr) {
        ++traces;
        const auto got = rl::peng_targets(tr.rewards, tr.q, tr.terminal, lambda, gamma);
        const auto ref = testing::forward_lambda_returns(tr.rewards, tr.q, tr.terminal, lambda, gamma);
        for (std::size_t t = 0; t < got.size(); ++t) worst = std::max(worst, std::abs(got[t] - ref[t]));
      });
    enumerate(m, 5, [&](const Trace& tr) {
      const auto g0 = rl::peng_targets(tr.rewards, tr.q, tr.terminal, 0.0, gamma);
      const auto g1 = rl::peng_targets(tr.rewards, tr.q, tr.terminal, 1.0, gamma);
      const std::size_t T = tr.rewards.size();
      double acc = tr.terminal[T - 1] ? 0.0 : tr.q[T];
      for (std::size_t t = T; t-- > 0;) {
        const double one_step = tr.terminal[t] ? tr.rewards[t] : tr.rewards[t] + gamma * tr.q[t + 1];
        acc = tr.rewards[t] + (tr.terminal[t] ? 0.0 : gamma * acc);
        zero_exact &= g0[t] == one_step;
        one_exact &= g1[t] == acc;
      }
    });
  }
  o.check(worst <= tol::kPeng, "oracle gap " + fmt(worst));
  o.check(zero_exact, "lambda=0 is not the one-step target");
  o.check(one_exact, "lambda=1 is not the discounted return");
  o.check(traces > 200, "only " + std::to_string(traces) + " traces");
  o.detail << (o.pass ? "" : " | ") << traces << " trace/parameter pairs, max gap " << fmt(worst, 3);
  return o;
}

Outcome value_transform() {
  Outcome o;
  const rl::ValueTransform h{TransformKind::kSignedSqrt, 1e-3};
  double prev = -std::numeric_limits<double>::infinity(), worst = 0.0;
  bool odd = true, increasing = true;
  for (int i = -200000; i <= 200000; ++i) {
    const double x = i * 5e-4;
    const double v = rl::transform(x, h);
    odd &= rl::transform(-x, h) == -v;
    increasing &= v > prev;
    prev = v;
    worst = std::max(worst, std::abs(rl::inverse_transform(v, h) - x));
  }
  const double h3 = rl::transform(3.0, h);
  o.check(odd, "not odd");
  o.check(increasing, "not strictly increasing");
  o.check(worst <= tol::kInverse, "round trip " + fmt(worst));
  o.check(std::abs(h3 - 1.003) <= tol::kTransformExample, "h(3) = " + fmt(h3, 12));
  o.detail << (o.pass ? "" : " | ") << "round trip max " << fmt(worst, 3) << ", h(3) = " << fmt(h3, 10);
  return o;
}

// ---- 7-8. gate and transformer ---------------------------------------------------------

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// candidate h of one gate row, by dense loops
std::vector<double> gate_candidate(const Tensor& y, const Tensor& x, const core::GateParameters& g, std::size_t row) {
  const std::size_t d = g.width();
  auto lin = [&](const Tensor& w, const std::vector<double>& v, std::size_t j) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += v[i] * w(i, j);
    return s;
  };
  std::vector<double> xr(d), yr(d), r(d), ry(d), h(d);
  for (std::size_t i = 0; i < d; ++i) {
    xr[i] = x(row, i);
    yr[i] = y(row, i);
  }
  for (std::size_t j = 0; j < d; ++j) r[j] = sig(lin(g.w_r, xr, j) + lin(g.u_r, yr, j));
  for (std::size_t i = 0; i < d; ++i) ry[i] = r[i] * yr[i];
  for (std::size_t j = 0; j < d; ++j) h[j] = std::tanh(lin(g.w_g, xr, j) + lin(g.u_g, ry, j));
  return h;
}

Outcome gate() {
  Outcome o;
  Rng rng(707);
  {
    const auto g = core::GateParameters::random(6, 1e9, rng);
    const Tensor y = random_tensor(5, 6, rng, 4.0), x = random_tensor(5, 6, rng, 4.0);
    o.check(core::gru_gate(y, x, g) == y, "huge bias is not the identity");
  }
  const double keep = 1.0 - sig(-2.0);
  o.check(std::abs(keep - 0.88080) <= tol::kGateKeep, "keep factor " + fmt(keep, 10));
  {
    const Tensor y = random_tensor(9, 8, rng), x = random_tensor(9, 8, rng);
    const Tensor out = core::combine(y, x, core::GateParameters::zeros(8, 2.0));
    bool exact = true;
    for (std::size_t i = 0; i < y.size(); ++i) exact &= out[i] == keep * y[i];
    o.check(exact, "default init is not a scaled copy of Y");
  }
  std::uniform_real_distribution<double> bias(-4.0, 4.0);
  std::size_t checked = 0, violations = 0;
  while (checked < 100000) {
    const std::size_t d = 4;
    auto g = core::GateParameters::random(d, bias(rng), rng);
    for (auto* w : {&g.w_z, &g.u_z, &g.w_g, &g.u_g, &g.w_r, &g.u_r})
      for (auto& v : w->values()) v *= 2.0;
    const Tensor y = random_tensor(50, d, rng, 3.0), x = random_tensor(50, d, rng, 3.0);
    const Tensor out = core::gru_gate(y, x, g);
    for (std::size_t r = 0; r < 50; ++r) {
      const auto h = gate_candidate(y, x, g, r);
      for (std::size_t j = 0; j < d; ++j, ++checked) {
        const double lo = std::min(y(r, j), h[j]), hi = std::max(y(r, j), h[j]);
        const double slack = 1e-15 * (1.0 + std::max(std::abs(lo), std::abs(hi)));
        if (out(r, j) < lo - slack || out(r, j) > hi + slack) ++violations;
      }
    }
  }
  o.check(violations == 0, std::to_string(violations) + " bound violations");
  o.detail << (o.pass ? "" : " | ") << "keep " << fmt(keep, 8) << ", " << checked << " triples";
  return o;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

TransformerConfig xl_config() {
  TransformerConfig c;
  c.num_layers = 2;
  c.memory_size = 4;
  c.d_model = 8;
  c.num_heads = 2;
  c.head_size = 4;
  c.mlp_size = 12;
  return c;
}

Outcome causality() {
  Outcome o;
  const TransformerConfig c = xl_config();
  gtrxl::GatedTransformerXL net(c);
  Rng rng(808);
  ParameterSet p;
  net.init_parameters(p, rng);
  // bias the gates open so the attention path carries weight
  for (auto& [name, t] : p.entries())
    for (auto& v : t.values()) v += 0.3 * std::normal_distribution<double>()(rng);
  gtrxl::TransformerMemory mem = gtrxl::reset_memory(c);
  for (auto& layer : mem.layers) layer = random_tensor(c.memory_size, c.d_model, rng);
  const std::size_t T = 8;
  const Tensor x = random_tensor(T, c.d_model, rng);

  const Tensor causal = net.forward(p, x, mem, true).first;
  const Tensor open = net.forward(p, x, mem, false).first;
  std::size_t leaks = 0, blind = 0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Tensor y = x;
    for (std::size_t r = t + 1; r < T; ++r)
      for (std::size_t j = 0; j < c.d_model; ++j) y(r, j) += 3.0 * std::normal_distribution<double>()(rng);
    const Tensor out = net.forward(p, y, mem, true).first;
    for (std::size_t r = 0; r <= t; ++r)
      for (std::size_t j = 0; j < c.d_model; ++j) leaks += !same_bits(out(r, j), causal(r, j));
    const Tensor seen = net.forward(p, y, mem, false).first;
    double diff = 0.0;
    for (std::size_t j = 0; j < c.d_model; ++j) diff = std::max(diff, std::abs(seen(t, j) - open(t, j)));
    blind += diff <= 1e-8;
  }
  o.check(leaks == 0, std::to_string(leaks) + " causal outputs moved");
  o.check(blind == 0, std::to_string(blind) + " non-causal rows ignored the future");

  double worst = 0.0;
  for (std::size_t half : {2u, 4u}) {
    const Tensor seq = random_tensor(2 * half, c.d_model, rng);
    const Tensor whole = net.forward(p, seq, mem, true).first;
    Tensor a({half, c.d_model}), b({half, c.d_model});
    for (std::size_t r = 0; r < half; ++r)
      for (std::size_t j = 0; j < c.d_model; ++j) {
        a(r, j) = seq(r, j);
        b(r, j) = seq(half + r, j);
      }
    auto [ya, carried] = net.forward(p, a, mem, true);
    const Tensor yb = net.forward(p, b, carried, true).first;
    for (std::size_t r = 0; r < half; ++r)
      for (std::size_t j = 0; j < c.d_model; ++j) {
        worst = std::max(worst, std::abs(ya(r, j) - whole(r, j)));
        worst = std::max(worst, std::abs(yb(r, j) - whole(half + r, j)) / std::max(1.0, std::abs(whole(half + r, j))));
      }
  }
  o.check(worst <= tol::kSegment, "segment recurrence gap " + fmt(worst));
  o.detail << (o.pass ? "" : " | ") << "segment gap " << fmt(worst, 3);
  return o;
}

// ---- 9. replay --------------------------------------------------------------------------

replay::SequenceShape tiny_shape() {
  replay::SequenceShape s;
  s.trace_length = 4;
  s.observation_size = 3;
  s.num_actions = 2;
  s.lstm_size = 2;
  s.memory_layers = 1;
  s.memory_rows = 2;
  s.d_model = 3;
  return s;
}

replay::TransitionSequence blank_sequence(const replay::SequenceShape& s, std::uint64_t episode) {
  const std::size_t L = s.trace_length;
  replay::TransitionSequence q;
  q.observations = Tensor({L + 1, s.observation_size}, 0.5);
  q.prev_actions.assign(L + 1, 0);
  q.prev_rewards.assign(L + 1, 0.0);
  q.actions.assign(L, 1);
  q.rewards.assign(L, 0.0);
  q.terminal.assign(L, 0);
  q.valid.assign(L, 1);
  q.initial_state.lstm_hidden = Tensor({1, s.lstm_size});
  q.initial_state.lstm_cell = Tensor({1, s.lstm_size});
  for (std::size_t l = 0; l < s.memory_layers; ++l)
    q.initial_state.memory.layers.push_back(Tensor({s.memory_rows, s.d_model}));
  q.episode_id = episode;
  return q;
}

Outcome replay_checks() {
  Outcome o;
  // frequencies
  {
    replay::PrioritizedReplay buf(8, 1, 1.0, tiny_shape());
    const std::vector<double> pr{1.0, 3.0, 0.5, 2.0, 0.0, 4.5, 1.5, 0.25};
    double sum = 0.0;
    for (double v : pr) sum += v;
    std::map<std::uint64_t, double> expected;
    for (std::size_t i = 0; i < pr.size(); ++i) {
      const auto ref = buf.insert(blank_sequence(tiny_shape(), i), pr[i]);
      expected[ref] = pr[i] / sum;
    }
    Rng rng(909);
    const std::size_t draws = 100000;
    std::map<std::uint64_t, std::size_t> counts;
    std::size_t total = 0;
    while (total < draws) {
      const auto batch = buf.sample(1000, 0.6, rng);
      for (const auto& s : *batch) ++counts[s.ref];
      total += batch->size();
    }
    double worst_z = 0.0;
    for (const auto& [ref, p] : expected) {
      const double mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
      const double dev = std::abs(static_cast<double>(counts[ref]) - mean);
      if (p == 0.0) o.check(dev == 0.0, "zero-priority slot sampled");
      else worst_z = std::max(worst_z, dev / sigma);
    }
    o.check(worst_z <= tol::kSigmas, "frequency deviation " + fmt(worst_z) + " sigma");
    o.detail << (o.pass ? "" : " | ") << "worst deviation " << fmt(worst_z, 3) << " sigma";
  }
  // importance weights
  {
    replay::PrioritizedReplay buf(2, 1, 1.0, tiny_shape());
    const auto a = buf.insert(blank_sequence(tiny_shape(), 0), 1.0);
    buf.insert(blank_sequence(tiny_shape(), 1), 3.0);
    Rng rng(910);
    double wa = std::nan(""), wb = std::nan("");
    for (int i = 0; i < 100 && (std::isnan(wa) || std::isnan(wb)); ++i) {
      const auto batch = buf.sample(8, 0.6, rng);
      bool has_a = false;
      for (const auto& s : *batch) has_a |= s.ref == a;
      if (!has_a) continue;
      for (const auto& s : *batch) (s.ref == a ? wa : wb) = s.weight;
    }
    o.check(std::abs(wa - 1.0) <= tol::kIsWeight && std::abs(wb - 0.51728) <= tol::kIsWeight,
            "IS weights [" + fmt(wa) + ", " + fmt(wb) + "]");
    o.detail << ", IS weights [" << fmt(wa, 6) << ", " << fmt(wb, 6) << "]";
  }
  // real actor sequences over many short episodes
  {
    Config c = grad_config();
    c.env.horizon = 5;
    const auto net = harness::make_network(c);
    Rng rng(911);
    const ParameterSet params = net->init_parameters(rng);
    const replay::SequenceShape shape{c.replay.trace_length, net->observation_size(), net->num_actions(),
                                      c.core.lstm_size, c.transformer.num_layers, c.transformer.memory_size,
                                      c.transformer.d_model};
    replay::PrioritizedReplay buf(64, 1, 1.0, shape);
    for (auto& s : collect(*net, params, 120, 912, 0.5)) buf.insert(std::move(s));
    const auto batch = buf.sample(5000, 0.6, rng);
    std::size_t crossings = 0;
    for (const auto& s : *batch) {
      const auto& q = *s.sequence;
      std::size_t terminals = 0, valid_after_terminal = 0;
      bool ended = false;
      for (std::size_t k = 0; k < q.length(); ++k) {
        if (ended && q.valid[k]) ++valid_after_terminal;
        terminals += q.terminal[k];
        ended |= q.terminal[k] != 0;
      }
      crossings += terminals > 1 || valid_after_terminal > 0;
      try {
        replay::validate_sequence(q, shape);
      } catch (const std::exception&) {
        ++crossings;
      }
    }
    o.check(crossings == 0, std::to_string(crossings) + " sampled sequences cross an episode");
    o.detail << ", " << batch->size() << " actor sequences sampled";
  }
  return o;
}

// ---- 10. schedule and metrics --------------------------------------------------------

Outcome schedule_and_metrics(const fs::path& work) {
  Outcome o;
  const double e0 = harness::epsilon_for_actor(0, 512), e_last = harness::epsilon_for_actor(511, 512);
  o.check(e0 == 0.4, "eps_0 = " + fmt(e0, 17));
  o.check(std::abs(e_last - 6.5536e-4) <= tol::kEpsilonEnd, "eps_511 = " + fmt(e_last, 17));

  metrics::LearningCurve sq{{0.0, 5.0, 10.0}, {0.0, 25.0, 100.0}};
  const double auc = metrics::compute_auc(sq);
  o.check(auc == 1000.0 / 3.0, "AUC " + fmt(auc, 17));

  // evaluator reports every 40 steps to 2000; only 1900..2000 fall in the final 5%
  fs::create_directories(work);
  const fs::path csv = work / "synthetic_window.csv";
  {
    std::ofstream out(csv);
    out << metrics::kCsvHeader << "\n";
    for (int step = 0; step <= 2000; step += 20) {
      out << step << ",0.5,";
      if (step % 40 == 0) out << (step < 1900 ? 9.0 : step / 1000.0);
      out << ",0.1,0.2,1,0.1\n";
    }
  }
  const auto summary = metrics::summarize_run({csv});
  const double expected = (1.92 + 1.96 + 2.0) / 3.0;
  o.check(summary.seeds.size() == 1 && summary.seeds[0].final_reports == 3, "window holds wrong reports");
  o.check(std::abs(summary.mean - expected) <= 1e-12, "window mean " + fmt(summary.mean, 12));
  o.detail << (o.pass ? "" : " | ") << "eps_511 " << fmt(e_last, 8) << ", AUC " << fmt(auc, 12)
           << ", window mean " << fmt(summary.mean, 8);
  return o;
}

// ---- 11-12. learning runs --------------------------------------------------------------

enum class Variant { kCoberl, kNoAux, kNoGate };

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kCoberl: return "coberl";
    case Variant::kNoAux: return "no_aux";
    case Variant::kNoGate: return "no_gate";
  }
  return "?";
}

Config learning_config(Variant v, std::uint64_t seed) {
  Config c;
  c.encoder.preset = EncoderPreset::kFlat;
  apply_encoder_preset(c.encoder);
  c.transformer.d_model = 64;
  c.transformer.num_layers = 2;
  c.actors.num_actors = 4;
  c.run.mode = RunMode::kSingleThreaded;
  c.env.id = "cue_recall";
  c.env.horizon = 12;
  c.env.num_cues = 4;
  c.replay.trace_length = 12;
  c.replay.replay_period = 12;
  c.replay.burn_in = 0;
  c.learner.env_steps_per_update = 64;
  c.run.total_env_steps = 200000;
  c.run.seed = seed;
  if (v == Variant::kNoAux) c.contrastive.loss_weight = 0.0;
  if (v == Variant::kNoGate) c.core.gate = GateMode::kNone;
  c.validate();
  return c;
}

struct RunRecord {
  double final_mean = 0.0;
  double auc = 0.0;
  double minutes = 0.0;
};

RunRecord learning_run(Variant v, std::uint64_t seed, const fs::path& work) {
  const Config c = learning_config(v, seed);
  const fs::path csv = work / (std::string(variant_name(v)) + "_seed" + std::to_string(seed) + ".csv");
  std::ofstream out(csv);
  out << metrics::kCsvHeader << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  harness::run_training(c, [&](const metrics::MetricsRow& row) { out << metrics::format_row(row) << "\n"; });
  RunRecord r;
  r.minutes = seconds_since(t0) / 60.0;
  out.close();
  const auto s = metrics::summarize_run({csv}, static_cast<double>(c.run.total_env_steps));
  r.final_mean = s.seeds[0].final_mean;
  r.auc = s.seeds[0].auc;
  std::cout << "  run " << variant_name(v) << " seed " << seed << ": final " << fmt(r.final_mean, 4) << ", AUC "
            << fmt(r.auc, 8) << ", " << fmt(r.minutes, 3) << " min" << std::endl;
  return r;
}

class LearningRuns {
 public:
  explicit LearningRuns(fs::path work) : work_(std::move(work)) { fs::create_directories(work_); }

  const std::vector<RunRecord>& get(Variant v) {
    auto& slot = runs_[v];
    if (slot.empty())
      for (std::uint64_t seed = 1; seed <= tol::kSeeds; ++seed) slot.push_back(learning_run(v, seed, work_));
    return slot;
  }

 private:
  fs::path work_;
  std::map<Variant, std::vector<RunRecord>> runs_;
};

Outcome end_to_end(LearningRuns& runs) {
  Outcome o;
  const auto& r = runs.get(Variant::kCoberl);
  std::size_t reached = 0;
  double slowest = 0.0;
  for (const auto& run : r) {
    reached += run.final_mean >= tol::kReturnTarget;
    slowest = std::max(slowest, run.minutes);
  }
  o.check(reached >= tol::kSeedsNeeded, std::to_string(reached) + "/5 seeds reach " + fmt(tol::kReturnTarget));
  o.check(slowest < tol::kRunMinutes, "slowest run " + fmt(slowest, 3) + " min");
  o.detail << (o.pass ? "" : " | ") << reached << "/5 seeds at final-window mean >= " << tol::kReturnTarget
           << " (";
  for (std::size_t i = 0; i < r.size(); ++i) o.detail << (i ? ", " : "") << fmt(r[i].final_mean, 3);
  o.detail << "), slowest " << fmt(slowest, 3) << " min";
  return o;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome ablation(LearningRuns& runs) {
  Outcome o;
  const auto& full = runs.get(Variant::kCoberl);
  std::vector<double> full_auc;
  for (const auto& r : full) full_auc.push_back(r.auc);
  std::ostringstream summary;
  for (Variant v : {Variant::kNoAux, Variant::kNoGate}) {
    const auto& other = runs.get(v);
    std::size_t wins = 0;
    std::vector<double> other_auc;
    for (std::size_t i = 0; i < full.size(); ++i) {
      wins += full[i].auc >= other[i].auc;
      other_auc.push_back(other[i].auc);
    }
    o.check(wins >= tol::kSeedsNeeded, std::string(variant_name(v)) + " ahead");
    summary << (v == Variant::kNoAux ? "" : "; ") << "vs " << variant_name(v) << " " << wins
            << "/5 paired wins, median AUC " << fmt(median(full_auc), 6) << " vs " << fmt(median(other_auc), 6);
  }
  o.detail << (o.pass ? "" : " | ") << summary.str();
  return o;
}

std::pair<int, int> parse_range(const std::string& text) {
  const auto dash = text.find('-');
  if (dash == std::string::npos) return {std::stoi(text), std::stoi(text)};
  return {std::stoi(text.substr(0, dash)), std::stoi(text.substr(dash + 1))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string range = "1-12";
  fs::path work = fs::temp_directory_path() / "coberl_acceptance";
  app.add_option("--criteria", range, "range such as 1-10 or 11");
  app.add_option("--work", work, "directory for run outputs");
  CLI11_PARSE(app, argc, argv);
  const auto [first, last] = parse_range(range);

  LearningRuns runs(work);
  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
      {1, {"gradient fidelity", gradient_fidelity}},
      {2, {"contrastive oracle", contrastive_oracle}},
      {3, {"degenerate losses", degenerate_losses}},
      {4, {"stop-gradient", stop_gradient}},
      {5, {"Peng Q(lambda)", peng}},
      {6, {"value transform", value_transform}},
      {7, {"gate", gate}},
      {8, {"causality and recurrence", causality}},
      {9, {"replay", replay_checks}},
      {10, {"schedule and metrics", [&] { return schedule_and_metrics(work); }}},
      {11, {"end-to-end learning", [&] { return end_to_end(runs); }}},
      {12, {"ablation direction", [&] { return ablation(runs); }}},
  };

  int failures = 0;
  for (const auto& [id, entry] : criteria) {
    if (id < first || id > last) continue;
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    std::cout << "criterion " << std::setw(2) << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << entry.first
              << ": " << o.detail.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
