#include "coberl/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "coberl/error.hpp"

namespace coberl::numerics {

namespace {

double evaluate(const GraphLoss& loss, const ParameterSet& params, std::vector<Tensor>* capture,
                const std::vector<Tensor>* replay) {
  Tape tape(false);
  tape.capture_stop_gradients(capture);
  tape.replay_stop_gradients(replay);
  ParameterBinding binding(tape, params, false);
  const Tensor& v = loss(binding).value();
  if (v.size() != 1) throw HarnessError("grad_check: loss is not a scalar");
  return v[0];
}

}  // namespace

double evaluate_loss(const GraphLoss& loss, const ParameterSet& params) {
  return evaluate(loss, params, nullptr, nullptr);
}

GradCheckReport grad_check(const GraphLoss& loss, const ParameterSet& params, double tol,
                           const GradCheckOptions& options) {
  // Stop-gradient values are pinned to the base point (see Tape).
  std::vector<Tensor> frozen;
  const double base = evaluate(loss, params, &frozen, nullptr);
  if (evaluate(loss, params, nullptr, &frozen) != base) {
    throw HarnessError("grad_check: loss function is not deterministic");
  }

  Tape tape(true);
  tape.replay_stop_gradients(&frozen);
  ParameterBinding binding(tape, params, true);
  Var out = loss(binding);
  if (out.value()[0] != base) throw HarnessError("grad_check: recorded and unrecorded losses differ");
  tape.backward(out);
  const GradientMap analytic = binding.gradients();

  GradCheckReport report;
  report.tolerance = tol;
  ParameterSet probe = params;
  for (const auto& [name, value] : params.entries()) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), name) == options.only.end())
      continue;
    GradCheckEntry entry;
    entry.name = name;
    const Tensor& a = analytic.at(name);
    Tensor& p = probe.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + options.step;
      const double up = evaluate(loss, probe, nullptr, &frozen);
      p[i] = saved - options.step;
      const double down = evaluate(loss, probe, nullptr, &frozen);
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), options.floor});
      const double rel = std::abs(a[i] - numeric) / denom;
      if (rel > entry.max_rel_error || i == 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
        if (rel >= entry.max_rel_error) {
          entry.worst_index = i;
          entry.analytic = a[i];
          entry.numeric = numeric;
        }
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace coberl::numerics
