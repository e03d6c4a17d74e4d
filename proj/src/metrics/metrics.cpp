#include "coberl/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "coberl/error.hpp"

namespace coberl::metrics {

const char* const kCsvHeader = "step,episode_return,eval_return,loss_rl,loss_contrastive,priority_mean,epsilon_mean";

namespace {

void check_curve(const LearningCurve& c) {
  if (c.steps.size() != c.values.size()) throw InputError("curve: steps and values differ in length");
  for (std::size_t i = 1; i < c.steps.size(); ++i)
    if (!(c.steps[i] > c.steps[i - 1])) throw InputError("curve: steps must be strictly increasing");
}

double simpson(const std::vector<double>& x, const std::vector<double>& y, std::string* warning) {
  if (x.size() < 3) throw InputError("AUC needs at least 3 points, got " + std::to_string(x.size()));
  std::size_t n = x.size();
  const double h = x[1] - x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (std::abs((x[i] - x[i - 1]) - h) > 1e-9 * std::max(1.0, std::abs(h)))
      throw InputError("AUC needs uniform spacing (gap at index " + std::to_string(i) + ")");
  if (n % 2 == 0) {
    --n;
    if (warning) *warning = "even point count; dropped trailing point at step " + std::to_string(x.back());
  }
  double s = y[0] + y[n - 1];
  for (std::size_t i = 1; i + 1 < n; ++i) s += (i % 2 ? 4.0 : 2.0) * y[i];
  return h * s / 3.0;
}

std::string cell(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

double compute_auc(const LearningCurve& curve, std::string* warning) {
  check_curve(curve);
  return simpson(curve.steps, curve.values, warning);
}

double auc_above_threshold(const LearningCurve& curve, double threshold, std::string* warning) {
  check_curve(curve);
  std::vector<double> clipped(curve.values.size());
  for (std::size_t i = 0; i < clipped.size(); ++i) clipped[i] = std::max(curve.values[i] - threshold, 0.0);
  return simpson(curve.steps, clipped, warning);
}

LearningCurve resample(const LearningCurve& curve, double delta) {
  check_curve(curve);
  if (!(delta > 0)) throw InputError("resample: delta must be positive");
  LearningCurve out;
  if (curve.steps.empty()) return out;
  const double first = curve.steps.front(), last = curve.steps.back();
  std::size_t j = 0;
  for (std::size_t k = 0;; ++k) {
    const double x = first + static_cast<double>(k) * delta;
    if (x > last + 1e-9 * std::max(1.0, std::abs(last))) break;
    while (j + 1 < curve.steps.size() && curve.steps[j + 1] < x) ++j;
    double y;
    if (j + 1 >= curve.steps.size()) {
      y = curve.values.back();
    } else {
      const double x0 = curve.steps[j], x1 = curve.steps[j + 1];
      const double a = std::clamp((x - x0) / (x1 - x0), 0.0, 1.0);
      y = curve.values[j] + a * (curve.values[j + 1] - curve.values[j]);
    }
    out.steps.push_back(x);
    out.values.push_back(y);
  }
  return out;
}

std::string format_row(const MetricsRow& r) {
  return cell(r.step) + "," + cell(r.episode_return) + "," + cell(r.eval_return) + "," + cell(r.loss_rl) + "," +
         cell(r.loss_contrastive) + "," + cell(r.priority_mean) + "," + cell(r.epsilon_mean);
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << kCsvHeader << "\n";
  for (const auto& r : rows) out << format_row(r) << "\n";
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<MetricsRow> rows;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kCsvHeader) throw InputError(path.string() + ":1: unexpected header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 7)
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected 7 columns, got " +
                       std::to_string(cells.size()));
    double v[7];
    for (std::size_t i = 0; i < 7; ++i) {
      if (cells[i].empty()) {
        v[i] = nan;
        continue;
      }
      try {
        std::size_t used = 0;
        v[i] = std::stod(cells[i], &used);
        if (used != cells[i].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw InputError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + cells[i] + "'");
      }
    }
    if (std::isnan(v[0])) throw InputError(path.string() + ":" + std::to_string(lineno) + ": missing step");
    rows.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6]});
  }
  if (lineno == 0) throw InputError(path.string() + ": empty file");
  return rows;
}

LearningCurve eval_curve(const std::vector<MetricsRow>& rows) {
  LearningCurve c;
  for (const auto& r : rows) {
    if (!std::isfinite(r.eval_return)) continue;
    c.steps.push_back(r.step);
    c.values.push_back(r.eval_return);
  }
  return c;
}

double final_window_mean(const LearningCurve& evals, double budget) {
  const double lo = 0.95 * budget;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < evals.steps.size(); ++i) {
    if (evals.steps[i] >= lo && evals.steps[i] <= budget) {
      sum += evals.values[i];
      ++n;
    }
  }
  if (n == 0) throw InputError("no evaluation reports in the final 5% window [" + std::to_string(lo) + ", " +
                               std::to_string(budget) + "]");
  return sum / static_cast<double>(n);
}

RunSummary summarize_run(const std::vector<std::filesystem::path>& csv_paths, double budget) {
  if (csv_paths.empty()) throw InputError("summarize_run: no CSV files");
  RunSummary s;
  for (const auto& path : csv_paths) {
    const auto rows = read_metrics_csv(path);
    const LearningCurve c = eval_curve(rows);
    if (c.steps.empty()) throw InputError(path.string() + ": no evaluation reports");
    double b = budget;
    if (b <= 0) {
      b = 0;
      for (const auto& r : rows) b = std::max(b, r.step);
    }
    SeedSummary seed;
    seed.source = path.string();
    seed.final_mean = final_window_mean(c, b);
    for (double x : c.steps) seed.final_reports += x >= 0.95 * b && x <= b;
    if (c.steps.size() >= 2) {
      const LearningCurve grid = resample(c, 5.0);
      if (grid.steps.size() >= 3) seed.auc = compute_auc(grid);
    }
    s.seeds.push_back(seed);
  }
  const double n = static_cast<double>(s.seeds.size());
  for (const auto& seed : s.seeds) {
    s.mean += seed.final_mean / n;
    s.auc_mean += seed.auc / n;
  }
  if (s.seeds.size() > 1) {
    double var = 0.0;
    for (const auto& seed : s.seeds) var += (seed.final_mean - s.mean) * (seed.final_mean - s.mean);
    var /= n - 1.0;
    s.stderr_ = std::sqrt(var / n);
  }
  return s;
}

std::string RunSummary::to_text() const {
  std::ostringstream os;
  os.precision(6);
  os << "final eval return: " << mean << " +/- " << stderr_ << " (" << seeds.size() << " seed"
     << (seeds.size() == 1 ? "" : "s") << ")\n";
  os << "auc: " << auc_mean << "\n";
  for (const auto& seed : seeds)
    os << "  " << seed.source << ": final " << seed.final_mean << " over " << seed.final_reports
       << " reports, auc " << seed.auc << "\n";
  os << "[summary]\n";
  os << "mean=" << mean << "\nstderr=" << stderr_ << "\nauc=" << auc_mean << "\nseeds=" << seeds.size() << "\n";
  return os.str();
}

}  // namespace coberl::metrics
