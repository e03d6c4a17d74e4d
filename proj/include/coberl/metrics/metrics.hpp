#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace coberl::metrics {

/// (step, value) pairs; steps strictly increasing.
struct LearningCurve {
  std::vector<double> steps;
  std::vector<double> values;
};

/// Composite Simpson over a uniform grid. An even point count drops the last
/// point and, when `warning` is given, stores a message there.
double compute_auc(const LearningCurve& curve, std::string* warning = nullptr);
double auc_above_threshold(const LearningCurve& curve, double threshold, std::string* warning = nullptr);

/// Linear interpolation onto first_step, first_step + delta, ... <= last step.
LearningCurve resample(const LearningCurve& curve, double delta);

/// One metrics CSV row; absent cells are NaN.
struct MetricsRow {
  double step = 0.0;
  double episode_return = 0.0;
  double eval_return = 0.0;
  double loss_rl = 0.0;
  double loss_contrastive = 0.0;
  double priority_mean = 0.0;
  double epsilon_mean = 0.0;
};

extern const char* const kCsvHeader;
std::string format_row(const MetricsRow& row);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
/// Throws InputError naming the offending line.
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// Eval reports (rows with a finite eval_return) as a curve.
LearningCurve eval_curve(const std::vector<MetricsRow>& rows);

/// Mean of reports with step in [0.95 * budget, budget]. Throws InputError if none.
double final_window_mean(const LearningCurve& evals, double budget);

struct SeedSummary {
  std::string source;
  double final_mean = 0.0;
  std::size_t final_reports = 0;
  double auc = 0.0;
};

struct RunSummary {
  double mean = 0.0;
  double stderr_ = 0.0;
  double auc_mean = 0.0;
  std::vector<SeedSummary> seeds;

  std::string to_text() const;
};

/// Budget defaults to the largest step in each file.
RunSummary summarize_run(const std::vector<std::filesystem::path>& csv_paths, double budget = 0.0);

}  // namespace coberl::metrics
