#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "raglab/trainers.hpp"

namespace raglab {

/// Per-block gradient statistics for one step or one replicate study.
/// variance is the total (summed over coordinates) unbiased sample
/// variance across replicates; bias is ||mean - exact|| / ||exact||
/// against the full-enumeration oracle and is only present when the
/// oracle ran.
struct GradientReport {
  long step = 0;
  Estimator estimator = Estimator::jsa;
  std::map<std::string, double> norms;                          // block -> ||g||_2
  std::map<std::string, double> replicate_variance;             // empty unless replicated
  std::map<std::string, double> replicate_bias;                 // empty unless oracle ran
  std::map<std::string, double> replicate_se;                   // standard error of the mean norm
};

/// CSV rows "step,estimator,block,norm,variance,bias" (empty cells where a
/// statistic was not computed).
std::string gradient_report_csv_header();
std::string gradient_report_csv_rows(const GradientReport& r);

/// Collects reports every `every_n_steps` during training; attach via
/// TrainHooks.on_grad_report. Writes CSV rows as they arrive when a sink
/// stream is given.
class GradientRecorder {
 public:
  explicit GradientRecorder(int every_n_steps, std::ostream* sink = nullptr);

  void operator()(const GradientReport& r);
  const std::vector<GradientReport>& reports() const { return reports_; }

 private:
  int every_n_steps_;
  std::ostream* sink_;
  std::vector<GradientReport> reports_;
};

/// Runs the estimator `replicates` times with fresh randomness at a frozen
/// model state and reports per-block mean-gradient norms, replicate
/// variance, and bias against the exact full-enumeration gradient.
/// Deterministic estimators come out with exactly zero variance. The
/// reinforce replicates use the exact expected reward as their baseline so
/// the comparison is as favorable to it as possible.
GradientReport estimate_bias_variance(const ModelBundle& b, const Example& ex, const KnowledgeBase& kb,
                                      const PassageIndex& index, const TrainConfig& cfg,
                                      Estimator estimator, int replicates, uint64_t seed);

/// Exact ascent gradients from full enumeration (Fisher identity for the
/// marginal terms, exact posterior cross-entropy for the proposal block).
BundleGrad exact_gradient_oracle(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex);

struct TimingRow {
  Estimator estimator;
  double seconds_per_10_iters = 0.0;  // median over batches
};

/// Wall-clock seconds per 10 training iterations, median over `batches`
/// batches (>= 5), measured on identical data and seed per estimator.
std::vector<TimingRow> timing_report(const ModelBundle& b, const Dataset& data, const KnowledgeBase& kb,
                                     const TrainConfig& base_cfg, const std::vector<Estimator>& estimators,
                                     int batches = 5);

std::string timing_table(const std::vector<TimingRow>& rows);

}  // namespace raglab
