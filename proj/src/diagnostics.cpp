#include "raglab/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace raglab {

namespace {

const std::vector<Block> kBlocks = {Block::prior_ctx, Block::passage, Block::post_ctx, Block::generator};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

std::string gradient_report_csv_header() { return "step,estimator,block,norm,variance,bias\n"; }

std::string gradient_report_csv_rows(const GradientReport& r) {
  std::string out;
  for (const auto& [block, norm] : r.norms) {
    out += std::to_string(r.step) + "," + estimator_name(r.estimator) + "," + block + "," + fmt(norm) + ",";
    auto v = r.replicate_variance.find(block);
    if (v != r.replicate_variance.end()) out += fmt(v->second);
    out += ",";
    auto bi = r.replicate_bias.find(block);
    if (bi != r.replicate_bias.end()) out += fmt(bi->second);
    out += "\n";
  }
  return out;
}

GradientRecorder::GradientRecorder(int every_n_steps, std::ostream* sink)
    : every_n_steps_(every_n_steps), sink_(sink) {
  if (every_n_steps < 1) throw std::invalid_argument("GradientRecorder: every_n_steps must be positive");
  if (sink_) (*sink_) << gradient_report_csv_header();
}

void GradientRecorder::operator()(const GradientReport& r) {
  if (r.step % every_n_steps_ != 0) return;
  reports_.push_back(r);
  if (sink_) (*sink_) << gradient_report_csv_rows(r);
}

BundleGrad exact_gradient_oracle(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex) {
  // em_objective is exactly the full-enumeration Fisher-identity gradient
  // (marginal terms) plus the exact posterior cross-entropy (proposal term)
  BundleGrad g = BundleGrad::zeros_like(b);
  em_objective(b, kb, ex, &g);
  return g;
}

GradientReport estimate_bias_variance(const ModelBundle& b, const Example& ex, const KnowledgeBase& kb,
                                      const PassageIndex& index, const TrainConfig& cfg,
                                      Estimator estimator, int replicates, uint64_t seed) {
  if (replicates < 2) throw std::invalid_argument("estimate_bias_variance: need at least 2 replicates");

  TrainConfig run_cfg = cfg;
  run_cfg.estimator = estimator;

  // Fixed exact-expected-reward baseline keeps reinforce replicates
  // independent and as low-variance as the method allows.
  double reinforce_baseline = 0.0;
  if (estimator == Estimator::reinforce) {
    const Vec prior_q = encode(b.prior_ctx, ex.context);
    const auto top = top_k(index, prior_q, run_cfg.k);
    Vec logits(top.size()), rewards(top.size());
    std::vector<int> support;
    for (const auto& [id, s] : top) support.push_back(id);
    std::sort(support.begin(), support.end());
    for (size_t i = 0; i < support.size(); ++i) {
      logits[i] = dot(encode(b.passage, kb.passages[support[i]].tokens), prior_q);
      rewards[i] = log_likelihood(b.generator, ex.context, kb.passages[support[i]].tokens, ex.response);
    }
    const Vec probs = softmax_from_logits(logits);
    for (size_t i = 0; i < probs.size(); ++i) reinforce_baseline += probs[i] * rewards[i];
  }

  std::vector<BundleGrad> grads;
  grads.reserve(replicates);
  Rng master(seed);
  for (int r = 0; r < replicates; ++r) {
    TrainerState state(master.next_u64());
    state.baseline_mean = reinforce_baseline;
    state.baseline_count = estimator == Estimator::reinforce ? 1 : 0;
    BundleGrad g = BundleGrad::zeros_like(b);
    estimator_gradients(b, kb, ex, index, run_cfg, state, g);
    grads.push_back(std::move(g));
  }

  BundleGrad mean = BundleGrad::zeros_like(b);
  for (const BundleGrad& g : grads) mean.add_scaled(g, 1.0 / static_cast<double>(replicates));

  // deterministic estimators reproduce one gradient bit for bit; report
  // exactly zero variance rather than mean-subtraction rounding dust
  auto identical = [](const BundleGrad& a, const BundleGrad& g) {
    return a.prior_ctx.d_embedding == g.prior_ctx.d_embedding &&
           a.prior_ctx.d_projection == g.prior_ctx.d_projection &&
           a.passage.d_embedding == g.passage.d_embedding &&
           a.passage.d_projection == g.passage.d_projection &&
           a.post_ctx.d_embedding == g.post_ctx.d_embedding &&
           a.post_ctx.d_projection == g.post_ctx.d_projection &&
           a.generator.d_token_embedding == g.generator.d_token_embedding &&
           a.generator.d_context_mixer == g.generator.d_context_mixer &&
           a.generator.d_output_head == g.generator.d_output_head;
  };
  bool all_identical = true;
  for (const BundleGrad& g : grads)
    if (!identical(grads.front(), g)) {
      all_identical = false;
      break;
    }
  if (all_identical) mean = grads.front();

  const BundleGrad exact = exact_gradient_oracle(b, kb, ex);

  GradientReport report;
  report.step = 0;
  report.estimator = estimator;
  for (Block blk : kBlocks) {
    const std::string name = block_name(blk);
    report.norms[name] = mean.block_norm(blk);

    // total variance: sum over coordinates of the per-coordinate unbiased
    // sample variance = mean squared deviation norm * R/(R-1)
    double sq_dev = 0.0;
    if (!all_identical) {
      for (const BundleGrad& g : grads) {
        BundleGrad dev = g;
        dev.add_scaled(mean, -1.0);
        const double nb = dev.block_norm(blk);
        sq_dev += nb * nb;
      }
    }
    const double variance = sq_dev / static_cast<double>(replicates - 1);
    report.replicate_variance[name] = variance;
    report.replicate_se[name] = std::sqrt(variance / static_cast<double>(replicates));

    BundleGrad diff = mean;
    diff.add_scaled(exact, -1.0);
    const double exact_norm = exact.block_norm(blk);
    if (exact_norm > 0.0) report.replicate_bias[name] = diff.block_norm(blk) / exact_norm;
  }
  return report;
}

std::vector<TimingRow> timing_report(const ModelBundle& b, const Dataset& data, const KnowledgeBase& kb,
                                     const TrainConfig& base_cfg, const std::vector<Estimator>& estimators,
                                     int batches) {
  if (batches < 5) throw std::invalid_argument("timing_report: need at least 5 batches");
  using clock = std::chrono::steady_clock;

  std::vector<TimingRow> rows;
  for (Estimator est : estimators) {
    TrainConfig cfg = base_cfg;
    cfg.estimator = est;

    // time the iterations themselves on an identical task and seed;
    // index building is outside the measurement
    ModelBundle bundle = b;
    bundle.freeze_passage = cfg.freeze_passage_encoder;
    const PassageIndex index = build_index(kb, bundle.passage, bundle.passage_version);
    TrainerState state(mix_seed(cfg.seed, 0x1));

    std::vector<double> samples;
    int cursor = 0;
    for (int i = 0; i < batches; ++i) {
      const auto t0 = clock::now();
      for (int s = 0; s < 10; ++s) {
        const Example& ex = data.examples[cursor % data.examples.size()];
        ++cursor;
        estimator_step(bundle, kb, ex, index, cfg, state);
      }
      const auto t1 = clock::now();
      samples.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    rows.push_back({est, samples[samples.size() / 2]});
  }
  return rows;
}

std::string timing_table(const std::vector<TimingRow>& rows) {
  std::string out = "estimator   seconds_per_10_iters\n";
  for (const TimingRow& r : rows) {
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%-11s %.4f\n", estimator_name(r.estimator).c_str(),
                  r.seconds_per_10_iters);
    out += buf;
  }
  return out;
}

}  // namespace raglab
