#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>

#include "raglab/encoders.hpp"
#include "raglab/generator.hpp"
#include "raglab/index.hpp"
#include "raglab/kbstore.hpp"
#include "raglab/sampler.hpp"

namespace raglab {

enum class Estimator { jsa, tkm, vrag, reinforce, exact_em };

std::string estimator_name(Estimator e);
Estimator estimator_from_name(const std::string& name);

enum class Block { prior_ctx, passage, post_ctx, generator };
std::string block_name(Block b);

/// All trainable state. The passage encoder appears once and is shared by
/// the prior retriever (with prior_ctx) and the posterior retriever (with
/// post_ctx). passage_version bumps on every passage-encoder update so the
/// index can stamp what it was built from.
struct ModelBundle {
  EncoderParams prior_ctx;  // context encoder of the prior retriever
  EncoderParams passage;    // shared passage encoder
  EncoderParams post_ctx;   // context-response encoder of the posterior retriever
  GeneratorParams generator;

  bool freeze_prior_ctx = false;
  bool freeze_passage = true;
  bool freeze_post_ctx = false;
  bool freeze_generator = false;

  long passage_version = 0;

  int dim() const { return prior_ctx.dim(); }
  int vocab() const { return prior_ctx.vocab(); }

  /// generator_dim <= 0 means "same as dim". Keeping the generator lean
  /// relative to the knowledge base is what makes retrieval worth learning,
  /// mirroring the full-scale setting where the KB dwarfs the generator.
  static ModelBundle init(int vocab_size, int dim, uint64_t seed, int generator_dim = 0);

  bool frozen(Block b) const;
};

struct TrainConfig {
  Estimator estimator = Estimator::jsa;
  int k = 10;                  // top-k for both retrievers
  int m = 50;                  // MIS steps per example
  double lr_retriever = 1e-2;  // prior_ctx and post_ctx
  double lr_passage = -1.0;    // shared passage encoder; < 0 falls back to lr_retriever
  double lr_generator = 1e-2;
  long steps = 1000;
  uint64_t seed = 1;
  int rebuild_every = 0;  // 0 = never; > 0 requires the passage encoder unfrozen
  bool freeze_passage_encoder = true;
  int beam_width = 4;
  int grad_report_every = 50;

  void validate() const;
  std::string canonical_json() const;
  uint64_t config_hash() const;
};

/// Loss decomposition for one step. For jsa, total is exactly the negative
/// mean over the m chain samples of (prior + generator + posterior) terms.
/// For the other estimators, total is the estimator's own objective
/// (negated) and the terms carry the analogous expectations under that
/// estimator's weighting.
struct StepLoss {
  double prior_term = 0.0;
  double gen_term = 0.0;
  double post_term = 0.0;
  double total = 0.0;
};

struct BundleGrad {
  EncoderGradient prior_ctx;
  EncoderGradient passage;
  EncoderGradient post_ctx;
  GeneratorGradient generator;

  static BundleGrad zeros_like(const ModelBundle& b);
  void add_scaled(const BundleGrad& other, double w);
  void scale(double w);
  double block_norm(Block b) const;
};

// ---- estimator objectives ----
//
// Pure functions of the bundle given a fixed candidate support (and, where
// sampling is involved, fixed samples), which keeps them finite-difference
// checkable. Gradients accumulate in the *ascent* direction of the
// objective (the negative of the reported loss), so SGD updates are
// `param += lr * grad`. All truncated softmaxes recompute candidate
// embeddings from the live passage encoder.

/// Chain-averaged three-term objective; chain entries must lie in support.
StepLoss jsa_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                       std::span<const int> support, std::span<const int> chain, BundleGrad* grad);

/// -log sum_{h in support} p(h|x) p(y|x,h), prior truncated to support.
StepLoss tkm_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                       std::span<const int> support, BundleGrad* grad);

/// Negative truncated ELBO with the proposal softmax fully differentiated.
StepLoss vrag_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                        std::span<const int> support, BundleGrad* grad);

/// Score-function surrogate for one sampled passage with a frozen
/// advantage: (reward - baseline) log p(h|x) + log p(y|x,h).
StepLoss reinforce_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                             std::span<const int> support, int sampled_id, double baseline,
                             BundleGrad* grad);

/// Full-enumeration EM step: exact posterior weights over the whole KB
/// (Fisher identity for the marginal gradient) plus exact cross-entropy
/// training of the posterior retriever. Guarded to N <= 4096.
StepLoss em_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex, BundleGrad* grad);

// ---- exact enumeration helpers (also the diagnostics oracle) ----

Vec full_prior_logprobs(const ModelBundle& b, const KnowledgeBase& kb, std::span<const int> x);
Vec full_post_logprobs(const ModelBundle& b, const KnowledgeBase& kb, std::span<const int> x,
                       std::span<const int> y);
Vec all_gen_logliks(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex);
/// softmax over all passages of log p(h|x) + log p(y|x,h).
Vec exact_posterior(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex);
double exact_marginal_loglik(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex);

// ---- stepping ----

struct TrainerState {
  Rng rng;
  double baseline_mean = 0.0;  // running-mean reward baseline (reinforce)
  long baseline_count = 0;

  explicit TrainerState(uint64_t seed) : rng(seed) {}
};

/// Candidate selection + sampling + objective for one example, without
/// touching parameters. Returns the loss; accumulates ascent gradients.
StepLoss estimator_gradients(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                             const PassageIndex& index, const TrainConfig& cfg, TrainerState& state,
                             BundleGrad& grad);

/// param += lr * grad on unfrozen blocks; bumps passage_version when the
/// passage encoder moves.
void apply_update(ModelBundle& b, const BundleGrad& grad, const TrainConfig& cfg);

/// One full training step (gradients + update).
StepLoss estimator_step(ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                        const PassageIndex& index, const TrainConfig& cfg, TrainerState& state,
                        BundleGrad* grad_out = nullptr);

// ---- training loop ----

struct GradientReport;  // diagnostics.hpp

struct TrainHooks {
  std::function<void(const GradientReport&)> on_grad_report;  // every grad_report_every steps
  std::function<void(long step, const PassageIndex&, const ModelBundle&)> on_rebuild;
};

struct TrainResult {
  ModelBundle bundle;
  PassageIndex index;
  long steps_run = 0;
  std::string rng_state;  // trainer RNG after the last step
};

/// Seeded example shuffling, optional index rebuilding every
/// rebuild_every steps (training pauses, the index is rebuilt from the
/// live passage encoder, training resumes), per-step trace records.
TrainResult train(const ModelBundle& init, const Dataset& data, const KnowledgeBase& kb,
                  const TrainConfig& cfg, std::ostream* trace = nullptr, const TrainHooks& hooks = {});

/// Post-training of the generator on inputs built by concatenating the
/// top-k prior passages (descending score, ties by id) in front of the
/// context. Requires all retriever blocks frozen.
TrainResult concat_posttrain(const ModelBundle& init, const Dataset& data, const KnowledgeBase& kb,
                             const TrainConfig& cfg, std::ostream* trace = nullptr);

/// Concatenated generator input for an example context under an index:
/// passages in retrieval order, then x.
std::vector<int> concat_input(const PassageIndex& index, const KnowledgeBase& kb,
                              const ModelBundle& b, std::span<const int> x, int k);

// ---- checkpointing ----
//
// One tensor dump per parameter block plus manifest.json carrying the
// config, its hash, the step count, and the trainer RNG state.

void save_checkpoint(const std::string& dir, const ModelBundle& b, const TrainConfig& cfg, long step,
                     const std::string& rng_state);

struct Checkpoint {
  ModelBundle bundle;
  TrainConfig config;
  long step = 0;
  std::string rng_state;
};

Checkpoint load_checkpoint(const std::string& dir);

}  // namespace raglab
