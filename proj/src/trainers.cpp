#include "raglab/trainers.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "raglab/diagnostics.hpp"
#include "raglab/io.hpp"

namespace raglab {

using nlohmann::json;

std::string estimator_name(Estimator e) {
  switch (e) {
    case Estimator::jsa: return "jsa";
    case Estimator::tkm: return "tkm";
    case Estimator::vrag: return "vrag";
    case Estimator::reinforce: return "reinforce";
    case Estimator::exact_em: return "exact-em";
  }
  throw std::logic_error("bad estimator");
}

Estimator estimator_from_name(const std::string& name) {
  if (name == "jsa") return Estimator::jsa;
  if (name == "tkm") return Estimator::tkm;
  if (name == "vrag") return Estimator::vrag;
  if (name == "reinforce") return Estimator::reinforce;
  if (name == "exact-em" || name == "exact_em") return Estimator::exact_em;
  throw std::invalid_argument("unknown estimator: " + name);
}

std::string block_name(Block b) {
  switch (b) {
    case Block::prior_ctx: return "prior_ctx";
    case Block::passage: return "passage";
    case Block::post_ctx: return "post_ctx";
    case Block::generator: return "generator";
  }
  throw std::logic_error("bad block");
}

ModelBundle ModelBundle::init(int vocab_size, int dim, uint64_t seed, int generator_dim) {
  if (generator_dim <= 0) generator_dim = dim;
  Rng rng(seed);
  ModelBundle b;
  Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3), r4 = rng.fork(4);
  // All three encoders share one embedding draw, the desk-scale stand-in
  // for initializing every retriever tower from the same pretrained model.
  // The passage side gets a scaled-up projection so the frozen encoder
  // spreads passages apart; the query sides keep small fresh projections,
  // so zero-shot rankings are sensible while initial retriever
  // distributions stay near-uniform.
  b.passage = EncoderParams::init(vocab_size, dim, r2);
  for (double& v : b.passage.embedding.data) v *= 6.0;
  b.prior_ctx.embedding = b.passage.embedding;
  b.prior_ctx.projection = EncoderParams::init(vocab_size, dim, r1).projection;
  b.post_ctx.embedding = b.passage.embedding;
  b.post_ctx.projection = EncoderParams::init(vocab_size, dim, r3).projection;
  for (double& v : b.passage.projection.data) v *= 12.0;
  b.generator = GeneratorParams::init(vocab_size, generator_dim, r4);
  return b;
}

bool ModelBundle::frozen(Block b) const {
  switch (b) {
    case Block::prior_ctx: return freeze_prior_ctx;
    case Block::passage: return freeze_passage;
    case Block::post_ctx: return freeze_post_ctx;
    case Block::generator: return freeze_generator;
  }
  throw std::logic_error("bad block");
}

void TrainConfig::validate() const {
  if (k < 1) throw std::invalid_argument("config: k must be positive");
  if (m < 1) throw std::invalid_argument("config: m must be positive");
  if (lr_retriever <= 0 || lr_generator <= 0) throw std::invalid_argument("config: learning rates must be positive");
  if (lr_passage == 0) throw std::invalid_argument("config: lr_passage must be positive (or negative to inherit)");
  if (steps < 0) throw std::invalid_argument("config: steps must be nonnegative");
  if (beam_width < 1) throw std::invalid_argument("config: beam_width must be positive");
  if (grad_report_every < 1) throw std::invalid_argument("config: grad_report_every must be positive");
  if (rebuild_every < 0) throw std::invalid_argument("config: rebuild_every must be nonnegative");
  if (rebuild_every > 0 && freeze_passage_encoder)
    throw std::invalid_argument("config: index rebuilding requires the passage encoder to be unfrozen");
}

std::string TrainConfig::canonical_json() const {
  json j{{"estimator", estimator_name(estimator)},
         {"k", k},
         {"m", m},
         {"lr_retriever", lr_retriever},
         {"lr_passage", lr_passage},
         {"lr_generator", lr_generator},
         {"steps", steps},
         {"seed", seed},
         {"rebuild_every", rebuild_every},
         {"freeze_passage_encoder", freeze_passage_encoder},
         {"beam_width", beam_width},
         {"grad_report_every", grad_report_every}};
  return j.dump();
}

uint64_t TrainConfig::config_hash() const {
  // FNV-1a over the canonical serialization
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical_json()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

BundleGrad BundleGrad::zeros_like(const ModelBundle& b) {
  BundleGrad g;
  g.prior_ctx = EncoderGradient::zeros_like(b.prior_ctx);
  g.passage = EncoderGradient::zeros_like(b.passage);
  g.post_ctx = EncoderGradient::zeros_like(b.post_ctx);
  g.generator = GeneratorGradient::zeros_like(b.generator);
  return g;
}

void BundleGrad::add_scaled(const BundleGrad& other, double w) {
  prior_ctx.add_scaled(other.prior_ctx, w);
  passage.add_scaled(other.passage, w);
  post_ctx.add_scaled(other.post_ctx, w);
  generator.add_scaled(other.generator, w);
}

void BundleGrad::scale(double w) {
  prior_ctx.scale(w);
  passage.scale(w);
  post_ctx.scale(w);
  generator.scale(w);
}

double BundleGrad::block_norm(Block b) const {
  switch (b) {
    case Block::prior_ctx: return std::sqrt(prior_ctx.l2_norm_squared());
    case Block::passage: return std::sqrt(passage.l2_norm_squared());
    case Block::post_ctx: return std::sqrt(post_ctx.l2_norm_squared());
    case Block::generator: return std::sqrt(generator.l2_norm_squared());
  }
  throw std::logic_error("bad block");
}

// ---- shared forward/backward over a fixed support ----

namespace {

std::vector<int> concat_xy(const Example& ex) {
  std::vector<int> xy = ex.context;
  xy.insert(xy.end(), ex.response.begin(), ex.response.end());
  return xy;
}

struct SupportForward {
  std::vector<Vec> embs;  // fresh passage embeddings per support member
  Vec prior_query;
  Vec post_query;         // empty unless requested
  Vec prior_logprobs;
  Vec post_logprobs;
};

SupportForward support_forward(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                               std::span<const int> support, bool need_post) {
  if (support.empty()) throw std::invalid_argument("objective: empty support");
  SupportForward f;
  f.prior_query = encode(b.prior_ctx, ex.context);
  if (need_post) f.post_query = encode(b.post_ctx, concat_xy(ex));

  const int n = static_cast<int>(support.size());
  Vec prior_logits(n), post_logits(need_post ? n : 0);
  f.embs.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int id = support[i];
    if (id < 0 || id >= kb.size()) throw std::invalid_argument("objective: support id out of range");
    Vec emb = encode(b.passage, kb.passages[id].tokens);
    prior_logits[i] = dot(emb, f.prior_query);
    if (need_post) post_logits[i] = dot(emb, f.post_query);
    f.embs.push_back(std::move(emb));
  }
  f.prior_logprobs = log_softmax(prior_logits);
  if (need_post) f.post_logprobs = log_softmax(post_logits);
  return f;
}

Vec support_gen_logliks(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                        std::span<const int> support) {
  Vec ll(support.size());
  for (size_t i = 0; i < support.size(); ++i)
    ll[i] = log_likelihood(b.generator, ex.context, kb.passages[support[i]].tokens, ex.response);
  return ll;
}

/// Backpropagates logit cotangents of both truncated softmaxes into the
/// query encoders and the shared passage encoder, honoring freeze flags.
void support_backward(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                      std::span<const int> support, const SupportForward& f, const Vec& d_prior_logits,
                      const Vec& d_post_logits, BundleGrad& grad) {
  const int d = b.dim();
  const int n = static_cast<int>(support.size());

  if (!b.freeze_prior_ctx && !d_prior_logits.empty()) {
    Vec dq(d, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) dq[j] += d_prior_logits[i] * f.embs[i][j];
    encode_backward(b.prior_ctx, ex.context, dq, grad.prior_ctx);
  }
  if (!b.freeze_post_ctx && !d_post_logits.empty()) {
    Vec dq(d, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) dq[j] += d_post_logits[i] * f.embs[i][j];
    encode_backward(b.post_ctx, concat_xy(ex), dq, grad.post_ctx);
  }
  if (!b.freeze_passage) {
    Vec demb(d);
    for (int i = 0; i < n; ++i) {
      std::fill(demb.begin(), demb.end(), 0.0);
      bool any = false;
      if (!d_prior_logits.empty() && d_prior_logits[i] != 0.0) {
        for (int j = 0; j < d; ++j) demb[j] += d_prior_logits[i] * f.prior_query[j];
        any = true;
      }
      if (!d_post_logits.empty() && d_post_logits[i] != 0.0) {
        for (int j = 0; j < d; ++j) demb[j] += d_post_logits[i] * f.post_query[j];
        any = true;
      }
      if (any) encode_backward(b.passage, kb.passages[support[i]].tokens, demb, grad.passage);
    }
  }
}

void generator_backward_weighted(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                                 std::span<const int> support, const Vec& weights, BundleGrad& grad) {
  if (b.freeze_generator) return;
  for (size_t i = 0; i < support.size(); ++i) {
    if (weights[i] == 0.0) continue;
    log_likelihood_backward(b.generator, ex.context, kb.passages[support[i]].tokens, ex.response, weights[i],
                            grad.generator);
  }
}

std::vector<int> sorted_ids(const std::vector<std::pair<int, double>>& scored) {
  std::vector<int> ids;
  ids.reserve(scored.size());
  for (const auto& [id, s] : scored) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

int position_in(std::span<const int> sorted_support, int id) {
  auto it = std::lower_bound(sorted_support.begin(), sorted_support.end(), id);
  if (it == sorted_support.end() || *it != id) throw std::invalid_argument("objective: id not in support");
  return static_cast<int>(it - sorted_support.begin());
}

}  // namespace

// ---- objectives ----

StepLoss jsa_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                       std::span<const int> support, std::span<const int> chain, BundleGrad* grad) {
  if (chain.empty()) throw std::invalid_argument("jsa_objective: empty chain");
  const SupportForward f = support_forward(b, kb, ex, support, true);
  const Vec gen_ll = support_gen_logliks(b, kb, ex, support);

  const int n = static_cast<int>(support.size());
  Vec counts(n, 0.0);
  for (int id : chain) counts[position_in(support, id)] += 1.0;
  const double inv_m = 1.0 / static_cast<double>(chain.size());
  for (double& c : counts) c *= inv_m;

  StepLoss loss;
  for (int i = 0; i < n; ++i) {
    loss.prior_term += counts[i] * f.prior_logprobs[i];
    loss.gen_term += counts[i] * gen_ll[i];
    loss.post_term += counts[i] * f.post_logprobs[i];
  }
  loss.total = -(loss.prior_term + loss.gen_term + loss.post_term);

  if (grad) {
    Vec d_prior(n), d_post(n);
    for (int i = 0; i < n; ++i) {
      d_prior[i] = counts[i] - std::exp(f.prior_logprobs[i]);
      d_post[i] = counts[i] - std::exp(f.post_logprobs[i]);
    }
    support_backward(b, kb, ex, support, f, d_prior, d_post, *grad);
    generator_backward_weighted(b, kb, ex, support, counts, *grad);
  }
  return loss;
}

StepLoss tkm_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                       std::span<const int> support, BundleGrad* grad) {
  const SupportForward f = support_forward(b, kb, ex, support, false);
  const Vec gen_ll = support_gen_logliks(b, kb, ex, support);

  const int n = static_cast<int>(support.size());
  Vec log_joint(n);
  for (int i = 0; i < n; ++i) log_joint[i] = f.prior_logprobs[i] + gen_ll[i];
  const double log_marginal = log_sum_exp(log_joint);
  const Vec w = softmax_from_logits(log_joint);  // truncated posterior weights

  StepLoss loss;
  for (int i = 0; i < n; ++i) {
    loss.prior_term += w[i] * f.prior_logprobs[i];
    loss.gen_term += w[i] * gen_ll[i];
  }
  loss.total = -log_marginal;

  if (grad) {
    Vec d_prior(n);
    for (int i = 0; i < n; ++i) d_prior[i] = w[i] - std::exp(f.prior_logprobs[i]);
    support_backward(b, kb, ex, support, f, d_prior, Vec{}, *grad);
    generator_backward_weighted(b, kb, ex, support, w, *grad);
  }
  return loss;
}

StepLoss vrag_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                        std::span<const int> support, BundleGrad* grad) {
  const SupportForward f = support_forward(b, kb, ex, support, true);
  const Vec gen_ll = support_gen_logliks(b, kb, ex, support);

  const int n = static_cast<int>(support.size());
  Vec q(n), bracket(n);
  double elbo = 0.0;
  for (int i = 0; i < n; ++i) {
    q[i] = std::exp(f.post_logprobs[i]);
    bracket[i] = f.prior_logprobs[i] + gen_ll[i] - f.post_logprobs[i];
    elbo += q[i] * bracket[i];
  }

  StepLoss loss;
  for (int i = 0; i < n; ++i) {
    loss.prior_term += q[i] * f.prior_logprobs[i];
    loss.gen_term += q[i] * gen_ll[i];
    loss.post_term += q[i] * f.post_logprobs[i];
  }
  loss.total = -elbo;

  if (grad) {
    // full differentiation of the truncated proposal softmax: the entropy
    // part cancels, leaving q_a (bracket_a - elbo)
    Vec d_prior(n), d_post(n);
    for (int i = 0; i < n; ++i) {
      d_prior[i] = q[i] - std::exp(f.prior_logprobs[i]);
      d_post[i] = q[i] * (bracket[i] - elbo);
    }
    support_backward(b, kb, ex, support, f, d_prior, d_post, *grad);
    generator_backward_weighted(b, kb, ex, support, q, *grad);
  }
  return loss;
}

StepLoss reinforce_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                             std::span<const int> support, int sampled_id, double baseline,
                             BundleGrad* grad) {
  const SupportForward f = support_forward(b, kb, ex, support, false);
  const int pos = position_in(support, sampled_id);
  const double reward =
      log_likelihood(b.generator, ex.context, kb.passages[sampled_id].tokens, ex.response);
  const double advantage = reward - baseline;  // frozen scalar in the surrogate

  StepLoss loss;
  loss.prior_term = f.prior_logprobs[pos];
  loss.gen_term = reward;
  loss.total = -(advantage * f.prior_logprobs[pos] + reward);

  if (grad) {
    const int n = static_cast<int>(support.size());
    Vec d_prior(n);
    for (int i = 0; i < n; ++i)
      d_prior[i] = advantage * ((i == pos ? 1.0 : 0.0) - std::exp(f.prior_logprobs[i]));
    support_backward(b, kb, ex, support, f, d_prior, Vec{}, *grad);
    if (!b.freeze_generator)
      log_likelihood_backward(b.generator, ex.context, kb.passages[sampled_id].tokens, ex.response, 1.0,
                              grad->generator);
  }
  return loss;
}

StepLoss em_objective(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex, BundleGrad* grad) {
  if (kb.size() > 4096) throw std::invalid_argument("exact-em: knowledge base too large to enumerate");
  std::vector<int> all(kb.size());
  std::iota(all.begin(), all.end(), 0);

  const SupportForward f = support_forward(b, kb, ex, all, true);
  const Vec gen_ll = support_gen_logliks(b, kb, ex, all);

  const int n = kb.size();
  Vec log_joint(n);
  for (int i = 0; i < n; ++i) log_joint[i] = f.prior_logprobs[i] + gen_ll[i];
  const double log_marginal = log_sum_exp(log_joint);
  const Vec posterior = softmax_from_logits(log_joint);

  StepLoss loss;
  for (int i = 0; i < n; ++i) {
    loss.prior_term += posterior[i] * f.prior_logprobs[i];
    loss.gen_term += posterior[i] * gen_ll[i];
    loss.post_term += posterior[i] * f.post_logprobs[i];
  }
  loss.total = -log_marginal;

  if (grad) {
    // Fisher identity for the marginal terms; exact cross-entropy for the
    // posterior retriever
    Vec d_prior(n), d_post(n);
    for (int i = 0; i < n; ++i) {
      d_prior[i] = posterior[i] - std::exp(f.prior_logprobs[i]);
      d_post[i] = posterior[i] - std::exp(f.post_logprobs[i]);
    }
    support_backward(b, kb, ex, all, f, d_prior, d_post, *grad);
    generator_backward_weighted(b, kb, ex, all, posterior, *grad);
  }
  return loss;
}

// ---- enumeration helpers ----

Vec full_prior_logprobs(const ModelBundle& b, const KnowledgeBase& kb, std::span<const int> x) {
  const Vec q = encode(b.prior_ctx, x);
  Vec logits(kb.size());
  for (int i = 0; i < kb.size(); ++i) logits[i] = dot(encode(b.passage, kb.passages[i].tokens), q);
  return log_softmax(logits);
}

Vec full_post_logprobs(const ModelBundle& b, const KnowledgeBase& kb, std::span<const int> x,
                       std::span<const int> y) {
  std::vector<int> xy(x.begin(), x.end());
  xy.insert(xy.end(), y.begin(), y.end());
  const Vec q = encode(b.post_ctx, xy);
  Vec logits(kb.size());
  for (int i = 0; i < kb.size(); ++i) logits[i] = dot(encode(b.passage, kb.passages[i].tokens), q);
  return log_softmax(logits);
}

Vec all_gen_logliks(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex) {
  Vec ll(kb.size());
  for (int i = 0; i < kb.size(); ++i)
    ll[i] = log_likelihood(b.generator, ex.context, kb.passages[i].tokens, ex.response);
  return ll;
}

Vec exact_posterior(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex) {
  const Vec prior = full_prior_logprobs(b, kb, ex.context);
  const Vec gen_ll = all_gen_logliks(b, kb, ex);
  Vec log_joint(kb.size());
  for (int i = 0; i < kb.size(); ++i) log_joint[i] = prior[i] + gen_ll[i];
  return softmax_from_logits(log_joint);
}

double exact_marginal_loglik(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex) {
  const Vec prior = full_prior_logprobs(b, kb, ex.context);
  const Vec gen_ll = all_gen_logliks(b, kb, ex);
  Vec log_joint(kb.size());
  for (int i = 0; i < kb.size(); ++i) log_joint[i] = prior[i] + gen_ll[i];
  return log_sum_exp(log_joint);
}

// ---- stepping ----

StepLoss estimator_gradients(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                             const PassageIndex& index, const TrainConfig& cfg, TrainerState& state,
                             BundleGrad& grad) {
  validate_example(ex, kb);
  switch (cfg.estimator) {
    case Estimator::jsa: {
      const Vec prior_q = encode(b.prior_ctx, ex.context);
      const Vec post_q = encode(b.post_ctx, concat_xy(ex));
      CandidateSet cs = union_candidates(index, kb, b.passage, prior_q, post_q, cfg.k);
      cs.gen_loglik = support_gen_logliks(b, kb, ex, cs.ids);
      const std::vector<int> chain = run_chain(state.rng, cs, cfg.m);
      return jsa_objective(b, kb, ex, cs.ids, chain, &grad);
    }
    case Estimator::tkm: {
      const Vec prior_q = encode(b.prior_ctx, ex.context);
      const std::vector<int> support = sorted_ids(top_k(index, prior_q, cfg.k));
      return tkm_objective(b, kb, ex, support, &grad);
    }
    case Estimator::vrag: {
      const Vec post_q = encode(b.post_ctx, concat_xy(ex));
      const std::vector<int> support = sorted_ids(top_k(index, post_q, cfg.k));
      return vrag_objective(b, kb, ex, support, &grad);
    }
    case Estimator::reinforce: {
      const Vec prior_q = encode(b.prior_ctx, ex.context);
      const std::vector<int> support = sorted_ids(top_k(index, prior_q, cfg.k));
      // sample from the truncated prior under the live passage encoder
      Vec logits(support.size());
      for (size_t i = 0; i < support.size(); ++i)
        logits[i] = dot(encode(b.passage, kb.passages[support[i]].tokens), prior_q);
      const Vec probs = softmax_from_logits(logits);
      const int sampled = support[state.rng.next_categorical(probs)];
      const double baseline = state.baseline_count > 0 ? state.baseline_mean : 0.0;
      StepLoss loss = reinforce_objective(b, kb, ex, support, sampled, baseline, &grad);
      // running-mean baseline update with the fresh reward
      ++state.baseline_count;
      state.baseline_mean += (loss.gen_term - state.baseline_mean) / static_cast<double>(state.baseline_count);
      return loss;
    }
    case Estimator::exact_em: return em_objective(b, kb, ex, &grad);
  }
  throw std::logic_error("bad estimator");
}

namespace {

void sgd_encoder(EncoderParams& p, const EncoderGradient& g, double lr) {
  p.embedding.add_scaled(g.d_embedding, lr);
  p.projection.add_scaled(g.d_projection, lr);
}

bool encoder_grad_nonzero(const EncoderGradient& g) { return g.l2_norm_squared() != 0.0; }

}  // namespace

void apply_update(ModelBundle& b, const BundleGrad& grad, const TrainConfig& cfg) {
  if (!b.freeze_prior_ctx && encoder_grad_nonzero(grad.prior_ctx))
    sgd_encoder(b.prior_ctx, grad.prior_ctx, cfg.lr_retriever);
  if (!b.freeze_passage && encoder_grad_nonzero(grad.passage)) {
    sgd_encoder(b.passage, grad.passage, cfg.lr_passage > 0 ? cfg.lr_passage : cfg.lr_retriever);
    ++b.passage_version;
  }
  if (!b.freeze_post_ctx && encoder_grad_nonzero(grad.post_ctx))
    sgd_encoder(b.post_ctx, grad.post_ctx, cfg.lr_retriever);
  if (!b.freeze_generator && grad.generator.l2_norm_squared() != 0.0) {
    b.generator.token_embedding.add_scaled(grad.generator.d_token_embedding, cfg.lr_generator);
    b.generator.context_mixer.add_scaled(grad.generator.d_context_mixer, cfg.lr_generator);
    b.generator.output_head.add_scaled(grad.generator.d_output_head, cfg.lr_generator);
  }
}

StepLoss estimator_step(ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                        const PassageIndex& index, const TrainConfig& cfg, TrainerState& state,
                        BundleGrad* grad_out) {
  BundleGrad grad = BundleGrad::zeros_like(b);
  const StepLoss loss = estimator_gradients(b, kb, ex, index, cfg, state, grad);
  apply_update(b, grad, cfg);
  if (grad_out) *grad_out = std::move(grad);
  return loss;
}

// ---- training loop ----

namespace {

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) std::swap(idx[i], idx[rng.next_int(i + 1)]);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_trace_row(std::ostream* trace, long step, Estimator est, const StepLoss& loss,
                     const BundleGrad& grad) {
  if (!trace) return;
  json row{{"step", step},
           {"estimator", estimator_name(est)},
           {"prior_term", format_double(loss.prior_term)},
           {"gen_term", format_double(loss.gen_term)},
           {"post_term", format_double(loss.post_term)},
           {"total", format_double(loss.total)}};
  for (Block blk : {Block::prior_ctx, Block::passage, Block::post_ctx, Block::generator})
    row["grad_norm_" + block_name(blk)] = format_double(grad.block_norm(blk));
  (*trace) << row.dump() << "\n";
}

GradientReport make_norm_report(long step, Estimator est, const BundleGrad& grad) {
  GradientReport r;
  r.step = step;
  r.estimator = est;
  for (Block blk : {Block::prior_ctx, Block::passage, Block::post_ctx, Block::generator})
    r.norms[block_name(blk)] = grad.block_norm(blk);
  return r;
}

}  // namespace

TrainResult train(const ModelBundle& init, const Dataset& data, const KnowledgeBase& kb,
                  const TrainConfig& cfg, std::ostream* trace, const TrainHooks& hooks) {
  cfg.validate();
  validate_dataset(data, kb);

  ModelBundle b = init;
  b.freeze_passage = cfg.freeze_passage_encoder;

  PassageIndex index = build_index(kb, b.passage, b.passage_version);
  TrainerState state(mix_seed(cfg.seed, 0x1));
  Rng shuffle_rng(mix_seed(cfg.seed, 0x2));

  const int n = static_cast<int>(data.examples.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (long step = 1; step <= cfg.steps; ++step) {
    if ((step - 1) % n == 0) shuffle_indices(order, shuffle_rng);
    const Example& ex = data.examples[order[(step - 1) % n]];

    BundleGrad grad = BundleGrad::zeros_like(b);
    const StepLoss loss = estimator_gradients(b, kb, ex, index, cfg, state, grad);
    apply_update(b, grad, cfg);

    write_trace_row(trace, step, cfg.estimator, loss, grad);
    if (hooks.on_grad_report && step % cfg.grad_report_every == 0)
      hooks.on_grad_report(make_norm_report(step, cfg.estimator, grad));

    if (cfg.rebuild_every > 0 && step % cfg.rebuild_every == 0) {
      // training waits while the index is rebuilt from the live encoder
      index = build_index(kb, b.passage, b.passage_version);
      if (hooks.on_rebuild) hooks.on_rebuild(step, index, b);
    }
  }
  return {std::move(b), std::move(index), cfg.steps, state.rng.state_string()};
}

std::vector<int> concat_input(const PassageIndex& index, const KnowledgeBase& kb, const ModelBundle& b,
                              std::span<const int> x, int k) {
  const Vec prior_q = encode(b.prior_ctx, x);
  const auto top = top_k(index, prior_q, k);  // descending score, ties by id
  std::vector<int> input;
  for (const auto& [id, s] : top)
    input.insert(input.end(), kb.passages[id].tokens.begin(), kb.passages[id].tokens.end());
  input.insert(input.end(), x.begin(), x.end());
  return input;
}

TrainResult concat_posttrain(const ModelBundle& init, const Dataset& data, const KnowledgeBase& kb,
                             const TrainConfig& cfg, std::ostream* trace) {
  cfg.validate();
  validate_dataset(data, kb);

  ModelBundle b = init;
  b.freeze_prior_ctx = true;
  b.freeze_passage = true;
  b.freeze_post_ctx = true;
  if (b.freeze_generator) throw std::invalid_argument("concat_posttrain: generator is frozen");

  const PassageIndex index = build_index(kb, b.passage, b.passage_version);
  Rng shuffle_rng(mix_seed(cfg.seed, 0x3));

  const int n = static_cast<int>(data.examples.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  const std::vector<int> empty_passage;
  for (long step = 1; step <= cfg.steps; ++step) {
    if ((step - 1) % n == 0) shuffle_indices(order, shuffle_rng);
    const Example& ex = data.examples[order[(step - 1) % n]];

    const std::vector<int> input = concat_input(index, kb, b, ex.context, cfg.k);
    BundleGrad grad = BundleGrad::zeros_like(b);
    StepLoss loss;
    loss.gen_term = log_likelihood(b.generator, input, empty_passage, ex.response);
    loss.total = -loss.gen_term;
    log_likelihood_backward(b.generator, input, empty_passage, ex.response, 1.0, grad.generator);
    apply_update(b, grad, cfg);

    write_trace_row(trace, step, cfg.estimator, loss, grad);
  }
  return {std::move(b), index, cfg.steps, shuffle_rng.state_string()};
}

// ---- checkpointing ----

void save_checkpoint(const std::string& dir, const ModelBundle& b, const TrainConfig& cfg, long step,
                     const std::string& rng_state) {
  std::filesystem::create_directories(dir);
  save_tensors(dir + "/prior_ctx.tsr", encoder_tensors(b.prior_ctx));
  save_tensors(dir + "/passage.tsr", encoder_tensors(b.passage));
  save_tensors(dir + "/post_ctx.tsr", encoder_tensors(b.post_ctx));
  save_tensors(dir + "/generator.tsr", generator_tensors(b.generator));

  json manifest{{"format", "raglab-checkpoint"},
                {"version", 1},
                {"config", json::parse(cfg.canonical_json())},
                {"config_hash", cfg.config_hash()},
                {"step", step},
                {"rng_state", rng_state},
                {"passage_version", b.passage_version},
                {"freezes",
                 {{"prior_ctx", b.freeze_prior_ctx},
                  {"passage", b.freeze_passage},
                  {"post_ctx", b.freeze_post_ctx},
                  {"generator", b.freeze_generator}}}};
  write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  const json manifest = json::parse(read_file(dir + "/manifest.json"));
  if (manifest.value("format", "") != "raglab-checkpoint")
    throw std::runtime_error(dir + ": not a checkpoint directory");

  Checkpoint ck;
  const json& c = manifest.at("config");
  ck.config.estimator = estimator_from_name(c.at("estimator").get<std::string>());
  ck.config.k = c.at("k").get<int>();
  ck.config.m = c.at("m").get<int>();
  ck.config.lr_retriever = c.at("lr_retriever").get<double>();
  ck.config.lr_passage = c.at("lr_passage").get<double>();
  ck.config.lr_generator = c.at("lr_generator").get<double>();
  ck.config.steps = c.at("steps").get<long>();
  ck.config.seed = c.at("seed").get<uint64_t>();
  ck.config.rebuild_every = c.at("rebuild_every").get<int>();
  ck.config.freeze_passage_encoder = c.at("freeze_passage_encoder").get<bool>();
  ck.config.beam_width = c.at("beam_width").get<int>();
  ck.config.grad_report_every = c.at("grad_report_every").get<int>();
  ck.step = manifest.at("step").get<long>();
  ck.rng_state = manifest.at("rng_state").get<std::string>();

  ck.bundle.prior_ctx = encoder_from_tensors(load_tensors(dir + "/prior_ctx.tsr"));
  ck.bundle.passage = encoder_from_tensors(load_tensors(dir + "/passage.tsr"));
  ck.bundle.post_ctx = encoder_from_tensors(load_tensors(dir + "/post_ctx.tsr"));
  ck.bundle.generator = generator_from_tensors(load_tensors(dir + "/generator.tsr"));
  ck.bundle.passage_version = manifest.at("passage_version").get<long>();
  const json& fz = manifest.at("freezes");
  ck.bundle.freeze_prior_ctx = fz.at("prior_ctx").get<bool>();
  ck.bundle.freeze_passage = fz.at("passage").get<bool>();
  ck.bundle.freeze_post_ctx = fz.at("post_ctx").get<bool>();
  ck.bundle.freeze_generator = fz.at("generator").get<bool>();
  return ck;
}

}  // namespace raglab
