#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "raglab/diagnostics.hpp"
#include "raglab/eval.hpp"
#include "raglab/trainers.hpp"

using namespace raglab;

namespace {

struct Fixture {
  KnowledgeBase kb;
  Dataset data;
  ModelBundle bundle;
  PassageIndex index;
};

Fixture make_fixture(int n_passages, int vocab, int dim, uint64_t seed) {
  Fixture f;
  const SyntheticTask task = generate_synthetic_task(n_passages, vocab, {16, 4, 4}, seed);
  f.kb = task.kb;
  f.data = task.train;
  f.bundle = ModelBundle::init(vocab, dim, seed + 1);
  f.bundle.freeze_passage = false;
  f.index = build_index(f.kb, f.bundle.passage, 0);
  return f;
}

std::vector<int> all_ids(const KnowledgeBase& kb) {
  std::vector<int> ids(kb.size());
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

// truncated retriever log-probs over a support, assembled from public pieces
Vec truncated_prior_logprobs(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                             const std::vector<int>& support) {
  const Vec q = encode(b.prior_ctx, ex.context);
  Vec logits(support.size());
  for (size_t i = 0; i < support.size(); ++i)
    logits[i] = dot(encode(b.passage, kb.passages[support[i]].tokens), q);
  return log_softmax(logits);
}

Vec truncated_post_logprobs(const ModelBundle& b, const KnowledgeBase& kb, const Example& ex,
                            const std::vector<int>& support) {
  std::vector<int> xy = ex.context;
  xy.insert(xy.end(), ex.response.begin(), ex.response.end());
  const Vec q = encode(b.post_ctx, xy);
  Vec logits(support.size());
  for (size_t i = 0; i < support.size(); ++i)
    logits[i] = dot(encode(b.passage, kb.passages[support[i]].tokens), q);
  return log_softmax(logits);
}

// finite-difference check of `analytic` against f across all nine parameter
// matrices
void check_all_blocks_fd(ModelBundle& b, const BundleGrad& analytic, const std::function<double()>& f) {
  const std::vector<std::pair<const Matrix*, Matrix*>> blocks = {
      {&analytic.prior_ctx.d_embedding, &b.prior_ctx.embedding},
      {&analytic.prior_ctx.d_projection, &b.prior_ctx.projection},
      {&analytic.passage.d_embedding, &b.passage.embedding},
      {&analytic.passage.d_projection, &b.passage.projection},
      {&analytic.post_ctx.d_embedding, &b.post_ctx.embedding},
      {&analytic.post_ctx.d_projection, &b.post_ctx.projection},
      {&analytic.generator.d_token_embedding, &b.generator.token_embedding},
      {&analytic.generator.d_context_mixer, &b.generator.context_mixer},
      {&analytic.generator.d_output_head, &b.generator.output_head},
  };
  for (size_t bi = 0; bi < blocks.size(); ++bi) {
    const Matrix fd = oracles::fd_gradient(f, *blocks[bi].second);
    const auto check = oracles::fd_compare(*blocks[bi].first, fd);
    CHECK_MESSAGE(check.ok, "block ", bi, " entry ", check.index, ": analytic=", check.analytic,
                  " fd=", check.fd);
  }
}

}  // namespace

TEST_SUITE_BEGIN("trainers");

TEST_CASE("jsa loss is the three-term sum when the chain is degenerate") {
  Fixture f = make_fixture(6, 16, 4, 2024);
  const Example& ex = f.data.examples[0];
  const std::vector<int> support{0, 2, 3, 5};
  const int target = 3;
  const std::vector<int> chain(7, target);

  const StepLoss loss = jsa_objective(f.bundle, f.kb, ex, support, chain, nullptr);

  const Vec prior_lp = truncated_prior_logprobs(f.bundle, f.kb, ex, support);
  const Vec post_lp = truncated_post_logprobs(f.bundle, f.kb, ex, support);
  const double gen_ll =
      log_likelihood(f.bundle.generator, ex.context, f.kb.passages[target].tokens, ex.response);
  const int pos = 2;  // index of id 3 in support
  CHECK(loss.total == doctest::Approx(-(prior_lp[pos] + gen_ll + post_lp[pos])).epsilon(1e-12));
  CHECK(loss.prior_term == doctest::Approx(prior_lp[pos]).epsilon(1e-12));
  CHECK(loss.gen_term == doctest::Approx(gen_ll).epsilon(1e-12));
  CHECK(loss.post_term == doctest::Approx(post_lp[pos]).epsilon(1e-12));
}

TEST_CASE("jsa loss decomposition identity holds on random chains") {
  Fixture f = make_fixture(8, 16, 4, 31);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Example& ex = f.data.examples[trial % f.data.examples.size()];
    const std::vector<int> support = all_ids(f.kb);
    std::vector<int> chain(1 + rng.next_int(20));
    for (int& c : chain) c = rng.next_int(f.kb.size());
    const StepLoss loss = jsa_objective(f.bundle, f.kb, ex, support, chain, nullptr);
    CHECK(std::abs(loss.total + (loss.prior_term + loss.gen_term + loss.post_term)) < 1e-9);
  }
}

TEST_CASE("jsa gradients match finite differences with the chain frozen") {
  Fixture f = make_fixture(6, 12, 3, 77);
  const Example& ex = f.data.examples[1];
  const std::vector<int> support{0, 1, 3, 4};
  const std::vector<int> chain{3, 0, 3, 3, 1};

  BundleGrad grad = BundleGrad::zeros_like(f.bundle);
  jsa_objective(f.bundle, f.kb, ex, support, chain, &grad);

  auto objective = [&]() { return -jsa_objective(f.bundle, f.kb, ex, support, chain, nullptr).total; };
  check_all_blocks_fd(f.bundle, grad, objective);
}

TEST_CASE("tkm with full support equals the exact negative marginal log-likelihood") {
  Fixture f = make_fixture(7, 16, 4, 99);
  const Example& ex = f.data.examples[2];
  const StepLoss loss = tkm_objective(f.bundle, f.kb, ex, all_ids(f.kb), nullptr);
  const double marginal = oracles::ref_exact_marginal(f.bundle, f.kb, ex);
  CHECK(loss.total == doctest::Approx(-marginal).epsilon(1e-10));
}

TEST_CASE("tkm with a single candidate reduces to the generator NLL") {
  Fixture f = make_fixture(6, 16, 4, 101);
  const Example& ex = f.data.examples[0];
  const std::vector<int> support{4};
  const StepLoss loss = tkm_objective(f.bundle, f.kb, ex, support, nullptr);
  const double gen_ll =
      log_likelihood(f.bundle.generator, ex.context, f.kb.passages[4].tokens, ex.response);
  CHECK(loss.total == doctest::Approx(-gen_ll).epsilon(1e-12));
}

TEST_CASE("tkm truncated sum matches hand enumeration at K=2, N=4") {
  Fixture f = make_fixture(4, 16, 4, 103);
  const Example& ex = f.data.examples[3];
  const std::vector<int> support{1, 2};

  const StepLoss loss = tkm_objective(f.bundle, f.kb, ex, support, nullptr);

  const Vec prior_lp = truncated_prior_logprobs(f.bundle, f.kb, ex, support);
  double sum = 0.0;
  for (size_t i = 0; i < support.size(); ++i) {
    const double ll = oracles::ref_gen_loglik(f.bundle.generator, ex.context,
                                              f.kb.passages[support[i]].tokens, ex.response);
    sum += std::exp(prior_lp[i]) * std::exp(ll);
  }
  CHECK(loss.total == doctest::Approx(-std::log(sum)).epsilon(1e-10));
}

TEST_CASE("tkm gradients match finite differences") {
  Fixture f = make_fixture(6, 12, 3, 107);
  const Example& ex = f.data.examples[4];
  const std::vector<int> support{0, 2, 5};
  BundleGrad grad = BundleGrad::zeros_like(f.bundle);
  tkm_objective(f.bundle, f.kb, ex, support, &grad);
  auto objective = [&]() { return -tkm_objective(f.bundle, f.kb, ex, support, nullptr).total; };
  check_all_blocks_fd(f.bundle, grad, objective);
}

TEST_CASE("vrag gradients match finite differences") {
  Fixture f = make_fixture(6, 12, 3, 109);
  const Example& ex = f.data.examples[5];
  const std::vector<int> support{1, 2, 4, 5};
  BundleGrad grad = BundleGrad::zeros_like(f.bundle);
  vrag_objective(f.bundle, f.kb, ex, support, &grad);
  auto objective = [&]() { return -vrag_objective(f.bundle, f.kb, ex, support, nullptr).total; };
  check_all_blocks_fd(f.bundle, grad, objective);
}

TEST_CASE("vrag ELBO is bounded by the marginal with gap equal to KL") {
  Fixture f = make_fixture(3, 16, 4, 113);
  for (const Example& ex : {f.data.examples[0], f.data.examples[7]}) {
    const std::vector<int> support = all_ids(f.kb);
    const StepLoss loss = vrag_objective(f.bundle, f.kb, ex, support, nullptr);
    const double elbo = -loss.total;
    const double marginal = oracles::ref_exact_marginal(f.bundle, f.kb, ex);
    CHECK(elbo <= marginal + 1e-10);

    // KL(q || exact posterior) by enumeration
    const Vec q_lp = truncated_post_logprobs(f.bundle, f.kb, ex, support);
    const Vec posterior = oracles::ref_exact_posterior(f.bundle, f.kb, ex);
    double kl = 0.0;
    for (int i = 0; i < f.kb.size(); ++i) kl += std::exp(q_lp[i]) * (q_lp[i] - std::log(posterior[i]));
    CHECK(marginal - elbo == doctest::Approx(kl).epsilon(1e-8));
  }
}

TEST_CASE("vrag ELBO equals the marginal when q equals the posterior") {
  // all-zero parameters: prior, likelihood, and proposal are all uniform,
  // so q is exactly the posterior
  Fixture f = make_fixture(5, 16, 4, 127);
  f.bundle.prior_ctx.embedding.fill(0.0);
  f.bundle.prior_ctx.projection.fill(0.0);
  f.bundle.passage.embedding.fill(0.0);
  f.bundle.passage.projection.fill(0.0);
  f.bundle.post_ctx.embedding.fill(0.0);
  f.bundle.post_ctx.projection.fill(0.0);
  f.bundle.generator.token_embedding.fill(0.0);
  f.bundle.generator.context_mixer.fill(0.0);
  f.bundle.generator.output_head.fill(0.0);

  const Example& ex = f.data.examples[0];
  const StepLoss loss = vrag_objective(f.bundle, f.kb, ex, all_ids(f.kb), nullptr);
  const double marginal = oracles::ref_exact_marginal(f.bundle, f.kb, ex);
  CHECK(-loss.total == doctest::Approx(marginal).epsilon(1e-8));
}

TEST_CASE("vrag ELBO collapses to the single-candidate objective when q concentrates") {
  // Hadamard-pattern encoders: the posterior query aligns with passage 0's
  // embedding and is orthogonal to the others, so q piles onto passage 0
  const int dim = 16;
  KnowledgeBase kb;
  kb.vocab_size = 17;
  for (int i = 0; i < 8; ++i) kb.passages.push_back({i, {i}});
  kb.validate();

  auto pattern = [&](int t, int i) {
    return __builtin_popcount(static_cast<unsigned>(t & i)) % 2 == 0 ? 1.0 : -1.0;
  };
  ModelBundle b = ModelBundle::init(kb.vocab_size, dim, 1);
  for (int t = 0; t < kb.vocab_size; ++t)
    for (int i = 0; i < dim; ++i) {
      b.passage.embedding(t, i) = 0.5 * pattern(t % 16, i);
      b.post_ctx.embedding(t, i) = 0.5 * pattern(0, i);  // every token points at passage 0
    }
  b.passage.projection.fill(0.0);
  b.post_ctx.projection.fill(0.0);
  for (int i = 0; i < dim; ++i) {
    b.passage.projection(i, i) = 10.0;
    b.post_ctx.projection(i, i) = 10.0;
  }

  Example ex;
  ex.context = {3, 5};
  ex.response = {1, 2};
  const std::vector<int> support = {0, 1, 2, 3, 4, 5, 6, 7};

  const Vec q_lp = truncated_post_logprobs(b, kb, ex, support);
  CHECK(std::exp(q_lp[0]) > 1.0 - 1e-5);

  const StepLoss loss = vrag_objective(b, kb, ex, support, nullptr);
  const Vec prior_lp = truncated_prior_logprobs(b, kb, ex, support);
  const double gen_ll = log_likelihood(b.generator, ex.context, kb.passages[0].tokens, ex.response);
  CHECK(-loss.total == doctest::Approx(prior_lp[0] + gen_ll).epsilon(1e-3));
}

TEST_CASE("reinforce with a centered constant reward has an exactly zero retriever gradient") {
  Fixture f = make_fixture(6, 16, 4, 131);
  // zero generator: every candidate's reward is |y| log(1/V)
  f.bundle.generator.token_embedding.fill(0.0);
  f.bundle.generator.context_mixer.fill(0.0);
  f.bundle.generator.output_head.fill(0.0);
  const Example& ex = f.data.examples[0];
  const double reward = static_cast<double>(ex.response.size()) * std::log(1.0 / 16.0);

  BundleGrad grad = BundleGrad::zeros_like(f.bundle);
  reinforce_objective(f.bundle, f.kb, ex, all_ids(f.kb), 2, reward, &grad);
  CHECK(grad.prior_ctx.l2_norm_squared() == 0.0);
  CHECK(grad.passage.l2_norm_squared() == 0.0);
}

TEST_CASE("reinforce gradients match finite differences with sample and advantage frozen") {
  Fixture f = make_fixture(6, 12, 3, 137);
  const Example& ex = f.data.examples[2];
  const std::vector<int> support{0, 1, 4};
  const int sampled = 4;
  const double baseline = -3.0;

  BundleGrad grad = BundleGrad::zeros_like(f.bundle);
  reinforce_objective(f.bundle, f.kb, ex, support, sampled, baseline, &grad);

  // surrogate with the advantage frozen at the base parameters
  const double reward0 =
      log_likelihood(f.bundle.generator, ex.context, f.kb.passages[sampled].tokens, ex.response);
  const double advantage0 = reward0 - baseline;
  auto objective = [&]() {
    const Vec prior_lp = truncated_prior_logprobs(f.bundle, f.kb, ex, support);
    const double reward =
        log_likelihood(f.bundle.generator, ex.context, f.kb.passages[sampled].tokens, ex.response);
    return advantage0 * prior_lp[2] + reward;
  };
  check_all_blocks_fd(f.bundle, grad, objective);
}

TEST_CASE("reinforce expectation matches the truncated-marginal gradient") {
  Fixture f = make_fixture(6, 12, 3, 139);
  const Example& ex = f.data.examples[1];
  const std::vector<int> support = all_ids(f.kb);

  // exact oracle: tkm over the same support is the truncated marginal
  BundleGrad exact = BundleGrad::zeros_like(f.bundle);
  tkm_objective(f.bundle, f.kb, ex, support, &exact);

  // exact expected reward as the fixed baseline
  const Vec prior_lp = truncated_prior_logprobs(f.bundle, f.kb, ex, support);
  Vec rewards(support.size());
  double baseline = 0.0;
  for (size_t i = 0; i < support.size(); ++i) {
    rewards[i] =
        log_likelihood(f.bundle.generator, ex.context, f.kb.passages[support[i]].tokens, ex.response);
    baseline += std::exp(prior_lp[i]) * rewards[i];
  }

  const int replicates = 10000;
  Rng rng(733);
  Vec probs(support.size());
  for (size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(prior_lp[i]);

  BundleGrad mean = BundleGrad::zeros_like(f.bundle);
  std::vector<BundleGrad> reps;
  reps.reserve(replicates);
  for (int r = 0; r < replicates; ++r) {
    const int sampled = support[rng.next_categorical(probs)];
    BundleGrad g = BundleGrad::zeros_like(f.bundle);
    reinforce_objective(f.bundle, f.kb, ex, support, sampled, baseline, &g);
    mean.add_scaled(g, 1.0 / replicates);
    reps.push_back(std::move(g));
  }

  for (Block blk : {Block::prior_ctx, Block::passage, Block::generator}) {
    double var = 0.0;
    for (const BundleGrad& g : reps) {
      BundleGrad dev = g;
      dev.add_scaled(mean, -1.0);
      var += dev.block_norm(blk) * dev.block_norm(blk);
    }
    var /= (replicates - 1);
    const double se = std::sqrt(var / replicates);
    BundleGrad diff = mean;
    diff.add_scaled(exact, -1.0);
    CHECK_MESSAGE(diff.block_norm(blk) <= 3.0 * se + 1e-12, block_name(blk),
                  ": |mean-exact|=", diff.block_norm(blk), " 3se=", 3.0 * se);
  }
}

TEST_CASE("exact EM equals a supervised step when the posterior is numerically one-hot") {
  // passages read out distinct Hadamard patterns; the generator deciphers
  // the pooled pattern, so likelihood gaps reach hundreds of nats
  const int dim = 16;
  KnowledgeBase kb;
  kb.vocab_size = 17;
  for (int i = 0; i < 6; ++i) kb.passages.push_back({i, {i}});
  kb.validate();

  auto pattern = [&](int t, int i) {
    return __builtin_popcount(static_cast<unsigned>(t & i)) % 2 == 0 ? 1.0 : -1.0;
  };
  ModelBundle b = ModelBundle::init(kb.vocab_size, dim, 3);
  b.freeze_passage = false;
  b.generator.token_embedding.fill(0.0);
  for (int t = 0; t < 16; ++t)
    for (int i = 0; i < dim; ++i) b.generator.token_embedding(t, i) = 0.5 * pattern(t, i);
  for (int i = 0; i < dim; ++i) b.generator.token_embedding(16, i) = 0.0;  // neutral context token
  b.generator.context_mixer.fill(0.0);
  for (int i = 0; i < dim; ++i) b.generator.context_mixer(i, i) = 40.0;
  b.generator.output_head.fill(0.0);
  for (int i = 0; i < dim; ++i)
    for (int v = 0; v < 16; ++v) b.generator.output_head(i, v) = 4.0 * pattern(v, i);

  Example ex;
  ex.context = {16};
  ex.response = {0, 0, 0};  // passage 0 predicts its own pattern token

  const Vec posterior = exact_posterior(b, kb, ex);
  REQUIRE(posterior[0] >= 1.0 - 1e-12);

  BundleGrad em = BundleGrad::zeros_like(b);
  em_objective(b, kb, ex, &em);

  // supervised oracle on (x, h=0, y): full-softmax cross-entropy toward
  // passage 0 for both retrievers plus the generator term
  BundleGrad sup = BundleGrad::zeros_like(b);
  {
    const std::vector<int> support = all_ids(kb);
    const Vec prior_lp = truncated_prior_logprobs(b, kb, ex, support);
    const Vec post_lp = truncated_post_logprobs(b, kb, ex, support);
    const Vec prior_q = encode(b.prior_ctx, ex.context);
    std::vector<int> xy = ex.context;
    xy.insert(xy.end(), ex.response.begin(), ex.response.end());
    const Vec post_q = encode(b.post_ctx, xy);

    Vec dq_prior(dim, 0.0), dq_post(dim, 0.0);
    for (int i = 0; i < kb.size(); ++i) {
      const double d_prior = (i == 0 ? 1.0 : 0.0) - std::exp(prior_lp[i]);
      const double d_post = (i == 0 ? 1.0 : 0.0) - std::exp(post_lp[i]);
      const Vec emb = encode(b.passage, kb.passages[i].tokens);
      Vec demb(dim);
      for (int j = 0; j < dim; ++j) {
        dq_prior[j] += d_prior * emb[j];
        dq_post[j] += d_post * emb[j];
        demb[j] = d_prior * prior_q[j] + d_post * post_q[j];
      }
      encode_backward(b.passage, kb.passages[i].tokens, demb, sup.passage);
    }
    encode_backward(b.prior_ctx, ex.context, dq_prior, sup.prior_ctx);
    encode_backward(b.post_ctx, xy, dq_post, sup.post_ctx);
    log_likelihood_backward(b.generator, ex.context, kb.passages[0].tokens, ex.response, 1.0,
                            sup.generator);
  }

  BundleGrad diff = em;
  diff.add_scaled(sup, -1.0);
  for (Block blk : {Block::prior_ctx, Block::passage, Block::post_ctx, Block::generator})
    CHECK(diff.block_norm(blk) <= 1e-12 * std::max(1.0, sup.block_norm(blk)));
}

TEST_CASE("exact EM gradient matches finite differences of marginal plus frozen-posterior CE") {
  Fixture f = make_fixture(5, 12, 3, 149);
  const Example& ex = f.data.examples[0];

  BundleGrad grad = BundleGrad::zeros_like(f.bundle);
  em_objective(f.bundle, f.kb, ex, &grad);

  const Vec frozen_posterior = exact_posterior(f.bundle, f.kb, ex);
  auto objective = [&]() {
    const Vec post_lp = full_post_logprobs(f.bundle, f.kb, ex.context, ex.response);
    double ce = 0.0;
    for (int i = 0; i < f.kb.size(); ++i) ce += frozen_posterior[i] * post_lp[i];
    return exact_marginal_loglik(f.bundle, f.kb, ex) + ce;
  };
  check_all_blocks_fd(f.bundle, grad, objective);
}

TEST_CASE("a small enough full-batch exact EM step does not decrease the total marginal") {
  const SyntheticTask task = generate_synthetic_task(16, 32, {24, 8, 8}, 4242);
  ModelBundle b = ModelBundle::init(32, 8, 7);
  b.freeze_passage = false;

  auto total_marginal = [&](const ModelBundle& bb) {
    double s = 0.0;
    for (const Example& ex : task.train.examples) s += exact_marginal_loglik(bb, task.kb, ex);
    return s;
  };

  BundleGrad batch = BundleGrad::zeros_like(b);
  for (const Example& ex : task.train.examples) {
    BundleGrad g = BundleGrad::zeros_like(b);
    em_objective(b, task.kb, ex, &g);
    batch.add_scaled(g, 1.0 / static_cast<double>(task.train.examples.size()));
  }

  const double before = total_marginal(b);
  bool improved = false;
  double rate = 0.5;
  for (int tries = 0; tries < 20 && !improved; ++tries, rate *= 0.5) {
    ModelBundle trial = b;
    TrainConfig cfg;
    cfg.lr_retriever = rate;
    cfg.lr_generator = rate;
    trial.freeze_passage = false;
    apply_update(trial, batch, cfg);
    if (total_marginal(trial) >= before) improved = true;
  }
  CHECK(improved);
}

TEST_CASE("jsa chain-averaged gradient is unbiased against the Fisher oracle") {
  const SyntheticTask task = generate_synthetic_task(12, 16, {8, 2, 2}, 555);
  ModelBundle b = ModelBundle::init(16, 4, 556);
  b.freeze_passage = false;
  const Example& ex = task.train.examples[0];
  const PassageIndex index = build_index(task.kb, b.passage, 0);

  TrainConfig cfg;
  cfg.estimator = Estimator::jsa;
  cfg.k = task.kb.size();  // union = full KB
  cfg.m = 3;
  cfg.freeze_passage_encoder = false;

  const BundleGrad exact = exact_gradient_oracle(b, task.kb, ex);

  const int replicates = 10000;
  Rng master(4321);
  BundleGrad mean = BundleGrad::zeros_like(b);
  std::vector<BundleGrad> reps;
  reps.reserve(replicates);
  for (int r = 0; r < replicates; ++r) {
    TrainerState state(master.next_u64());
    BundleGrad g = BundleGrad::zeros_like(b);
    estimator_gradients(b, task.kb, ex, index, cfg, state, g);
    mean.add_scaled(g, 1.0 / replicates);
    reps.push_back(std::move(g));
  }

  for (Block blk : {Block::prior_ctx, Block::passage, Block::post_ctx, Block::generator}) {
    double var = 0.0;
    for (const BundleGrad& g : reps) {
      BundleGrad dev = g;
      dev.add_scaled(mean, -1.0);
      var += dev.block_norm(blk) * dev.block_norm(blk);
    }
    var /= (replicates - 1);
    const double se = std::sqrt(var / replicates);
    BundleGrad diff = mean;
    diff.add_scaled(exact, -1.0);
    CHECK_MESSAGE(diff.block_norm(blk) <= 3.0 * se + 1e-12, block_name(blk),
                  ": |mean-exact|=", diff.block_norm(blk), " 3se=", 3.0 * se);
  }
}

TEST_CASE("train with zero steps returns the initial bundle") {
  const SyntheticTask task = generate_synthetic_task(8, 16, {8, 2, 2}, 11);
  const ModelBundle init = ModelBundle::init(16, 4, 12);
  TrainConfig cfg;
  cfg.steps = 0;
  const TrainResult r = train(init, task.train, task.kb, cfg);
  CHECK(r.bundle.prior_ctx == init.prior_ctx);
  CHECK(r.bundle.passage == init.passage);
  CHECK(r.bundle.post_ctx == init.post_ctx);
  CHECK(r.bundle.generator == init.generator);
}

TEST_CASE("identical config and seed give bit-identical checkpoints and traces") {
  const SyntheticTask task = generate_synthetic_task(8, 16, {12, 4, 4}, 321);
  for (Estimator est : {Estimator::jsa, Estimator::tkm, Estimator::vrag, Estimator::reinforce,
                        Estimator::exact_em}) {
    TrainConfig cfg;
    cfg.estimator = est;
    cfg.steps = 25;
    cfg.k = 4;
    cfg.m = 5;
    cfg.seed = 777;

    const ModelBundle init = ModelBundle::init(16, 4, 13);
    std::ostringstream trace_a, trace_b;
    const TrainResult a = train(init, task.train, task.kb, cfg, &trace_a);
    const TrainResult b = train(init, task.train, task.kb, cfg, &trace_b);

    CHECK(trace_a.str() == trace_b.str());
    CHECK(tensors_to_string(encoder_tensors(a.bundle.prior_ctx)) ==
          tensors_to_string(encoder_tensors(b.bundle.prior_ctx)));
    CHECK(tensors_to_string(encoder_tensors(a.bundle.post_ctx)) ==
          tensors_to_string(encoder_tensors(b.bundle.post_ctx)));
    CHECK(tensors_to_string(generator_tensors(a.bundle.generator)) ==
          tensors_to_string(generator_tensors(b.bundle.generator)));
    CHECK(a.rng_state == b.rng_state);
  }
}

TEST_CASE("frozen blocks stay bit-identical through training") {
  const SyntheticTask task = generate_synthetic_task(8, 16, {12, 4, 4}, 99);
  ModelBundle init = ModelBundle::init(16, 4, 98);
  init.freeze_prior_ctx = true;
  init.freeze_generator = true;

  TrainConfig cfg;
  cfg.estimator = Estimator::jsa;
  cfg.steps = 40;
  cfg.k = 4;
  cfg.m = 5;
  cfg.freeze_passage_encoder = true;

  const TrainResult r = train(init, task.train, task.kb, cfg);
  CHECK(r.bundle.prior_ctx == init.prior_ctx);
  CHECK(r.bundle.passage == init.passage);
  CHECK(r.bundle.generator == init.generator);
  CHECK(!(r.bundle.post_ctx == init.post_ctx));  // the only unfrozen block moved
}

TEST_CASE("rebuild schedule fires at multiples of the interval and refreshes the index") {
  const SyntheticTask task = generate_synthetic_task(8, 16, {12, 4, 4}, 55);
  const ModelBundle init = ModelBundle::init(16, 4, 54);

  TrainConfig cfg;
  cfg.estimator = Estimator::jsa;
  cfg.steps = 250;
  cfg.k = 4;
  cfg.m = 3;
  cfg.rebuild_every = 100;
  cfg.freeze_passage_encoder = false;

  std::vector<long> rebuild_steps;
  TrainHooks hooks;
  hooks.on_rebuild = [&](long step, const PassageIndex& index, const ModelBundle& bundle) {
    rebuild_steps.push_back(step);
    const PassageIndex fresh = build_index(task.kb, bundle.passage, bundle.passage_version);
    CHECK(index.embeddings == fresh.embeddings);
    CHECK(index.built_from == bundle.passage_version);
  };
  train(init, task.train, task.kb, cfg, nullptr, hooks);
  CHECK(rebuild_steps == std::vector<long>{100, 200});

  // interval longer than the run: no rebuilds
  rebuild_steps.clear();
  cfg.steps = 50;
  train(init, task.train, task.kb, cfg, nullptr, hooks);
  CHECK(rebuild_steps.empty());

  // rebuilding with a frozen passage encoder is a configuration error
  cfg.freeze_passage_encoder = true;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("trained exact EM posterior concentrates on the gold passage") {
  const SyntheticTask task = generate_synthetic_task(16, 32, {64, 16, 16}, 7);
  TrainConfig cfg;
  cfg.estimator = Estimator::exact_em;
  cfg.steps = 4000;
  cfg.lr_retriever = 0.2;
  cfg.lr_generator = 0.03;
  cfg.seed = 70;

  const ModelBundle init = ModelBundle::init(32, 16, 71);
  const TrainResult r = train(init, task.train, task.kb, cfg);

  int hits = 0;
  for (const Example& ex : task.train.examples) {
    const Vec posterior = exact_posterior(r.bundle, task.kb, ex);
    int argmax = 0;
    for (int i = 1; i < task.kb.size(); ++i)
      if (posterior[i] > posterior[argmax]) argmax = i;
    if (argmax == *ex.gold_passage_id) ++hits;
  }
  CHECK(hits >= 0.9 * task.train.examples.size());
}

TEST_CASE("concat post-training with k=1 is generator fine-tuning on the top passage") {
  const SyntheticTask task = generate_synthetic_task(8, 16, {4, 2, 2}, 61);
  Dataset one;
  one.split = Split::train;
  one.examples = {task.train.examples[0]};

  ModelBundle init = ModelBundle::init(16, 4, 60);
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.k = 1;
  cfg.lr_generator = 0.1;
  cfg.seed = 5;

  const TrainResult r = concat_posttrain(init, one, task.kb, cfg);

  // manual oracle: one SGD step on log p(y | top-1 passage ++ x)
  const PassageIndex index = build_index(task.kb, init.passage, 0);
  const std::vector<int> input = concat_input(index, task.kb, init, one.examples[0].context, 1);
  GeneratorGradient g = GeneratorGradient::zeros_like(init.generator);
  log_likelihood_backward(init.generator, input, std::vector<int>{}, one.examples[0].response, 1.0, g);
  GeneratorParams expect = init.generator;
  expect.token_embedding.add_scaled(g.d_token_embedding, 0.1);
  expect.context_mixer.add_scaled(g.d_context_mixer, 0.1);
  expect.output_head.add_scaled(g.d_output_head, 0.1);

  CHECK(r.bundle.generator == expect);
  CHECK(r.bundle.prior_ctx == init.prior_ctx);
  CHECK(r.bundle.passage == init.passage);
  CHECK(r.bundle.post_ctx == init.post_ctx);
}

TEST_CASE("the index stamp tracks the passage-encoder version") {
  const SyntheticTask task = generate_synthetic_task(8, 16, {12, 4, 4}, 21);
  const ModelBundle init = ModelBundle::init(16, 6, 22);

  // frozen passage encoder: the version never moves, the index stays fresh
  TrainConfig cfg;
  cfg.estimator = Estimator::jsa;
  cfg.steps = 60;
  cfg.k = 4;
  cfg.m = 5;
  const TrainResult frozen = train(init, task.train, task.kb, cfg);
  CHECK(frozen.bundle.passage_version == init.passage_version);
  CHECK(frozen.index.built_from == frozen.bundle.passage_version);

  // unfrozen without rebuilds: the index goes stale and the stamp shows it
  TrainConfig hot = cfg;
  hot.freeze_passage_encoder = false;
  const TrainResult stale = train(init, task.train, task.kb, hot);
  CHECK(stale.bundle.passage_version > 0);
  CHECK(stale.index.built_from < stale.bundle.passage_version);
}

TEST_CASE("checkpoints round trip through the directory format") {
  const std::string dir = (std::filesystem::temp_directory_path() / "raglab_test_ckpt").string();
  std::filesystem::remove_all(dir);

  ModelBundle b = ModelBundle::init(16, 4, 9);
  b.freeze_passage = false;
  b.passage_version = 3;
  TrainConfig cfg;
  cfg.estimator = Estimator::vrag;
  cfg.steps = 12;
  cfg.seed = 88;

  save_checkpoint(dir, b, cfg, 12, Rng(88).state_string());
  const Checkpoint ck = load_checkpoint(dir);
  CHECK(ck.bundle.prior_ctx == b.prior_ctx);
  CHECK(ck.bundle.passage == b.passage);
  CHECK(ck.bundle.post_ctx == b.post_ctx);
  CHECK(ck.bundle.generator == b.generator);
  CHECK(ck.bundle.passage_version == 3);
  CHECK(ck.bundle.freeze_passage == false);
  CHECK(ck.step == 12);
  CHECK(ck.config.estimator == Estimator::vrag);
  CHECK(ck.config.seed == 88);
  CHECK(ck.config.config_hash() == cfg.config_hash());
  CHECK(ck.rng_state == Rng(88).state_string());

  std::filesystem::remove_all(dir);
}

TEST_SUITE_END();
