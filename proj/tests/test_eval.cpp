#include <doctest.h>

#include "oracles.hpp"
#include "raglab/eval.hpp"

using namespace raglab;

namespace {

// bundle whose prior query for context {t} points straight at passage t
ModelBundle pointer_bundle(int n, int dim) {
  ModelBundle b = ModelBundle::init(n + 1, dim, 1);
  b.prior_ctx.embedding.fill(0.0);
  b.prior_ctx.projection.fill(0.0);
  for (int t = 0; t < std::min(n, dim); ++t) b.prior_ctx.embedding(t, t) = 0.5;
  for (int i = 0; i < dim; ++i) b.prior_ctx.projection(i, i) = 2.0;
  return b;
}

PassageIndex identity_index(int n, int dim) {
  PassageIndex index;
  index.embeddings = Matrix(n, dim);
  for (int i = 0; i < std::min(n, dim); ++i) index.embeddings(i, i) = 1.0;
  return index;
}

Dataset single_token_contexts(int n, int response_token = 0) {
  Dataset ds;
  ds.split = Split::dev;
  for (int g = 0; g < n; ++g) {
    Example ex;
    ex.context = {g};
    ex.response = {response_token};
    ex.gold_passage_id = g;
    ds.examples.push_back(ex);
  }
  return ds;
}

}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("a retriever that always ranks gold first scores perfect metrics") {
  const int n = 8, dim = 8;
  const ModelBundle b = pointer_bundle(n, dim);
  const PassageIndex index = identity_index(n, dim);
  const Dataset ds = single_token_contexts(n);
  const RetrievalMetrics m = retrieval_metrics(b, ds, index, RetrieverKind::prior);
  CHECK(m.recall_at_1 == 1.0);
  CHECK(m.recall_at_10 == 1.0);
  CHECK(m.mrr_at_10 == 1.0);
}

TEST_CASE("gold always at rank 2 gives R@1=0, R@10=1, MRR=0.5") {
  const int n = 8, dim = 8;
  const ModelBundle b = pointer_bundle(n, dim);
  PassageIndex index;
  index.embeddings = Matrix(n, dim);
  for (int g = 0; g < n; ++g) {
    index.embeddings(g, g) = 0.5;             // gold scores lower
    index.embeddings((g + 1) % n, g) = 1.0;   // one competitor scores higher
  }
  const Dataset ds = single_token_contexts(n);
  const RetrievalMetrics m = retrieval_metrics(b, ds, index, RetrieverKind::prior);
  CHECK(m.recall_at_1 == 0.0);
  CHECK(m.recall_at_10 == 1.0);
  CHECK(m.mrr_at_10 == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("a random scorer has R@10 close to 10/N") {
  const int n = 100, dim = 6;
  Rng rng(5);
  PassageIndex index;
  index.embeddings = Matrix(n, dim);
  for (double& v : index.embeddings.data) v = rng.next_uniform(-1, 1);

  ModelBundle b = ModelBundle::init(16, dim, 9);
  Dataset ds;
  ds.split = Split::dev;
  const int examples = 3000;
  for (int i = 0; i < examples; ++i) {
    Example ex;
    ex.context = {rng.next_int(16), rng.next_int(16), rng.next_int(16)};
    ex.response = {0};
    ex.gold_passage_id = rng.next_int(n);
    ds.examples.push_back(ex);
  }
  const RetrievalMetrics m = retrieval_metrics(b, ds, index, RetrieverKind::prior);
  // binomial 3-sigma band around 0.1
  CHECK(std::abs(m.recall_at_10 - 0.1) < 3.0 * std::sqrt(0.1 * 0.9 / examples) + 0.005);
  CHECK(m.recall_at_1 <= m.mrr_at_10);
  CHECK(m.mrr_at_10 <= m.recall_at_10);
}

TEST_CASE("missing gold ids are an error") {
  const ModelBundle b = pointer_bundle(4, 4);
  const PassageIndex index = identity_index(4, 4);
  Dataset ds = single_token_contexts(4);
  ds.examples[2].gold_passage_id.reset();
  CHECK_THROWS(retrieval_metrics(b, ds, index, RetrieverKind::prior));
}

TEST_CASE("decode with k=1 is the beam decode of the top passage") {
  const SyntheticTask task = generate_synthetic_task(8, 16, {4, 2, 2}, 33);
  const ModelBundle b = ModelBundle::init(16, 6, 34);
  const PassageIndex index = build_index(task.kb, b.passage, 0);
  const Example& ex = task.train.examples[0];

  const DecodeResult r = decode_top_k(b, ex.context, index, task.kb, 1, 4, 4);
  const Vec prior_q = encode(b.prior_ctx, ex.context);
  const int top = top_k(index, prior_q, 1)[0].first;
  const std::vector<int> want =
      beam_decode(b.generator, ex.context, task.kb.passages[top].tokens, 4, 4, task.kb.eos_id());
  CHECK(r.passage_id == top);
  CHECK(r.tokens == want);
}

TEST_CASE("a dominant prior with equal decodes wins the selection") {
  const int n = 8, dim = 8;
  ModelBundle b = pointer_bundle(n, dim);
  // zero generator: identical uniform decodes for every candidate
  b.generator.token_embedding.fill(0.0);
  b.generator.context_mixer.fill(0.0);
  b.generator.output_head.fill(0.0);
  // passage encoder maps single-token passage {i} onto the i-th axis, so
  // live rescoring agrees with the search index
  b.passage.embedding.fill(0.0);
  b.passage.projection.fill(0.0);
  for (int i = 0; i < dim; ++i) {
    b.passage.embedding(i, i) = 0.5;
    b.passage.projection(i, i) = 10.0;
  }
  KnowledgeBase kb;
  kb.vocab_size = n + 1;
  for (int i = 0; i < n; ++i) kb.passages.push_back({i, {i}});
  const PassageIndex index = build_index(kb, b.passage, 0);

  for (int g = 0; g < n; ++g) {
    const std::vector<int> x{g};
    const DecodeResult r = decode_top_k(b, x, index, kb, 4, 2, 3);
    CHECK(r.passage_id == g);
  }
}

TEST_CASE("decode selection equals exhaustive recomputation of all k products") {
  Rng rng(2025);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 6 + rng.next_int(6);
    const int vocab = 16;
    const SyntheticTask task = generate_synthetic_task(n, vocab, {4, 2, 2}, 100 + trial);
    const ModelBundle b = ModelBundle::init(vocab, 6, 200 + trial);
    const PassageIndex index = build_index(task.kb, b.passage, 0);
    const Example& ex = task.train.examples[trial % 4];
    const int k = 4, beam = 2, max_len = 3;

    const DecodeResult got = decode_top_k(b, ex.context, index, task.kb, k, beam, max_len);

    // oracle: recompute every candidate's product independently
    const Vec prior_q = encode(b.prior_ctx, ex.context);
    const auto top = top_k(index, prior_q, k);
    Vec logits(top.size());
    for (size_t i = 0; i < top.size(); ++i)
      logits[i] = dot(encode(b.passage, task.kb.passages[top[i].first].tokens), prior_q);
    const Vec prior_lp = log_softmax(logits);

    int best_id = -1;
    double best_score = 0;
    std::vector<int> best_tokens;
    for (size_t i = 0; i < top.size(); ++i) {
      const int id = top[i].first;
      const std::vector<int> y =
          beam_decode(b.generator, ex.context, task.kb.passages[id].tokens, max_len, beam, task.kb.eos_id());
      if (y.empty()) continue;
      const double score = prior_lp[i] + log_likelihood(b.generator, ex.context, task.kb.passages[id].tokens, y);
      if (best_id < 0 || score > best_score || (score == best_score && id < best_id)) {
        best_id = id;
        best_score = score;
        best_tokens = y;
      }
    }
    REQUIRE(best_id >= 0);
    CHECK(got.passage_id == best_id);
    CHECK(got.tokens == best_tokens);
    CHECK(got.log_score == doctest::Approx(best_score).epsilon(1e-12));
  }
}

TEST_CASE("token F1 follows the multiset definition") {
  CHECK(token_f1(std::vector<int>{1, 2, 3}, std::vector<int>{1, 2, 3}) == 1.0);
  CHECK(token_f1(std::vector<int>{4, 5}, std::vector<int>{1, 2}) == 0.0);
  // half the tokens overlap at equal lengths
  CHECK(token_f1(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 0, 2, 2}) ==
        doctest::Approx(0.5).epsilon(1e-12));
  // multiset counting caps repeated matches
  CHECK(token_f1(std::vector<int>{7, 7, 7}, std::vector<int>{7}) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("a generator that always emits the references gets perfect generation metrics") {
  // zero generator decodes to token 0 everywhere; make all references 0
  const int n = 6, dim = 6;
  ModelBundle b = pointer_bundle(n, dim);
  b.generator.token_embedding.fill(0.0);
  b.generator.context_mixer.fill(0.0);
  b.generator.output_head.fill(0.0);
  const PassageIndex index = identity_index(n, dim);
  KnowledgeBase kb;
  kb.vocab_size = n + 1;
  for (int i = 0; i < n; ++i) kb.passages.push_back({i, {i}});

  Dataset ds;
  ds.split = Split::dev;
  for (int g = 0; g < n; ++g) {
    Example ex;
    ex.context = {g};
    ex.response = {0, 0, 0};
    ex.gold_passage_id = g;
    ds.examples.push_back(ex);
  }
  const GenerationMetrics gm = generation_metrics(b, ds, index, kb, 3, 2, DecodeMode::topk_product);
  CHECK(gm.exact_match == 1.0);
  CHECK(gm.token_f1 == 1.0);

  // disjoint references score zero on both metrics
  for (Example& ex : ds.examples) ex.response = {1, 2, 3};
  const GenerationMetrics zero = generation_metrics(b, ds, index, kb, 3, 2, DecodeMode::topk_product);
  CHECK(zero.exact_match == 0.0);
  CHECK(zero.token_f1 == 0.0);
}

TEST_CASE("metric bounds hold on arbitrary evaluations") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    const SyntheticTask task = generate_synthetic_task(10, 24, {8, 8, 8}, seed);
    const ModelBundle b = ModelBundle::init(24, 8, seed + 50);
    const PassageIndex index = build_index(task.kb, b.passage, 0);
    for (RetrieverKind kind : {RetrieverKind::prior, RetrieverKind::posterior}) {
      const RetrievalMetrics m = retrieval_metrics(b, task.dev, index, kind);
      CHECK(m.recall_at_1 <= m.mrr_at_10 + 1e-12);
      CHECK(m.mrr_at_10 <= m.recall_at_10 + 1e-12);
      CHECK(m.recall_at_10 <= 1.0);
    }
    for (DecodeMode mode : {DecodeMode::topk_product, DecodeMode::concat}) {
      const GenerationMetrics gm = generation_metrics(b, task.dev, index, task.kb, 4, 2, mode);
      CHECK(gm.exact_match <= gm.token_f1 + 1e-12);
      CHECK(gm.token_f1 <= 1.0);
    }
  }
}

TEST_CASE("per-example records reproduce the aggregate metrics") {
  const SyntheticTask task = generate_synthetic_task(12, 24, {10, 10, 10}, 77);
  const ModelBundle b = ModelBundle::init(24, 8, 78);
  const PassageIndex index = build_index(task.kb, b.passage, 0);
  const int k = 4, beam = 2;

  const auto records = per_example_eval(b, task.dev, index, task.kb, k, beam, DecodeMode::topk_product);
  REQUIRE(records.size() == task.dev.examples.size());

  double r1p = 0, r10p = 0, mrrp = 0, r1q = 0, r10q = 0, mrrq = 0, em = 0, f1 = 0;
  for (const EvalRecord& r : records) {
    r1p += r.prior_rank == 1;
    r10p += r.prior_rank <= 10;
    mrrp += r.prior_rank <= 10 ? 1.0 / r.prior_rank : 0.0;
    r1q += r.posterior_rank == 1;
    r10q += r.posterior_rank <= 10;
    mrrq += r.posterior_rank <= 10 ? 1.0 / r.posterior_rank : 0.0;
    em += r.exact ? 1 : 0;
    f1 += r.f1;
  }
  const double n = static_cast<double>(records.size());

  const RetrievalMetrics prior = retrieval_metrics(b, task.dev, index, RetrieverKind::prior);
  const RetrievalMetrics post = retrieval_metrics(b, task.dev, index, RetrieverKind::posterior);
  const GenerationMetrics gen = generation_metrics(b, task.dev, index, task.kb, k, beam,
                                                   DecodeMode::topk_product);
  CHECK(prior.recall_at_1 == doctest::Approx(r1p / n).epsilon(1e-12));
  CHECK(prior.recall_at_10 == doctest::Approx(r10p / n).epsilon(1e-12));
  CHECK(prior.mrr_at_10 == doctest::Approx(mrrp / n).epsilon(1e-12));
  CHECK(post.recall_at_1 == doctest::Approx(r1q / n).epsilon(1e-12));
  CHECK(post.recall_at_10 == doctest::Approx(r10q / n).epsilon(1e-12));
  CHECK(post.mrr_at_10 == doctest::Approx(mrrq / n).epsilon(1e-12));
  CHECK(gen.exact_match == doctest::Approx(em / n).epsilon(1e-12));
  CHECK(gen.token_f1 == doctest::Approx(f1 / n).epsilon(1e-12));

  const std::string jsonl = eval_records_jsonl(records);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == static_cast<long>(records.size()));
  CHECK(jsonl.find("\"prior_rank\"") != std::string::npos);
}

TEST_CASE("metrics render to csv and a table") {
  const RetrievalMetrics prior{0.5, 0.75, 0.6};
  const RetrievalMetrics posterior{0.6, 0.8, 0.7};
  const GenerationMetrics gen{0.25, 0.4};
  const std::string csv = metrics_csv(prior, posterior, gen);
  CHECK(csv.find("prior_recall_at_1,0.500000") != std::string::npos);
  CHECK(csv.find("exact_match,0.250000") != std::string::npos);
  const std::string table = metrics_table(prior, posterior, gen);
  CHECK(table.find("0.7500") != std::string::npos);
}

TEST_SUITE_END();
