#include "raglab/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace raglab {

namespace {

int reference_max_len(const Dataset& ds) {
  size_t mx = 1;
  for (const Example& ex : ds.examples) mx = std::max(mx, ex.response.size());
  return static_cast<int>(mx);
}

// 1-based rank of `gold` under inner-product scores, ties by ascending id
int rank_of(const PassageIndex& index, const Vec& query, int gold) {
  const double gold_score = dot(index.embeddings.row(gold), query);
  int rank = 1;
  for (int i = 0; i < index.size(); ++i) {
    if (i == gold) continue;
    const double s = dot(index.embeddings.row(i), query);
    if (s > gold_score || (s == gold_score && i < gold)) ++rank;
  }
  return rank;
}

Vec posterior_query(const ModelBundle& b, const Example& ex) {
  std::vector<int> xy = ex.context;
  xy.insert(xy.end(), ex.response.begin(), ex.response.end());
  return encode(b.post_ctx, xy);
}

}  // namespace

DecodeResult decode_top_k(const ModelBundle& b, std::span<const int> x, const PassageIndex& index,
                          const KnowledgeBase& kb, int k, int beam_width, int max_len) {
  const Vec prior_q = encode(b.prior_ctx, x);
  const auto top = top_k(index, prior_q, k);

  // prior probabilities truncated to the retrieved set, from the live encoder
  Vec logits(top.size());
  for (size_t i = 0; i < top.size(); ++i)
    logits[i] = dot(encode(b.passage, kb.passages[top[i].first].tokens), prior_q);
  const Vec prior_lp = log_softmax(logits);

  DecodeResult best;
  bool have = false;
  for (size_t i = 0; i < top.size(); ++i) {
    const int id = top[i].first;
    std::vector<int> y = beam_decode(b.generator, x, kb.passages[id].tokens, max_len, beam_width, kb.eos_id());
    if (y.empty()) continue;  // immediate-eos decode carries no product score
    const double ll = log_likelihood(b.generator, x, kb.passages[id].tokens, y);
    const double log_score = prior_lp[i] + ll;
    if (!have || log_score > best.log_score ||
        (log_score == best.log_score && id < best.passage_id)) {
      best = {std::move(y), id, log_score};
      have = true;
    }
  }
  if (!have) return {std::vector<int>{}, top[0].first, prior_lp[0]};
  return best;
}

DecodeResult decode_concat(const ModelBundle& b, std::span<const int> x, const PassageIndex& index,
                           const KnowledgeBase& kb, int k, int beam_width, int max_len) {
  const std::vector<int> input = concat_input(index, kb, b, x, k);
  const std::vector<int> empty_passage;
  DecodeResult out;
  out.tokens = beam_decode(b.generator, input, empty_passage, max_len, beam_width, kb.eos_id());
  const Vec prior_q = encode(b.prior_ctx, x);
  out.passage_id = top_k(index, prior_q, 1)[0].first;
  out.log_score =
      out.tokens.empty() ? 0.0 : log_likelihood(b.generator, input, empty_passage, out.tokens);
  return out;
}

RetrievalMetrics retrieval_metrics(const ModelBundle& b, const Dataset& ds, const PassageIndex& index,
                                   RetrieverKind which) {
  if (ds.examples.empty()) throw std::invalid_argument("retrieval_metrics: empty dataset");
  double r1 = 0, r10 = 0, mrr = 0;
  for (const Example& ex : ds.examples) {
    if (!ex.gold_passage_id) throw std::invalid_argument("retrieval_metrics: example missing gold passage id");
    const Vec query =
        which == RetrieverKind::prior ? encode(b.prior_ctx, ex.context) : posterior_query(b, ex);
    const int rank = rank_of(index, query, *ex.gold_passage_id);
    if (rank == 1) r1 += 1;
    if (rank <= 10) {
      r10 += 1;
      mrr += 1.0 / rank;
    }
  }
  const double n = static_cast<double>(ds.examples.size());
  return {r1 / n, r10 / n, mrr / n};
}

double token_f1(std::span<const int> predicted, std::span<const int> reference) {
  if (predicted.empty() || reference.empty()) return 0.0;
  std::map<int, int> pred_counts, ref_counts;
  for (int t : predicted) ++pred_counts[t];
  for (int t : reference) ++ref_counts[t];
  int overlap = 0;
  for (const auto& [tok, cnt] : pred_counts) {
    auto it = ref_counts.find(tok);
    if (it != ref_counts.end()) overlap += std::min(cnt, it->second);
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(predicted.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(reference.size());
  return 2.0 * precision * recall / (precision + recall);
}

GenerationMetrics generation_metrics(const ModelBundle& b, const Dataset& ds, const PassageIndex& index,
                                     const KnowledgeBase& kb, int k, int beam_width, DecodeMode mode,
                                     int max_len) {
  if (ds.examples.empty()) throw std::invalid_argument("generation_metrics: empty dataset");
  if (max_len <= 0) max_len = reference_max_len(ds);

  double em = 0, f1 = 0;
  for (const Example& ex : ds.examples) {
    const DecodeResult r = mode == DecodeMode::topk_product
                               ? decode_top_k(b, ex.context, index, kb, k, beam_width, max_len)
                               : decode_concat(b, ex.context, index, kb, k, beam_width, max_len);
    if (r.tokens == ex.response) em += 1;
    f1 += token_f1(r.tokens, ex.response);
  }
  const double n = static_cast<double>(ds.examples.size());
  return {em / n, f1 / n};
}

std::vector<EvalRecord> per_example_eval(const ModelBundle& b, const Dataset& ds,
                                         const PassageIndex& index, const KnowledgeBase& kb, int k,
                                         int beam_width, DecodeMode mode, int max_len) {
  if (ds.examples.empty()) throw std::invalid_argument("per_example_eval: empty dataset");
  if (max_len <= 0) max_len = reference_max_len(ds);

  std::vector<EvalRecord> records;
  records.reserve(ds.examples.size());
  for (size_t i = 0; i < ds.examples.size(); ++i) {
    const Example& ex = ds.examples[i];
    if (!ex.gold_passage_id) throw std::invalid_argument("per_example_eval: example missing gold id");
    EvalRecord r;
    r.example = static_cast<int>(i);
    r.gold = *ex.gold_passage_id;
    r.prior_rank = rank_of(index, encode(b.prior_ctx, ex.context), r.gold);
    r.posterior_rank = rank_of(index, posterior_query(b, ex), r.gold);
    const DecodeResult d = mode == DecodeMode::topk_product
                               ? decode_top_k(b, ex.context, index, kb, k, beam_width, max_len)
                               : decode_concat(b, ex.context, index, kb, k, beam_width, max_len);
    r.chosen_passage = d.passage_id;
    r.exact = d.tokens == ex.response;
    r.f1 = token_f1(d.tokens, ex.response);
    records.push_back(r);
  }
  return records;
}

std::string eval_records_jsonl(const std::vector<EvalRecord>& records) {
  std::string out;
  for (const EvalRecord& r : records) {
    nlohmann::json row{{"example", r.example},       {"gold", r.gold},
                       {"prior_rank", r.prior_rank}, {"posterior_rank", r.posterior_rank},
                       {"chosen", r.chosen_passage}, {"exact", r.exact},
                       {"f1", r.f1}};
    out += row.dump() + "\n";
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const RetrievalMetrics& prior, const RetrievalMetrics& posterior,
                        const GenerationMetrics& gen) {
  std::string out = "metric,value\n";
  out += "prior_recall_at_1," + fmt(prior.recall_at_1) + "\n";
  out += "prior_recall_at_10," + fmt(prior.recall_at_10) + "\n";
  out += "prior_mrr_at_10," + fmt(prior.mrr_at_10) + "\n";
  out += "posterior_recall_at_1," + fmt(posterior.recall_at_1) + "\n";
  out += "posterior_recall_at_10," + fmt(posterior.recall_at_10) + "\n";
  out += "posterior_mrr_at_10," + fmt(posterior.mrr_at_10) + "\n";
  out += "exact_match," + fmt(gen.exact_match) + "\n";
  out += "token_f1," + fmt(gen.token_f1) + "\n";
  return out;
}

std::string metrics_table(const RetrievalMetrics& prior, const RetrievalMetrics& posterior,
                          const GenerationMetrics& gen) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "retriever   R@1      R@10     MRR@10\n"
                "prior       %.4f   %.4f   %.4f\n"
                "posterior   %.4f   %.4f   %.4f\n"
                "\n"
                "generation  EM       tokenF1\n"
                "            %.4f   %.4f\n",
                prior.recall_at_1, prior.recall_at_10, prior.mrr_at_10, posterior.recall_at_1,
                posterior.recall_at_10, posterior.mrr_at_10, gen.exact_match, gen.token_f1);
  return buf;
}

}  // namespace raglab
