#pragma once

#include <span>
#include <string>
#include <vector>

#include "raglab/index.hpp"
#include "raglab/trainers.hpp"

namespace raglab {

struct RetrievalMetrics {
  double recall_at_1 = 0.0;
  double recall_at_10 = 0.0;
  double mrr_at_10 = 0.0;
};

struct GenerationMetrics {
  double exact_match = 0.0;
  double token_f1 = 0.0;
};

enum class RetrieverKind { prior, posterior };

enum class DecodeMode {
  topk_product,  // per-candidate decode, pick argmax of p(h|x) p(y|x,h)
  concat         // single decode on top-k passages concatenated before x
};

struct DecodeResult {
  std::vector<int> tokens;
  int passage_id = -1;   // chosen passage (topk_product) or top passage (concat)
  double log_score = 0;  // log p(h|x) + log p(y|x,h) of the returned pair
};

/// Retrieve the prior top-k, beam-decode a response per candidate, score
/// each by the product of truncated prior probability and generator
/// likelihood, return the argmax (ties to the lower passage id).
DecodeResult decode_top_k(const ModelBundle& b, std::span<const int> x, const PassageIndex& index,
                          const KnowledgeBase& kb, int k, int beam_width, int max_len);

/// Single beam decode on the concatenated top-k input.
DecodeResult decode_concat(const ModelBundle& b, std::span<const int> x, const PassageIndex& index,
                           const KnowledgeBase& kb, int k, int beam_width, int max_len);

/// Recall@1, Recall@10, MRR@10 of the chosen retriever against gold ids.
/// Ranks come from the index embeddings; queries are e(x) for the prior
/// retriever and e(x+y) for the posterior one. Every example must carry a
/// gold id.
RetrievalMetrics retrieval_metrics(const ModelBundle& b, const Dataset& ds, const PassageIndex& index,
                                   RetrieverKind which);

/// Exact token-sequence match and multiset token F1 between decoded and
/// reference responses. max_len 0 means "longest reference in ds".
GenerationMetrics generation_metrics(const ModelBundle& b, const Dataset& ds, const PassageIndex& index,
                                     const KnowledgeBase& kb, int k, int beam_width, DecodeMode mode,
                                     int max_len = 0);

double token_f1(std::span<const int> predicted, std::span<const int> reference);

/// Per-example evaluation row; the aggregate metrics above are means over
/// these.
struct EvalRecord {
  int example = 0;
  int gold = -1;
  int prior_rank = 0;      // 1-based rank of gold under the prior retriever
  int posterior_rank = 0;  // same under the posterior retriever
  int chosen_passage = -1;
  bool exact = false;
  double f1 = 0.0;
};

std::vector<EvalRecord> per_example_eval(const ModelBundle& b, const Dataset& ds,
                                         const PassageIndex& index, const KnowledgeBase& kb, int k,
                                         int beam_width, DecodeMode mode, int max_len = 0);

/// One JSON object per line, in dataset order.
std::string eval_records_jsonl(const std::vector<EvalRecord>& records);

/// "metric,value" CSV plus an aligned plain-text table.
std::string metrics_csv(const RetrievalMetrics& prior, const RetrievalMetrics& posterior,
                        const GenerationMetrics& gen);
std::string metrics_table(const RetrievalMetrics& prior, const RetrievalMetrics& posterior,
                          const GenerationMetrics& gen);

}  // namespace raglab
