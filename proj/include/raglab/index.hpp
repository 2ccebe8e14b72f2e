#pragma once

#include <string>
#include <utility>
#include <vector>

#include "raglab/encoders.hpp"
#include "raglab/kbstore.hpp"
#include "raglab/tensor.hpp"

namespace raglab {

/// Exact maximum-inner-product index over passage embeddings. Immutable
/// between rebuilds; `built_from` stamps the passage-encoder version used
/// to embed, so staleness is observable while the passage encoder trains.
struct PassageIndex {
  Matrix embeddings;   // [N x dim], row i = encode(passage encoder, passage i)
  long built_from = 0;

  int size() const { return embeddings.rows; }
  int dim() const { return embeddings.cols; }
};

PassageIndex build_index(const KnowledgeBase& kb, const EncoderParams& passage_encoder, long version_stamp);

/// The k largest inner products, descending, ties broken by ascending id.
/// k > N returns all N.
std::vector<std::pair<int, double>> top_k(const PassageIndex& index, const Vec& query, int k);

/// Union of prior and posterior top-k with both truncated softmaxes.
/// exp(prior_logprobs) and exp(post_logprobs) each sum to 1 over the set.
struct CandidateSet {
  std::vector<int> ids;  // sorted ascending, unique
  Vec prior_logits;
  Vec post_logits;
  Vec prior_logprobs;
  Vec post_logprobs;
  Vec gen_loglik;  // empty until the generator fills it

  int size() const { return static_cast<int>(ids.size()); }
  int position_of(int id) const;  // index into ids, throws if absent
  void validate() const;
};

/// Search runs against the (possibly stale) index rows; logits for the
/// union members are recomputed from the current passage encoder, so
/// probabilities always reflect live parameters.
CandidateSet union_candidates(const PassageIndex& index, const KnowledgeBase& kb,
                              const EncoderParams& passage_encoder, const Vec& prior_query,
                              const Vec& post_query, int k);

void save_index(const PassageIndex& index, const std::string& path);
PassageIndex load_index(const std::string& path);

}  // namespace raglab
