#include "raglab/index.hpp"

#include <algorithm>
#include <stdexcept>

namespace raglab {

PassageIndex build_index(const KnowledgeBase& kb, const EncoderParams& passage_encoder, long version_stamp) {
  kb.validate();
  const int d = passage_encoder.dim();
  PassageIndex index;
  index.embeddings = Matrix(kb.size(), d);
  index.built_from = version_stamp;
  for (int i = 0; i < kb.size(); ++i) {
    const Vec e = encode(passage_encoder, kb.passages[i].tokens);
    for (int j = 0; j < d; ++j) index.embeddings(i, j) = e[j];
  }
  return index;
}

std::vector<std::pair<int, double>> top_k(const PassageIndex& index, const Vec& query, int k) {
  if (k < 1) throw std::invalid_argument("top_k: k must be positive");
  if (static_cast<int>(query.size()) != index.dim()) throw std::invalid_argument("top_k: dimension mismatch");

  std::vector<std::pair<int, double>> scored(index.size());
  for (int i = 0; i < index.size(); ++i) scored[i] = {i, dot(index.embeddings.row(i), query)};
  const int keep = std::min(k, index.size());
  std::partial_sort(scored.begin(), scored.begin() + keep, scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  scored.resize(keep);
  return scored;
}

int CandidateSet::position_of(int id) const {
  auto it = std::lower_bound(ids.begin(), ids.end(), id);
  if (it == ids.end() || *it != id) throw std::invalid_argument("candidate set: id not in set");
  return static_cast<int>(it - ids.begin());
}

void CandidateSet::validate() const {
  if (ids.empty()) throw std::invalid_argument("candidate set: empty");
  if (!std::is_sorted(ids.begin(), ids.end()) || std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw std::invalid_argument("candidate set: ids must be sorted and unique");
  auto check_normalized = [&](const Vec& logprobs, const char* what) {
    if (logprobs.size() != ids.size()) throw std::invalid_argument(std::string("candidate set: bad ") + what);
    double s = 0.0;
    for (double lp : logprobs) s += std::exp(lp);
    if (std::abs(s - 1.0) > 1e-9)
      throw std::invalid_argument(std::string("candidate set: ") + what + " not normalized");
  };
  check_normalized(prior_logprobs, "prior_logprobs");
  check_normalized(post_logprobs, "post_logprobs");
  if (!gen_loglik.empty() && gen_loglik.size() != ids.size())
    throw std::invalid_argument("candidate set: bad gen_loglik length");
}

CandidateSet union_candidates(const PassageIndex& index, const KnowledgeBase& kb,
                              const EncoderParams& passage_encoder, const Vec& prior_query,
                              const Vec& post_query, int k) {
  const auto prior_top = top_k(index, prior_query, k);
  const auto post_top = top_k(index, post_query, k);

  CandidateSet cs;
  cs.ids.reserve(prior_top.size() + post_top.size());
  for (const auto& [id, s] : prior_top) cs.ids.push_back(id);
  for (const auto& [id, s] : post_top) cs.ids.push_back(id);
  std::sort(cs.ids.begin(), cs.ids.end());
  cs.ids.erase(std::unique(cs.ids.begin(), cs.ids.end()), cs.ids.end());

  // probabilities come from the live passage encoder even when the search
  // index is stale
  const int n = cs.size();
  cs.prior_logits.resize(n);
  cs.post_logits.resize(n);
  for (int i = 0; i < n; ++i) {
    const Vec emb = encode(passage_encoder, kb.passages[cs.ids[i]].tokens);
    cs.prior_logits[i] = score(emb, prior_query);
    cs.post_logits[i] = score(emb, post_query);
  }
  cs.prior_logprobs = log_softmax(cs.prior_logits);
  cs.post_logprobs = log_softmax(cs.post_logits);
  return cs;
}

void save_index(const PassageIndex& index, const std::string& path) {
  Matrix stamp(1, 1);
  stamp(0, 0) = static_cast<double>(index.built_from);
  save_tensors(path, {{"embeddings", index.embeddings}, {"built_from", stamp}});
}

PassageIndex load_index(const std::string& path) {
  const auto tensors = load_tensors(path);
  PassageIndex index;
  index.embeddings = find_tensor(tensors, "embeddings");
  index.built_from = static_cast<long>(find_tensor(tensors, "built_from")(0, 0));
  return index;
}

}  // namespace raglab
