#include "raglab/sampler.hpp"

#include <cmath>
#include <stdexcept>

namespace raglab {

double log_importance_weight(const CandidateSet& cands, int id) {
  if (cands.gen_loglik.size() != cands.ids.size())
    throw std::invalid_argument("log_importance_weight: gen_loglik not populated");
  const int pos = cands.position_of(id);
  return cands.prior_logprobs[pos] + cands.gen_loglik[pos] - cands.post_logprobs[pos];
}

namespace {

// normalized target over the candidate set: prior * generator likelihood
Vec truncated_target_probs(const CandidateSet& cands) {
  if (cands.gen_loglik.size() != cands.ids.size())
    throw std::invalid_argument("sampler: gen_loglik not populated");
  Vec log_target(cands.ids.size());
  for (size_t i = 0; i < cands.ids.size(); ++i)
    log_target[i] = cands.prior_logprobs[i] + cands.gen_loglik[i];
  return softmax_from_logits(log_target);
}

}  // namespace

ChainState init_chain(Rng& rng, const CandidateSet& cands) {
  const Vec target = truncated_target_probs(cands);
  const int pos = rng.next_categorical(target);
  ChainState state;
  state.current_id = cands.ids[pos];
  state.current_log_w = log_importance_weight(cands, state.current_id);
  return state;
}

void mis_step(Rng& rng, const CandidateSet& cands, ChainState& state) {
  Vec proposal(cands.post_logprobs.size());
  for (size_t i = 0; i < proposal.size(); ++i) proposal[i] = std::exp(cands.post_logprobs[i]);
  const int pos = rng.next_categorical(proposal);
  const int proposed = cands.ids[pos];
  const double log_w = log_importance_weight(cands, proposed);

  const double accept_prob = std::min(1.0, std::exp(log_w - state.current_log_w));
  if (rng.next_double() < accept_prob) {
    state.current_id = proposed;
    state.current_log_w = log_w;
    ++state.accept_count;
  }
  state.history.push_back(state.current_id);
}

std::vector<int> run_chain(Rng& rng, const CandidateSet& cands, int m) {
  if (m < 1) throw std::invalid_argument("run_chain: m must be positive");
  ChainState state = init_chain(rng, cands);
  for (int i = 0; i < m; ++i) mis_step(rng, cands, state);
  return state.history;
}

}  // namespace raglab
