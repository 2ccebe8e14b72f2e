#pragma once

#include <vector>

#include "raglab/index.hpp"
#include "raglab/rng.hpp"

namespace raglab {

/// Metropolis independence sampler over a candidate set, targeting the
/// truncated posterior prior(h) * p(y|x,h) restricted to the set, with the
/// truncated posterior retriever as the proposal.
struct ChainState {
  int current_id = -1;
  double current_log_w = 0.0;       // cached log importance weight of current_id
  std::vector<int> history;         // chain states in order; rejections repeat
  long accept_count = 0;
};

/// log w(h) = prior_logprob(h) + gen_loglik(h) - post_logprob(h) on the
/// candidate set. Requires gen_loglik to be populated.
double log_importance_weight(const CandidateSet& cands, int id);

/// One exact draw from the truncated target (normalized prior * likelihood
/// over the set); used to initialize chains, which removes burn-in on the
/// truncated support.
ChainState init_chain(Rng& rng, const CandidateSet& cands);

/// Propose from exp(post_logprobs), accept with min(1, w(h)/w(current)).
/// Rejection appends the previous state again.
void mis_step(Rng& rng, const CandidateSet& cands, ChainState& state);

/// Initialize from the truncated target, run m MIS steps, return the m
/// chain states in order.
std::vector<int> run_chain(Rng& rng, const CandidateSet& cands, int m);

}  // namespace raglab
