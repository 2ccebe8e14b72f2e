#pragma once

#include <span>
#include <vector>

#include "raglab/rng.hpp"
#include "raglab/tensor.hpp"

namespace raglab {

/// Conditional autoregressive model p(y | x, h) over the shared vocabulary.
/// Each step pools the tokens seen so far (x, then h, then y_<j) into a
/// position-weighted mean embedding, mixes it through a square matrix and a
/// tanh, and reads logits off a linear head. Exact log-likelihood, analytic
/// gradients, beam-search decoding.
struct GeneratorParams {
  Matrix token_embedding;  // [vocab x dim]
  Matrix context_mixer;    // [dim x dim]
  Matrix output_head;      // [dim x vocab]

  int dim() const { return context_mixer.cols; }
  int vocab() const { return token_embedding.rows; }

  static GeneratorParams init(int vocab_size, int dim, Rng& rng);

  bool operator==(const GeneratorParams&) const = default;
};

struct GeneratorGradient {
  Matrix d_token_embedding;
  Matrix d_context_mixer;
  Matrix d_output_head;

  static GeneratorGradient zeros_like(const GeneratorParams& p);
  void add_scaled(const GeneratorGradient& other, double w);
  void scale(double w);
  double l2_norm_squared() const {
    return d_token_embedding.l2_norm_squared() + d_context_mixer.l2_norm_squared() +
           d_output_head.l2_norm_squared();
  }
};

/// Fixed position weight for pooling; decays so earlier tokens dominate,
/// which keeps the order of (x, h, y) segments meaningful.
inline double position_weight(int position) { return 1.0 / std::sqrt(1.0 + position); }

/// sum_j log p(y_j | y_<j, x, h); always <= 0. h may be empty (passage
/// concatenation mode folds passages into x).
double log_likelihood(const GeneratorParams& params, std::span<const int> x, std::span<const int> h,
                      std::span<const int> y);

/// Accumulates the exact gradient of upstream * log_likelihood into `out`.
void log_likelihood_backward(const GeneratorParams& params, std::span<const int> x, std::span<const int> h,
                             std::span<const int> y, double upstream, GeneratorGradient& out);

/// Beam search over at most max_len tokens; emitting eos_id (pass -1 to
/// disable) finishes a hypothesis, and the eos token is not part of the
/// returned sequence. Width 1 is greedy decoding. Fully deterministic;
/// score ties prefer the lexicographically smaller token sequence.
std::vector<int> beam_decode(const GeneratorParams& params, std::span<const int> x, std::span<const int> h,
                             int max_len, int beam_width, int eos_id);

// checkpoint tensor names: "token_embedding", "context_mixer", "output_head"
std::vector<NamedTensor> generator_tensors(const GeneratorParams& p);
GeneratorParams generator_from_tensors(const std::vector<NamedTensor>& tensors);

}  // namespace raglab
