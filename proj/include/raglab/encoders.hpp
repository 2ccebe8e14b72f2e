#pragma once

#include <span>
#include <string>

#include "raglab/rng.hpp"
#include "raglab/tensor.hpp"

namespace raglab {

/// Bi-encoder building block shared by the prior context encoder, the
/// passage encoder, and the posterior context-response encoder. Forward is
/// tanh(mean(embedding rows of tokens) * projection); all gradients are
/// analytic.
struct EncoderParams {
  Matrix embedding;   // [vocab x dim]
  Matrix projection;  // [dim x dim]

  int dim() const { return projection.cols; }
  int vocab() const { return embedding.rows; }

  /// i.i.d. uniform in [-0.1, 0.1] so initial inner products stay small.
  static EncoderParams init(int vocab_size, int dim, Rng& rng);

  bool operator==(const EncoderParams&) const = default;
};

struct EncoderGradient {
  Matrix d_embedding;
  Matrix d_projection;

  static EncoderGradient zeros_like(const EncoderParams& p);
  void add_scaled(const EncoderGradient& other, double w);
  void scale(double w);
  double l2_norm_squared() const { return d_embedding.l2_norm_squared() + d_projection.l2_norm_squared(); }
};

/// Dense representation of a token sequence; entries in (-1, 1).
Vec encode(const EncoderParams& params, std::span<const int> tokens);

/// Inner product of two embeddings of equal length.
double score(const Vec& query, const Vec& passage);

/// Accumulates into `out` the exact gradient of dot(upstream, encode(params,
/// tokens)) with respect to params. Rows of the embedding table not present
/// in `tokens` are untouched.
void encode_backward(const EncoderParams& params, std::span<const int> tokens, const Vec& upstream,
                     EncoderGradient& out);

// checkpoint tensor names: "embedding", "projection"
std::vector<NamedTensor> encoder_tensors(const EncoderParams& p);
EncoderParams encoder_from_tensors(const std::vector<NamedTensor>& tensors);

}  // namespace raglab
