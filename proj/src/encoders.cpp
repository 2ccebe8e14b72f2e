#include "raglab/encoders.hpp"

#include <stdexcept>

namespace raglab {

namespace {

void check_tokens(const EncoderParams& params, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
  for (int t : tokens)
    if (t < 0 || t >= params.vocab()) throw std::invalid_argument("encode: token id out of range");
}

Vec mean_embedding(const EncoderParams& params, std::span<const int> tokens) {
  const int d = params.dim();
  Vec m(d, 0.0);
  for (int t : tokens) {
    auto row = params.embedding.row(t);
    for (int i = 0; i < d; ++i) m[i] += row[i];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (double& v : m) v *= inv;
  return m;
}

}  // namespace

EncoderParams EncoderParams::init(int vocab_size, int dim, Rng& rng) {
  EncoderParams p;
  p.embedding = Matrix(vocab_size, dim);
  p.projection = Matrix(dim, dim);
  for (double& v : p.embedding.data) v = rng.next_uniform(-0.1, 0.1);
  for (double& v : p.projection.data) v = rng.next_uniform(-0.1, 0.1);
  return p;
}

EncoderGradient EncoderGradient::zeros_like(const EncoderParams& p) {
  EncoderGradient g;
  g.d_embedding = Matrix(p.embedding.rows, p.embedding.cols);
  g.d_projection = Matrix(p.projection.rows, p.projection.cols);
  return g;
}

void EncoderGradient::add_scaled(const EncoderGradient& other, double w) {
  d_embedding.add_scaled(other.d_embedding, w);
  d_projection.add_scaled(other.d_projection, w);
}

void EncoderGradient::scale(double w) {
  for (double& v : d_embedding.data) v *= w;
  for (double& v : d_projection.data) v *= w;
}

Vec encode(const EncoderParams& params, std::span<const int> tokens) {
  check_tokens(params, tokens);
  const int d = params.dim();
  const Vec m = mean_embedding(params, tokens);
  Vec out(d, 0.0);
  for (int j = 0; j < d; ++j) {
    const double mj = m[j];
    for (int i = 0; i < d; ++i) out[i] += mj * params.projection(j, i);
  }
  for (double& v : out) v = std::tanh(v);
  return out;
}

double score(const Vec& query, const Vec& passage) {
  if (query.size() != passage.size()) throw std::invalid_argument("score: length mismatch");
  return dot(query, passage);
}

void encode_backward(const EncoderParams& params, std::span<const int> tokens, const Vec& upstream,
                     EncoderGradient& out) {
  check_tokens(params, tokens);
  const int d = params.dim();
  if (static_cast<int>(upstream.size()) != d) throw std::invalid_argument("encode_backward: bad upstream size");

  const Vec m = mean_embedding(params, tokens);
  Vec pre(d, 0.0);
  for (int j = 0; j < d; ++j) {
    const double mj = m[j];
    for (int i = 0; i < d; ++i) pre[i] += mj * params.projection(j, i);
  }

  // d/dpre of upstream . tanh(pre)
  Vec g_pre(d);
  for (int i = 0; i < d; ++i) {
    const double th = std::tanh(pre[i]);
    g_pre[i] = upstream[i] * (1.0 - th * th);
  }

  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i) out.d_projection(j, i) += m[j] * g_pre[i];

  Vec g_mean(d, 0.0);
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += params.projection(j, i) * g_pre[i];
    g_mean[j] = s;
  }

  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (int t : tokens) {
    auto row = out.d_embedding.row(t);
    for (int j = 0; j < d; ++j) row[j] += inv * g_mean[j];
  }
}

std::vector<NamedTensor> encoder_tensors(const EncoderParams& p) {
  return {{"embedding", p.embedding}, {"projection", p.projection}};
}

EncoderParams encoder_from_tensors(const std::vector<NamedTensor>& tensors) {
  EncoderParams p;
  p.embedding = find_tensor(tensors, "embedding");
  p.projection = find_tensor(tensors, "projection");
  if (p.projection.rows != p.projection.cols || p.projection.cols != p.embedding.cols)
    throw std::runtime_error("encoder checkpoint: inconsistent shapes");
  return p;
}

}  // namespace raglab
