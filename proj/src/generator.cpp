#include "raglab/generator.hpp"

#include <algorithm>
#include <stdexcept>

namespace raglab {

namespace {

void check_sequence(const GeneratorParams& params, std::span<const int> seq, bool allow_empty) {
  if (!allow_empty && seq.empty()) throw std::invalid_argument("generator: empty token sequence");
  for (int t : seq)
    if (t < 0 || t >= params.vocab()) throw std::invalid_argument("generator: token id out of range");
}

// Position-weighted pool over the tokens seen so far.
struct Pool {
  Vec weighted_sum;  // sum over positions of position_weight(p) * embedding[token_p]
  int count = 0;     // number of pooled tokens

  explicit Pool(int dim) : weighted_sum(dim, 0.0) {}

  void push(const GeneratorParams& params, int token) {
    auto row = params.token_embedding.row(token);
    const double w = position_weight(count);
    for (size_t i = 0; i < weighted_sum.size(); ++i) weighted_sum[i] += w * row[i];
    ++count;
  }
};

struct StepForward {
  Vec mean;    // pooled mean at this step
  Vec hidden;  // tanh(mean * context_mixer)
  Vec logprobs;
};

StepForward step_forward(const GeneratorParams& params, const Pool& pool) {
  const int d = params.dim();
  StepForward f;
  f.mean.assign(d, 0.0);
  const double inv = 1.0 / static_cast<double>(pool.count);
  for (int i = 0; i < d; ++i) f.mean[i] = pool.weighted_sum[i] * inv;

  Vec pre(d, 0.0);
  for (int j = 0; j < d; ++j) {
    const double mj = f.mean[j];
    for (int i = 0; i < d; ++i) pre[i] += mj * params.context_mixer(j, i);
  }
  f.hidden.assign(d, 0.0);
  for (int i = 0; i < d; ++i) f.hidden[i] = std::tanh(pre[i]);

  const int vocab = params.vocab();
  Vec logits(vocab, 0.0);
  for (int i = 0; i < d; ++i) {
    const double ui = f.hidden[i];
    for (int v = 0; v < vocab; ++v) logits[v] += ui * params.output_head(i, v);
  }
  f.logprobs = log_softmax(logits);
  return f;
}

}  // namespace

GeneratorParams GeneratorParams::init(int vocab_size, int dim, Rng& rng) {
  // Tied readout and identity-leaning mixer: tokens present in the input
  // start out more probable than absent ones. This copy affinity is what
  // makes the latent passage matter to the likelihood from the first step,
  // standing in for the pretrained generators of full-scale systems.
  GeneratorParams p;
  p.token_embedding = Matrix(vocab_size, dim);
  p.context_mixer = Matrix(dim, dim);
  p.output_head = Matrix(dim, vocab_size);
  for (double& v : p.token_embedding.data) v = rng.next_uniform(-0.5, 0.5);
  for (double& v : p.context_mixer.data) v = rng.next_uniform(-0.05, 0.05);
  for (int i = 0; i < dim; ++i) p.context_mixer(i, i) += 1.0;
  for (double& v : p.output_head.data) v = rng.next_uniform(-0.05, 0.05);
  for (int i = 0; i < dim; ++i)
    for (int v = 0; v < vocab_size; ++v) p.output_head(i, v) += p.token_embedding(v, i);
  return p;
}

GeneratorGradient GeneratorGradient::zeros_like(const GeneratorParams& p) {
  GeneratorGradient g;
  g.d_token_embedding = Matrix(p.token_embedding.rows, p.token_embedding.cols);
  g.d_context_mixer = Matrix(p.context_mixer.rows, p.context_mixer.cols);
  g.d_output_head = Matrix(p.output_head.rows, p.output_head.cols);
  return g;
}

void GeneratorGradient::add_scaled(const GeneratorGradient& other, double w) {
  d_token_embedding.add_scaled(other.d_token_embedding, w);
  d_context_mixer.add_scaled(other.d_context_mixer, w);
  d_output_head.add_scaled(other.d_output_head, w);
}

void GeneratorGradient::scale(double w) {
  for (double& v : d_token_embedding.data) v *= w;
  for (double& v : d_context_mixer.data) v *= w;
  for (double& v : d_output_head.data) v *= w;
}

double log_likelihood(const GeneratorParams& params, std::span<const int> x, std::span<const int> h,
                      std::span<const int> y) {
  check_sequence(params, x, false);
  check_sequence(params, h, true);
  check_sequence(params, y, false);

  Pool pool(params.dim());
  // the passage leads the pool so its tokens carry the larger position
  // weights, mirroring how retrieved passages precede the context
  for (int t : h) pool.push(params, t);
  for (int t : x) pool.push(params, t);

  double ll = 0.0;
  for (int t : y) {
    const StepForward f = step_forward(params, pool);
    ll += f.logprobs[t];
    pool.push(params, t);
  }
  return ll;
}

void log_likelihood_backward(const GeneratorParams& params, std::span<const int> x, std::span<const int> h,
                             std::span<const int> y, double upstream, GeneratorGradient& out) {
  check_sequence(params, x, false);
  check_sequence(params, h, true);
  check_sequence(params, y, false);
  const int d = params.dim();
  const int vocab = params.vocab();
  const int base = static_cast<int>(x.size() + h.size());
  const int steps = static_cast<int>(y.size());

  Pool pool(d);
  for (int t : h) pool.push(params, t);
  for (int t : x) pool.push(params, t);

  std::vector<StepForward> fwd;
  fwd.reserve(steps);
  for (int t : y) {
    fwd.push_back(step_forward(params, pool));
    pool.push(params, t);
  }

  // per-step gradient w.r.t. the pooled mean, scaled by 1/L_j
  std::vector<Vec> g_mean_over_len(steps, Vec(d, 0.0));
  for (int j = 0; j < steps; ++j) {
    const StepForward& f = fwd[j];
    Vec g_logits(vocab);
    for (int v = 0; v < vocab; ++v) g_logits[v] = upstream * ((v == y[j] ? 1.0 : 0.0) - std::exp(f.logprobs[v]));

    for (int i = 0; i < d; ++i) {
      const double ui = f.hidden[i];
      auto head_row = out.d_output_head.row(i);
      auto head = params.output_head.row(i);
      double g_u = 0.0;
      for (int v = 0; v < vocab; ++v) {
        head_row[v] += ui * g_logits[v];
        g_u += head[v] * g_logits[v];
      }
      const double g_pre = g_u * (1.0 - ui * ui);
      for (int jj = 0; jj < d; ++jj) {
        out.d_context_mixer(jj, i) += f.mean[jj] * g_pre;
        g_mean_over_len[j][jj] += params.context_mixer(jj, i) * g_pre;
      }
    }
    const double inv = 1.0 / static_cast<double>(base + j);
    for (int jj = 0; jj < d; ++jj) g_mean_over_len[j][jj] *= inv;
  }

  // Token at absolute position p enters the pools of steps j >= j0(p), so
  // its embedding gradient is position_weight(p) times a suffix sum.
  std::vector<Vec> suffix(steps + 1, Vec(d, 0.0));
  for (int j = steps - 1; j >= 0; --j) {
    suffix[j] = suffix[j + 1];
    for (int jj = 0; jj < d; ++jj) suffix[j][jj] += g_mean_over_len[j][jj];
  }

  auto add_embedding_grad = [&](int token, int position, const Vec& g) {
    const double w = position_weight(position);
    auto row = out.d_token_embedding.row(token);
    for (int jj = 0; jj < d; ++jj) row[jj] += w * g[jj];
  };
  int pos = 0;
  for (int t : h) add_embedding_grad(t, pos++, suffix[0]);
  for (int t : x) add_embedding_grad(t, pos++, suffix[0]);
  for (int j = 0; j + 1 < steps; ++j) add_embedding_grad(y[j], base + j, suffix[j + 1]);
}

std::vector<int> beam_decode(const GeneratorParams& params, std::span<const int> x, std::span<const int> h,
                             int max_len, int beam_width, int eos_id) {
  if (max_len < 1) throw std::invalid_argument("beam_decode: max_len must be positive");
  if (beam_width < 1) throw std::invalid_argument("beam_decode: beam_width must be positive");
  check_sequence(params, x, false);
  check_sequence(params, h, true);
  const int vocab = params.vocab();

  struct Hyp {
    std::vector<int> tokens;
    double score = 0.0;
    Pool pool;
  };
  auto better = [](const std::vector<int>& at, double as, const std::vector<int>& bt, double bs) {
    if (as != bs) return as > bs;
    return at < bt;  // ties prefer the lexicographically smaller sequence
  };

  Pool root(params.dim());
  for (int t : h) root.push(params, t);
  for (int t : x) root.push(params, t);

  std::vector<Hyp> beam{{std::vector<int>{}, 0.0, root}};
  std::vector<Hyp> finished;

  for (int step = 0; step < max_len && !beam.empty(); ++step) {
    struct Cand {
      int hyp;
      int token;
      double score;
      std::vector<int> tokens;  // extended sequence, for tie-breaking
    };
    std::vector<Cand> cands;
    cands.reserve(beam.size() * static_cast<size_t>(vocab));
    for (size_t bi = 0; bi < beam.size(); ++bi) {
      const StepForward f = step_forward(params, beam[bi].pool);
      for (int v = 0; v < vocab; ++v) {
        Cand c{static_cast<int>(bi), v, beam[bi].score + f.logprobs[v], beam[bi].tokens};
        c.tokens.push_back(v);
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(),
              [&](const Cand& a, const Cand& b) { return better(a.tokens, a.score, b.tokens, b.score); });

    // top beam_width continuations; an eos continuation retires its
    // hypothesis and still consumes one of the step's slots
    std::vector<Hyp> next;
    int taken = 0;
    for (const Cand& c : cands) {
      if (taken >= beam_width) break;
      ++taken;
      if (c.token == eos_id) {
        Hyp done = beam[c.hyp];
        done.score = c.score;
        finished.push_back(std::move(done));
        continue;
      }
      Hyp ext = beam[c.hyp];
      ext.tokens.push_back(c.token);
      ext.score = c.score;
      ext.pool.push(params, c.token);
      next.push_back(std::move(ext));
    }
    beam = std::move(next);
  }

  const Hyp* best = nullptr;
  for (const auto& pool : {std::cref(finished), std::cref(beam)})
    for (const Hyp& hyp : pool.get())
      if (!best || better(hyp.tokens, hyp.score, best->tokens, best->score)) best = &hyp;
  if (!best) throw std::logic_error("beam_decode: no hypotheses");
  return best->tokens;
}

std::vector<NamedTensor> generator_tensors(const GeneratorParams& p) {
  return {{"token_embedding", p.token_embedding},
          {"context_mixer", p.context_mixer},
          {"output_head", p.output_head}};
}

GeneratorParams generator_from_tensors(const std::vector<NamedTensor>& tensors) {
  GeneratorParams p;
  p.token_embedding = find_tensor(tensors, "token_embedding");
  p.context_mixer = find_tensor(tensors, "context_mixer");
  p.output_head = find_tensor(tensors, "output_head");
  if (p.context_mixer.rows != p.context_mixer.cols || p.context_mixer.cols != p.token_embedding.cols ||
      p.output_head.rows != p.context_mixer.cols || p.output_head.cols != p.token_embedding.rows)
    throw std::runtime_error("generator checkpoint: inconsistent shapes");
  return p;
}

}  // namespace raglab
