// SPDX-License-Identifier: Apache-2.0
#include "qacirc/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "qacirc/rng.hpp"

namespace qacirc {

double Rng::normal() {
  // Box-Muller; u1 is kept away from zero.
  const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

constexpr double kNormEps = 1e-6;
std::atomic<std::uint64_t> g_forward_calls{0};

struct LayerCache {
  Matrix u;  // normalized attention input
  std::vector<Matrix> q, k, v, attn;
  Matrix mid;  // residual after attention
  Matrix hpre;
};

void apply_norm(NormKind kind, std::span<const double> r, std::span<const double> gain,
                std::span<double> out) {
  if (kind == NormKind::None) {
    std::copy(r.begin(), r.end(), out.begin());
    return;
  }
  double ms = 0.0;
  for (double v : r) ms += v * v;
  const double inv = 1.0 / std::sqrt(ms / static_cast<double>(r.size()) + kNormEps);
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = gain[i] * r[i] * inv;
}

// Adds d(out)/d(r)^T * dout to dr.
void norm_backward(NormKind kind, std::span<const double> r, std::span<const double> gain,
                   std::span<const double> dout, std::span<double> dr) {
  if (kind == NormKind::None) {
    for (std::size_t i = 0; i < r.size(); ++i) dr[i] += dout[i];
    return;
  }
  const double n = static_cast<double>(r.size());
  double ms = 0.0;
  for (double v : r) ms += v * v;
  const double rho = std::sqrt(ms / n + kNormEps);
  double proj = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) proj += gain[i] * dout[i] * r[i];
  const double coef = proj / (n * rho * rho * rho);
  for (std::size_t i = 0; i < r.size(); ++i) dr[i] += gain[i] * dout[i] / rho - r[i] * coef;
}

Matrix normalize_rows(NormKind kind, const Matrix& x, const Vector& gain) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) apply_norm(kind, x.row(t), gain, out.row(t));
  return out;
}

Matrix mat_mul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) vec_mat_acc(a.row(r), b, out.row(r));
  return out;
}

void check_input(const ModelConfig& cfg, const TokenSeq& input) {
  if (input.ids.empty()) throw Error(ErrorCode::InvalidArgument, "empty input");
  if (input.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw Error(ErrorCode::SequenceTooLong, std::to_string(input.size()) + " tokens > max_seq " +
                                                std::to_string(cfg.max_seq));
  }
  for (int id : input.ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw Error(ErrorCode::InvalidArgument, "token id " + std::to_string(id) + " out of range");
    }
  }
}

RunTrace run(const ModelWeights& w, const TokenSeq& input, const CaptureSpec& capture,
             const Intervention* iv, const Matrix* embed_override,
             std::vector<LayerCache>* cache) {
  const ModelConfig& cfg = w.config;
  check_input(cfg, input);
  g_forward_calls.fetch_add(1, std::memory_order_relaxed);

  const std::size_t T = input.size();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  RunTrace trace;
  trace.input = input;
  trace.capture = capture;
  if (embed_override != nullptr) {
    if (embed_override->rows() != T || embed_override->cols() != d) {
      throw Error(ErrorCode::InvalidShape, "embedding override shape");
    }
    trace.embed = *embed_override;
  } else {
    trace.embed = embed_tokens(w, input);
  }

  Matrix resid = trace.embed;
  if (cache != nullptr) cache->resize(w.layers.size());
  Vector row_buf(T);

  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    const int layer = static_cast<int>(l);
    LayerTrace lt;
    if (capture.activations) lt.resid_in = resid;

    const Matrix u = normalize_rows(cfg.norm, resid, lw.attn_norm);
    Matrix mid = resid;
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      const HeadWeights& hw = lw.heads[h];
      const int head = static_cast<int>(h);
      Matrix q = mat_mul(u, hw.wq);
      Matrix k = mat_mul(u, hw.wk);
      Matrix v = mat_mul(u, hw.wv);
      Matrix scores(T, T);
      Matrix attn(T, T);
      Matrix z(T, static_cast<std::size_t>(cfg.d_head));
      for (std::size_t t = 0; t < T; ++t) {
        std::span<double> row(row_buf.data(), t + 1);
        for (std::size_t j = 0; j <= t; ++j) row[j] = dot(q.row(t), k.row(j)) * inv_sqrt;
        if (iv != nullptr) iv->scores(layer, head, t, row);
        std::copy(row.begin(), row.end(), scores.row(t).begin());
        softmax_inplace(row);
        std::copy(row.begin(), row.end(), attn.row(t).begin());
        for (std::size_t j = 0; j <= t; ++j) axpy(row[j], v.row(j), z.row(t));
      }
      Matrix out = mat_mul(z, hw.wo);
      if (iv != nullptr) {
        for (std::size_t t = 0; t < T; ++t) iv->head_output(layer, head, t, out.row(t));
      }
      for (std::size_t i = 0; i < mid.size(); ++i) mid.data()[i] += out.data()[i];
      if (capture.activations) lt.head_out.push_back(std::move(out));
      if (capture.attention) {
        lt.scores.push_back(std::move(scores));
        lt.attention.push_back(attn);
      }
      if (cache != nullptr) {
        LayerCache& c = (*cache)[l];
        c.q.push_back(std::move(q));
        c.k.push_back(std::move(k));
        c.v.push_back(std::move(v));
        c.attn.push_back(std::move(attn));
      }
    }

    const Matrix wn = normalize_rows(cfg.norm, mid, lw.mlp_norm);
    Matrix hpre = mat_mul(wn, lw.mlp_in);
    Matrix hact = hpre;
    for (double& x : hact.data()) x = gelu(x);
    Matrix f = mat_mul(hact, lw.mlp_out);
    if (iv != nullptr) {
      for (std::size_t t = 0; t < T; ++t) iv->mlp_output(layer, t, f.row(t));
    }
    resid = mid;
    for (std::size_t i = 0; i < resid.size(); ++i) resid.data()[i] += f.data()[i];
    if (capture.activations) lt.mlp_out = std::move(f);
    if (cache != nullptr) {
      LayerCache& c = (*cache)[l];
      c.u = u;
      c.mid = std::move(mid);
      c.hpre = std::move(hpre);
    }
    if (capture.activations || capture.attention) trace.layers.push_back(std::move(lt));
  }

  if (iv != nullptr) {
    for (std::size_t t = 0; t < T; ++t) iv->final_residual(t, resid.row(t));
  }
  trace.logits = Matrix(T, static_cast<std::size_t>(cfg.vocab_size));
  for (std::size_t t = 0; t < T; ++t) mat_vec(w.unembed, resid.row(t), trace.logits.row(t));
  if (!all_finite(trace.logits.data())) {
    throw Error(ErrorCode::NonFiniteInput, "non-finite logits");
  }
  trace.final_resid = std::move(resid);
  trace.next_token = static_cast<int>(argmax(trace.logits.row(T - 1)));
  return trace;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1 ||
      max_seq < 1) {
    throw Error(ErrorCode::FormatError, "model counts must be >= 1");
  }
  if (d_model != n_heads * d_head) {
    throw Error(ErrorCode::FormatError, "d_model must equal n_heads * d_head");
  }
}

ModelWeights ModelWeights::zeros(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto dh = static_cast<std::size_t>(config.d_head);
  const auto dm = static_cast<std::size_t>(config.d_mlp);
  ModelWeights w;
  w.config = config;
  w.tok_embed = Matrix(static_cast<std::size_t>(config.vocab_size), d);
  w.pos_embed = Matrix(static_cast<std::size_t>(config.max_seq), d);
  w.unembed = Matrix(static_cast<std::size_t>(config.vocab_size), d);
  w.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (LayerWeights& lw : w.layers) {
    lw.heads.resize(static_cast<std::size_t>(config.n_heads));
    for (HeadWeights& hw : lw.heads) {
      hw.wq = Matrix(d, dh);
      hw.wk = Matrix(d, dh);
      hw.wv = Matrix(d, dh);
      hw.wo = Matrix(dh, d);
    }
    lw.attn_norm = Vector(d, 1.0);
    lw.mlp_norm = Vector(d, 1.0);
    lw.mlp_in = Matrix(d, dm);
    lw.mlp_out = Matrix(dm, d);
  }
  return w;
}

ModelWeights ModelWeights::random(const ModelConfig& config, double scale) {
  ModelWeights w = zeros(config);
  Rng rng(config.rng_seed);
  auto fill = [&](Matrix& m, double s) {
    for (double& x : m.data()) x = s * rng.normal();
  };
  fill(w.tok_embed, 1.0);
  fill(w.pos_embed, 0.5);
  fill(w.unembed, scale);
  for (LayerWeights& lw : w.layers) {
    for (HeadWeights& hw : lw.heads) {
      fill(hw.wq, scale);
      fill(hw.wk, scale);
      fill(hw.wv, scale);
      fill(hw.wo, scale);
    }
    for (double& g : lw.attn_norm) g = 1.0 + 0.1 * rng.normal();
    for (double& g : lw.mlp_norm) g = 1.0 + 0.1 * rng.normal();
    fill(lw.mlp_in, scale);
    fill(lw.mlp_out, scale);
  }
  return w;
}

void ModelWeights::validate() const {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto dh = static_cast<std::size_t>(config.d_head);
  const auto dm = static_cast<std::size_t>(config.d_mlp);
  auto expect = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw Error(ErrorCode::CorruptWeights, std::string("shape mismatch for ") + name);
    }
    if (!all_finite(m.data())) {
      throw Error(ErrorCode::CorruptWeights, std::string("non-finite values in ") + name);
    }
  };
  expect(tok_embed, static_cast<std::size_t>(config.vocab_size), d, "tok_embed");
  expect(pos_embed, static_cast<std::size_t>(config.max_seq), d, "pos_embed");
  expect(unembed, static_cast<std::size_t>(config.vocab_size), d, "unembed");
  if (layers.size() != static_cast<std::size_t>(config.n_layers)) {
    throw Error(ErrorCode::CorruptWeights, "layer count mismatch");
  }
  for (const LayerWeights& lw : layers) {
    if (lw.heads.size() != static_cast<std::size_t>(config.n_heads)) {
      throw Error(ErrorCode::CorruptWeights, "head count mismatch");
    }
    for (const HeadWeights& hw : lw.heads) {
      expect(hw.wq, d, dh, "wq");
      expect(hw.wk, d, dh, "wk");
      expect(hw.wv, d, dh, "wv");
      expect(hw.wo, dh, d, "wo");
    }
    if (lw.attn_norm.size() != d || lw.mlp_norm.size() != d || !all_finite(lw.attn_norm) ||
        !all_finite(lw.mlp_norm)) {
      throw Error(ErrorCode::CorruptWeights, "norm gains");
    }
    expect(lw.mlp_in, d, dm, "mlp_in");
    expect(lw.mlp_out, dm, d, "mlp_out");
  }
}

TokenSeq TokenSeq::from_parts(std::span<const int> context, std::span<const int> question) {
  TokenSeq seq;
  seq.ids.assign(context.begin(), context.end());
  seq.ids.insert(seq.ids.end(), question.begin(), question.end());
  seq.context_start = 0;
  seq.context_end = context.size();
  seq.question_start = context.size();
  seq.question_end = seq.ids.size();
  return seq;
}

TokenSeq TokenSeq::extended(int token) const {
  TokenSeq out = *this;
  out.ids.push_back(token);
  return out;
}

ProbDist RunTrace::next_distribution() const {
  Vector p(last_logits().begin(), last_logits().end());
  softmax_inplace(p);
  return ProbDist(std::move(p));
}

void Intervention::scores(int, int, std::size_t, std::span<double>) const {}
void Intervention::head_output(int, int, std::size_t, std::span<double>) const {}
void Intervention::mlp_output(int, std::size_t, std::span<double>) const {}
void Intervention::final_residual(std::size_t, std::span<double>) const {}

Matrix embed_tokens(const ModelWeights& weights, const TokenSeq& input) {
  check_input(weights.config, input);
  Matrix x(input.size(), static_cast<std::size_t>(weights.config.d_model));
  for (std::size_t t = 0; t < input.size(); ++t) {
    auto tok = weights.tok_embed.row(static_cast<std::size_t>(input.ids[t]));
    auto pos = weights.pos_embed.row(t);
    auto out = x.row(t);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = tok[i] + pos[i];
  }
  return x;
}

RunTrace forward(const ModelWeights& weights, const TokenSeq& input, const CaptureSpec& capture,
                 const Intervention* intervention, const Matrix* embed_override) {
  return run(weights, input, capture, intervention, embed_override, nullptr);
}

std::uint64_t forward_pass_count() { return g_forward_calls.load(std::memory_order_relaxed); }

Generation greedy_generate(const ForwardHandle& handle, const TokenSeq& prompt, int steps,
                           const GenerateOptions& options) {
  if (steps < 1) throw Error(ErrorCode::InvalidArgument, "generation length must be >= 1");
  const auto max_seq = static_cast<std::size_t>(handle.weights().config.max_seq);
  Generation gen;
  TokenSeq seq = prompt;
  for (int j = 0; j < steps; ++j) {
    if (seq.size() + 1 > max_seq) {
      gen.overflow = true;
      throw GenerationError("no room for generated token " + std::to_string(j), std::move(gen));
    }
    RunTrace trace = handle.run(seq, options.capture);
    const int token = trace.next_token;
    gen.tokens.push_back(token);
    gen.traces.push_back(std::move(trace));
    if (options.stop_token && token == *options.stop_token) {
      gen.hit_stop = true;
      break;
    }
    seq = seq.extended(token);
  }
  return gen;
}

Generation greedy_generate(const ModelWeights& weights, const TokenSeq& prompt, int steps,
                           const GenerateOptions& options) {
  return greedy_generate(PlainHandle(weights), prompt, steps, options);
}

double answer_nll(const ModelWeights& weights, const TokenSeq& input, int target,
                  const Matrix* embed_override) {
  const RunTrace trace = forward(weights, input, CaptureSpec::none(), nullptr, embed_override);
  return -log_softmax(trace.last_logits())[static_cast<std::size_t>(target)];
}

Matrix input_gradient(const ModelWeights& weights, const TokenSeq& input, int target) {
  const ModelConfig& cfg = weights.config;
  std::vector<LayerCache> cache;
  const RunTrace trace = run(weights, input, CaptureSpec::activations_only(), nullptr, nullptr, &cache);
  const std::size_t T = input.size();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dh = static_cast<std::size_t>(cfg.d_head);
  const std::size_t dm = static_cast<std::size_t>(cfg.d_mlp);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  // d(-log p_target)/d(logits) = softmax - onehot, at the last position only.
  Vector dlogits(trace.last_logits().begin(), trace.last_logits().end());
  softmax_inplace(dlogits);
  dlogits[static_cast<std::size_t>(target)] -= 1.0;
  Matrix dres(T, d);
  for (std::size_t v = 0; v < dlogits.size(); ++v) axpy(dlogits[v], weights.unembed.row(v), dres.row(T - 1));

  Vector dhact(dm), dw(d), dz(dh), tmp(d);
  for (std::size_t li = weights.layers.size(); li-- > 0;) {
    const LayerWeights& lw = weights.layers[li];
    const LayerCache& c = cache[li];
    const LayerTrace& lt = trace.layers[li];

    // MLP block: resid_out = mid + mlp(norm(mid)).
    Matrix dmid = dres;
    for (std::size_t t = 0; t < T; ++t) {
      auto dout = dres.row(t);
      if (std::all_of(dout.begin(), dout.end(), [](double x) { return x == 0.0; })) continue;
      mat_vec(lw.mlp_out, dout, dhact);
      for (std::size_t i = 0; i < dm; ++i) dhact[i] *= gelu_grad(c.hpre(t, i));
      mat_vec(lw.mlp_in, dhact, dw);
      norm_backward(cfg.norm, c.mid.row(t), lw.mlp_norm, dw, dmid.row(t));
    }

    // Attention block: mid = resid_in + sum_h heads(norm(resid_in)).
    Matrix dr = dmid;
    Matrix du(T, d);
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      const HeadWeights& hw = lw.heads[h];
      const Matrix& q = c.q[h];
      const Matrix& k = c.k[h];
      const Matrix& v = c.v[h];
      const Matrix& a = c.attn[h];
      Matrix dq(T, dh), dk(T, dh), dv(T, dh);
      Vector da(T);
      for (std::size_t t = 0; t < T; ++t) {
        mat_vec(hw.wo, dmid.row(t), dz);
        double weighted = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          da[j] = dot(dz, v.row(j));
          axpy(a(t, j), dz, dv.row(j));
          weighted += a(t, j) * da[j];
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = a(t, j) * (da[j] - weighted) * inv_sqrt;
          if (ds == 0.0) continue;
          axpy(ds, k.row(j), dq.row(t));
          axpy(ds, q.row(t), dk.row(j));
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        mat_vec(hw.wq, dq.row(t), tmp);
        axpy(1.0, tmp, du.row(t));
        mat_vec(hw.wk, dk.row(t), tmp);
        axpy(1.0, tmp, du.row(t));
        mat_vec(hw.wv, dv.row(t), tmp);
        axpy(1.0, tmp, du.row(t));
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      norm_backward(cfg.norm, lt.resid_in.row(t), lw.attn_norm, du.row(t), dr.row(t));
    }
    dres = std::move(dr);
  }
  return dres;
}

}  // namespace qacirc
