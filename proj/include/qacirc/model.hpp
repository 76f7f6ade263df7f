// SPDX-License-Identifier: Apache-2.0
//
// A small decoder-only transformer with every intermediate exposed.
//
// Layout per layer: optional pre-norm, multi-head causal attention whose
// per-head output-projected contributions are added to the residual stream,
// then optional pre-norm and a GELU MLP whose output is added as well. There
// is no final norm, so the residual at any position is exactly
// embedding + sum of component contributions and the logits are linear in it.
#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qacirc/numerics.hpp"

namespace qacirc {

enum class NormKind { None, Rms };

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_mlp = 64;
  int vocab_size = 64;
  int max_seq = 32;
  std::uint64_t rng_seed = 0;
  NormKind norm = NormKind::None;

  // Throws FormatError when counts are non-positive or d_model != n_heads * d_head.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct HeadWeights {
  Matrix wq, wk, wv;  // d_model x d_head
  Matrix wo;          // d_head x d_model
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Vector attn_norm;  // d_model gains
  Vector mlp_norm;   // d_model gains
  Matrix mlp_in;     // d_model x d_mlp
  Matrix mlp_out;    // d_mlp x d_model
};

struct ModelWeights {
  ModelConfig config;
  Matrix tok_embed;  // vocab x d_model
  Matrix pos_embed;  // max_seq x d_model
  std::vector<LayerWeights> layers;
  Matrix unembed;  // vocab x d_model; logits = unembed * residual

  static ModelWeights zeros(const ModelConfig& config);
  // Gaussian weights with the given scale, seeded from config.rng_seed.
  static ModelWeights random(const ModelConfig& config, double scale = 0.3);

  // Throws CorruptWeights on any shape mismatch or non-finite value.
  void validate() const;
};

// Token ids plus the segment markers the analysis code needs.
struct TokenSeq {
  std::vector<int> ids;
  std::size_t context_start = 0;
  std::size_t context_end = 0;
  std::size_t question_start = 0;
  std::size_t question_end = 0;

  std::size_t size() const noexcept { return ids.size(); }
  std::size_t last() const noexcept { return ids.size() - 1; }

  static TokenSeq from_parts(std::span<const int> context, std::span<const int> question);
  // Copy with `token` appended after the question segment.
  TokenSeq extended(int token) const;
};

struct CaptureSpec {
  bool activations = true;
  bool attention = true;

  static CaptureSpec full() { return {}; }
  static CaptureSpec none() { return {false, false}; }
  static CaptureSpec activations_only() { return {true, false}; }
};

struct LayerTrace {
  Matrix resid_in;                 // T x d_model, residual entering the layer
  std::vector<Matrix> head_out;    // per head, T x d_model
  std::vector<Matrix> scores;      // per head, T x T pre-softmax; masked entries hold 0
  std::vector<Matrix> attention;   // per head, T x T; masked entries are exactly 0
  Matrix mlp_out;                  // T x d_model
};

struct RunTrace {
  TokenSeq input;
  CaptureSpec capture;
  Matrix embed;                    // T x d_model (token + position)
  std::vector<LayerTrace> layers;  // empty when nothing is captured
  Matrix final_resid;              // T x d_model
  Matrix logits;                   // T x vocab
  int next_token = -1;

  std::size_t last() const noexcept { return input.last(); }
  std::span<const double> last_logits() const { return logits.row(last()); }
  ProbDist next_distribution() const;
};

// Hooks consulted during a forward pass. Each hook may rewrite the value in
// place; the default implementation leaves everything untouched.
class Intervention {
 public:
  virtual ~Intervention() = default;
  // Row of pre-softmax scores for query `pos` (length pos + 1).
  virtual void scores(int layer, int head, std::size_t pos, std::span<double> row) const;
  virtual void head_output(int layer, int head, std::size_t pos, std::span<double> out) const;
  virtual void mlp_output(int layer, std::size_t pos, std::span<double> out) const;
  // Residual fed to the unembedding.
  virtual void final_residual(std::size_t pos, std::span<double> resid) const;
};

// Throws SequenceTooLong when input.size() > max_seq.
RunTrace forward(const ModelWeights& weights, const TokenSeq& input,
                 const CaptureSpec& capture = {}, const Intervention* intervention = nullptr,
                 const Matrix* embed_override = nullptr);

// Number of forward passes executed process-wide.
std::uint64_t forward_pass_count();

// Anything that can run a (possibly intervened) forward pass.
class ForwardHandle {
 public:
  virtual ~ForwardHandle() = default;
  virtual RunTrace run(const TokenSeq& input, const CaptureSpec& capture) const = 0;
  virtual const ModelWeights& weights() const = 0;
};

class PlainHandle final : public ForwardHandle {
 public:
  explicit PlainHandle(const ModelWeights& weights) : weights_(weights) {}
  RunTrace run(const TokenSeq& input, const CaptureSpec& capture) const override {
    return forward(weights_, input, capture);
  }
  const ModelWeights& weights() const override { return weights_; }

 private:
  const ModelWeights& weights_;
};

struct Generation {
  std::vector<int> tokens;
  std::vector<RunTrace> traces;
  bool hit_stop = false;
  bool overflow = false;
};

class GenerationError : public Error {
 public:
  GenerationError(const std::string& what, Generation partial)
      : Error(ErrorCode::SequenceTooLong, what), partial_(std::move(partial)) {}
  const Generation& partial() const noexcept { return partial_; }

 private:
  Generation partial_;
};

struct GenerateOptions {
  std::optional<int> stop_token;  // generation ends after emitting this token
  CaptureSpec capture = CaptureSpec::full();
};

// Greedy decoding of up to `steps` tokens. Every step needs room for its
// output token inside max_seq; running out throws GenerationError carrying
// the tokens produced so far (overflow flagged).
Generation greedy_generate(const ForwardHandle& handle, const TokenSeq& prompt, int steps,
                           const GenerateOptions& options = {});
Generation greedy_generate(const ModelWeights& weights, const TokenSeq& prompt, int steps,
                           const GenerateOptions& options = {});

// Negative log-probability of `target` at the last position.
double answer_nll(const ModelWeights& weights, const TokenSeq& input, int target,
                  const Matrix* embed_override = nullptr);

// Exact reverse-mode gradient of answer_nll with respect to the input
// vectors (token + position embedding) at every position: T x d_model.
Matrix input_gradient(const ModelWeights& weights, const TokenSeq& input, int target);

Matrix embed_tokens(const ModelWeights& weights, const TokenSeq& input);

}  // namespace qacirc
