// SPDX-License-Identifier: Apache-2.0
#include "qacirc/attribute.hpp"

#include <algorithm>
#include <cmath>

#include "qacirc/util.hpp"

namespace qacirc {

std::vector<HeadProfile> head_entropy_profile(const ModelWeights& weights, const ProbeSet& dataset,
                                              const std::vector<HeadAddress>& heads, AnswerMode mode, int jobs) {
  if (dataset.empty()) throw Error(ErrorCode::InvalidDataset, "empty probe dataset");
  for (const auto& h : heads) {
    if (h.layer < 0 || h.layer >= weights.config.n_layers || h.head < 0 || h.head >= weights.config.n_heads) {
      throw Error(ErrorCode::InvalidArgument, "head address out of range");
    }
  }
  const std::size_t n = dataset.size();
  const std::size_t m = heads.size();
  std::vector<double> ent(n * m), hit(n * m);
  parallel_for(n, jobs, [&](std::size_t i) {
    const TokenSeq input = clean_input(dataset[i], mode);
    if (input.context_end <= input.context_start) throw Error(ErrorCode::InvalidWindow, "empty context window");
    const RunTrace trace = forward(weights, input, CaptureSpec::full());
    for (std::size_t k = 0; k < m; ++k) {
      const auto row = trace.layers[static_cast<std::size_t>(heads[k].layer)]
                           .attention[static_cast<std::size_t>(heads[k].head)]
                           .row(trace.last());
      Vector window(row.begin() + static_cast<std::ptrdiff_t>(input.context_start),
                    row.begin() + static_cast<std::ptrdiff_t>(input.context_end));
      double z = 0.0;
      for (double v : window) z += v;
      if (!(z > 0.0)) throw Error(ErrorCode::InvalidWindow, "no attention mass on the context");
      for (double& v : window) v /= z;
      ent[i * m + k] = entropy(ProbDist(window));
      hit[i * m + k] = input.context_start + argmax(window) == dataset[i].answer_position ? 1.0 : 0.0;
    }
  });
  std::vector<HeadProfile> out(m);
  for (std::size_t k = 0; k < m; ++k) {
    out[k].head = heads[k];
    out[k].n = n;
    for (std::size_t i = 0; i < n; ++i) {
      out[k].entropy += ent[i * m + k];
      out[k].accuracy += hit[i * m + k];
    }
    out[k].entropy /= static_cast<double>(n);
    out[k].accuracy /= static_cast<double>(n);
  }
  return out;
}

HeadAddress select_attribution_head(const std::vector<HeadProfile>& profiles) {
  if (profiles.empty()) throw Error(ErrorCode::InvalidArgument, "no head profiles");
  const auto best = std::min_element(profiles.begin(), profiles.end(), [](const auto& a, const auto& b) {
    if (a.entropy != b.entropy) return a.entropy < b.entropy;
    if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
    return a.head < b.head;
  });
  return best->head;
}

std::string to_string(SpanMode mode) { return mode == SpanMode::Window ? "window" : "delimiter"; }

SpanMode span_mode_from_string(const std::string& s) {
  if (s == "window") return SpanMode::Window;
  if (s == "delimiter") return SpanMode::Delimiter;
  throw Error(ErrorCode::InvalidArgument, "unknown span mode " + s);
}

void AttributionConfig::validate() const {
  if (span_length < 1) throw Error(ErrorCode::InvalidArgument, "span length must be >= 1");
  if (top_k < 1) throw Error(ErrorCode::InvalidArgument, "top_k must be >= 1");
  if (answer_length < 1) throw Error(ErrorCode::InvalidArgument, "answer length must be >= 1");
}

AttributionSpan get_max_span(std::span<const double> row, ContextBounds bounds, const AttributionConfig& config,
                             std::span<const int> tokens) {
  config.validate();
  if (bounds.end <= bounds.start || bounds.end > row.size()) {
    throw Error(ErrorCode::InvalidWindow, "context window [" + std::to_string(bounds.start) + ", " +
                                              std::to_string(bounds.end) + ") is empty or out of range");
  }
  if (config.span_mode == SpanMode::Delimiter && tokens.size() < bounds.end) {
    throw Error(ErrorCode::InvalidArgument, "delimiter mode needs the token ids");
  }
  const auto window = row.subspan(bounds.start, bounds.end - bounds.start);
  double z = 0.0;
  for (double v : window) {
    if (!std::isfinite(v) || v < 0.0) throw Error(ErrorCode::InvalidDistribution, "attention row entry invalid");
    z += v;
  }
  AttributionSpan span;
  span.uninformative = !(z > 0.0);
  const std::size_t peak = bounds.start + (span.uninformative ? 0 : argmax(window));

  if (config.span_mode == SpanMode::Window) {
    const auto len = std::min<std::size_t>(static_cast<std::size_t>(config.span_length), bounds.end - bounds.start);
    const std::size_t half = (len - 1) / 2;
    std::size_t start = peak - std::min(half, peak - bounds.start);
    if (start + len > bounds.end) start = bounds.end - len;
    span.start = start;
    span.end = start + len;
  } else {
    const int delim = config.delimiter;
    if (tokens[peak] == delim) {
      span.start = peak;
      span.end = peak + 1;
    } else {
      std::size_t s = peak;
      while (s > bounds.start && tokens[s - 1] != delim) --s;
      std::size_t e = peak + 1;
      while (e < bounds.end && tokens[e] != delim) ++e;
      span.start = s;
      span.end = e;
    }
  }
  if (!span.uninformative) {
    for (std::size_t t = span.start; t < span.end; ++t) span.peak = std::max(span.peak, row[t] / z);
  }
  if (!tokens.empty()) span.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(span.start),
                                          tokens.begin() + static_cast<std::ptrdiff_t>(span.end));
  return span;
}

AttributionResult attn_attrib(const ForwardHandle& handle, const TokenSeq& prompt, const AttributionConfig& config) {
  config.validate();
  const ModelConfig& mc = handle.weights().config;
  if (config.head.layer < 0 || config.head.layer >= mc.n_layers || config.head.head < 0 ||
      config.head.head >= mc.n_heads) {
    throw Error(ErrorCode::InvalidArgument, "attribution head out of range");
  }
  GenerateOptions opts;
  opts.stop_token = config.stop_token;
  opts.capture = CaptureSpec::full();
  Generation gen;
  AttributionResult result;
  try {
    gen = greedy_generate(handle, prompt, config.answer_length, opts);
  } catch (const GenerationError& e) {
    gen = e.partial();
    result.truncated = true;
  }
  result.forward_passes = gen.traces.size();
  result.truncated = result.truncated || gen.hit_stop;

  const ContextBounds bounds{prompt.context_start, prompt.context_end};
  std::vector<AttributionSpan> spans;
  for (std::size_t j = 0; j < gen.tokens.size(); ++j) {
    const int token = gen.tokens[j];
    if (config.stop_token && token == *config.stop_token) break;
    result.answer_tokens.push_back(token);
    const RunTrace& trace = gen.traces[j];
    const auto row = trace.layers[static_cast<std::size_t>(config.head.layer)]
                         .attention[static_cast<std::size_t>(config.head.head)]
                         .row(trace.last());
    AttributionSpan span = get_max_span(row, bounds, config, prompt.ids);
    span.source_step = static_cast<int>(j);
    spans.push_back(std::move(span));
  }

  // Identical (start, end) keep the highest peak, earliest step on ties.
  std::vector<AttributionSpan> unique;
  for (auto& s : spans) {
    auto it = std::find_if(unique.begin(), unique.end(),
                           [&](const auto& u) { return u.start == s.start && u.end == s.end; });
    if (it == unique.end()) {
      unique.push_back(std::move(s));
    } else if (s.peak > it->peak) {
      *it = std::move(s);
    }
  }
  std::stable_sort(unique.begin(), unique.end(),
                   [](const AttributionSpan& a, const AttributionSpan& b) { return a.peak > b.peak; });
  if (unique.size() > static_cast<std::size_t>(config.top_k)) unique.resize(static_cast<std::size_t>(config.top_k));
  result.spans = std::move(unique);
  return result;
}

AttributionResult attn_attrib(const ModelWeights& weights, const TokenSeq& prompt, const AttributionConfig& config) {
  return attn_attrib(PlainHandle(weights), prompt, config);
}

Vector gradient_saliency(const ModelWeights& weights, const TokenSeq& input, int answer_token) {
  const Matrix grad = input_gradient(weights, input, answer_token);
  Vector out(grad.rows());
  for (std::size_t t = 0; t < grad.rows(); ++t) {
    const auto r = grad.row(t);
    out[t] = std::sqrt(dot(r, r));
  }
  return out;
}

Vector finite_difference_saliency(const ModelWeights& weights, const TokenSeq& input, int answer_token,
                                  double step) {
  Matrix embed = embed_tokens(weights, input);
  Vector out(embed.rows());
  for (std::size_t t = 0; t < embed.rows(); ++t) {
    double sq = 0.0;
    for (std::size_t d = 0; d < embed.cols(); ++d) {
      const double orig = embed(t, d);
      embed(t, d) = orig + step;
      const double up = answer_nll(weights, input, answer_token, &embed);
      embed(t, d) = orig - step;
      const double down = answer_nll(weights, input, answer_token, &embed);
      embed(t, d) = orig;
      const double g = (up - down) / (2.0 * step);
      sq += g * g;
    }
    out[t] = std::sqrt(sq);
  }
  return out;
}

GradientAttribution gradient_baseline(const ModelWeights& weights, const TokenSeq& prompt, int answer_token,
                                      const AttributionConfig& config) {
  GradientAttribution out;
  out.saliency = gradient_saliency(weights, prompt, answer_token);
  // Saliencies indistinguishable from zero carry no signal.
  Vector row = out.saliency;
  double peak = 0.0;
  for (std::size_t t = prompt.context_start; t < prompt.context_end; ++t) peak = std::max(peak, row[t]);
  if (peak < 1e-12) std::fill(row.begin(), row.end(), 0.0);
  out.span = get_max_span(row, {prompt.context_start, prompt.context_end}, config, prompt.ids);
  return out;
}

}  // namespace qacirc
