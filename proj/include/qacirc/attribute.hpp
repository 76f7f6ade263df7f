// SPDX-License-Identifier: Apache-2.0
//
// Attribution from a single attention head: entropy profiling to find the
// head, span extraction around its attention peak, and the per-step
// attribution loop. A gradient-saliency baseline shares the span logic.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qacirc/fixture.hpp"
#include "qacirc/model.hpp"
#include "qacirc/probe.hpp"

namespace qacirc {

struct HeadProfile {
  HeadAddress head;
  double entropy = 0.0;   // mean, nats, over the renormalized context row
  double accuracy = 0.0;  // fraction whose context argmax is the answer slot
  std::size_t n = 0;
};

// Attention row of each head at the last input position, renormalized over
// the context window.
std::vector<HeadProfile> head_entropy_profile(const ModelWeights& weights, const ProbeSet& dataset,
                                              const std::vector<HeadAddress>& heads,
                                              AnswerMode mode = AnswerMode::Copy, int jobs = 1);

// Lowest entropy; ties go to higher accuracy, then lower (layer, head).
HeadAddress select_attribution_head(const std::vector<HeadProfile>& profiles);

enum class SpanMode { Window, Delimiter };

std::string to_string(SpanMode mode);
SpanMode span_mode_from_string(const std::string& s);

struct AttributionConfig {
  HeadAddress head{1, 2};
  int span_length = 3;
  int top_k = 1;
  int answer_length = 1;
  SpanMode span_mode = SpanMode::Window;
  int delimiter = 2;               // SEP in the fixture vocabulary
  std::optional<int> stop_token;   // generation ends at this token

  void validate() const;
};

struct ContextBounds {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
};

struct AttributionSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  double peak = 0.0;    // largest renormalized weight inside the span
  int source_step = 0;  // generated-token index that produced the span
  std::vector<int> tokens;
  bool uninformative = false;  // the row carried no mass inside the window

  bool contains(std::size_t pos) const { return pos >= start && pos < end; }
};

// `row` is indexed by absolute position and only its [bounds) slice is used,
// after renormalization. `tokens` (same indexing) is needed for delimiter
// mode and to fill the span's token list.
AttributionSpan get_max_span(std::span<const double> row, ContextBounds bounds, const AttributionConfig& config,
                             std::span<const int> tokens = {});

struct AttributionResult {
  std::vector<int> answer_tokens;
  std::vector<AttributionSpan> spans;  // sorted by peak, deduplicated, top_k
  std::size_t forward_passes = 0;
  bool truncated = false;  // stopped at the terminator or ran out of room
};

AttributionResult attn_attrib(const ForwardHandle& handle, const TokenSeq& prompt, const AttributionConfig& config);
AttributionResult attn_attrib(const ModelWeights& weights, const TokenSeq& prompt, const AttributionConfig& config);

// Per-position norm of the input gradient of -log P(answer_token).
Vector gradient_saliency(const ModelWeights& weights, const TokenSeq& input, int answer_token);
// Same, via central finite differences on every input coordinate.
Vector finite_difference_saliency(const ModelWeights& weights, const TokenSeq& input, int answer_token,
                                  double step = 1e-3);

struct GradientAttribution {
  AttributionSpan span;
  Vector saliency;  // per absolute position
};

GradientAttribution gradient_baseline(const ModelWeights& weights, const TokenSeq& prompt, int answer_token,
                                      const AttributionConfig& config);

}  // namespace qacirc
