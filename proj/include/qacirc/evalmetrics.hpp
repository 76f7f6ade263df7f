// SPDX-License-Identifier: Apache-2.0
//
// Attribution and faithfulness metrics.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qacirc/attribute.hpp"
#include "qacirc/model.hpp"
#include "qacirc/probe.hpp"
#include "qacirc/rng.hpp"

namespace qacirc {

// 1 iff the gold position lies in [start, end). Strict mode requires the
// whole gold span [gold_start, gold_end) inside the prediction.
int attribution_exact_match(const AttributionSpan& pred, std::size_t gold_start, bool strict = false,
                            std::size_t gold_end = 0);

// Token-multiset F1; two empty inputs score 1.
double span_f1(const std::vector<int>& pred, const std::vector<int>& gold);

struct RelScoreInput {
  double logp_orig = 0.0;
  double logp_ablated = 0.0;
};

// |(logp_orig - logp_ablated) / logp_ablated|; throws UndefinedRelScore on a
// zero denominator and InvalidArgument on positive log probabilities.
double rel_score(const RelScoreInput& x);

double qa_accuracy(const ForwardHandle& handle, const ProbeSet& dataset, AnswerMode mode, int jobs = 1);
double qa_accuracy(const ModelWeights& weights, const ProbeSet& dataset, AnswerMode mode, int jobs = 1);

// Replaces span tokens with `pad`, merging overlaps first; positions and
// segment markers are unchanged.
TokenSeq ablate_spans_from_context(const TokenSeq& input, std::vector<AttributionSpan> spans, int pad = 0);

// Log probability of generating `response` token by token after `prompt`.
double response_logprob(const ModelWeights& weights, const TokenSeq& prompt, const std::vector<int>& response);

// Uniformly drawn window of `length` inside the context that does not
// intersect `avoid`. Throws InvalidWindow when no such window exists.
AttributionSpan random_span(const TokenSeq& input, std::size_t length, const AttributionSpan& avoid, Rng& rng);

struct MetricRow {
  std::string metric;
  std::string mode;
  double value = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

std::string metrics_to_csv(const std::vector<MetricRow>& rows);
std::string metrics_to_json(const std::vector<MetricRow>& rows);

}  // namespace qacirc
