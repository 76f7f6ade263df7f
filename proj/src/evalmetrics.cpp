// SPDX-License-Identifier: Apache-2.0
#include "qacirc/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"
#include "qacirc/util.hpp"

namespace qacirc {

int attribution_exact_match(const AttributionSpan& pred, std::size_t gold_start, bool strict, std::size_t gold_end) {
  if (!strict) return pred.contains(gold_start) ? 1 : 0;
  if (gold_end <= gold_start) gold_end = gold_start + 1;
  return pred.start <= gold_start && gold_end <= pred.end ? 1 : 0;
}

double span_f1(const std::vector<int>& pred, const std::vector<int>& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<int, int> counts;
  for (int t : gold) ++counts[t];
  std::size_t common = 0;
  for (int t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(pred.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

double rel_score(const RelScoreInput& x) {
  if (!std::isfinite(x.logp_orig) || !std::isfinite(x.logp_ablated)) {
    throw Error(ErrorCode::NonFiniteInput, "log probabilities must be finite");
  }
  if (x.logp_orig > 0.0 || x.logp_ablated > 0.0) {
    throw Error(ErrorCode::InvalidArgument, "log probabilities must be <= 0");
  }
  if (x.logp_ablated == 0.0) throw Error(ErrorCode::UndefinedRelScore, "ablated log probability is 0");
  return std::fabs((x.logp_orig - x.logp_ablated) / x.logp_ablated);
}

double qa_accuracy(const ForwardHandle& handle, const ProbeSet& dataset, AnswerMode mode, int jobs) {
  if (dataset.empty()) throw Error(ErrorCode::InvalidDataset, "empty dataset");
  std::vector<int> hit(dataset.size());
  parallel_for(dataset.size(), jobs, [&](std::size_t i) {
    const ProbeExample& ex = dataset[i];
    hit[i] = handle.run(clean_input(ex, mode), CaptureSpec::none()).next_token == target_token(ex, mode);
  });
  std::size_t n = 0;
  for (int h : hit) n += static_cast<std::size_t>(h);
  return static_cast<double>(n) / static_cast<double>(dataset.size());
}

double qa_accuracy(const ModelWeights& weights, const ProbeSet& dataset, AnswerMode mode, int jobs) {
  return qa_accuracy(PlainHandle(weights), dataset, mode, jobs);
}

TokenSeq ablate_spans_from_context(const TokenSeq& input, std::vector<AttributionSpan> spans, int pad) {
  for (const auto& s : spans) {
    if (s.start >= s.end || s.start < input.context_start || s.end > input.context_end) {
      throw Error(ErrorCode::InvalidArgument, "span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                                                  ") outside the context");
    }
  }
  std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  TokenSeq out = input;
  std::size_t covered = 0;  // positions below this are already padded
  for (const auto& s : spans) {
    for (std::size_t t = std::max(s.start, covered); t < s.end; ++t) out.ids[t] = pad;
    covered = std::max(covered, s.end);
  }
  return out;
}

double response_logprob(const ModelWeights& weights, const TokenSeq& prompt, const std::vector<int>& response) {
  TokenSeq seq = prompt;
  double total = 0.0;
  for (int token : response) {
    total -= answer_nll(weights, seq, token);
    seq = seq.extended(token);
  }
  return total;
}

AttributionSpan random_span(const TokenSeq& input, std::size_t length, const AttributionSpan& avoid, Rng& rng) {
  std::vector<std::size_t> starts;
  for (std::size_t s = input.context_start; s + length <= input.context_end; ++s) {
    if (s + length <= avoid.start || s >= avoid.end) starts.push_back(s);
  }
  if (length == 0 || starts.empty()) {
    throw Error(ErrorCode::InvalidWindow, "no context window of length " + std::to_string(length) +
                                              " avoids the attributed span");
  }
  AttributionSpan span;
  span.start = starts[rng.below(starts.size())];
  span.end = span.start + length;
  span.tokens.assign(input.ids.begin() + static_cast<std::ptrdiff_t>(span.start),
                     input.ids.begin() + static_cast<std::ptrdiff_t>(span.end));
  return span;
}

std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "metric,mode,value,n,seed\n";
  for (const auto& r : rows) out << r.metric << ',' << r.mode << ',' << r.value << ',' << r.n << ',' << r.seed << '\n';
  return out.str();
}

std::string metrics_to_json(const std::vector<MetricRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["metric"] = r.metric;
    j["mode"] = r.mode;
    j["value"] = r.value;
    j["n"] = r.n;
    j["seed"] = r.seed;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

}  // namespace qacirc
