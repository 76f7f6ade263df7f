// SPDX-License-Identifier: Apache-2.0
#include "qacirc/circuit.hpp"

#include <algorithm>
#include <iostream>

#include "json.hpp"
#include "qacirc/rng.hpp"
#include "qacirc/util.hpp"

namespace qacirc {

namespace {

using json = nlohmann::ordered_json;

json position_to_json(const Position& p) {
  switch (p.tag) {
    case Position::Tag::Last: return "last";
    case Position::Tag::All: return "all";
    case Position::Tag::Index: return p.index;
  }
  return nullptr;
}

Position position_from_json(const nlohmann::json& j) {
  if (j.is_number_unsigned()) return Position::at(j.get<std::size_t>());
  const auto s = j.get<std::string>();
  if (s == "last") return Position::last();
  if (s == "all") return Position::all();
  throw Error(ErrorCode::FormatError, "bad position " + s);
}

json ref_to_json(const ComponentRef& c) {
  json j;
  j["kind"] = to_string(c.kind);
  j["layer"] = c.layer;
  if (c.kind == ComponentKind::AttnHead) j["head"] = c.head;
  j["position"] = position_to_json(c.position);
  return j;
}

ComponentRef ref_from_json(const nlohmann::json& j) {
  ComponentRef c;
  c.kind = component_kind_from_string(j.at("kind").get<std::string>());
  c.layer = j.at("layer").get<int>();
  c.head = c.kind == ComponentKind::AttnHead ? j.at("head").get<int>() : -1;
  c.position = j.contains("position") ? position_from_json(j.at("position")) : Position::last();
  return c;
}

json scores_to_json(const std::vector<ComponentScore>& scores) {
  json arr = json::array();
  for (const auto& s : scores) {
    json j = ref_to_json(s.component);
    j["score"] = s.score;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::vector<ComponentScore> scores_from_json(const nlohmann::json& arr) {
  std::vector<ComponentScore> out;
  for (const auto& j : arr) out.push_back({ref_from_json(j), j.at("score").get<double>()});
  return out;
}

double mean_in_order(const std::vector<double>& xs) {
  double sum = 0.0;
  for (double x : xs) sum += x;
  return xs.empty() ? 0.0 : sum / static_cast<double>(xs.size());
}

}  // namespace

std::vector<ComponentRef> CircuitReport::selected_components() const {
  std::vector<ComponentRef> out;
  for (const auto& s : selected) out.push_back(s.component);
  return out;
}

std::string to_json(const CircuitReport& r) {
  json j;
  j["hierarchy"] = r.hierarchy;
  j["granularity"] = to_string(r.granularity);
  j["mode"] = to_string(r.mode);
  j["delta"] = r.delta;
  j["combined_score"] = r.combined_score;
  j["delta_unmet"] = r.delta_unmet;
  j["selected"] = scores_to_json(r.selected);
  j["ranked"] = scores_to_json(r.ranked);
  j["prefix_scores"] = r.prefix_scores;
  json targets = json::array();
  for (const auto& t : r.targets) targets.push_back(ref_to_json(t));
  j["targets"] = std::move(targets);
  j["dataset_sha256"] = r.dataset_sha256;
  j["seed"] = r.seed;
  return j.dump(2) + "\n";
}

CircuitReport circuit_report_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    CircuitReport r;
    r.hierarchy = j.at("hierarchy").get<int>();
    r.granularity = granularity_from_string(j.at("granularity").get<std::string>());
    r.mode = answer_mode_from_string(j.value("mode", std::string("copy")));
    r.delta = j.at("delta").get<double>();
    r.combined_score = j.at("combined_score").get<double>();
    r.delta_unmet = j.at("delta_unmet").get<bool>();
    r.selected = scores_from_json(j.at("selected"));
    r.ranked = scores_from_json(j.at("ranked"));
    if (j.contains("prefix_scores")) r.prefix_scores = j.at("prefix_scores").get<std::vector<double>>();
    if (j.contains("targets")) {
      for (const auto& t : j.at("targets")) r.targets.push_back(ref_from_json(t));
    }
    r.dataset_sha256 = j.at("dataset_sha256").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("circuit report: ") + e.what());
  }
}

ScoringContext::ScoringContext(const ModelWeights& weights, const ProbeSet& dataset, AnswerMode mode, int jobs)
    : weights_(weights), dataset_(dataset), mode_(mode), jobs_(jobs) {
  if (dataset.empty()) throw Error(ErrorCode::InvalidDataset, "empty probe dataset");
  const std::size_t n = dataset.size();
  clean_.resize(n);
  donor_.resize(n);
  target_.resize(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    const ProbeExample& ex = dataset[i];
    clean_[i] = forward(weights, clean_input(ex, mode), CaptureSpec::activations_only());
    donor_[i] = forward(weights, corrupt_input(ex), CaptureSpec::activations_only());
    target_[i] = target_token(ex, mode);
  });
}

std::vector<double> ScoringContext::patched_probabilities(const std::vector<ComponentRef>& sources,
                                                          const std::vector<ComponentRef>& via) const {
  std::vector<double> probs(dataset_.size());
  parallel_for(dataset_.size(), jobs_, [&](std::size_t i) {
    PatchPlan plan;
    plan.sources = sources;
    plan.donor = &donor(i);
    plan.via = via;
    probs[i] = patched_distribution(weights_, clean_[i], plan)[static_cast<std::size_t>(target_[i])];
  });
  return probs;
}

double ScoringContext::mean_patched_probability(const std::vector<ComponentRef>& sources,
                                                const std::vector<ComponentRef>& via) const {
  return mean_in_order(patched_probabilities(sources, via));
}

double ScoringContext::combined_score(const std::vector<ComponentRef>& sources,
                                      const std::vector<ComponentRef>& via) const {
  std::vector<double> probs = patched_probabilities(sources, via);
  for (double& p : probs) p = 1.0 - p;
  return mean_in_order(probs);
}

ComponentScore score_component(const ScoringContext& ctx, const ComponentRef& c,
                               const std::vector<ComponentRef>& via) {
  return {c, ctx.combined_score({c}, via)};
}

ComponentScore score_component(const ModelWeights& weights, const ProbeSet& dataset, const ComponentRef& c,
                               AnswerMode mode) {
  const ScoringContext ctx(weights, dataset, mode);
  return score_component(ctx, c);
}

namespace {

std::vector<ComponentScore> rank_list(const ScoringContext& ctx, const std::vector<ComponentRef>& candidates,
                                      const std::vector<ComponentRef>& via) {
  std::vector<ComponentRef> sorted = candidates;
  std::sort(sorted.begin(), sorted.end());
  std::vector<ComponentScore> scores;
  scores.reserve(sorted.size());
  for (const auto& c : sorted) scores.push_back(score_component(ctx, c, via));
  std::stable_sort(scores.begin(), scores.end(),
                   [](const ComponentScore& a, const ComponentScore& b) { return a.score > b.score; });
  return scores;
}

}  // namespace

std::vector<ComponentScore> rank_components(const ScoringContext& ctx, Granularity g) {
  return rank_list(ctx, enumerate_components(ctx.weights().config, g), {});
}

std::vector<ComponentScore> rank_components(const ModelWeights& weights, const ProbeSet& dataset,
                                            Granularity g, AnswerMode mode) {
  const ScoringContext ctx(weights, dataset, mode);
  return rank_components(ctx, g);
}

CircuitReport greedy_select(const ScoringContext& ctx, const std::vector<ComponentScore>& ranked, double delta,
                            Granularity g, const std::vector<ComponentRef>& via) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "delta must lie in [0, 1]");
  if (ranked.empty()) throw Error(ErrorCode::InvalidArgument, "nothing to select from");
  CircuitReport report;
  report.hierarchy = via.empty() ? 0 : 1;
  report.granularity = g;
  report.mode = ctx.mode();
  report.delta = delta;
  report.ranked = ranked;
  report.targets = via;
  report.dataset_sha256 = dataset_sha256(ctx.dataset());

  std::vector<ComponentRef> prefix;
  std::size_t chosen = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    prefix.push_back(ranked[k].component);
    report.prefix_scores.push_back(ctx.combined_score(prefix, via));
    if (chosen == 0 && report.prefix_scores.back() >= delta) chosen = k + 1;
  }
  report.delta_unmet = chosen == 0;
  if (report.delta_unmet) chosen = ranked.size();
  report.selected.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(chosen));
  report.combined_score = report.prefix_scores[chosen - 1];
  return report;
}

std::vector<CircuitReport> extract_hierarchy(const ScoringContext& ctx, int K, double delta, Granularity g) {
  if (K < 0) throw Error(ErrorCode::InvalidArgument, "hierarchy level must be >= 0");
  if (K > 1) throw Error(ErrorCode::Unsupported, "hierarchy levels above 1 are not supported");
  std::vector<CircuitReport> out;
  out.push_back(greedy_select(ctx, rank_components(ctx, g), delta, g));
  if (K == 0) return out;

  const std::vector<ComponentRef> level0 = out.front().selected_components();
  if (level0.empty()) throw Error(ErrorCode::Unsupported, "hierarchy 1 needs a non-empty level-0 set");
  std::vector<ComponentRef> upstream;
  for (const auto& c : enumerate_components(ctx.weights().config, g, Position::all())) {
    const bool in_level0 = std::any_of(level0.begin(), level0.end(), [&](const auto& t) { return t.same_node(c); });
    const bool feeds = std::any_of(level0.begin(), level0.end(), [&](const auto& t) { return feeds_into(c, t); });
    if (!in_level0 && feeds) upstream.push_back(c);
  }
  if (upstream.empty()) throw Error(ErrorCode::Unsupported, "no components upstream of the level-0 set");
  out.push_back(greedy_select(ctx, rank_list(ctx, upstream, level0), delta, g, level0));
  return out;
}

std::vector<ComponentRef> random_components(const ModelConfig& config, std::size_t size, std::uint64_t seed,
                                            Granularity g, const std::vector<ComponentRef>& exclude) {
  std::vector<ComponentRef> pool;
  for (const auto& c : enumerate_components(config, g)) {
    if (std::none_of(exclude.begin(), exclude.end(), [&](const auto& e) { return e.same_node(c); })) {
      pool.push_back(c);
    }
  }
  if (size > pool.size()) {
    throw Error(ErrorCode::InvalidArgument, "random circuit of size " + std::to_string(size) + " exceeds the " +
                                                std::to_string(pool.size()) + " available components");
  }
  Rng rng(seed);
  rng.shuffle(std::span<ComponentRef>(pool));
  pool.resize(size);
  std::sort(pool.begin(), pool.end());
  return pool;
}

double random_circuit_baseline(const ScoringContext& ctx, std::size_t size, std::uint64_t seed, Granularity g,
                               const std::vector<ComponentRef>& exclude) {
  if (size == 0) throw Error(ErrorCode::InvalidArgument, "random circuit must be non-empty");
  return ctx.mean_patched_probability(random_components(ctx.weights().config, size, seed, g, exclude));
}

AblationResult ablate_components_accuracy(const ModelWeights& weights, const ProbeSet& eval_dataset,
                                          const std::vector<ComponentRef>& components, AnswerMode mode,
                                          int jobs) {
  if (eval_dataset.empty()) throw Error(ErrorCode::InvalidDataset, "empty evaluation dataset");
  if (components.empty()) throw Error(ErrorCode::InvalidArgument, "nothing to ablate");
  const std::size_t n = eval_dataset.size();
  std::vector<int> before(n), after(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    const ProbeExample& ex = eval_dataset[i];
    const RunTrace clean = forward(weights, clean_input(ex, mode), CaptureSpec::activations_only());
    PatchPlan plan;
    plan.sources = components;
    plan.replacement = [](ComponentKind, int, int, std::size_t, std::span<double> out) {
      std::fill(out.begin(), out.end(), 0.0);
    };
    const int target = target_token(ex, mode);
    before[i] = clean.next_token == target;
    after[i] = patched_run(weights, clean, plan).next_token == target;
  });
  AblationResult r;
  r.n = n;
  for (std::size_t i = 0; i < n; ++i) {
    r.acc_before += before[i];
    r.acc_after += after[i];
  }
  r.acc_before /= static_cast<double>(n);
  r.acc_after /= static_cast<double>(n);
  return r;
}

AblationResult ablate_circuit_accuracy(const ModelWeights& weights, const ProbeSet& eval_dataset,
                                       const CircuitReport& report, const ProbeSet* extraction_dataset,
                                       int jobs) {
  AblationResult r =
      ablate_components_accuracy(weights, eval_dataset, report.selected_components(), report.mode, jobs);
  if (extraction_dataset != nullptr) {
    r.overlap = count_overlap(eval_dataset, *extraction_dataset);
    if (r.overlap > 0) {
      std::cerr << "warning: " << r.overlap << " evaluation examples also appear in the extraction set\n";
    }
  }
  return r;
}

double circuit_overlap(const CircuitReport& a, const CircuitReport& b) {
  if (a.granularity != b.granularity) {
    throw Error(ErrorCode::Incomparable,
                "granularity " + to_string(a.granularity) + " vs " + to_string(b.granularity));
  }
  auto nodes = [](const CircuitReport& r) {
    std::vector<ComponentRef> out;
    for (auto c : r.selected_components()) {
      c.position = Position::last();
      out.push_back(c);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  };
  const auto na = nodes(a);
  const auto nb = nodes(b);
  std::vector<ComponentRef> inter, uni;
  std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(inter));
  std::set_union(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(uni));
  if (uni.empty()) return 1.0;
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

}  // namespace qacirc
