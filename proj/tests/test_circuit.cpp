// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "qacirc/circuit.hpp"
#include "test_support.hpp"

using namespace qacirc;
using qacirc::testing::fixture;
using qacirc::testing::probe;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(-1);
}

const ProbeSet& data() { return probe(60); }

const ScoringContext& copy_ctx() {
  static const ScoringContext ctx(fixture().weights, data(), AnswerMode::Copy, 2);
  return ctx;
}

const ScoringContext& memory_ctx() {
  static const ScoringContext ctx(fixture().weights, data(), AnswerMode::Memory, 2);
  return ctx;
}

// Mean of 1 - P(target) computed one example at a time through the patch API.
double combined_oracle(AnswerMode mode, const std::vector<ComponentRef>& sources) {
  const auto& w = fixture().weights;
  double total = 0;
  for (const auto& ex : data()) {
    const RunTrace clean = forward(w, clean_input(ex, mode));
    const RunTrace donor = forward(w, corrupt_input(ex));
    PatchPlan plan;
    plan.sources = sources;
    plan.donor = &donor;
    total += 1.0 - patched_distribution(w, clean, plan).values()[static_cast<std::size_t>(target_token(ex, mode))];
  }
  return total / static_cast<double>(data().size());
}

CircuitReport report_with(Granularity g, std::vector<ComponentRef> nodes) {
  CircuitReport r;
  r.granularity = g;
  for (auto& c : nodes) r.selected.push_back({c, 0.0});
  return r;
}

}  // namespace

TEST_CASE("combined score matches an example-by-example recomputation") {
  for (const auto& src : std::vector<std::vector<ComponentRef>>{
           {ComponentRef::attn_head(1, 2)}, {ComponentRef::mlp(1)}, {ComponentRef::attn_head(0, 0), ComponentRef::mlp(0)}}) {
    CHECK(std::fabs(copy_ctx().combined_score(src) - combined_oracle(AnswerMode::Copy, src)) < 1e-12);
    CHECK(std::fabs(memory_ctx().combined_score(src) - combined_oracle(AnswerMode::Memory, src)) < 1e-12);
    CHECK(std::fabs(copy_ctx().combined_score(src) + copy_ctx().mean_patched_probability(src) - 1.0) < 1e-12);
  }
}

TEST_CASE("the copy head ranks first in copy mode and filler heads score near zero") {
  const auto ranked = rank_components(copy_ctx(), Granularity::Head);
  REQUIRE(ranked.size() == 8);
  CHECK(ranked.front().component == ComponentRef::attn_head(1, 2));
  CHECK(ranked.front().score >= 0.9);
  for (const auto& s : ranked) {
    const auto& c = s.component;
    const bool planted = (c.layer == 1 && (c.head == 2 || c.head == 3)) || (c.layer == 0 && c.head == 0);
    if (!planted) CHECK(s.score <= 0.05);
  }
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    CHECK(ranked[i - 1].score >= ranked[i].score);
    if (ranked[i - 1].score == ranked[i].score) CHECK(ranked[i - 1].component < ranked[i].component);
  }
}

TEST_CASE("memory mode is carried by the memory MLP") {
  const auto ranked = rank_components(memory_ctx(), Granularity::Mixed);
  CHECK(ranked.front().component == ComponentRef::mlp(1));
  CHECK(ranked.front().score >= 0.9);
}

TEST_CASE("a clean donor scores every component at the clean miss rate") {
  ScoringContext ctx(fixture().weights, probe(10), AnswerMode::Copy);
  ctx.use_clean_donor(true);
  double miss = 0;
  for (const auto& ex : probe(10)) {
    const ProbDist d = forward(fixture().weights, clean_input(ex, AnswerMode::Copy)).next_distribution();
    miss += 1.0 - d.values()[static_cast<std::size_t>(target_token(ex, AnswerMode::Copy))];
  }
  miss /= 10.0;
  CHECK(miss < 1e-3);
  for (const auto& c : enumerate_components(fixture().weights.config, Granularity::Mixed)) {
    CHECK(std::fabs(score_component(ctx, c).score - miss) < 1e-12);
  }
}

TEST_CASE("the convenience scorer agrees with the shared context") {
  const auto a = score_component(fixture().weights, data(), ComponentRef::attn_head(1, 2), AnswerMode::Copy);
  const auto b = score_component(copy_ctx(), ComponentRef::attn_head(1, 2));
  CHECK(a.score == b.score);
}

TEST_CASE("greedy selection returns the shortest prefix reaching delta") {
  const auto ranked = rank_components(copy_ctx(), Granularity::Head);
  for (double delta : {0.0, 0.5, 0.9, 0.95, 0.99}) {
    const CircuitReport r = greedy_select(copy_ctx(), ranked, delta, Granularity::Head);
    REQUIRE(r.prefix_scores.size() == ranked.size());
    const std::size_t k = r.selected.size();
    REQUIRE(k >= 1);
    if (!r.delta_unmet) {
      CHECK(r.prefix_scores[k - 1] >= delta);
      for (std::size_t j = 0; j + 1 < k; ++j) CHECK(r.prefix_scores[j] < delta);
      CHECK(r.combined_score == r.prefix_scores[k - 1]);
    }
    for (std::size_t j = 0; j < k; ++j) CHECK(r.selected[j] == ranked[j]);
    std::vector<ComponentRef> prefix;
    for (std::size_t j = 0; j < ranked.size(); ++j) {
      prefix.push_back(ranked[j].component);
      CHECK(std::fabs(r.prefix_scores[j] - copy_ctx().combined_score(prefix)) < 1e-12);
    }
  }
  CHECK(greedy_select(copy_ctx(), ranked, 0.0, Granularity::Head).selected.size() == 1);
}

TEST_CASE("an unreachable delta keeps every component and is flagged") {
  const auto ranked = rank_components(copy_ctx(), Granularity::Head);
  const CircuitReport r = greedy_select(copy_ctx(), ranked, 1.0, Granularity::Head);
  CHECK(r.delta_unmet);
  CHECK(r.selected.size() == ranked.size());
  CHECK(code_of([&] { greedy_select(copy_ctx(), ranked, 1.5, Granularity::Head); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { greedy_select(copy_ctx(), ranked, -0.1, Granularity::Head); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("the second hierarchy level finds the previous-token head") {
  const auto levels = extract_hierarchy(copy_ctx(), 1, 0.95, Granularity::Head);
  REQUIRE(levels.size() == 2);
  CHECK(levels[0].hierarchy == 0);
  CHECK(levels[1].hierarchy == 1);
  const auto sel0 = levels[0].selected_components();
  CHECK(std::find(sel0.begin(), sel0.end(), ComponentRef::attn_head(1, 2)) != sel0.end());
  CHECK(levels[1].targets == sel0);
  bool has_prev = false;
  for (const auto& s : levels[1].selected) {
    CHECK(s.component.layer < 1);
    CHECK(s.component.position == Position::all());
    has_prev = has_prev || s.component.same_node(ComponentRef::attn_head(0, 0));
  }
  CHECK(has_prev);
  CHECK(code_of([] { extract_hierarchy(copy_ctx(), 2, 0.95, Granularity::Head); }) == ErrorCode::Unsupported);
  CHECK(extract_hierarchy(copy_ctx(), 0, 0.95, Granularity::Head).size() == 1);
}

TEST_CASE("random circuits exclude the given components and are deterministic") {
  const auto& cfg = fixture().weights.config;
  const std::vector<ComponentRef> exclude{ComponentRef::attn_head(1, 2)};
  const auto a = random_components(cfg, 3, 9, Granularity::Head, exclude);
  CHECK(a == random_components(cfg, 3, 9, Granularity::Head, exclude));
  CHECK(a.size() == 3);
  for (const auto& c : a) CHECK(c != exclude[0]);
  CHECK(code_of([&] { random_components(cfg, 8, 9, Granularity::Head, exclude); }) == ErrorCode::InvalidArgument);
  const double p = random_circuit_baseline(copy_ctx(), 1, 9, Granularity::Head, exclude);
  CHECK(p >= 0.0);
  CHECK(p <= 1.0);
  // A random filler head leaves the copy answer intact.
  CHECK(p > 0.5);
}

TEST_CASE("ablating the copy head destroys copy accuracy") {
  const auto r = ablate_components_accuracy(fixture().weights, probe(40), {ComponentRef::attn_head(1, 2)},
                                            AnswerMode::Copy);
  CHECK(r.n == 40);
  CHECK(r.acc_before == 1.0);
  CHECK(r.acc_after <= 0.05);
  const auto keep = ablate_components_accuracy(fixture().weights, probe(40), {ComponentRef::attn_head(0, 1)},
                                               AnswerMode::Copy);
  CHECK(keep.acc_after == 1.0);
}

TEST_CASE("ablation reports overlap with the extraction set") {
  CircuitReport r = report_with(Granularity::Head, {ComponentRef::attn_head(1, 2)});
  const auto res = ablate_circuit_accuracy(fixture().weights, probe(20), r, &probe(10));
  CHECK(res.overlap == 10);
}

TEST_CASE("overlap is a Jaccard index over nodes") {
  const auto a = report_with(Granularity::Head, {ComponentRef::attn_head(1, 2), ComponentRef::attn_head(1, 3)});
  const auto b = report_with(Granularity::Head, {ComponentRef::attn_head(1, 2), ComponentRef::attn_head(0, 0)});
  const auto c = report_with(Granularity::Head, {ComponentRef::attn_head(0, 1)});
  CHECK(circuit_overlap(a, a) == 1.0);
  CHECK(circuit_overlap(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(circuit_overlap(a, b) == circuit_overlap(b, a));
  CHECK(circuit_overlap(a, c) == 0.0);
  CHECK(circuit_overlap(report_with(Granularity::Head, {}), report_with(Granularity::Head, {})) == 1.0);
  const auto pos = report_with(Granularity::Head, {ComponentRef::attn_head(1, 2, Position::all())});
  CHECK(circuit_overlap(pos, report_with(Granularity::Head, {ComponentRef::attn_head(1, 2)})) == 1.0);
  const auto layer = report_with(Granularity::Layer, {ComponentRef::attn_layer(1)});
  CHECK(code_of([&] { circuit_overlap(a, layer); }) == ErrorCode::Incomparable);
}

TEST_CASE("reports serialize deterministically and round-trip") {
  ScoringContext one(fixture().weights, probe(30), AnswerMode::Copy, 1);
  ScoringContext four(fixture().weights, probe(30), AnswerMode::Copy, 4);
  auto a = extract_hierarchy(one, 1, 0.9, Granularity::Mixed);
  auto b = extract_hierarchy(four, 1, 0.9, Granularity::Mixed);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i].dataset_sha256 = b[i].dataset_sha256 = dataset_sha256(probe(30));
    CHECK(to_json(a[i]) == to_json(b[i]));
    const CircuitReport back = circuit_report_from_json(to_json(a[i]));
    CHECK(to_json(back) == to_json(a[i]));
    CHECK(back.selected_components() == a[i].selected_components());
  }
  CHECK(code_of([] { circuit_report_from_json("{"); }) == ErrorCode::FormatError);
}
