// SPDX-License-Identifier: Apache-2.0
//
// Component scoring by direct-effect patching, greedy threshold selection,
// hierarchical extraction and circuit validation.
//
// score(c) = mean over examples of 1 - P_patch(target), where the patch
// copies c's activation from the corrupted run into the clean run and
// restores everything else.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qacirc/instrument.hpp"
#include "qacirc/probe.hpp"

namespace qacirc {

struct ComponentScore {
  ComponentRef component;
  double score = 0.0;
  bool operator==(const ComponentScore&) const = default;
};

struct CircuitReport {
  int hierarchy = 0;
  Granularity granularity = Granularity::Head;
  AnswerMode mode = AnswerMode::Copy;
  double delta = 0.95;
  double combined_score = 0.0;
  bool delta_unmet = false;
  std::vector<ComponentScore> ranked;
  std::vector<ComponentScore> selected;
  std::vector<double> prefix_scores;  // combined score of every ranked prefix
  std::vector<ComponentRef> targets;  // hierarchy-0 nodes a level-1 report routes through
  std::string dataset_sha256;
  std::uint64_t seed = 0;

  std::vector<ComponentRef> selected_components() const;
};

std::string to_json(const CircuitReport& report);
CircuitReport circuit_report_from_json(std::string_view text);

// Clean and corrupted runs of a dataset, computed once and shared by every
// plan evaluated against it.
class ScoringContext {
 public:
  ScoringContext(const ModelWeights& weights, const ProbeSet& dataset, AnswerMode mode, int jobs = 1);

  // Diagnostic: use the clean run itself as donor.
  void use_clean_donor(bool on) { clean_donor_ = on; }

  const ModelWeights& weights() const { return weights_; }
  const ProbeSet& dataset() const { return dataset_; }
  AnswerMode mode() const { return mode_; }
  int jobs() const { return jobs_; }
  const RunTrace& clean(std::size_t i) const { return clean_[i]; }
  const RunTrace& donor(std::size_t i) const { return clean_donor_ ? clean_[i] : donor_[i]; }
  int target(std::size_t i) const { return target_[i]; }

  // Per-example patched target probabilities (index order).
  std::vector<double> patched_probabilities(const std::vector<ComponentRef>& sources,
                                            const std::vector<ComponentRef>& via = {}) const;
  // Mean of 1 - P_patch(target), reduced in example order.
  double combined_score(const std::vector<ComponentRef>& sources,
                        const std::vector<ComponentRef>& via = {}) const;
  double mean_patched_probability(const std::vector<ComponentRef>& sources,
                                  const std::vector<ComponentRef>& via = {}) const;

 private:
  const ModelWeights& weights_;
  const ProbeSet& dataset_;
  AnswerMode mode_;
  int jobs_;
  bool clean_donor_ = false;
  std::vector<RunTrace> clean_;
  std::vector<RunTrace> donor_;
  std::vector<int> target_;
};

ComponentScore score_component(const ScoringContext& ctx, const ComponentRef& c,
                               const std::vector<ComponentRef>& via = {});
ComponentScore score_component(const ModelWeights& weights, const ProbeSet& dataset, const ComponentRef& c,
                               AnswerMode mode);

// Descending by score; equal scores keep ComponentRef order.
std::vector<ComponentScore> rank_components(const ScoringContext& ctx, Granularity g);
std::vector<ComponentScore> rank_components(const ModelWeights& weights, const ProbeSet& dataset,
                                            Granularity g, AnswerMode mode);

// Evaluates every prefix of `ranked` jointly and keeps the shortest one whose
// combined score reaches delta; otherwise returns the full list flagged
// delta_unmet.
CircuitReport greedy_select(const ScoringContext& ctx, const std::vector<ComponentScore>& ranked, double delta,
                            Granularity g, const std::vector<ComponentRef>& via = {});

// Level 0 targets the logits. Level 1 scores the components upstream of the
// level-0 selection, patched at every position, with their effect allowed
// to reach the logits only through the level-0 nodes.
std::vector<CircuitReport> extract_hierarchy(const ScoringContext& ctx, int K, double delta, Granularity g);

// Mean patched target probability when a random component set of `size`
// (drawn from g, skipping `exclude`) is patched from the corrupted run.
double random_circuit_baseline(const ScoringContext& ctx, std::size_t size, std::uint64_t seed, Granularity g,
                               const std::vector<ComponentRef>& exclude = {});
std::vector<ComponentRef> random_components(const ModelConfig& config, std::size_t size, std::uint64_t seed,
                                            Granularity g, const std::vector<ComponentRef>& exclude = {});

struct AblationResult {
  double acc_before = 0.0;
  double acc_after = 0.0;
  std::size_t n = 0;
  std::size_t overlap = 0;  // eval examples also present in the extraction set
};

// Accuracy before and after zeroing the components' direct contributions.
AblationResult ablate_components_accuracy(const ModelWeights& weights, const ProbeSet& eval_dataset,
                                          const std::vector<ComponentRef>& components, AnswerMode mode,
                                          int jobs = 1);
AblationResult ablate_circuit_accuracy(const ModelWeights& weights, const ProbeSet& eval_dataset,
                                       const CircuitReport& report, const ProbeSet* extraction_dataset = nullptr,
                                       int jobs = 1);

// Jaccard index of the selected node sets, ignoring positions.
double circuit_overlap(const CircuitReport& a, const CircuitReport& b);

}  // namespace qacirc
