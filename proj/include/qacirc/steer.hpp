// SPDX-License-Identifier: Apache-2.0
//
// Circuit-switching interventions: scaling the context peak of attention
// scores before the softmax, and removing MLP direct contributions.
#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "qacirc/instrument.hpp"
#include "qacirc/model.hpp"
#include "qacirc/probe.hpp"

namespace qacirc {

enum class SteerMode { AttnUpweight, MlpZero, MlpMean };

std::string to_string(SteerMode mode);
SteerMode steer_mode_from_string(const std::string& s);  // accepts "attn" for attn_upweight

struct SteerSpec {
  SteerMode mode = SteerMode::AttnUpweight;
  double beta = 10.0;
  std::vector<int> target_layers;  // attention layers whose heads are upweighted
  std::vector<int> target_mlps;
  const ProbeSet* mean_source = nullptr;  // examples for the mean activation
  AnswerMode mean_mode = AnswerMode::Memory;

  // Throws InvalidSpec.
  void validate(const ModelConfig& config) const;
};

// At the last query position of every head in the target layers, the
// largest pre-softmax score inside the context window is multiplied by beta.
class UpweightHandle final : public ForwardHandle {
 public:
  UpweightHandle(const ModelWeights& weights, SteerSpec spec);
  RunTrace run(const TokenSeq& input, const CaptureSpec& capture) const override;
  const ModelWeights& weights() const override { return weights_; }
  // Targeted peaks that were negative, where scaling lowers their share.
  std::uint64_t negative_peaks() const { return negative_peaks_.load(); }

 private:
  const ModelWeights& weights_;
  SteerSpec spec_;
  mutable std::atomic<std::uint64_t> negative_peaks_{0};
};

// Replaces the target MLPs' contribution at the last position with zero or
// the dataset mean; every other component keeps its clean-run value.
class MlpAblationHandle final : public ForwardHandle {
 public:
  MlpAblationHandle(const ModelWeights& weights, SteerSpec spec);
  RunTrace run(const TokenSeq& input, const CaptureSpec& capture) const override;
  const ModelWeights& weights() const override { return weights_; }
  const std::vector<Vector>& means() const { return means_; }

 private:
  const ModelWeights& weights_;
  SteerSpec spec_;
  std::vector<Vector> means_;  // per target MLP (mlp_mean only)
};

std::unique_ptr<UpweightHandle> upweight_attention(const ModelWeights& weights, const SteerSpec& spec);
std::unique_ptr<MlpAblationHandle> ablate_mlp_direct(const ModelWeights& weights, const SteerSpec& spec);
std::unique_ptr<ForwardHandle> make_steer_handle(const ModelWeights& weights, const SteerSpec& spec);

struct SwitchOutcome {
  int id = 0;
  int baseline_answer = -1;
  int steered_answer = -1;
  bool switched = false;
};

struct SwitchReport {
  SteerSpec spec;
  double switch_rate = 0.0;
  std::size_t n = 0;
  std::vector<SwitchOutcome> per_example;
};

// Memory-mode examples with a secondary context answer next to MASK; an
// example switches when the steered argmax is that context answer.
SwitchReport switch_experiment(const ModelWeights& weights, const ProbeSet& dataset, AnswerMode dataset_mode,
                               const SteerSpec& spec, int jobs = 1);

std::string to_json(const SwitchReport& report);

}  // namespace qacirc
