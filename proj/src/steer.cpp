// SPDX-License-Identifier: Apache-2.0
#include "qacirc/steer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "json.hpp"
#include "qacirc/util.hpp"

namespace qacirc {

std::string to_string(SteerMode mode) {
  switch (mode) {
    case SteerMode::AttnUpweight: return "attn_upweight";
    case SteerMode::MlpZero: return "mlp_zero";
    case SteerMode::MlpMean: return "mlp_mean";
  }
  return "?";
}

SteerMode steer_mode_from_string(const std::string& s) {
  if (s == "attn_upweight" || s == "attn") return SteerMode::AttnUpweight;
  if (s == "mlp_zero") return SteerMode::MlpZero;
  if (s == "mlp_mean") return SteerMode::MlpMean;
  throw Error(ErrorCode::InvalidSpec, "unknown steering mode " + s);
}

void SteerSpec::validate(const ModelConfig& config) const {
  auto check_layers = [&](const std::vector<int>& layers, const char* what) {
    for (int l : layers) {
      if (l < 0 || l >= config.n_layers) {
        throw Error(ErrorCode::InvalidSpec, std::string(what) + " layer " + std::to_string(l) + " out of range");
      }
    }
  };
  check_layers(target_layers, "attention");
  check_layers(target_mlps, "mlp");
  if (mode == SteerMode::AttnUpweight && !(std::isfinite(beta) && beta > 0.0)) {
    throw Error(ErrorCode::InvalidSpec, "beta must be finite and positive");
  }
  if (mode == SteerMode::MlpMean && (mean_source == nullptr || mean_source->empty())) {
    throw Error(ErrorCode::InvalidSpec, "mlp_mean needs a mean source dataset");
  }
}

namespace {

class UpweightIntervention final : public Intervention {
 public:
  UpweightIntervention(const SteerSpec& spec, const TokenSeq& input, std::atomic<std::uint64_t>& negatives)
      : spec_(spec), input_(input), negatives_(negatives) {}

  void scores(int layer, int, std::size_t pos, std::span<double> row) const override {
    if (pos != input_.last()) return;
    if (std::find(spec_.target_layers.begin(), spec_.target_layers.end(), layer) == spec_.target_layers.end()) {
      return;
    }
    const std::size_t end = std::min(input_.context_end, row.size());
    if (end <= input_.context_start) return;
    std::size_t peak = input_.context_start;
    for (std::size_t j = peak + 1; j < end; ++j) {
      if (row[j] > row[peak]) peak = j;
    }
    if (row[peak] < 0.0 && spec_.beta > 1.0 && negatives_.fetch_add(1) == 0) {
      std::cerr << "warning: negative attention peak in layer " << layer
                << "; upweighting lowers its share\n";
    }
    row[peak] *= spec_.beta;
  }

 private:
  const SteerSpec& spec_;
  const TokenSeq& input_;
  std::atomic<std::uint64_t>& negatives_;
};

}  // namespace

UpweightHandle::UpweightHandle(const ModelWeights& weights, SteerSpec spec)
    : weights_(weights), spec_(std::move(spec)) {
  if (spec_.mode != SteerMode::AttnUpweight) throw Error(ErrorCode::InvalidSpec, "expected attn_upweight");
  spec_.validate(weights.config);
}

RunTrace UpweightHandle::run(const TokenSeq& input, const CaptureSpec& capture) const {
  if (spec_.target_layers.empty()) return forward(weights_, input, capture);
  const UpweightIntervention iv(spec_, input, negative_peaks_);
  return forward(weights_, input, capture, &iv);
}

MlpAblationHandle::MlpAblationHandle(const ModelWeights& weights, SteerSpec spec)
    : weights_(weights), spec_(std::move(spec)) {
  if (spec_.mode == SteerMode::AttnUpweight) throw Error(ErrorCode::InvalidSpec, "expected an MLP mode");
  spec_.validate(weights.config);
  if (spec_.mode == SteerMode::MlpMean) {
    const auto d = static_cast<std::size_t>(weights.config.d_model);
    means_.assign(spec_.target_mlps.size(), Vector(d, 0.0));
    for (const ProbeExample& ex : *spec_.mean_source) {
      const RunTrace t = forward(weights, clean_input(ex, spec_.mean_mode), CaptureSpec::activations_only());
      for (std::size_t k = 0; k < spec_.target_mlps.size(); ++k) {
        axpy(1.0, capture(t, ComponentRef::mlp(spec_.target_mlps[k])), means_[k]);
      }
    }
    const double inv = 1.0 / static_cast<double>(spec_.mean_source->size());
    for (auto& m : means_) {
      for (double& x : m) x *= inv;
    }
  }
}

RunTrace MlpAblationHandle::run(const TokenSeq& input, const CaptureSpec& capture) const {
  if (spec_.target_mlps.empty()) return forward(weights_, input, capture);
  const RunTrace clean = forward(weights_, input, CaptureSpec::activations_only());
  PatchPlan plan;
  for (int l : spec_.target_mlps) plan.sources.push_back(ComponentRef::mlp(l));
  plan.replacement = [this](ComponentKind, int layer, int, std::size_t, std::span<double> out) {
    if (spec_.mode == SteerMode::MlpZero) {
      std::fill(out.begin(), out.end(), 0.0);
      return;
    }
    const auto k = static_cast<std::size_t>(
        std::find(spec_.target_mlps.begin(), spec_.target_mlps.end(), layer) - spec_.target_mlps.begin());
    std::copy(means_[k].begin(), means_[k].end(), out.begin());
  };
  return patched_run(weights_, clean, plan, capture);
}

std::unique_ptr<UpweightHandle> upweight_attention(const ModelWeights& weights, const SteerSpec& spec) {
  return std::make_unique<UpweightHandle>(weights, spec);
}

std::unique_ptr<MlpAblationHandle> ablate_mlp_direct(const ModelWeights& weights, const SteerSpec& spec) {
  return std::make_unique<MlpAblationHandle>(weights, spec);
}

std::unique_ptr<ForwardHandle> make_steer_handle(const ModelWeights& weights, const SteerSpec& spec) {
  if (spec.mode == SteerMode::AttnUpweight) return upweight_attention(weights, spec);
  return ablate_mlp_direct(weights, spec);
}

SwitchReport switch_experiment(const ModelWeights& weights, const ProbeSet& dataset, AnswerMode dataset_mode,
                               const SteerSpec& spec, int jobs) {
  if (dataset_mode != AnswerMode::Memory) {
    throw Error(ErrorCode::InvalidDataset, "the switch experiment needs a memory-mode dataset");
  }
  if (dataset.empty()) throw Error(ErrorCode::InvalidDataset, "empty dataset");
  for (const ProbeExample& ex : dataset) {
    if (ex.answer_position + 1 >= ex.context_memory.size()) {
      throw Error(ErrorCode::InvalidDataset, "example " + std::to_string(ex.id) + " has no room after MASK");
    }
  }
  const auto handle = make_steer_handle(weights, spec);
  SwitchReport report;
  report.spec = spec;
  report.n = dataset.size();
  report.per_example.resize(dataset.size());
  parallel_for(dataset.size(), jobs, [&](std::size_t i) {
    const ProbeExample& ex = dataset[i];
    const TokenSeq input = switch_input(ex);
    SwitchOutcome& o = report.per_example[i];
    o.id = ex.id;
    o.baseline_answer = forward(weights, input, CaptureSpec::none()).next_token;
    o.steered_answer = handle->run(input, CaptureSpec::none()).next_token;
    o.switched = o.steered_answer == switch_token(ex);
  });
  std::size_t switched = 0;
  for (const auto& o : report.per_example) switched += o.switched ? 1 : 0;
  report.switch_rate = static_cast<double>(switched) / static_cast<double>(report.n);
  return report;
}

std::string to_json(const SwitchReport& r) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.spec.mode);
  j["beta"] = r.spec.beta;
  j["targets"] = r.spec.mode == SteerMode::AttnUpweight ? r.spec.target_layers : r.spec.target_mlps;
  j["switch_rate"] = r.switch_rate;
  j["n"] = r.n;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& o : r.per_example) {
    nlohmann::ordered_json e;
    e["id"] = o.id;
    e["baseline_answer"] = o.baseline_answer;
    e["steered_answer"] = o.steered_answer;
    e["switched"] = o.switched;
    arr.push_back(std::move(e));
  }
  j["per_example"] = std::move(arr);
  return j.dump(2) + "\n";
}

}  // namespace qacirc
