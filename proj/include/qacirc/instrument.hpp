// SPDX-License-Identifier: Apache-2.0
//
// Component addressing, activation capture and the direct-effect patch.
//
// A patch substitutes donor activations at the source components, re-runs
// the clean input, and (with restore on) pins every other component to its
// clean-run value, so only the sources' direct edges to the logits change.
#pragma once

#include <compare>
#include <functional>
#include <string>
#include <vector>

#include "qacirc/model.hpp"

namespace qacirc {

enum class ComponentKind { AttnHead, AttnLayer, Mlp };

struct Position {
  enum class Tag { Last, Index, All };
  Tag tag = Tag::Last;
  std::size_t index = 0;

  static Position last() { return {Tag::Last, 0}; }
  static Position at(std::size_t t) { return {Tag::Index, t}; }
  // Every position of the sequence; used for upstream (hierarchy-1) sources.
  static Position all() { return {Tag::All, 0}; }

  bool matches(std::size_t t, std::size_t seq_len) const;
  auto operator<=>(const Position&) const = default;
};

struct ComponentRef {
  ComponentKind kind = ComponentKind::AttnHead;
  int layer = 0;
  int head = -1;  // only meaningful for AttnHead
  Position position = Position::last();

  static ComponentRef attn_head(int layer, int head, Position pos = Position::last()) {
    return {ComponentKind::AttnHead, layer, head, pos};
  }
  static ComponentRef attn_layer(int layer, Position pos = Position::last()) {
    return {ComponentKind::AttnLayer, layer, -1, pos};
  }
  static ComponentRef mlp(int layer, Position pos = Position::last()) {
    return {ComponentKind::Mlp, layer, -1, pos};
  }

  // Same node regardless of position.
  bool same_node(const ComponentRef& other) const {
    return kind == other.kind && layer == other.layer && head == other.head;
  }
  // Does this reference cover the head/MLP output (layer, kind, head)? For an
  // AttnLayer every head of the layer is covered.
  bool covers_head(int l, int h) const;
  bool covers_mlp(int l) const { return kind == ComponentKind::Mlp && layer == l; }

  // Total order: (layer, kind, head, position).
  std::strong_ordering operator<=>(const ComponentRef& other) const;
  bool operator==(const ComponentRef& other) const = default;

  std::string label() const;  // e.g. "head[1,2]", "attn[1]", "mlp[0]"
};

std::string to_string(ComponentKind kind);
ComponentKind component_kind_from_string(const std::string& s);

// Throws InvalidArgument when indices fall outside the config.
void validate_component(const ComponentRef& c, const ModelConfig& config);

// Does `upstream` write into the residual stream read by `downstream`?
bool feeds_into(const ComponentRef& upstream, const ComponentRef& downstream);

enum class Granularity { Head, Layer, Mlp, Mixed };  // Mixed = heads and MLPs

std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);
std::vector<ComponentRef> enumerate_components(const ModelConfig& config, Granularity g,
                                               Position pos = Position::last());

// Output-projected contribution of `c` at its (single) position.
// Throws NotCaptured when the trace lacks the activation or the address is
// out of range.
Vector capture(const RunTrace& trace, const ComponentRef& c);

// Replacement value for a source that is not taken from a donor trace
// (zero or mean ablation). Called per head (kind AttnHead) or MLP output.
using ReplacementFn =
    std::function<void(ComponentKind kind, int layer, int head, std::size_t pos, std::span<double> out)>;

struct PatchPlan {
  std::vector<ComponentRef> sources;
  const RunTrace* donor = nullptr;  // corrupted run supplying source values
  ReplacementFn replacement;        // used when donor is null
  bool restore_downstream = true;
  // Nodes that read the patched sources and are recomputed instead of
  // restored. When non-empty the sources reach the logits only through these
  // nodes (their own direct edges are reverted).
  std::vector<ComponentRef> via;
};

// Patched forward pass; `clean` must be an activation-capturing run on the
// clean input.
RunTrace patched_run(const ModelWeights& weights, const RunTrace& clean, const PatchPlan& plan,
                     const CaptureSpec& capture = CaptureSpec::none());

ProbDist patched_distribution(const ModelWeights& weights, const RunTrace& clean, const PatchPlan& plan);
ProbDist patched_distribution(const ModelWeights& weights, const TokenSeq& clean_input,
                              const PatchPlan& plan);

}  // namespace qacirc
