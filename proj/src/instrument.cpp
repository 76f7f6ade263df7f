// SPDX-License-Identifier: Apache-2.0
#include "qacirc/instrument.hpp"

#include <algorithm>

namespace qacirc {

bool Position::matches(std::size_t t, std::size_t seq_len) const {
  switch (tag) {
    case Tag::Last: return t + 1 == seq_len;
    case Tag::Index: return t == index;
    case Tag::All: return true;
  }
  return false;
}

bool ComponentRef::covers_head(int l, int h) const {
  if (layer != l) return false;
  if (kind == ComponentKind::AttnLayer) return true;
  return kind == ComponentKind::AttnHead && head == h;
}

std::strong_ordering ComponentRef::operator<=>(const ComponentRef& other) const {
  if (auto c = layer <=> other.layer; c != 0) return c;
  if (auto c = static_cast<int>(kind) <=> static_cast<int>(other.kind); c != 0) return c;
  if (auto c = head <=> other.head; c != 0) return c;
  if (auto c = static_cast<int>(position.tag) <=> static_cast<int>(other.position.tag); c != 0) return c;
  return position.index <=> other.position.index;
}

std::string ComponentRef::label() const {
  switch (kind) {
    case ComponentKind::AttnHead: return "head[" + std::to_string(layer) + "," + std::to_string(head) + "]";
    case ComponentKind::AttnLayer: return "attn[" + std::to_string(layer) + "]";
    case ComponentKind::Mlp: return "mlp[" + std::to_string(layer) + "]";
  }
  return "?";
}

std::string to_string(ComponentKind kind) {
  switch (kind) {
    case ComponentKind::AttnHead: return "attn_head";
    case ComponentKind::AttnLayer: return "attn_layer";
    case ComponentKind::Mlp: return "mlp";
  }
  return "?";
}

ComponentKind component_kind_from_string(const std::string& s) {
  if (s == "attn_head") return ComponentKind::AttnHead;
  if (s == "attn_layer") return ComponentKind::AttnLayer;
  if (s == "mlp") return ComponentKind::Mlp;
  throw Error(ErrorCode::InvalidArgument, "unknown component kind " + s);
}

void validate_component(const ComponentRef& c, const ModelConfig& config) {
  if (c.layer < 0 || c.layer >= config.n_layers) {
    throw Error(ErrorCode::InvalidArgument, c.label() + ": layer out of range");
  }
  if (c.kind == ComponentKind::AttnHead && (c.head < 0 || c.head >= config.n_heads)) {
    throw Error(ErrorCode::InvalidArgument, c.label() + ": head out of range");
  }
}

bool feeds_into(const ComponentRef& upstream, const ComponentRef& downstream) {
  if (upstream.layer < downstream.layer) return true;
  // Within a layer only attention feeds the MLP.
  return upstream.layer == downstream.layer && upstream.kind != ComponentKind::Mlp &&
         downstream.kind == ComponentKind::Mlp;
}

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::Head: return "head";
    case Granularity::Layer: return "layer";
    case Granularity::Mlp: return "mlp";
    case Granularity::Mixed: return "mixed";
  }
  return "?";
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "head") return Granularity::Head;
  if (s == "layer") return Granularity::Layer;
  if (s == "mlp") return Granularity::Mlp;
  if (s == "mixed") return Granularity::Mixed;
  throw Error(ErrorCode::InvalidArgument, "unknown granularity " + s);
}

std::vector<ComponentRef> enumerate_components(const ModelConfig& config, Granularity g, Position pos) {
  std::vector<ComponentRef> out;
  for (int l = 0; l < config.n_layers; ++l) {
    if (g == Granularity::Head || g == Granularity::Mixed) {
      for (int h = 0; h < config.n_heads; ++h) out.push_back(ComponentRef::attn_head(l, h, pos));
    }
    if (g == Granularity::Layer) out.push_back(ComponentRef::attn_layer(l, pos));
    if (g == Granularity::Mlp || g == Granularity::Mixed) out.push_back(ComponentRef::mlp(l, pos));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Vector capture(const RunTrace& trace, const ComponentRef& c) {
  if (!trace.capture.activations || trace.layers.empty()) {
    throw Error(ErrorCode::NotCaptured, "trace has no activations");
  }
  if (c.layer < 0 || static_cast<std::size_t>(c.layer) >= trace.layers.size()) {
    throw Error(ErrorCode::NotCaptured, c.label() + ": no such layer");
  }
  std::size_t t = 0;
  switch (c.position.tag) {
    case Position::Tag::Last: t = trace.last(); break;
    case Position::Tag::Index: t = c.position.index; break;
    case Position::Tag::All: throw Error(ErrorCode::InvalidArgument, "capture needs a single position");
  }
  if (t >= trace.input.size()) throw Error(ErrorCode::NotCaptured, c.label() + ": position out of range");

  const LayerTrace& lt = trace.layers[static_cast<std::size_t>(c.layer)];
  switch (c.kind) {
    case ComponentKind::AttnHead: {
      if (c.head < 0 || static_cast<std::size_t>(c.head) >= lt.head_out.size()) {
        throw Error(ErrorCode::NotCaptured, c.label() + ": no such head");
      }
      auto row = lt.head_out[static_cast<std::size_t>(c.head)].row(t);
      return Vector(row.begin(), row.end());
    }
    case ComponentKind::AttnLayer: {
      Vector sum(trace.embed.cols(), 0.0);
      for (const Matrix& h : lt.head_out) axpy(1.0, h.row(t), sum);
      return sum;
    }
    case ComponentKind::Mlp: {
      auto row = lt.mlp_out.row(t);
      return Vector(row.begin(), row.end());
    }
  }
  throw Error(ErrorCode::NotCaptured, c.label());
}

namespace {

class PatchIntervention final : public Intervention {
 public:
  PatchIntervention(const RunTrace& clean, const PatchPlan& plan) : clean_(clean), plan_(plan) {}

  void head_output(int layer, int head, std::size_t pos, std::span<double> out) const override {
    const std::size_t T = clean_.input.size();
    for (const ComponentRef& s : plan_.sources) {
      if (s.covers_head(layer, head) && s.position.matches(pos, T)) {
        source_head_value(layer, head, pos, out);
        return;
      }
    }
    for (const ComponentRef& v : plan_.via) {
      if (v.covers_head(layer, head) && v.position.matches(pos, T)) return;
    }
    if (plan_.restore_downstream) copy_row(clean_head(layer, head, pos), out);
  }

  void mlp_output(int layer, std::size_t pos, std::span<double> out) const override {
    const std::size_t T = clean_.input.size();
    for (const ComponentRef& s : plan_.sources) {
      if (s.covers_mlp(layer) && s.position.matches(pos, T)) {
        source_mlp_value(layer, pos, out);
        return;
      }
    }
    for (const ComponentRef& v : plan_.via) {
      if (v.covers_mlp(layer) && v.position.matches(pos, T)) return;
    }
    if (plan_.restore_downstream) copy_row(clean_mlp(layer, pos), out);
  }

  // With `via` nodes the sources may only act through them: revert each
  // source's own contribution at the logit to its clean value.
  void final_residual(std::size_t pos, std::span<double> resid) const override {
    if (plan_.via.empty()) return;
    const std::size_t T = clean_.input.size();
    const auto n_layers = static_cast<int>(clean_.layers.size());
    Vector patched(resid.size());
    for (int l = 0; l < n_layers; ++l) {
      const auto n_heads = static_cast<int>(clean_.layers[static_cast<std::size_t>(l)].head_out.size());
      for (int h = 0; h < n_heads; ++h) {
        if (!is_source_head(l, h, pos, T)) continue;
        source_head_value(l, h, pos, patched);
        axpy(-1.0, patched, resid);
        axpy(1.0, clean_head(l, h, pos), resid);
      }
      if (is_source_mlp(l, pos, T)) {
        source_mlp_value(l, pos, patched);
        axpy(-1.0, patched, resid);
        axpy(1.0, clean_mlp(l, pos), resid);
      }
    }
  }

 private:
  static void copy_row(std::span<const double> src, std::span<double> dst) {
    std::copy(src.begin(), src.end(), dst.begin());
  }

  std::span<const double> clean_head(int layer, int head, std::size_t pos) const {
    return clean_.layers[static_cast<std::size_t>(layer)].head_out[static_cast<std::size_t>(head)].row(pos);
  }
  std::span<const double> clean_mlp(int layer, std::size_t pos) const {
    return clean_.layers[static_cast<std::size_t>(layer)].mlp_out.row(pos);
  }

  bool is_source_head(int l, int h, std::size_t pos, std::size_t T) const {
    return std::any_of(plan_.sources.begin(), plan_.sources.end(), [&](const ComponentRef& s) {
      return s.covers_head(l, h) && s.position.matches(pos, T);
    });
  }
  bool is_source_mlp(int l, std::size_t pos, std::size_t T) const {
    return std::any_of(plan_.sources.begin(), plan_.sources.end(), [&](const ComponentRef& s) {
      return s.covers_mlp(l) && s.position.matches(pos, T);
    });
  }

  void source_head_value(int layer, int head, std::size_t pos, std::span<double> out) const {
    if (plan_.donor != nullptr) {
      copy_row(plan_.donor->layers[static_cast<std::size_t>(layer)].head_out[static_cast<std::size_t>(head)].row(pos),
               out);
    } else {
      plan_.replacement(ComponentKind::AttnHead, layer, head, pos, out);
    }
  }
  void source_mlp_value(int layer, std::size_t pos, std::span<double> out) const {
    if (plan_.donor != nullptr) {
      copy_row(plan_.donor->layers[static_cast<std::size_t>(layer)].mlp_out.row(pos), out);
    } else {
      plan_.replacement(ComponentKind::Mlp, layer, -1, pos, out);
    }
  }

  const RunTrace& clean_;
  const PatchPlan& plan_;
};

void check_plan(const ModelWeights& weights, const RunTrace& clean, const PatchPlan& plan) {
  if (!clean.capture.activations || clean.layers.empty()) {
    throw Error(ErrorCode::NotCaptured, "clean trace lacks activations");
  }
  if (plan.sources.empty()) throw Error(ErrorCode::InvalidArgument, "patch plan has no sources");
  for (const ComponentRef& s : plan.sources) validate_component(s, weights.config);
  for (const ComponentRef& v : plan.via) validate_component(v, weights.config);
  if (!plan.via.empty() && !plan.restore_downstream) {
    throw Error(ErrorCode::InvalidArgument, "routing through nodes requires restore");
  }
  if (plan.donor != nullptr) {
    if (!plan.donor->capture.activations || plan.donor->layers.empty()) {
      throw Error(ErrorCode::NotCaptured, "donor trace lacks activations");
    }
    if (plan.donor->input.size() != clean.input.size()) {
      throw Error(ErrorCode::AlignmentError, "donor and clean runs differ in length (" +
                                                 std::to_string(plan.donor->input.size()) + " vs " +
                                                 std::to_string(clean.input.size()) + ")");
    }
  } else if (!plan.replacement) {
    throw Error(ErrorCode::InvalidArgument, "patch plan needs a donor or a replacement");
  }
  for (const ComponentRef& s : plan.sources) {
    if (s.position.tag == Position::Tag::Index && s.position.index >= clean.input.size()) {
      throw Error(ErrorCode::AlignmentError, s.label() + ": position beyond sequence");
    }
  }
}

}  // namespace

RunTrace patched_run(const ModelWeights& weights, const RunTrace& clean, const PatchPlan& plan,
                     const CaptureSpec& capture) {
  check_plan(weights, clean, plan);
  const PatchIntervention iv(clean, plan);
  return forward(weights, clean.input, capture, &iv);
}

ProbDist patched_distribution(const ModelWeights& weights, const RunTrace& clean, const PatchPlan& plan) {
  return patched_run(weights, clean, plan).next_distribution();
}

ProbDist patched_distribution(const ModelWeights& weights, const TokenSeq& clean_input,
                              const PatchPlan& plan) {
  const RunTrace clean = forward(weights, clean_input, CaptureSpec::activations_only());
  return patched_distribution(weights, clean, plan);
}

}  // namespace qacirc
