// SPDX-License-Identifier: Apache-2.0
#include "qacirc/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qacirc/attribute.hpp"
#include "qacirc/circuit.hpp"
#include "qacirc/evalmetrics.hpp"
#include "qacirc/fixture.hpp"
#include "qacirc/probe.hpp"
#include "qacirc/rng.hpp"
#include "qacirc/steer.hpp"
#include "qacirc/util.hpp"
#include "qacirc/weights_io.hpp"

namespace qacirc::cli {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct Globals {
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  int jobs = 1;
  std::string config;
};

// Per-invocation bookkeeping: resolved config, fingerprints and outputs.
class Session {
 public:
  Session(std::string subcommand, const Globals& globals, std::ostream& out)
      : subcommand_(std::move(subcommand)), globals_(globals), out_(out) {
    config_["seed"] = globals.seed;
  }

  template <typename T>
  void set(const std::string& key, const T& value) {
    config_[key] = value;
  }

  void input(const std::string& role, const std::string& source, const std::string& sha) {
    inputs_[role] = ojson{{"source", source}, {"sha256", sha}};
  }

  void write(const std::string& name, const std::string& bytes) {
    const fs::path path = fs::path(globals_.out_dir) / name;
    write_file_atomic(path, bytes);
    outputs_[fs::path(name).filename().string()] = sha256_hex(bytes);
    out_ << "wrote " << path.string() << "\n";
  }

  void stat(const std::string& key, const ojson& value) { stats_[key] = value; }

  void finish() {
    ojson m;
    m["tool"] = kToolName;
    m["version"] = kToolVersion;
    m["subcommand"] = subcommand_;
    m["config"] = config_;
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    if (!stats_.empty()) m["stats"] = stats_;
    const std::string bytes = m.dump(2) + "\n";
    write_file_atomic(fs::path(globals_.out_dir) / (subcommand_ + ".manifest.json"), bytes);
  }

  std::uint64_t seed(Stage stage) const { return derive_seed(globals_.seed, stage); }
  int jobs() const { return globals_.jobs; }
  std::ostream& out() { return out_; }

 private:
  std::string subcommand_;
  const Globals& globals_;
  std::ostream& out_;
  ojson config_ = ojson::object();
  ojson inputs_ = ojson::object();
  ojson outputs_ = ojson::object();
  ojson stats_ = ojson::object();
};

std::string basename_of(const std::string& path) { return fs::path(path).filename().string(); }

LoadedModel load_or_build_model(const std::string& path, Session& s) {
  if (path.empty()) {
    Fixture fx = build_fixture();
    s.input("model", "builtin-fixture", sha256_hex(serialize_model(fx.weights, &fx.info)));
    return {std::move(fx.weights), std::move(fx.info)};
  }
  const std::string bytes = read_file(path);
  LoadedModel m = parse_model(bytes);
  s.input("model", basename_of(path), sha256_hex(bytes));
  return m;
}

const FixtureInfo& require_fixture(const LoadedModel& m) {
  if (!m.fixture) {
    throw Error(ErrorCode::InvalidArgument, "model file carries no fixture metadata; pass --probe explicitly");
  }
  return *m.fixture;
}

struct ProbeInputs {
  ProbeSet probe;
  ProbeSet held_out;
};

// Loads --probe or generates n (+ held_out) examples from the probe stage
// seed; a generated held-out set is the tail of one draw, so it shares no
// (subject, swap) pair with the probe.
ProbeInputs load_or_generate_probe(const std::string& path, int n, int held_out, const LoadedModel& m, Session& s) {
  ProbeInputs in;
  if (!path.empty()) {
    const std::string bytes = read_file(path);
    in.probe = from_jsonl(bytes);
    if (in.probe.empty()) throw Error(ErrorCode::InvalidDataset, "probe file is empty");
    if (m.fixture) {
      for (const auto& ex : in.probe) check_example(ex, *m.fixture);
    }
    s.input("probe", basename_of(path), sha256_hex(bytes));
    return in;
  }
  ProbeConfig pc;
  pc.n = n + std::max(held_out, 0);
  ProbeGeneration gen = gen_probe(pc, s.seed(kStageProbe), require_fixture(m), &m.weights);
  s.stat("probe_rejected", gen.rejected);
  auto [first, rest] = split_dataset(gen.examples, static_cast<std::size_t>(n));
  in.probe = std::move(first);
  in.held_out = std::move(rest);
  s.input("probe", "generated", dataset_sha256(in.probe));
  return in;
}

HeadAddress parse_head(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw Error(ErrorCode::InvalidArgument, "head must be LAYER,HEAD: " + text);
  try {
    return {std::stoi(text.substr(0, comma)), std::stoi(text.substr(comma + 1))};
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "head must be LAYER,HEAD: " + text);
  }
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidArgument, "expected a comma-separated integer list: " + text);
    }
  }
  return out;
}

std::vector<HeadAddress> parse_heads(const std::string& text, const ModelConfig& config) {
  std::vector<HeadAddress> out;
  if (text == "all") {
    for (int l = 0; l < config.n_layers; ++l) {
      for (int h = 0; h < config.n_heads; ++h) out.push_back({l, h});
    }
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (!item.empty()) out.push_back(parse_head(item));
  }
  if (out.empty()) throw Error(ErrorCode::InvalidArgument, "no heads given");
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

ojson span_to_json(const AttributionSpan& sp) {
  return ojson{{"start", sp.start},
               {"end", sp.end},
               {"peak", sp.peak},
               {"source_step", sp.source_step},
               {"tokens", sp.tokens}};
}

std::string heads_csv(const std::vector<HeadProfile>& profiles) {
  std::string csv = "layer,head,entropy,accuracy,n\n";
  for (const auto& p : profiles) {
    csv += std::to_string(p.head.layer) + "," + std::to_string(p.head.head) + "," + format_double(p.entropy) +
           "," + format_double(p.accuracy) + "," + std::to_string(p.n) + "\n";
  }
  return csv;
}

std::string score_curve_csv(const CircuitReport& r) {
  std::string csv = "k,component,component_score,combined_score\n";
  for (std::size_t k = 0; k < r.prefix_scores.size(); ++k) {
    csv += std::to_string(k + 1) + ",\"" + r.ranked[k].component.label() + "\"," + format_double(r.ranked[k].score) +
           "," + format_double(r.prefix_scores[k]) + "\n";
  }
  return csv;
}

AttributionConfig default_attribution(const LoadedModel& m) {
  AttributionConfig cfg;
  if (m.fixture) {
    cfg.head = m.fixture->copy_head;
    cfg.stop_token = m.fixture->layout.eos;
    cfg.delimiter = m.fixture->layout.sep;
  }
  return cfg;
}

// ---- subcommands -----------------------------------------------------------

struct BuildFixtureArgs {
  std::string out = "fixture.qacm";
  std::uint64_t fixture_seed = 1;
  bool drop_memory = false;
  bool zero_copy_head = false;
};

void cmd_build_fixture(const BuildFixtureArgs& a, Session& s) {
  FixtureConfig fc;
  fc.seed = a.fixture_seed;
  fc.drop_memory = a.drop_memory;
  fc.zero_copy_head = a.zero_copy_head;
  s.set("fixture_seed", a.fixture_seed);
  s.set("drop_memory", a.drop_memory);
  s.set("zero_copy_head", a.zero_copy_head);
  const Fixture fx = build_fixture(fc);
  s.write(a.out, serialize_model(fx.weights, &fx.info));
}

struct ProbeArgs {
  std::string model;
  std::string probe;
  int n = 200;
  int held_out = 0;
};

struct GenProbeArgs {
  ProbeArgs in;
  std::string out = "probe.jsonl";
  std::string held_out_out = "heldout.jsonl";
};

void cmd_gen_probe(const GenProbeArgs& a, Session& s) {
  s.set("n", a.in.n);
  s.set("held_out", a.in.held_out);
  const LoadedModel m = load_or_build_model(a.in.model, s);
  const ProbeInputs in = load_or_generate_probe("", a.in.n, a.in.held_out, m, s);
  s.write(a.out, to_jsonl(in.probe));
  if (a.in.held_out > 0) s.write(a.held_out_out, to_jsonl(in.held_out));
  s.out() << "examples " << in.probe.size() << " sha256 " << dataset_sha256(in.probe) << "\n";
}

struct ExtractArgs {
  ProbeArgs in;
  std::string mode = "copy";
  std::string granularity = "head";
  double delta = 0.95;
  int hierarchy = 0;
  std::string out = "circuit.json";
};

void cmd_extract(const ExtractArgs& a, Session& s) {
  const AnswerMode mode = answer_mode_from_string(a.mode);
  const Granularity g = granularity_from_string(a.granularity);
  s.set("n", a.in.n);
  s.set("mode", a.mode);
  s.set("granularity", a.granularity);
  s.set("delta", a.delta);
  s.set("hierarchy", a.hierarchy);
  const LoadedModel m = load_or_build_model(a.in.model, s);
  const ProbeInputs in = load_or_generate_probe(a.in.probe, a.in.n, 0, m, s);
  const ScoringContext ctx(m.weights, in.probe, mode, s.jobs());
  auto reports = extract_hierarchy(ctx, a.hierarchy, a.delta, g);
  for (std::size_t k = 0; k < reports.size(); ++k) {
    CircuitReport& r = reports[k];
    r.seed = s.seed(kStageProbe);
    std::string name = a.out;
    if (k > 0) {
      const fs::path p(a.out);
      name = (p.parent_path() / (p.stem().string() + "_h" + std::to_string(k) + p.extension().string())).string();
    }
    s.write(name, to_json(r));
    s.out() << "hierarchy " << k << ": combined " << format_double(r.combined_score) << (r.delta_unmet ? " (delta unmet)" : "")
            << ", selected";
    for (const auto& c : r.selected) s.out() << " " << c.component.label();
    s.out() << "\n";
  }
}

struct AttributeArgs {
  ProbeArgs in;
  std::string head;
  int slength = 3;
  int top_k = 1;
  int answer_length = 2;
  std::string span_mode = "window";
  std::string mode = "copy";
  std::string out = "attribution.jsonl";
};

void cmd_attribute(const AttributeArgs& a, Session& s) {
  s.set("n", a.in.n);
  s.set("head", a.head);
  s.set("slength", a.slength);
  s.set("top_k", a.top_k);
  s.set("answer_length", a.answer_length);
  s.set("span_mode", a.span_mode);
  s.set("mode", a.mode);
  const LoadedModel m = load_or_build_model(a.in.model, s);
  const ProbeInputs in = load_or_generate_probe(a.in.probe, a.in.n, 0, m, s);
  const AnswerMode mode = answer_mode_from_string(a.mode);
  AttributionConfig cfg = default_attribution(m);
  if (!a.head.empty()) cfg.head = parse_head(a.head);
  cfg.span_length = a.slength;
  cfg.top_k = a.top_k;
  cfg.answer_length = a.answer_length;
  cfg.span_mode = span_mode_from_string(a.span_mode);
  cfg.validate();

  std::vector<AttributionResult> results(in.probe.size());
  parallel_for(in.probe.size(), s.jobs(), [&](std::size_t i) {
    results[i] = attn_attrib(m.weights, clean_input(in.probe[i], mode), cfg);
  });
  std::string lines;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    ojson j;
    j["question_id"] = in.probe[i].id;
    j["head"] = ojson{{"layer", cfg.head.layer}, {"head", cfg.head.head}};
    auto spans = ojson::array();
    for (const auto& sp : results[i].spans) spans.push_back(span_to_json(sp));
    j["spans"] = std::move(spans);
    j["answer_tokens"] = results[i].answer_tokens;
    lines += j.dump() + "\n";
    if (!results[i].spans.empty()) hits += attribution_exact_match(results[i].spans[0], in.probe[i].answer_position);
  }
  s.write(a.out, lines);
  const double em = static_cast<double>(hits) / static_cast<double>(results.size());
  s.stat("exact_match", em);
  s.out() << "exact match " << format_double(em) << " over " << results.size() << " questions\n";
}

struct ProfileArgs {
  ProbeArgs in;
  std::string heads = "all";
  std::string mode = "copy";
  std::string out = "heads.csv";
};

void cmd_profile_heads(const ProfileArgs& a, Session& s) {
  s.set("n", a.in.n);
  s.set("heads", a.heads);
  s.set("mode", a.mode);
  const LoadedModel m = load_or_build_model(a.in.model, s);
  const ProbeInputs in = load_or_generate_probe(a.in.probe, a.in.n, 0, m, s);
  const auto profiles = head_entropy_profile(m.weights, in.probe, parse_heads(a.heads, m.weights.config),
                                             answer_mode_from_string(a.mode), s.jobs());
  const HeadAddress best = select_attribution_head(profiles);
  s.write(a.out, heads_csv(profiles));
  s.stat("selected_head", ojson::array({best.layer, best.head}));
  s.out() << "attribution head " << best.layer << "," << best.head << "\n";
}

struct SteerArgs {
  ProbeArgs in;
  std::string mode = "attn";
  double beta = 10.0;
  std::string layers;
  std::string mlps;
  std::string circuit;
  std::string out = "steer.json";
};

void cmd_steer(const SteerArgs& a, Session& s) {
  s.set("n", a.in.n);
  s.set("mode", a.mode);
  s.set("beta", a.beta);
  s.set("layers", a.layers);
  s.set("mlps", a.mlps);
  const LoadedModel m = load_or_build_model(a.in.model, s);
  const ProbeInputs in = load_or_generate_probe(a.in.probe, a.in.n, 0, m, s);
  SteerSpec spec;
  spec.mode = steer_mode_from_string(a.mode);
  spec.beta = a.beta;
  spec.target_layers = parse_int_list(a.layers);
  spec.target_mlps = parse_int_list(a.mlps);
  spec.mean_source = &in.probe;

  // Targets: explicit flags, else the top node of a circuit report, else
  // the fixture's construction metadata.
  const bool attn = spec.mode == SteerMode::AttnUpweight;
  std::vector<int>& targets = attn ? spec.target_layers : spec.target_mlps;
  if (targets.empty() && !a.circuit.empty()) {
    const std::string bytes = read_file(a.circuit);
    s.input("circuit", basename_of(a.circuit), sha256_hex(bytes));
    const CircuitReport r = circuit_report_from_json(bytes);
    for (const auto& c : r.ranked) {
      if (attn != (c.component.kind == ComponentKind::Mlp)) {
        targets.push_back(c.component.layer);
        break;
      }
    }
  }
  if (targets.empty() && m.fixture) targets.push_back(attn ? m.fixture->copy_head.layer : m.fixture->memory_layer);
  if (targets.empty()) throw Error(ErrorCode::InvalidSpec, "no steering targets");

  const SwitchReport report = switch_experiment(m.weights, in.probe, AnswerMode::Memory, spec, s.jobs());
  s.write(a.out, to_json(report));
  s.out() << "switch rate " << format_double(report.switch_rate) << " over " << report.n << " examples\n";
}

struct EvalArgs {
  ProbeArgs in;
  std::string eval_probe;
  std::string circuit;
  int slength = 3;
  std::string out_csv = "metrics.csv";
  std::string out_json = "metrics.json";
};

void cmd_eval(const EvalArgs& a, Session& s) {
  s.set("n", a.in.n);
  s.set("held_out", a.in.held_out);
  s.set("slength", a.slength);
  const LoadedModel m = load_or_build_model(a.in.model, s);
  ProbeInputs in = load_or_generate_probe(a.in.probe, a.in.n, a.in.held_out, m, s);
  if (!a.eval_probe.empty()) {
    const std::string bytes = read_file(a.eval_probe);
    in.held_out = from_jsonl(bytes);
    s.input("eval_probe", basename_of(a.eval_probe), sha256_hex(bytes));
  }
  const std::uint64_t seed = s.seed(kStageRandomSpans);
  std::vector<MetricRow> rows;
  const auto n = in.probe.size();
  auto add = [&](const std::string& metric, const std::string& mode, double value, std::size_t count) {
    rows.push_back({metric, mode, value, count, seed});
  };
  add("qa_accuracy", "copy", qa_accuracy(m.weights, in.probe, AnswerMode::Copy, s.jobs()), n);
  add("qa_accuracy", "memory", qa_accuracy(m.weights, in.probe, AnswerMode::Memory, s.jobs()), n);

  AttributionConfig cfg = default_attribution(m);
  cfg.span_length = a.slength;
  cfg.answer_length = 1;
  struct PerExample {
    int attn_hit = 0, grad_hit = 0, agree = 0, rel_win = 0, undefined = 0;
    double rel_attr = 0.0, rel_rand = 0.0;
  };
  std::vector<PerExample> per(n);
  parallel_for(n, s.jobs(), [&](std::size_t i) {
    const ProbeExample& ex = in.probe[i];
    const TokenSeq input = clean_input(ex, AnswerMode::Copy);
    const AttributionResult r = attn_attrib(m.weights, input, cfg);
    if (r.spans.empty()) return;
    const AttributionSpan& span = r.spans.front();
    const GradientAttribution g = gradient_baseline(m.weights, input, r.answer_tokens.front(), cfg);
    per[i].attn_hit = attribution_exact_match(span, ex.answer_position);
    per[i].grad_hit = attribution_exact_match(g.span, ex.answer_position);
    per[i].agree = g.span.start == span.start && g.span.end == span.end;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(ex.id)));
    const AttributionSpan control = random_span(input, span.end - span.start, span, rng);
    const int pad = m.fixture ? m.fixture->layout.pad : 0;
    const double lo = response_logprob(m.weights, input, r.answer_tokens);
    const double la = response_logprob(m.weights, ablate_spans_from_context(input, {span}, pad), r.answer_tokens);
    const double lr = response_logprob(m.weights, ablate_spans_from_context(input, {control}, pad), r.answer_tokens);
    // A control ablation that leaves the response certain has no defined
    // score; it is counted and scored as no change.
    per[i].rel_attr = rel_score({lo, la});
    try {
      per[i].rel_rand = rel_score({lo, lr});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::UndefinedRelScore) throw;
      per[i].undefined = 1;
    }
    per[i].rel_win = per[i].rel_attr > per[i].rel_rand;
  });
  PerExample sum;
  for (const auto& p : per) {
    sum.attn_hit += p.attn_hit;
    sum.grad_hit += p.grad_hit;
    sum.agree += p.agree;
    sum.rel_win += p.rel_win;
    sum.undefined += p.undefined;
    sum.rel_attr += p.rel_attr;
    sum.rel_rand += p.rel_rand;
  }
  const double dn = static_cast<double>(n);
  add("attribution_exact_match", "copy", sum.attn_hit / dn, n);
  add("gradient_exact_match", "copy", sum.grad_hit / dn, n);
  add("attribution_gradient_agreement", "copy", sum.agree / dn, n);
  add("rel_score_attributed", "copy", sum.rel_attr / dn, n);
  add("rel_score_random", "copy", sum.rel_rand / dn, n);
  add("rel_score_win_rate", "copy", sum.rel_win / dn, n);
  add("rel_score_control_undefined", "copy", sum.undefined, n);

  if (!a.circuit.empty()) {
    const std::string bytes = read_file(a.circuit);
    s.input("circuit", basename_of(a.circuit), sha256_hex(bytes));
    const CircuitReport report = circuit_report_from_json(bytes);
    const ProbeSet& eval_set = in.held_out.empty() ? in.probe : in.held_out;
    const AblationResult ab = ablate_circuit_accuracy(m.weights, eval_set, report, &in.probe, s.jobs());
    add("ablation_acc_before", to_string(report.mode), ab.acc_before, ab.n);
    add("ablation_acc_after", to_string(report.mode), ab.acc_after, ab.n);
    add("ablation_overlap", to_string(report.mode), static_cast<double>(ab.overlap), ab.n);
  }
  s.write(a.out_csv, metrics_to_csv(rows));
  s.write(a.out_json, metrics_to_json(rows));
  for (const auto& r : rows) s.out() << r.metric << "[" << r.mode << "] = " << format_double(r.value) << "\n";
}

struct ReportArgs {
  ProbeArgs in;
  double delta = 0.95;
  std::string granularity = "mixed";
};

void cmd_report(const ReportArgs& a, Session& s) {
  s.set("n", a.in.n);
  s.set("delta", a.delta);
  s.set("granularity", a.granularity);
  const Granularity g = granularity_from_string(a.granularity);
  const LoadedModel m = load_or_build_model(a.in.model, s);
  const ProbeInputs in = load_or_generate_probe(a.in.probe, a.in.n, 0, m, s);

  ojson summary;
  std::vector<CircuitReport> level0;
  for (AnswerMode mode : {AnswerMode::Copy, AnswerMode::Memory}) {
    const ScoringContext ctx(m.weights, in.probe, mode, s.jobs());
    const int K = mode == AnswerMode::Copy ? 1 : 0;
    auto reports = extract_hierarchy(ctx, K, a.delta, g);
    for (auto& r : reports) r.seed = s.seed(kStageProbe);
    s.write("score_vs_k_" + to_string(mode) + ".csv", score_curve_csv(reports.front()));
    if (reports.size() > 1) s.write("score_vs_k_" + to_string(mode) + "_h1.csv", score_curve_csv(reports[1]));
    ojson levels = ojson::array();
    for (const auto& r : reports) {
      ojson sel = ojson::array();
      for (const auto& c : r.selected) sel.push_back(c.component.label());
      levels.push_back(ojson{{"hierarchy", r.hierarchy}, {"combined_score", r.combined_score},
                             {"delta_unmet", r.delta_unmet}, {"selected", sel}});
    }
    summary[to_string(mode)] = levels;
    level0.push_back(reports.front());
  }
  summary["overlap"] = circuit_overlap(level0[0], level0[1]);

  std::vector<HeadAddress> heads;
  for (int l = 0; l < m.weights.config.n_layers; ++l) {
    for (int h = 0; h < m.weights.config.n_heads; ++h) heads.push_back({l, h});
  }
  const auto profiles = head_entropy_profile(m.weights, in.probe, heads, AnswerMode::Copy, s.jobs());
  s.write("heads.csv", heads_csv(profiles));
  const HeadAddress best = select_attribution_head(profiles);
  summary["attribution_head"] = ojson::array({best.layer, best.head});
  summary["dataset_sha256"] = dataset_sha256(in.probe);
  s.write("summary.json", summary.dump(2) + "\n");
}

// ---- argument plumbing ------------------------------------------------------

void add_probe_options(CLI::App* sub, ProbeArgs& a, bool with_held_out, bool with_probe = true) {
  sub->add_option("--model", a.model, "Weight file (default: built-in fixture)");
  if (with_probe) sub->add_option("--probe", a.probe, "Probe JSONL (default: generated from --seed)");
  sub->add_option("--n", a.n, "Examples to generate when --probe is absent")->check(CLI::PositiveNumber);
  if (with_held_out) {
    sub->add_option("--held-out", a.held_out, "Extra held-out examples generated alongside the probe")
        ->check(CLI::NonNegativeNumber);
  }
}

// key=value lines; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(read_file(path));
  std::string line;
  auto trim = [](std::string x) {
    const auto b = x.find_first_not_of(" \t\r");
    const auto e = x.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
  };
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidArgument, path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.rfind("--", 0) == 0) key.erase(0, 2);
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

std::optional<std::string> find_config_flag(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return std::nullopt;
}

void diagnose(std::ostream& err, std::string_view code, const std::string& message) {
  err << ojson{{"level", "error"}, {"code", code}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Circuit extraction, attribution and steering on a constructed QA transformer", kToolName};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);

  Globals globals;
  if (const char* env = std::getenv("QACIRC_SEED"); env != nullptr && *env != '\0') {
    try {
      globals.seed = std::stoull(env);
    } catch (const std::exception&) {
      diagnose(err, "InvalidArgument", "QACIRC_SEED is not an unsigned integer");
      return 1;
    }
  }
  app.add_option("--seed", globals.seed, "Global seed (default: $QACIRC_SEED, else 0)");
  app.add_option("--out-dir", globals.out_dir, "Directory for artifacts and the manifest");
  app.add_option("--jobs", globals.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--config", globals.config, "key=value file; explicit flags take precedence");

  BuildFixtureArgs build_args;
  auto* build = app.add_subcommand("build-fixture", "Write the analytic fixture model");
  build->add_option("--out", build_args.out, "Output weight file");
  build->add_option("--fixture-seed", build_args.fixture_seed, "Memory-table permutation seed");
  build->add_flag("--drop-memory", build_args.drop_memory, "Remove the memory pathway");
  build->add_flag("--zero-copy-head", build_args.zero_copy_head, "Remove the copy pathway");

  GenProbeArgs gen_args;
  auto* gen = app.add_subcommand("gen-probe", "Generate the probe dataset");
  add_probe_options(gen, gen_args.in, true, false);
  gen->add_option("--out", gen_args.out, "Probe JSONL");
  gen->add_option("--held-out-out", gen_args.held_out_out, "Held-out JSONL (with --held-out)");

  ExtractArgs extract_args;
  auto* extract = app.add_subcommand("extract", "Rank components and select a circuit");
  add_probe_options(extract, extract_args.in, false);
  extract->add_option("--mode", extract_args.mode, "copy | memory");
  extract->add_option("--granularity", extract_args.granularity, "head | layer | mlp | mixed");
  extract->add_option("--delta", extract_args.delta, "Combined-score threshold");
  extract->add_option("--hierarchy", extract_args.hierarchy, "Highest hierarchy level (0 or 1)");
  extract->add_option("--out", extract_args.out, "Circuit report JSON");

  AttributeArgs attr_args;
  auto* attribute = app.add_subcommand("attribute", "Attribute generated answers to context spans");
  add_probe_options(attribute, attr_args.in, false);
  attribute->add_option("--head", attr_args.head, "Attribution head LAYER,HEAD (default: fixture copy head)");
  attribute->add_option("--slength", attr_args.slength, "Span length");
  attribute->add_option("--top-k", attr_args.top_k, "Spans to keep");
  attribute->add_option("--answer-length", attr_args.answer_length, "Tokens to generate");
  attribute->add_option("--span-mode", attr_args.span_mode, "window | delimiter");
  attribute->add_option("--mode", attr_args.mode, "copy | memory");
  attribute->add_option("--out", attr_args.out, "Attribution JSONL");

  ProfileArgs profile_args;
  auto* profile = app.add_subcommand("profile-heads", "Context entropy and accuracy per head");
  add_probe_options(profile, profile_args.in, false);
  profile->add_option("--heads", profile_args.heads, "'all' or 'L,H;L,H'");
  profile->add_option("--mode", profile_args.mode, "copy | memory");
  profile->add_option("--out", profile_args.out, "Head profile CSV");

  SteerArgs steer_args;
  auto* steer = app.add_subcommand("steer", "Switch-rate experiment under a steering intervention");
  add_probe_options(steer, steer_args.in, false);
  steer->add_option("--mode", steer_args.mode, "attn | mlp_zero | mlp_mean");
  steer->add_option("--beta", steer_args.beta, "Peak score multiplier");
  steer->add_option("--layers", steer_args.layers, "Attention layers, comma separated");
  steer->add_option("--mlps", steer_args.mlps, "MLP layers, comma separated");
  steer->add_option("--circuit", steer_args.circuit, "Circuit report supplying default targets");
  steer->add_option("--out", steer_args.out, "Steering report JSON");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Attribution and faithfulness metrics");
  add_probe_options(eval, eval_args.in, true);
  eval->add_option("--eval-probe", eval_args.eval_probe, "Held-out JSONL for circuit ablation");
  eval->add_option("--circuit", eval_args.circuit, "Circuit report to ablate");
  eval->add_option("--slength", eval_args.slength, "Span length");
  eval->add_option("--out-csv", eval_args.out_csv, "Metrics CSV");
  eval->add_option("--out-json", eval_args.out_json, "Metrics JSON");

  ReportArgs report_args;
  auto* report = app.add_subcommand("report", "Plot-ready CSVs and a pipeline summary");
  add_probe_options(report, report_args.in, false);
  report->add_option("--delta", report_args.delta, "Combined-score threshold");
  report->add_option("--granularity", report_args.granularity, "head | layer | mlp | mixed");

  std::vector<std::string> args = args_in;
  try {
    // Config entries go in front of the explicit flags; TakeLast lets the
    // flags win.
    if (const auto cfg_path = find_config_flag(args)) {
      const auto entries = read_config_file(*cfg_path);
      auto sub_pos = std::find_if(args.begin(), args.end(), [&](const std::string& a) {
        return app.get_subcommand_no_throw(a) != nullptr;
      });
      if (sub_pos == args.end()) throw Error(ErrorCode::InvalidArgument, "no subcommand given");
      CLI::App* sub = app.get_subcommand(*sub_pos);
      std::vector<std::string> global_part, sub_part;
      for (const auto& [key, value] : entries) {
        const std::string flag = "--" + key;
        if (key == "config") continue;
        if (sub->get_option_no_throw(flag) != nullptr) {
          sub_part.push_back(flag + "=" + value);
        } else if (app.get_option_no_throw(flag) != nullptr) {
          global_part.push_back(flag + "=" + value);
        } else {
          throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "' for " + *sub_pos);
        }
      }
      const auto idx = sub_pos - args.begin();
      args.insert(args.begin() + idx + 1, sub_part.begin(), sub_part.end());
      args.insert(args.begin(), global_part.begin(), global_part.end());
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const Error& e) {
    diagnose(err, to_string(e.code()), e.message());
    return 1;
  }

  try {
    fs::create_directories(globals.out_dir);
    CLI::App* sub = app.get_subcommands().front();
    Session session(sub->get_name(), globals, out);
    if (sub == build) {
      cmd_build_fixture(build_args, session);
    } else if (sub == gen) {
      cmd_gen_probe(gen_args, session);
    } else if (sub == extract) {
      cmd_extract(extract_args, session);
    } else if (sub == attribute) {
      cmd_attribute(attr_args, session);
    } else if (sub == profile) {
      cmd_profile_heads(profile_args, session);
    } else if (sub == steer) {
      cmd_steer(steer_args, session);
    } else if (sub == eval) {
      cmd_eval(eval_args, session);
    } else {
      cmd_report(report_args, session);
    }
    session.finish();
    return 0;
  } catch (const Error& e) {
    diagnose(err, to_string(e.code()), e.message());
    return 1;
  } catch (const std::exception& e) {
    diagnose(err, "Internal", e.what());
    return 2;
  }
}

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

}  // namespace qacirc::cli
