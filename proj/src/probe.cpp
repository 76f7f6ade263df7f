// SPDX-License-Identifier: Apache-2.0
#include "qacirc/probe.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "qacirc/rng.hpp"
#include "qacirc/util.hpp"

namespace qacirc {

std::string to_string(AnswerMode mode) { return mode == AnswerMode::Copy ? "copy" : "memory"; }

AnswerMode answer_mode_from_string(const std::string& s) {
  if (s == "copy") return AnswerMode::Copy;
  if (s == "memory") return AnswerMode::Memory;
  throw Error(ErrorCode::InvalidArgument, "unknown mode " + s);
}

TokenSeq clean_input(const ProbeExample& ex, AnswerMode mode) {
  return TokenSeq::from_parts(mode == AnswerMode::Copy ? ex.context_copy : ex.context_memory, ex.question);
}

TokenSeq corrupt_input(const ProbeExample& ex) {
  return TokenSeq::from_parts(ex.context_corrupt, ex.question_corrupt);
}

int target_token(const ProbeExample& ex, AnswerMode mode) {
  return mode == AnswerMode::Copy ? ex.swapped_answer() : ex.answer;
}

TokenSeq switch_input(const ProbeExample& ex) {
  std::vector<int> ctx = ex.context_memory;
  ctx.at(ex.answer_position + 1) = switch_token(ex);
  return TokenSeq::from_parts(ctx, ex.question);
}

int switch_token(const ProbeExample& ex) { return ex.swapped_answer(); }

void check_example(const ProbeExample& ex, const FixtureInfo& info) {
  const TokenLayout& lay = info.layout;
  auto fail = [&](const std::string& what) {
    throw Error(ErrorCode::InvalidDataset, "example " + std::to_string(ex.id) + ": " + what);
  };
  const std::size_t n = ex.context_orig.size();
  if (n < 3) fail("context too short");
  if (ex.context_copy.size() != n || ex.context_memory.size() != n || ex.context_corrupt.size() != n) {
    fail("context variants differ in length");
  }
  if (ex.question.size() != ex.question_corrupt.size()) fail("question variants differ in length");
  if (ex.question.empty() || ex.question.back() != ex.subject) fail("question must end with the subject");
  if (ex.answer_position == 0 || ex.answer_position + 1 >= n) fail("answer slot out of range");
  if (ex.context_orig[ex.answer_position - 1] != ex.subject) fail("subject must precede the answer slot");
  if (ex.context_orig[ex.answer_position] != ex.answer) fail("original context must hold the answer");
  if (ex.context_memory[ex.answer_position] != lay.mask) fail("memory context must hold MASK");
  if (!lay.is_answer(ex.swapped_answer()) || ex.swapped_answer() == ex.answer) fail("bad swapped answer");
  if (!info.memory.empty() && info.memory.lookup(lay, ex.subject) != ex.answer) fail("answer is not memorized");
  for (const auto* ctx : {&ex.context_copy, &ex.context_memory, &ex.context_orig}) {
    if (std::count(ctx->begin(), ctx->end(), ex.subject) != 1) fail("subject must occur exactly once");
    for (std::size_t t = 0; t < n; ++t) {
      if (t == ex.answer_position || t + 1 == ex.answer_position) continue;
      if ((*ctx)[t] != ex.context_orig[t]) fail("context variants differ outside the answer slot");
    }
  }
  if (ex.question_corrupt.back() == ex.subject || !lay.is_subject(ex.question_corrupt.back())) {
    fail("corrupted question must name a different subject");
  }
  if (std::count(ex.context_corrupt.begin(), ex.context_corrupt.end(), ex.subject) != 0) {
    fail("corrupted context still contains the subject");
  }
}

bool answers_correctly(const ModelWeights& weights, const ProbeExample& ex) {
  for (AnswerMode mode : {AnswerMode::Copy, AnswerMode::Memory}) {
    const RunTrace t = forward(weights, clean_input(ex, mode), CaptureSpec::none());
    if (t.next_token != target_token(ex, mode)) return false;
  }
  return true;
}

ProbeGeneration gen_probe(const ProbeConfig& config, std::uint64_t seed, const FixtureInfo& info,
                          const ModelWeights* validator) {
  const TokenLayout& lay = info.layout;
  if (config.n < 1) throw Error(ErrorCode::InvalidArgument, "probe size must be >= 1");
  if (config.prefix_min < 0 || config.prefix_min > config.prefix_max || config.suffix_min < 1 ||
      config.suffix_min > config.suffix_max) {
    throw Error(ErrorCode::InvalidArgument, "bad filler length ranges");
  }
  if (info.memory.empty()) throw Error(ErrorCode::InvalidArgument, "fixture has no memory table");
  if (lay.n_fillers < 1 || lay.n_subjects < 2) throw Error(ErrorCode::InvalidArgument, "vocabulary too small");
  if (validator != nullptr) {
    // Question (3 tokens) plus the answer and a terminator must still fit.
    const int longest = config.prefix_max + 2 + config.suffix_max + 3 + 2;
    if (longest > validator->config.max_seq) {
      throw Error(ErrorCode::InvalidArgument, "longest probe sequence exceeds max_seq");
    }
  }
  const long combos = static_cast<long>(lay.n_subjects) * (lay.n_answers - 1);
  if (config.n > combos) {
    throw Error(ErrorCode::InsufficientEntropy, "requested " + std::to_string(config.n) +
                                                    " examples but only " + std::to_string(combos) +
                                                    " distinct (subject, swap) pairs exist");
  }

  Rng rng(seed);
  ProbeGeneration out;
  std::set<std::pair<int, int>> used;
  auto filler = [&] { return lay.filler(static_cast<int>(rng.below(static_cast<std::uint64_t>(lay.n_fillers)))); };

  while (static_cast<int>(out.examples.size()) < config.n) {
    const int subject = lay.subject(static_cast<int>(rng.below(static_cast<std::uint64_t>(lay.n_subjects))));
    const int answer = info.memory.lookup(lay, subject);
    int swap = lay.answer(static_cast<int>(rng.below(static_cast<std::uint64_t>(lay.n_answers - 1))));
    if (swap >= answer) ++swap;
    if (used.contains({subject, swap})) continue;

    const int prefix = rng.range(config.prefix_min, config.prefix_max);
    const int suffix = rng.range(config.suffix_min, config.suffix_max);
    ProbeExample ex;
    ex.id = static_cast<int>(out.examples.size());
    ex.subject = subject;
    ex.answer = answer;
    ex.relation = info.relation_of(answer);
    std::vector<int> ctx;
    for (int i = 0; i < prefix; ++i) ctx.push_back(filler());
    ctx.push_back(subject);
    ex.answer_position = ctx.size();
    ctx.push_back(answer);
    for (int i = 0; i < suffix; ++i) ctx.push_back(filler());
    ex.context_orig = ctx;
    ex.context_copy = ctx;
    ex.context_copy[ex.answer_position] = swap;
    ex.context_memory = ctx;
    ex.context_memory[ex.answer_position] = lay.mask;
    ex.context_corrupt = ctx;
    ex.context_corrupt[ex.answer_position - 1] = filler();
    ex.context_corrupt[ex.answer_position] = filler();
    ex.question = {lay.sep, lay.qmark, subject};
    // The replacement subject must not recall the copy target either.
    int other = subject;
    while (other == subject || info.memory.lookup(lay, other) == swap) {
      other = lay.subject(static_cast<int>(rng.below(static_cast<std::uint64_t>(lay.n_subjects))));
    }
    ex.question_corrupt = {lay.sep, lay.qmark, other};

    check_example(ex, info);
    if (validator != nullptr && !answers_correctly(*validator, ex)) {
      if (++out.rejected > config.max_rejections) {
        throw Error(ErrorCode::InsufficientEntropy, "validity filter rejected too many candidates");
      }
      continue;
    }
    used.insert({subject, swap});
    out.examples.push_back(std::move(ex));
  }
  return out;
}

std::vector<ProbeSet> partition_by_relation(const ProbeSet& dataset, int k_parts) {
  if (k_parts < 2) throw Error(ErrorCode::PartitionError, "need at least 2 parts");
  std::set<int> relations;
  for (const auto& ex : dataset) relations.insert(ex.relation);
  if (static_cast<int>(relations.size()) < k_parts) {
    throw Error(ErrorCode::PartitionError, "dataset has " + std::to_string(relations.size()) +
                                               " relations, fewer than " + std::to_string(k_parts) + " parts");
  }
  // The i-th relation (ascending) goes to part i mod k.
  std::vector<int> rel_list(relations.begin(), relations.end());
  std::vector<ProbeSet> parts(static_cast<std::size_t>(k_parts));
  for (const auto& ex : dataset) {
    const auto idx = std::lower_bound(rel_list.begin(), rel_list.end(), ex.relation) - rel_list.begin();
    parts[static_cast<std::size_t>(idx % k_parts)].push_back(ex);
  }
  return parts;
}

std::pair<ProbeSet, ProbeSet> split_dataset(const ProbeSet& dataset, std::size_t n_first) {
  if (n_first > dataset.size()) throw Error(ErrorCode::InvalidArgument, "split point beyond dataset");
  const auto mid = dataset.begin() + static_cast<std::ptrdiff_t>(n_first);
  return {ProbeSet(dataset.begin(), mid), ProbeSet(mid, dataset.end())};
}

std::size_t count_overlap(const ProbeSet& a, const ProbeSet& b) {
  auto key = [](const ProbeExample& ex) {
    return std::tie(ex.question, ex.context_copy, ex.context_corrupt, ex.question_corrupt);
  };
  std::size_t n = 0;
  for (const auto& x : a) {
    for (const auto& y : b) {
      if (key(x) == key(y)) {
        ++n;
        break;
      }
    }
  }
  return n;
}

std::string to_jsonl(const ProbeSet& dataset) {
  std::string out;
  for (const auto& ex : dataset) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["question"] = ex.question;
    j["subject"] = ex.subject;
    j["answer"] = ex.answer;
    j["context_copy"] = ex.context_copy;
    j["context_memory"] = ex.context_memory;
    j["context_orig"] = ex.context_orig;
    j["context_corrupt"] = ex.context_corrupt;
    j["question_corrupt"] = ex.question_corrupt;
    j["answer_position"] = ex.answer_position;
    j["relation"] = ex.relation;
    out += j.dump();
    out += '\n';
  }
  return out;
}

ProbeSet from_jsonl(std::string_view text) {
  ProbeSet out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ProbeExample ex;
      ex.id = j.at("id").get<int>();
      ex.question = j.at("question").get<std::vector<int>>();
      ex.subject = j.at("subject").get<int>();
      ex.answer = j.at("answer").get<int>();
      ex.context_copy = j.at("context_copy").get<std::vector<int>>();
      ex.context_memory = j.at("context_memory").get<std::vector<int>>();
      ex.context_orig = j.at("context_orig").get<std::vector<int>>();
      ex.context_corrupt = j.at("context_corrupt").get<std::vector<int>>();
      ex.question_corrupt = j.at("question_corrupt").get<std::vector<int>>();
      ex.answer_position = j.at("answer_position").get<std::size_t>();
      ex.relation = j.at("relation").get<int>();
      if (ex.answer_position >= ex.context_copy.size()) {
        throw Error(ErrorCode::InvalidDataset, "answer_position outside context");
      }
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::FormatError, "probe line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string dataset_sha256(const ProbeSet& dataset) { return sha256_hex(to_jsonl(dataset)); }

}  // namespace qacirc
