// SPDX-License-Identifier: Apache-2.0
//
// Synthetic probe dataset: paired copy/memory QA examples with corrupted
// counterparts, in the fixture's token vocabulary.
//
// Context layout: [filler..., s, slot, filler...]; question: [SEP, QMARK, s].
// The slot holds a swapped answer (copy), MASK (memory) or the memorized
// answer (original). Corrupted variants replace s and the slot with fillers
// and the question subject with a different subject; lengths never change.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qacirc/fixture.hpp"
#include "qacirc/model.hpp"

namespace qacirc {

enum class AnswerMode { Copy, Memory };

std::string to_string(AnswerMode mode);
AnswerMode answer_mode_from_string(const std::string& s);

struct ProbeExample {
  int id = 0;
  std::vector<int> question;
  int subject = 0;
  int answer = 0;  // memorized answer of the subject
  std::vector<int> context_copy;
  std::vector<int> context_memory;
  std::vector<int> context_orig;
  std::vector<int> context_corrupt;
  std::vector<int> question_corrupt;
  std::size_t answer_position = 0;
  int relation = 0;

  int swapped_answer() const { return context_copy.at(answer_position); }
  bool operator==(const ProbeExample&) const = default;
};

using ProbeSet = std::vector<ProbeExample>;

// Clean input for the mode and the token the fixture is expected to emit.
TokenSeq clean_input(const ProbeExample& ex, AnswerMode mode);
TokenSeq corrupt_input(const ProbeExample& ex);
int target_token(const ProbeExample& ex, AnswerMode mode);

// Memory-mode context with a secondary answer planted right after MASK, so
// that "answering from context" has a concrete token.
TokenSeq switch_input(const ProbeExample& ex);
int switch_token(const ProbeExample& ex);

struct ProbeConfig {
  int n = 200;
  int prefix_min = 3;
  int prefix_max = 8;
  int suffix_min = 3;
  int suffix_max = 8;
  int max_rejections = 10000;
};

struct ProbeGeneration {
  ProbeSet examples;
  int rejected = 0;  // candidates dropped by the validity filter
};

// Deterministic in (config, seed). With a validator model every example must
// be answered from context in copy mode and from memory in memory mode;
// failures are resampled.
ProbeGeneration gen_probe(const ProbeConfig& config, std::uint64_t seed, const FixtureInfo& info,
                          const ModelWeights* validator = nullptr);

// Throws InvalidDataset describing the first broken invariant.
void check_example(const ProbeExample& ex, const FixtureInfo& info);

// Greedy next-token validity under the model for both modes.
bool answers_correctly(const ModelWeights& weights, const ProbeExample& ex);

std::vector<ProbeSet> partition_by_relation(const ProbeSet& dataset, int k_parts);

// Splits off the first `n_first` examples; the rest form the second set.
std::pair<ProbeSet, ProbeSet> split_dataset(const ProbeSet& dataset, std::size_t n_first);

// Examples present in both sets (same content, ignoring ids).
std::size_t count_overlap(const ProbeSet& a, const ProbeSet& b);

std::string to_jsonl(const ProbeSet& dataset);
ProbeSet from_jsonl(std::string_view text);
std::string dataset_sha256(const ProbeSet& dataset);

}  // namespace qacirc
