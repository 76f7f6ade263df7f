// SPDX-License-Identifier: Apache-2.0
//
// Analytically constructed fixture model with two known answer pathways:
//
//  * context copy: a previous-token head writes "the token before me was
//    subject s" at every position; the copy head matches the question's
//    final subject token against that channel and copies the matched
//    position's answer code into the logits.
//  * parametric memory: one MLP maps the subject token at the last position
//    to the code of its memorized answer.
//
// Answers are unembedded through +/- rows of a Sylvester-Hadamard matrix, so
// 2 * d_head answers fit in a d_head-wide code block with exact separation.
#pragma once

#include <cstdint>
#include <vector>

#include "qacirc/model.hpp"

namespace qacirc {

// Reserved ids, then subjects, answers and filler tokens in that order.
struct TokenLayout {
  int pad = 0;
  int mask = 1;  // stands in for a semantically unrelated answer replacement
  int sep = 2;
  int qmark = 3;
  int eos = 4;
  int subject_begin = 5;
  int n_subjects = 0;
  int answer_begin = 0;
  int n_answers = 0;
  int filler_begin = 0;
  int n_fillers = 0;

  int subject(int i) const { return subject_begin + i; }
  int answer(int i) const { return answer_begin + i; }
  int filler(int i) const { return filler_begin + i; }
  bool is_subject(int id) const { return id >= subject_begin && id < subject_begin + n_subjects; }
  bool is_answer(int id) const { return id >= answer_begin && id < answer_begin + n_answers; }
  bool is_filler(int id) const { return id >= filler_begin && id < filler_begin + n_fillers; }
  int subject_index(int id) const { return id - subject_begin; }
  int answer_index(int id) const { return id - answer_begin; }
};

struct MemoryTable {
  std::vector<int> answer_of_subject;  // subject index -> answer token id

  bool empty() const { return answer_of_subject.empty(); }
  int lookup(const TokenLayout& layout, int subject_token) const {
    return answer_of_subject.at(static_cast<std::size_t>(layout.subject_index(subject_token)));
  }
};

struct HeadAddress {
  int layer = 0;
  int head = 0;
  bool operator==(const HeadAddress&) const = default;
  auto operator<=>(const HeadAddress&) const = default;
};

struct FixtureConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_mlp = 64;
  int vocab_size = 64;
  int max_seq = 32;
  int n_subjects = 16;
  int n_answers = 32;
  int n_relations = 3;
  std::uint64_t seed = 1;  // memory table permutation

  HeadAddress copy_head{1, 2};
  HeadAddress prev_head{0, 0};
  int context_head = 3;  // secondary answer-seeking head in the copy layer
  int memory_layer = 1;

  double copy_gain = 24.0;
  double memory_gain = 12.0;
  double context_gain = 24.0;
  double eos_gain = 30.0;
  double match_score = 16.0;
  double context_score = 1.0;
  double prev_sharpness = 24.0;  // minimum score gap of the previous-token head
  double mlp_gain = 8.0;
  double mask_unembed = 0.1;

  // Ablated variants used to check that each pathway is load-bearing.
  bool drop_memory = false;
  bool zero_copy_head = false;
};

struct FixtureInfo {
  TokenLayout layout;
  MemoryTable memory;
  int n_relations = 1;
  HeadAddress copy_head;
  HeadAddress prev_head;
  HeadAddress context_head;
  int memory_layer = 0;

  // Relation family of an answer token (contiguous answer-id ranges).
  int relation_of(int answer_token) const;
};

struct Fixture {
  ModelWeights weights;
  FixtureInfo info;
};

// Throws FixtureInfeasible when the vocabulary or widths cannot host the
// requested entities.
Fixture build_fixture(const FixtureConfig& config = {});

}  // namespace qacirc
