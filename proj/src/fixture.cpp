// SPDX-License-Identifier: Apache-2.0
#include "qacirc/fixture.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "qacirc/rng.hpp"

namespace qacirc {

namespace {

constexpr std::array<double, 3> kPosFreqs = {0.45, 1.05, 1.8};
constexpr int kReserved = 5;
constexpr int kMinFillers = 2;

// Residual-stream channel map for the fixture.
struct Channels {
  std::size_t width = 0;  // = d_head
  std::size_t subj = 0;
  std::size_t prev = 0;
  std::size_t code = 0;
  std::size_t pos = 0;
  std::size_t konst = 0;
  std::size_t is_answer = 0;
  std::size_t mask = 0;
  std::size_t end = 0;

  explicit Channels(std::size_t dh) : width(dh) {
    subj = 0;
    prev = dh;
    code = 2 * dh;
    pos = 3 * dh;
    konst = pos + 2 * kPosFreqs.size();
    is_answer = konst + 1;
    mask = konst + 2;
    end = konst + 3;
  }
};

int hadamard_entry(std::size_t r, std::size_t c) {
  return (std::popcount(r & c) % 2 == 0) ? 1 : -1;
}

// Unit-norm code of answer index i: +/- Hadamard row (i mod n).
Vector answer_code(int i, std::size_t n) {
  const std::size_t row = static_cast<std::size_t>(i) % n;
  const double sign = static_cast<std::size_t>(i) < n ? 1.0 : -1.0;
  const double scale = sign / std::sqrt(static_cast<double>(n));
  Vector code(n);
  for (std::size_t c = 0; c < n; ++c) code[c] = scale * hadamard_entry(row, c);
  return code;
}

double positional_margin(int max_seq) {
  double worst = -1e300;
  for (int d = -1; d < max_seq; ++d) {
    if (d == 0) continue;
    double s = 0.0;
    for (double f : kPosFreqs) s += std::cos(f * d);
    worst = std::max(worst, s);
  }
  return static_cast<double>(kPosFreqs.size()) - worst;
}

void infeasible(const std::string& why) { throw Error(ErrorCode::FixtureInfeasible, why); }

}  // namespace

int FixtureInfo::relation_of(int answer_token) const {
  const int idx = layout.answer_index(answer_token);
  return static_cast<int>(static_cast<long>(idx) * n_relations / layout.n_answers);
}

Fixture build_fixture(const FixtureConfig& fc) {
  if (fc.n_heads < 2 || fc.n_layers < 2) infeasible("fixture needs >= 2 layers and >= 2 heads");
  if (fc.d_model % fc.n_heads != 0) infeasible("d_model not divisible by n_heads");
  const int dh = fc.d_model / fc.n_heads;
  if (!std::has_single_bit(static_cast<unsigned>(dh))) infeasible("d_head must be a power of two");
  if (fc.n_subjects < 2 || fc.n_answers < 2) infeasible("need >= 2 subjects and answers");
  if (fc.n_subjects > dh) infeasible("more subjects than d_head one-hot channels");
  if (fc.n_answers > 2 * dh) infeasible("more answers than +/- Hadamard codes");
  if (fc.n_subjects > fc.d_mlp) infeasible("d_mlp too small for the memory table");
  if (kReserved + fc.n_subjects + fc.n_answers + kMinFillers > fc.vocab_size) {
    infeasible("vocab too small for requested entity counts");
  }
  if (fc.n_relations < 1 || fc.n_relations > fc.n_answers) infeasible("bad relation count");
  if (fc.n_answers / fc.n_relations < 2) infeasible("each relation needs >= 2 answers");
  const Channels ch(static_cast<std::size_t>(dh));
  if (ch.end > static_cast<std::size_t>(fc.d_model)) infeasible("d_model too small for channel map");
  auto in_range = [&](HeadAddress a) {
    return a.layer >= 0 && a.layer < fc.n_layers && a.head >= 0 && a.head < fc.n_heads;
  };
  const HeadAddress ctx_head{fc.copy_head.layer, fc.context_head};
  if (!in_range(fc.copy_head) || !in_range(fc.prev_head) || !in_range(ctx_head)) {
    infeasible("head address out of range");
  }
  if (fc.prev_head.layer >= fc.copy_head.layer) infeasible("previous-token head must precede the copy head");
  if (fc.context_head == fc.copy_head.head) infeasible("context head must differ from copy head");
  if (fc.memory_layer < 0 || fc.memory_layer >= fc.n_layers) infeasible("memory layer out of range");

  ModelConfig mc;
  mc.n_layers = fc.n_layers;
  mc.n_heads = fc.n_heads;
  mc.d_model = fc.d_model;
  mc.d_head = dh;
  mc.d_mlp = fc.d_mlp;
  mc.vocab_size = fc.vocab_size;
  mc.max_seq = fc.max_seq;
  mc.rng_seed = fc.seed;
  mc.norm = NormKind::None;
  ModelWeights w = ModelWeights::zeros(mc);

  FixtureInfo info;
  TokenLayout& lay = info.layout;
  lay.n_subjects = fc.n_subjects;
  lay.answer_begin = lay.subject_begin + fc.n_subjects;
  lay.n_answers = fc.n_answers;
  lay.filler_begin = lay.answer_begin + fc.n_answers;
  lay.n_fillers = fc.vocab_size - lay.filler_begin;
  info.n_relations = fc.n_relations;
  info.copy_head = fc.copy_head;
  info.prev_head = fc.prev_head;
  info.context_head = ctx_head;
  info.memory_layer = fc.memory_layer;

  // Memory table: subject i gets a distinct answer from relation family i mod R.
  {
    Rng rng(fc.seed);
    std::vector<std::vector<int>> families(static_cast<std::size_t>(fc.n_relations));
    for (int a = 0; a < fc.n_answers; ++a) {
      families[static_cast<std::size_t>(info.relation_of(lay.answer(a)))].push_back(lay.answer(a));
    }
    for (auto& fam : families) rng.shuffle(std::span<int>(fam));
    std::vector<std::size_t> cursor(families.size(), 0);
    for (int s = 0; s < fc.n_subjects; ++s) {
      std::size_t f = static_cast<std::size_t>(s % fc.n_relations);
      // Fall through to the next family with spare answers.
      while (cursor[f] >= families[f].size()) f = (f + 1) % families.size();
      info.memory.answer_of_subject.push_back(families[f][cursor[f]++]);
    }
  }

  const double sqrt_dh = std::sqrt(static_cast<double>(dh));
  const auto width = static_cast<std::size_t>(dh);

  // Token embeddings.
  for (int s = 0; s < fc.n_subjects; ++s) {
    w.tok_embed(static_cast<std::size_t>(lay.subject(s)), ch.subj + static_cast<std::size_t>(s)) = 1.0;
  }
  for (int a = 0; a < fc.n_answers; ++a) {
    const Vector code = answer_code(a, width);
    const auto row = static_cast<std::size_t>(lay.answer(a));
    for (std::size_t c = 0; c < width; ++c) w.tok_embed(row, ch.code + c) = code[c];
    w.tok_embed(row, ch.is_answer) = 1.0;
  }
  w.tok_embed(static_cast<std::size_t>(lay.mask), ch.mask) = 1.0;

  // Positional embeddings: sinusoid pairs plus an always-on channel.
  for (int t = 0; t < fc.max_seq; ++t) {
    const auto row = static_cast<std::size_t>(t);
    for (std::size_t f = 0; f < kPosFreqs.size(); ++f) {
      w.pos_embed(row, ch.pos + 2 * f) = std::cos(kPosFreqs[f] * t);
      w.pos_embed(row, ch.pos + 2 * f + 1) = std::sin(kPosFreqs[f] * t);
    }
    w.pos_embed(row, ch.konst) = 1.0;
  }

  // Previous-token head: the query is the position rotated back by one step,
  // so q_t . k_j peaks at j = t - 1.
  {
    const double margin = positional_margin(fc.max_seq);
    if (margin < 0.05) infeasible("positional code cannot separate max_seq positions");
    const double kappa = fc.prev_sharpness / margin * sqrt_dh;
    HeadWeights& hw = w.layers[static_cast<std::size_t>(fc.prev_head.layer)]
                          .heads[static_cast<std::size_t>(fc.prev_head.head)];
    for (std::size_t f = 0; f < kPosFreqs.size(); ++f) {
      const double c = std::cos(kPosFreqs[f]);
      const double s = std::sin(kPosFreqs[f]);
      const std::size_t xc = ch.pos + 2 * f;
      const std::size_t xs = xc + 1;
      hw.wq(xc, 2 * f) = kappa * c;
      hw.wq(xs, 2 * f) = kappa * s;
      hw.wq(xc, 2 * f + 1) = -kappa * s;
      hw.wq(xs, 2 * f + 1) = kappa * c;
      hw.wk(xc, 2 * f) = 1.0;
      hw.wk(xs, 2 * f + 1) = 1.0;
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(fc.n_subjects); ++i) {
      hw.wv(ch.subj + i, i) = 1.0;
      hw.wo(i, ch.prev + i) = 1.0;
    }
  }

  // Copy head: query = current subject, key = previous-subject channel,
  // value/output = answer code block.
  if (!fc.zero_copy_head) {
    HeadWeights& hw = w.layers[static_cast<std::size_t>(fc.copy_head.layer)]
                          .heads[static_cast<std::size_t>(fc.copy_head.head)];
    for (std::size_t i = 0; i < static_cast<std::size_t>(fc.n_subjects); ++i) {
      hw.wq(ch.subj + i, i) = fc.match_score * sqrt_dh;
      hw.wk(ch.prev + i, i) = 1.0;
    }
    for (std::size_t c = 0; c < width; ++c) {
      hw.wv(ch.code + c, c) = 1.0;
      hw.wo(c, ch.code + c) = fc.copy_gain;
    }
  }

  // Context head: weak, broad attention to any answer token in view.
  {
    HeadWeights& hw = w.layers[static_cast<std::size_t>(ctx_head.layer)]
                          .heads[static_cast<std::size_t>(ctx_head.head)];
    hw.wq(ch.konst, 0) = fc.context_score * sqrt_dh;
    hw.wk(ch.is_answer, 0) = 1.0;
    for (std::size_t c = 0; c < width; ++c) {
      hw.wv(ch.code + c, c) = 1.0;
      hw.wo(c, ch.code + c) = fc.context_gain;
    }
  }

  // Memory MLP: one hidden unit per subject, writing the memorized code.
  if (!fc.drop_memory) {
    LayerWeights& lw = w.layers[static_cast<std::size_t>(fc.memory_layer)];
    const double act = gelu(fc.mlp_gain);
    for (int s = 0; s < fc.n_subjects; ++s) {
      const auto unit = static_cast<std::size_t>(s);
      lw.mlp_in(ch.subj + unit, unit) = fc.mlp_gain;
      const int answer = info.memory.answer_of_subject[unit];
      const Vector code = answer_code(lay.answer_index(answer), width);
      for (std::size_t c = 0; c < width; ++c) lw.mlp_out(unit, ch.code + c) = fc.memory_gain / act * code[c];
    }
  }

  // Unembedding.
  for (int a = 0; a < fc.n_answers; ++a) {
    const Vector code = answer_code(a, width);
    const auto row = static_cast<std::size_t>(lay.answer(a));
    for (std::size_t c = 0; c < width; ++c) w.unembed(row, ch.code + c) = code[c];
  }
  w.unembed(static_cast<std::size_t>(lay.eos), ch.is_answer) = fc.eos_gain;
  w.unembed(static_cast<std::size_t>(lay.mask), ch.mask) = fc.mask_unembed;

  w.validate();
  return Fixture{std::move(w), std::move(info)};
}

}  // namespace qacirc
