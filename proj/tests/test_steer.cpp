// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "json.hpp"
#include "qacirc/steer.hpp"
#include "test_support.hpp"

using namespace qacirc;
using qacirc::testing::fixture;
using qacirc::testing::probe;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(-1);
}

SteerSpec attn(double beta, std::vector<int> layers = {1}) {
  SteerSpec s;
  s.mode = SteerMode::AttnUpweight;
  s.beta = beta;
  s.target_layers = std::move(layers);
  return s;
}

SteerSpec mlp(SteerMode mode, std::vector<int> mlps) {
  SteerSpec s;
  s.mode = mode;
  s.target_mlps = std::move(mlps);
  return s;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double total_variation(const ProbDist& a, const ProbDist& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.values().size(); ++i) s += std::fabs(a.values()[i] - b.values()[i]);
  return 0.5 * s;
}

}  // namespace

TEST_CASE("beta of one is the identity") {
  const auto h = upweight_attention(fixture().weights, attn(1.0, {0, 1}));
  for (const auto& ex : probe(20)) {
    const TokenSeq in = switch_input(ex);
    const RunTrace base = forward(fixture().weights, in);
    CHECK(max_abs_diff(h->run(in, CaptureSpec::none()).last_logits(), base.last_logits()) < 1e-12);
  }
}

TEST_CASE("empty target sets reproduce the baseline bit for bit") {
  const TokenSeq in = switch_input(probe()[0]);
  const RunTrace base = forward(fixture().weights, in);
  CHECK(upweight_attention(fixture().weights, attn(10.0, {}))->run(in, CaptureSpec::none()).logits == base.logits);
  CHECK(ablate_mlp_direct(fixture().weights, mlp(SteerMode::MlpZero, {}))->run(in, CaptureSpec::none()).logits ==
        base.logits);
}

TEST_CASE("upweighting a positive peak increases its attention mass") {
  const auto h = upweight_attention(fixture().weights, attn(10.0));
  std::size_t checked = 0;
  for (const auto& ex : probe(40)) {
    const TokenSeq in = switch_input(ex);
    const RunTrace base = forward(fixture().weights, in);
    const RunTrace steered = h->run(in, CaptureSpec::full());
    const std::size_t last = base.last();
    for (int head = 0; head < 4; ++head) {
      const Matrix& s = base.layers[1].scores[static_cast<std::size_t>(head)];
      std::size_t peak = in.context_start;
      for (std::size_t j = in.context_start; j < in.context_end; ++j) {
        if (s(last, j) > s(last, peak)) peak = j;
      }
      const Matrix& a0 = base.layers[1].attention[static_cast<std::size_t>(head)];
      const Matrix& a1 = steered.layers[1].attention[static_cast<std::size_t>(head)];
      double sum = 0;
      for (std::size_t j = 0; j <= last; ++j) sum += a1(last, j);
      CHECK(std::fabs(sum - 1.0) < 1e-6);
      // Recompute the steered row from the clean scores.
      std::vector<double> row(s.row(last).begin(), s.row(last).begin() + static_cast<long>(last + 1));
      row[peak] *= 10.0;
      const auto oracle = testing::softmax_oracle(row);
      for (std::size_t j = 0; j <= last; ++j) CHECK(std::fabs(oracle[j] - a1(last, j)) < 1e-12);
      if (s(last, peak) > 0 && a0(last, peak) < 1.0) {
        CHECK(a1(last, peak) > a0(last, peak));
        ++checked;
      }
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("every steered attention row stays a distribution") {
  const auto h = upweight_attention(fixture().weights, attn(5.0, {0, 1}));
  const RunTrace t = h->run(switch_input(probe()[3]), CaptureSpec::full());
  for (const auto& lt : t.layers) {
    for (const Matrix& a : lt.attention) {
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          CHECK(a(i, j) >= 0.0);
          s += a(i, j);
        }
        CHECK(std::fabs(s - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("invalid steering specs are rejected") {
  const auto& cfg = fixture().weights.config;
  CHECK(code_of([&] { attn(0.0).validate(cfg); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([&] { attn(-2.0).validate(cfg); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([&] { attn(std::nan("")).validate(cfg); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([&] { attn(2.0, {2}).validate(cfg); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([&] { mlp(SteerMode::MlpZero, {-1}).validate(cfg); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([&] { mlp(SteerMode::MlpMean, {1}).validate(cfg); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([&] { upweight_attention(fixture().weights, attn(0.0)); }) == ErrorCode::InvalidSpec);
  CHECK_NOTHROW(attn(2.0).validate(cfg));
}

TEST_CASE("zeroing the memory MLP collapses the memorized answer") {
  const auto h = ablate_mlp_direct(fixture().weights, mlp(SteerMode::MlpZero, {1}));
  for (const auto& ex : probe(40)) {
    const TokenSeq in = clean_input(ex, AnswerMode::Memory);
    const ProbDist d = h->run(in, CaptureSpec::none()).next_distribution();
    CHECK(d.values()[static_cast<std::size_t>(ex.answer)] < 0.1);
  }
}

TEST_CASE("zeroing an MLP off the pathway leaves the answer distribution intact") {
  const auto h = ablate_mlp_direct(fixture().weights, mlp(SteerMode::MlpZero, {0}));
  for (const auto& ex : probe(40)) {
    const TokenSeq in = clean_input(ex, AnswerMode::Memory);
    CHECK(total_variation(h->run(in, CaptureSpec::none()).next_distribution(),
                          forward(fixture().weights, in).next_distribution()) < 1e-3);
  }
}

TEST_CASE("a mean over one example is a no-op on that example") {
  const ProbeSet one{probe()[4]};
  SteerSpec s = mlp(SteerMode::MlpMean, {0, 1});
  s.mean_source = &one;
  s.mean_mode = AnswerMode::Memory;
  const auto h = ablate_mlp_direct(fixture().weights, s);
  const TokenSeq in = clean_input(one[0], AnswerMode::Memory);
  CHECK(max_abs_diff(h->run(in, CaptureSpec::none()).last_logits(), forward(fixture().weights, in).last_logits()) <
        1e-12);
}

TEST_CASE("switch rate rises with beta") {
  const ProbeSet& ds = probe(60);
  double prev = -1;
  std::vector<double> rates;
  for (double beta : {1.0, 2.0, 5.0, 10.0}) {
    const auto r = switch_experiment(fixture().weights, ds, AnswerMode::Memory, attn(beta));
    CHECK(r.n == ds.size());
    CHECK(r.per_example.size() == ds.size());
    CHECK(r.switch_rate >= prev);
    prev = r.switch_rate;
    rates.push_back(r.switch_rate);
  }
  CHECK(rates.front() <= 0.05);
  CHECK(rates.back() >= 0.9);
}

TEST_CASE("switch outcomes are consistent and serialize") {
  const auto r = switch_experiment(fixture().weights, probe(20), AnswerMode::Memory, mlp(SteerMode::MlpZero, {1}), 2);
  std::size_t switched = 0;
  for (std::size_t i = 0; i < r.per_example.size(); ++i) {
    const auto& o = r.per_example[i];
    CHECK(o.id == probe(20)[i].id);
    CHECK(o.baseline_answer == probe(20)[i].answer);
    CHECK(o.switched == (o.steered_answer == switch_token(probe(20)[i])));
    switched += o.switched ? 1 : 0;
  }
  CHECK(r.switch_rate == static_cast<double>(switched) / 20.0);
  const auto j = nlohmann::json::parse(to_json(r));
  for (const char* k : {"mode", "beta", "targets", "switch_rate", "n", "per_example"}) CHECK(j.contains(k));
  CHECK(j["mode"] == "mlp_zero");
}

TEST_CASE("switching needs a memory-mode dataset") {
  CHECK(code_of([] { switch_experiment(fixture().weights, probe(5), AnswerMode::Copy, attn(10.0)); }) ==
        ErrorCode::InvalidDataset);
}

TEST_CASE("steer mode names round-trip") {
  for (auto m : {SteerMode::AttnUpweight, SteerMode::MlpZero, SteerMode::MlpMean}) {
    CHECK(steer_mode_from_string(to_string(m)) == m);
  }
  CHECK(steer_mode_from_string("attn") == SteerMode::AttnUpweight);
  CHECK(code_of([] { steer_mode_from_string("prompt"); }) == ErrorCode::InvalidSpec);
}
