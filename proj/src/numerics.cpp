// SPDX-License-Identifier: Apache-2.0
#include "qacirc/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace qacirc {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidShape: return "InvalidShape";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::InvalidDistribution: return "InvalidDistribution";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::FixtureInfeasible: return "FixtureInfeasible";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::CorruptWeights: return "CorruptWeights";
    case ErrorCode::NotCaptured: return "NotCaptured";
    case ErrorCode::AlignmentError: return "AlignmentError";
    case ErrorCode::InsufficientEntropy: return "InsufficientEntropy";
    case ErrorCode::PartitionError: return "PartitionError";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::Incomparable: return "Incomparable";
    case ErrorCode::InvalidWindow: return "InvalidWindow";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InvalidDataset: return "InvalidDataset";
    case ErrorCode::UndefinedRelScore: return "UndefinedRelScore";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

ProbDist::ProbDist(Vector values) : values_(std::move(values)) {
  if (values_.empty()) {
    throw Error(ErrorCode::InvalidDistribution, "empty distribution");
  }
  double mass = 0.0;
  for (double v : values_) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw Error(ErrorCode::InvalidDistribution, "entry outside [0,1]");
    }
    mass += v;
  }
  if (std::abs(mass - 1.0) > kMassTolerance) {
    throw Error(ErrorCode::InvalidDistribution, "mass " + std::to_string(mass));
  }
}

std::size_t ProbDist::argmax() const { return qacirc::argmax(values_); }

void vec_mat(std::span<const double> x, const Matrix& m, std::span<double> y) {
  std::fill(y.begin(), y.end(), 0.0);
  vec_mat_acc(x, m, y);
}

void vec_mat_acc(std::span<const double> x, const Matrix& m, std::span<double> y) {
  if (x.size() != m.rows() || y.size() != m.cols()) {
    throw Error(ErrorCode::InvalidShape, "vec_mat shape mismatch");
  }
  const std::size_t cols = m.cols();
  const double* base = m.data().data();
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const double* row = base + r * cols;
    for (std::size_t c = 0; c < cols; ++c) y[c] += xr * row[c];
  }
}

void mat_vec(const Matrix& m, std::span<const double> x, std::span<double> y) {
  if (x.size() != m.cols() || y.size() != m.rows()) {
    throw Error(ErrorCode::InvalidShape, "mat_vec shape mismatch");
  }
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::InvalidShape, "dot shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw Error(ErrorCode::InvalidShape, "axpy shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

std::size_t argmax(std::span<const double> x) {
  if (x.empty()) throw Error(ErrorCode::InvalidShape, "argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

void softmax_inplace(std::span<double> scores) {
  const double peak = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double& s : scores) {
    s = std::exp(s - peak);
    total += s;
  }
  for (double& s : scores) s /= total;
}

ProbDist softmax(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::InvalidShape, "softmax of empty vector");
  if (!all_finite(scores)) throw Error(ErrorCode::NonFiniteInput, "softmax input");
  Vector out(scores.begin(), scores.end());
  softmax_inplace(out);
  return ProbDist(std::move(out));
}

double log_sum_exp(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::InvalidShape, "log_sum_exp of empty vector");
  const double peak = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double s : scores) total += std::exp(s - peak);
  return peak + std::log(total);
}

Vector log_softmax(std::span<const double> scores) {
  const double lse = log_sum_exp(scores);
  Vector out(scores.begin(), scores.end());
  for (double& v : out) v -= lse;
  return out;
}

double entropy(const ProbDist& p) {
  double h = 0.0;
  for (double v : p.values()) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(h, 0.0);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace qacirc
