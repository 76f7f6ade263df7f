// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major linear algebra and probability helpers. Everything is
// double precision; sizes here are desk-scale so no blocking or SIMD.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "qacirc/error.hpp"

namespace qacirc {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Probability vector; construction validates non-negativity and unit mass.
class ProbDist {
 public:
  static constexpr double kMassTolerance = 1e-6;

  explicit ProbDist(Vector values);

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  const Vector& values() const noexcept { return values_; }
  std::size_t argmax() const;

 private:
  Vector values_;
};

// y = x * M   (x: 1 x rows, M: rows x cols)
void vec_mat(std::span<const double> x, const Matrix& m, std::span<double> y);
// y += x * M
void vec_mat_acc(std::span<const double> x, const Matrix& m, std::span<double> y);
// y = M * x   (M: rows x cols, x: cols)
void mat_vec(const Matrix& m, std::span<const double> x, std::span<double> y);

double dot(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
bool all_finite(std::span<const double> x);

// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> x);

ProbDist softmax(std::span<const double> scores);
// In-place variant for hot loops; no validation beyond shape.
void softmax_inplace(std::span<double> scores);
Vector log_softmax(std::span<const double> scores);
double log_sum_exp(std::span<const double> scores);

// Shannon entropy in nats, 0 ln 0 := 0.
double entropy(const ProbDist& p);

double gelu(double x);
double gelu_grad(double x);

}  // namespace qacirc
