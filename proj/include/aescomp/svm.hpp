#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aescomp/types.hpp"

namespace aescomp {

/// Dense row-major matrix of doubles; one row per example.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  /// Throws ShapeError if the rows are ragged.
  static FeatureMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }

  /// Appends a row; the first row fixes the column count.
  void push_row(std::span<const double> values);
  void push_row(std::span<const float> values);

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct KernelParams {
  double gamma = 1.0;
  /// Throws InvalidArgument unless gamma is positive and finite.
  void validate() const;
};

struct SmoConfig {
  double C = 1.0;
  double kkt_tol = 1e-3;
  std::size_t max_passes = 1000;
  double value_eps = 1e-12;
  std::uint64_t seed = 0;
  /// Up to this many rows the full kernel matrix is precomputed; beyond it
  /// rows are computed on demand and kept in an LRU of `kernel_cache_rows`.
  std::size_t full_kernel_max_rows = 8192;
  std::size_t kernel_cache_rows = 1024;

  void validate() const;
};

/// Per-dimension z-scoring with training statistics (biased std).
/// Zero-variance dimensions keep std = 1 and are only centred.
struct Standardizer {
  std::vector<double> means;
  std::vector<double> stds;

  std::size_t dim() const { return means.size(); }
  /// Throws ShapeError on a length mismatch.
  std::vector<double> apply(std::span<const double> x) const;
  std::vector<double> apply(std::span<const float> x) const;
  FeatureMatrix apply(const FeatureMatrix& x) const;

  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

/// Throws InvalidArgument on an empty matrix.
Standardizer fit_standardizer(const FeatureMatrix& x);
inline std::vector<double> apply_standardizer(const Standardizer& s, std::span<const double> x) { return s.apply(x); }

/// exp(-gamma * ||x - z||^2). Throws ShapeError on unequal lengths.
double rbf(std::span<const double> x, std::span<const double> z, const KernelParams& k);

/// Mean of the per-dimension biased variances.
double pooled_variance(const FeatureMatrix& x);
/// gamma = 1 / (d * pooled variance), or 1 / d when the variance is zero.
KernelParams default_gamma(const FeatureMatrix& x);

/// Full symmetric kernel matrix (row-major n x n).
FeatureMatrix kernel_matrix(const FeatureMatrix& x, const KernelParams& k);

/// Raw result of the dual solver on an already standardised matrix.
struct DualSolution {
  std::vector<double> alpha;
  double bias = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  /// b_low - b_up at exit: the largest pairwise KKT violation.
  double kkt_gap = 0.0;
};

/// Soft-margin dual solver: pairwise analytic updates on the maximal
/// violating pair (largest |E1 - E2|), with a seeded shuffled scan as
/// fallback when that pair cannot make progress. Stops once the KKT gap is
/// within cfg.kkt_tol or after cfg.max_passes * n updates.
/// `signs` holds +1 / -1 per row. Throws DegenerateLabels if only one class
/// is present and NumericsError on non-finite input.
DualSolution solve_dual(const FeatureMatrix& x, std::span<const int> signs, const KernelParams& k,
                        const SmoConfig& cfg);

/// sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij.
double dual_objective(const FeatureMatrix& kernel, std::span<const int> signs, std::span<const double> alpha);

struct SvmModel {
  static constexpr int kFormatVersion = 1;

  /// Standardised support vectors.
  std::vector<std::vector<double>> support_vectors;
  /// alpha_i * y_i per support vector.
  std::vector<double> dual_coeffs;
  double bias = 0.0;
  KernelParams kernel;
  double C = 1.0;
  Standardizer standardizer;
  Provenance expected_provenance;
  bool converged = true;

  std::size_t dim() const { return standardizer.dim(); }
  friend bool operator==(const SvmModel&, const SvmModel&) = default;
};

/// Fits the standardiser on `x`, solves the dual on the standardised rows and
/// keeps the vectors with nonzero alpha. High maps to +1.
SvmModel train_smo(const FeatureMatrix& x, std::span<const Label> labels, const KernelParams& k,
                   const SmoConfig& cfg, Provenance provenance = {});

/// train_smo with gamma = default_gamma of the standardised training matrix.
SvmModel train_smo_default_gamma(const FeatureMatrix& x, std::span<const Label> labels, const SmoConfig& cfg,
                                 Provenance provenance = {});

/// f(x) = sum_i coeff_i K(sv_i, standardise(x)) + bias on raw features.
/// Throws ShapeError if the length differs from the model dimension.
double decision_value(const SvmModel& model, std::span<const double> x);
double decision_value(const SvmModel& model, std::span<const float> x);

/// f(x) >= 0 is High; an exact zero is High.
Label predict_label(double decision);
Label predict(const SvmModel& model, std::span<const double> x);
Label predict(const SvmModel& model, std::span<const float> x);

/// Throws ModelMismatch unless `provenance` equals the model's.
void check_provenance(const SvmModel& model, const Provenance& provenance);

}  // namespace aescomp
