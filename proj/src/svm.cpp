#include "aescomp/svm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <list>
#include <memory>
#include <numeric>
#include <unordered_map>

#include "aescomp/error.hpp"
#include "aescomp/rng.hpp"

namespace aescomp {

FeatureMatrix FeatureMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  FeatureMatrix m;
  for (const auto& r : rows) m.push_row(std::span<const double>(r));
  return m;
}

void FeatureMatrix::push_row(std::span<const double> values) {
  if (rows_ == 0 && cols_ == 0) cols_ = values.size();
  if (values.size() != cols_) {
    throw ShapeError("row of length " + std::to_string(values.size()) + " in a matrix of width " +
                     std::to_string(cols_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

void FeatureMatrix::push_row(std::span<const float> values) {
  std::vector<double> wide(values.begin(), values.end());
  push_row(std::span<const double>(wide));
}

void KernelParams::validate() const {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw InvalidArgument("gamma must be positive and finite, got " + std::to_string(gamma));
  }
}

void SmoConfig::validate() const {
  if (!(C > 0.0) || !std::isfinite(C)) throw InvalidArgument("C must be positive");
  if (!(kkt_tol > 0.0)) throw InvalidArgument("kkt_tol must be positive");
  if (max_passes < 1) throw InvalidArgument("max_passes must be >= 1");
  if (!(value_eps > 0.0)) throw InvalidArgument("value_eps must be positive");
  if (kernel_cache_rows < 2) throw InvalidArgument("kernel_cache_rows must be >= 2");
}

// ---------------------------------------------------------------------------
// Standardisation and kernel

std::vector<double> Standardizer::apply(std::span<const double> x) const {
  if (x.size() != means.size()) {
    throw ShapeError("standardizer expects " + std::to_string(means.size()) + " values, got " +
                     std::to_string(x.size()));
  }
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - means[j]) / stds[j];
  return out;
}

std::vector<double> Standardizer::apply(std::span<const float> x) const {
  std::vector<double> wide(x.begin(), x.end());
  return apply(std::span<const double>(wide));
}

FeatureMatrix Standardizer::apply(const FeatureMatrix& x) const {
  if (!x.empty() && x.cols() != means.size()) {
    throw ShapeError("standardizer expects width " + std::to_string(means.size()) + ", got " +
                     std::to_string(x.cols()));
  }
  FeatureMatrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = (src[j] - means[j]) / stds[j];
  }
  return out;
}

namespace {

// Per-column mean and biased variance, two-pass for accuracy.
void column_moments(const FeatureMatrix& x, std::vector<double>& means, std::vector<double>& vars) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  means.assign(d, 0.0);
  vars.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < d; ++j) means[j] += r[j];
  }
  for (double& m : means) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const double dev = r[j] - means[j];
      vars[j] += dev * dev;
    }
  }
  for (double& v : vars) v /= static_cast<double>(n);
}

}  // namespace

Standardizer fit_standardizer(const FeatureMatrix& x) {
  if (x.empty()) throw InvalidArgument("cannot fit a standardizer on an empty matrix");
  Standardizer s;
  std::vector<double> vars;
  column_moments(x, s.means, vars);
  s.stds.resize(vars.size());
  for (std::size_t j = 0; j < vars.size(); ++j) {
    const double sd = std::sqrt(vars[j]);
    s.stds[j] = sd > 0.0 && std::isfinite(sd) ? sd : 1.0;
  }
  return s;
}

double rbf(std::span<const double> x, std::span<const double> z, const KernelParams& k) {
  if (x.size() != z.size()) {
    throw ShapeError("rbf on vectors of length " + std::to_string(x.size()) + " and " + std::to_string(z.size()));
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - z[i];
    sq += d * d;
  }
  return std::exp(-k.gamma * sq);
}

double pooled_variance(const FeatureMatrix& x) {
  if (x.empty() || x.cols() == 0) throw InvalidArgument("pooled variance of an empty matrix");
  std::vector<double> means;
  std::vector<double> vars;
  column_moments(x, means, vars);
  return std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(vars.size());
}

KernelParams default_gamma(const FeatureMatrix& x) {
  const double var = pooled_variance(x);
  const auto d = static_cast<double>(x.cols());
  return KernelParams{var > 0.0 ? 1.0 / (d * var) : 1.0 / d};
}

FeatureMatrix kernel_matrix(const FeatureMatrix& x, const KernelParams& k) {
  const std::size_t n = x.rows();
  FeatureMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    out(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = rbf(x.row(i), x.row(j), k);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

double dual_objective(const FeatureMatrix& kernel, std::span<const int> signs, std::span<const double> alpha) {
  const std::size_t n = alpha.size();
  double linear = 0.0;
  double quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    linear += alpha[i];
    if (alpha[i] == 0.0) continue;
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += alpha[j] * signs[j] * kernel(i, j);
    quad += alpha[i] * signs[i] * row;
  }
  return linear - 0.5 * quad;
}

// ---------------------------------------------------------------------------
// SMO

namespace {

/// Kernel rows, either all precomputed or computed on demand with an LRU.
class KernelRows {
 public:
  using Row = std::shared_ptr<const std::vector<double>>;

  KernelRows(const FeatureMatrix& x, const KernelParams& k, const SmoConfig& cfg)
      : x_(x), k_(k), capacity_(cfg.kernel_cache_rows) {
    if (x.rows() <= cfg.full_kernel_max_rows) {
      std::vector<std::shared_ptr<std::vector<double>>> rows;
      rows.reserve(x.rows());
      for (std::size_t i = 0; i < x.rows(); ++i) rows.push_back(std::make_shared<std::vector<double>>(x.rows()));
      for (std::size_t i = 0; i < x.rows(); ++i) {
        (*rows[i])[i] = 1.0;
        for (std::size_t j = i + 1; j < x.rows(); ++j) {
          const double v = rbf(x.row(i), x.row(j), k);
          (*rows[i])[j] = v;
          (*rows[j])[i] = v;
        }
      }
      full_.assign(rows.begin(), rows.end());
    }
  }

  Row row(std::size_t i) {
    if (!full_.empty()) return full_[i];
    if (auto it = index_.find(i); it != index_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second);
      return it->second->second;
    }
    auto values = std::make_shared<std::vector<double>>(x_.rows());
    for (std::size_t j = 0; j < x_.rows(); ++j) (*values)[j] = j == i ? 1.0 : rbf(x_.row(i), x_.row(j), k_);
    lru_.emplace_front(i, values);
    index_[i] = lru_.begin();
    if (lru_.size() > capacity_) {
      index_.erase(lru_.back().first);
      lru_.pop_back();
    }
    return values;
  }

 private:
  const FeatureMatrix& x_;
  KernelParams k_;
  std::size_t capacity_;
  std::vector<Row> full_;
  std::list<std::pair<std::size_t, Row>> lru_;
  std::unordered_map<std::size_t, std::list<std::pair<std::size_t, Row>>::iterator> index_;
};

class SmoSolver {
 public:
  SmoSolver(const FeatureMatrix& x, std::span<const int> y, const KernelParams& k, const SmoConfig& cfg)
      : n_(x.rows()), y_(y), cfg_(cfg), kernel_(x, k, cfg), alpha_(n_, 0.0), f_(n_), rng_(cfg.seed) {
    // With alpha = 0 the error cache is F_i = -y_i.
    for (std::size_t i = 0; i < n_; ++i) f_[i] = -static_cast<double>(y_[i]);
  }

  DualSolution solve() {
    DualSolution out;
    const std::size_t budget = cfg_.max_passes * std::max<std::size_t>(n_, 1);
    std::size_t iterations = 0;
    bool converged = false;
    while (true) {
      const auto [i_up, i_low] = violating_pair();
      const double gap = f_[i_low] - f_[i_up];
      if (gap <= cfg_.kkt_tol) {
        converged = true;
        break;
      }
      if (iterations >= budget) break;
      ++iterations;
      if (take_step(i_low, i_up)) continue;
      if (!fallback_scan()) break;
    }
    const auto [i_up, i_low] = violating_pair();
    out.kkt_gap = f_[i_low] - f_[i_up];
    out.converged = converged;
    out.iterations = iterations;
    out.alpha = alpha_;
    out.bias = -threshold(i_up, i_low);
    return out;
  }

 private:
  bool is_free(std::size_t i) const { return alpha_[i] > 0.0 && alpha_[i] < cfg_.C; }
  // Indices whose F bounds the threshold from below (I0, I1, I2) and above (I0, I3, I4).
  bool in_up(std::size_t i) const { return y_[i] > 0 ? alpha_[i] < cfg_.C : alpha_[i] > 0.0; }
  bool in_low(std::size_t i) const { return y_[i] > 0 ? alpha_[i] > 0.0 : alpha_[i] < cfg_.C; }

  std::pair<std::size_t, std::size_t> violating_pair() const {
    std::size_t i_up = n_;
    std::size_t i_low = n_;
    for (std::size_t i = 0; i < n_; ++i) {
      if (in_up(i) && (i_up == n_ || f_[i] < f_[i_up])) i_up = i;
      if (in_low(i) && (i_low == n_ || f_[i] > f_[i_low])) i_low = i;
    }
    return {i_up, i_low};
  }

  double threshold(std::size_t i_up, std::size_t i_low) const {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (is_free(i)) {
        sum += f_[i];
        ++count;
      }
    }
    if (count > 0) return sum / static_cast<double>(count);
    return 0.5 * (f_[i_up] + f_[i_low]);
  }

  double snap(double a) const {
    if (a < cfg_.value_eps) return 0.0;
    if (a > cfg_.C - cfg_.value_eps) return cfg_.C;
    return a;
  }

  // Platt's analytic two-variable step. Returns false when the pair cannot
  // move by more than value_eps.
  bool take_step(std::size_t i1, std::size_t i2) {
    if (i1 == i2) return false;
    const double a1 = alpha_[i1];
    const double a2 = alpha_[i2];
    const int y1 = y_[i1];
    const int y2 = y_[i2];
    const double e1 = f_[i1];
    const double e2 = f_[i2];
    const double s = y1 * y2;
    const double C = cfg_.C;
    double lo = 0.0;
    double hi = 0.0;
    if (y1 != y2) {
      lo = std::max(0.0, a2 - a1);
      hi = std::min(C, C + a2 - a1);
    } else {
      lo = std::max(0.0, a1 + a2 - C);
      hi = std::min(C, a1 + a2);
    }
    if (hi - lo <= 0.0) return false;

    const auto row1 = kernel_.row(i1);
    const auto row2 = kernel_.row(i2);
    const double k12 = (*row1)[i2];
    const double eta = 2.0 - 2.0 * k12;  // K11 = K22 = 1 for RBF

    double a2_new = 0.0;
    if (eta > cfg_.value_eps) {
      a2_new = std::clamp(a2 + y2 * (e1 - e2) / eta, lo, hi);
    } else {
      // Flat curvature: the objective is linear along the constraint line,
      // so move to whichever end increases it.
      const double slope = y2 * (e1 - e2);
      if (slope > 0.0) {
        a2_new = hi;
      } else if (slope < 0.0) {
        a2_new = lo;
      } else {
        return false;
      }
    }
    a2_new = snap(a2_new);
    if (std::abs(a2_new - a2) <= cfg_.value_eps) return false;
    const double a1_new = snap(a1 + s * (a2 - a2_new));

    const double d1 = (a1_new - a1) * y1;
    const double d2 = (a2_new - a2) * y2;
    const auto& r1 = *row1;
    const auto& r2 = *row2;
    for (std::size_t k = 0; k < n_; ++k) f_[k] += d1 * r1[k] + d2 * r2[k];
    alpha_[i1] = a1_new;
    alpha_[i2] = a2_new;
    return true;
  }

  // Seeded shuffled scan for any violating pair that can still move.
  bool fallback_scan() {
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), std::size_t{0});
    seeded_shuffle(std::span<std::size_t>(order), rng_);
    for (std::size_t i : order) {
      if (!in_low(i)) continue;
      for (std::size_t j : order) {
        if (j == i || !in_up(j)) continue;
        if (f_[i] - f_[j] <= cfg_.kkt_tol) continue;
        if (take_step(i, j)) return true;
      }
    }
    return false;
  }

  std::size_t n_;
  std::span<const int> y_;
  SmoConfig cfg_;
  KernelRows kernel_;
  std::vector<double> alpha_;
  std::vector<double> f_;  // F_i = sum_j alpha_j y_j K_ij - y_i
  Xorshift64Star rng_;
};

}  // namespace

DualSolution solve_dual(const FeatureMatrix& x, std::span<const int> signs, const KernelParams& k,
                        const SmoConfig& cfg) {
  cfg.validate();
  k.validate();
  if (signs.size() != x.rows()) throw ShapeError("label count does not match the number of rows");
  if (x.empty()) throw DegenerateLabels("no training examples");
  bool pos = false;
  bool neg = false;
  for (int s : signs) {
    if (s == 1) {
      pos = true;
    } else if (s == -1) {
      neg = true;
    } else {
      throw InvalidArgument("labels must be +1 or -1");
    }
  }
  if (!pos || !neg) throw DegenerateLabels("training data contains a single class");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (double v : x.row(i)) {
      if (!std::isfinite(v)) throw NumericsError("non-finite feature value in training row " + std::to_string(i));
    }
  }
  SmoSolver solver(x, signs, k, cfg);
  return solver.solve();
}

// ---------------------------------------------------------------------------
// Model

SvmModel train_smo(const FeatureMatrix& x, std::span<const Label> labels, const KernelParams& k,
                   const SmoConfig& cfg, Provenance provenance) {
  if (labels.size() != x.rows()) throw ShapeError("label count does not match the number of rows");
  if (x.empty()) throw DegenerateLabels("no training examples");
  std::vector<int> signs(labels.size());
  std::transform(labels.begin(), labels.end(), signs.begin(), label_sign);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (double v : x.row(i)) {
      if (!std::isfinite(v)) throw NumericsError("non-finite feature value in training row " + std::to_string(i));
    }
  }

  SvmModel model;
  model.standardizer = fit_standardizer(x);
  const FeatureMatrix z = model.standardizer.apply(x);
  const DualSolution sol = solve_dual(z, signs, k, cfg);

  model.kernel = k;
  model.C = cfg.C;
  model.bias = sol.bias;
  model.converged = sol.converged;
  model.expected_provenance = std::move(provenance);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (sol.alpha[i] == 0.0) continue;
    auto r = z.row(i);
    model.support_vectors.emplace_back(r.begin(), r.end());
    model.dual_coeffs.push_back(sol.alpha[i] * signs[i]);
  }
  return model;
}

SvmModel train_smo_default_gamma(const FeatureMatrix& x, std::span<const Label> labels, const SmoConfig& cfg,
                                 Provenance provenance) {
  const KernelParams k = default_gamma(fit_standardizer(x).apply(x));
  return train_smo(x, labels, k, cfg, std::move(provenance));
}

double decision_value(const SvmModel& model, std::span<const double> x) {
  const std::vector<double> z = model.standardizer.apply(x);
  double f = 0.0;
  for (std::size_t i = 0; i < model.support_vectors.size(); ++i) {
    f += model.dual_coeffs[i] * rbf(model.support_vectors[i], z, model.kernel);
  }
  return f + model.bias;
}

double decision_value(const SvmModel& model, std::span<const float> x) {
  std::vector<double> wide(x.begin(), x.end());
  return decision_value(model, std::span<const double>(wide));
}

Label predict_label(double decision) { return label_from_sign(decision); }

Label predict(const SvmModel& model, std::span<const double> x) { return predict_label(decision_value(model, x)); }

Label predict(const SvmModel& model, std::span<const float> x) { return predict_label(decision_value(model, x)); }

void check_provenance(const SvmModel& model, const Provenance& provenance) {
  if (provenance != model.expected_provenance) {
    throw ModelMismatch("feature provenance " + provenance_to_string(provenance) + " does not match the model's " +
                        provenance_to_string(model.expected_provenance));
  }
}

}  // namespace aescomp
