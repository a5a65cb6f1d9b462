#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace aescomp::testing {

TempDir::TempDir() {
  std::string tmpl = (std::filesystem::temp_directory_path() / "aescomp-test-XXXXXX").string();
  if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
  path_ = tmpl;
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::filesystem::path data_dir() { return AESCOMP_TEST_DATA_DIR; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out.flush()) throw std::runtime_error("cannot write " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

RawImage random_image(int width, int height, std::mt19937_64& rng) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height * 3);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& p : px) p = static_cast<std::uint8_t>(d(rng));
  return RawImage(width, height, std::move(px));
}

std::vector<float> stub_reference(std::uint64_t seed, std::size_t dim, std::span<const float> tensor) {
  std::uint64_t s = seed != 0 ? seed : 0x9E3779B97F4A7C15ull;
  auto draw = [&s] {
    s ^= s >> 12;
    s ^= s << 25;
    s ^= s >> 27;
    return s * 0x2545F4914F6CDD1Dull;
  };
  const std::size_t n = tensor.size();
  std::vector<float> out;
  for (std::size_t r = 0; r < dim; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const int sign = (draw() & (1ull << 63)) != 0 ? -1 : 1;
      acc += sign * static_cast<double>(tensor[c]);
    }
    out.push_back(static_cast<float>(acc / std::sqrt(static_cast<double>(n))));
  }
  return out;
}

Matrix rbf_matrix(const Matrix& x, double gamma) {
  Matrix k(x.size(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < x.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t t = 0; t < x[i].size(); ++t) d2 += (x[i][t] - x[j][t]) * (x[i][t] - x[j][t]);
      k[i][j] = std::exp(-gamma * d2);
    }
  }
  return k;
}

double dual_objective_reference(const Matrix& kernel, std::span<const int> y, std::span<const double> alpha) {
  double linear = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    linear += alpha[i];
    for (std::size_t j = 0; j < alpha.size(); ++j) quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel[i][j];
  }
  return linear - 0.5 * quad;
}

std::vector<double> project_dual_feasible(std::span<const double> v, std::span<const int> y, double C) {
  const std::size_t n = v.size();
  // a_i(lam) = clip(v_i - lam * y_i, 0, C); h(lam) = sum y_i a_i(lam) is
  // nonincreasing and piecewise linear with kinks where a_i hits 0 or C.
  auto a_at = [&](double lam, std::size_t i) { return std::clamp(v[i] - lam * y[i], 0.0, C); };
  auto h = [&](double lam) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += y[i] * a_at(lam, i);
    return s;
  };
  std::vector<double> knots;
  for (std::size_t i = 0; i < n; ++i) {
    knots.push_back(y[i] * v[i]);
    knots.push_back(y[i] * (v[i] - C));
  }
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());

  double lam = 0.0;
  if (h(knots.front()) <= 0.0) {
    lam = knots.front();
  } else if (h(knots.back()) >= 0.0) {
    lam = knots.back();
  } else {
    std::size_t lo = 0, hi = knots.size() - 1;  // h(lo) > 0 > h(hi)
    while (hi - lo > 1) {
      const std::size_t mid = (lo + hi) / 2;
      (h(knots[mid]) > 0.0 ? lo : hi) = mid;
    }
    const double h_lo = h(knots[lo]), h_hi = h(knots[hi]);
    lam = h_hi == 0.0 ? knots[hi] : knots[lo] + (knots[hi] - knots[lo]) * h_lo / (h_lo - h_hi);
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a_at(lam, i);
  return out;
}

PgaResult pga_dual_oracle(const Matrix& kernel, std::span<const int> y, double C, double step,
                          std::size_t max_iterations) {
  const std::size_t n = y.size();
  PgaResult r;
  r.alpha.assign(n, 0.0);
  std::vector<double> moved(n);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double qa = 0.0;
      for (std::size_t j = 0; j < n; ++j) qa += y[i] * y[j] * kernel[i][j] * r.alpha[j];
      moved[i] = r.alpha[i] + step * (1.0 - qa);
    }
    std::vector<double> next = project_dual_feasible(moved, y, C);
    r.iterations = it + 1;
    double change = 0.0;
    for (std::size_t i = 0; i < n; ++i) change = std::max(change, std::abs(next[i] - r.alpha[i]));
    r.alpha = std::move(next);
    if (change <= 1e-15 * C) break;  // settled up to last-bit oscillation
  }
  r.objective = dual_objective_reference(kernel, y, r.alpha);

  // Bias from margin vectors, else the middle of the feasible interval.
  double sum = 0.0, lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  std::size_t free_count = 0;
  const double eps = 1e-8 * C;
  for (std::size_t i = 0; i < n; ++i) {
    double f = 0.0;
    for (std::size_t j = 0; j < n; ++j) f += r.alpha[j] * y[j] * kernel[i][j];
    const double b_i = y[i] - f;
    if (r.alpha[i] > eps && r.alpha[i] < C - eps) {
      sum += b_i;
      ++free_count;
    } else if ((r.alpha[i] <= eps) == (y[i] > 0)) {
      lo = std::max(lo, b_i);  // needs y f >= 1
    } else {
      hi = std::min(hi, b_i);
    }
  }
  r.bias = free_count > 0 ? sum / static_cast<double>(free_count) : 0.5 * (lo + hi);
  return r;
}

double decision_reference(const Matrix& train, std::span<const int> y, std::span<const double> alpha, double bias,
                          double gamma, std::span<const double> z) {
  double f = bias;
  for (std::size_t i = 0; i < train.size(); ++i) {
    double d2 = 0.0;
    for (std::size_t t = 0; t < z.size(); ++t) d2 += (train[i][t] - z[t]) * (train[i][t] - z[t]);
    f += alpha[i] * y[i] * std::exp(-gamma * d2);
  }
  return f;
}

RawImage parity_image(bool g, bool s, std::mt19937_64& noise_rng) {
  constexpr int n = ParityCorpus::kSide;
  constexpr int b = ParityCorpus::kBorder;
  RawImage img = RawImage::filled(n, n, {0, 0, 0});
  std::uniform_int_distribution<int> noise(-20, 20);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const bool border = x < b || y < b || x >= n - b || y >= n - b;
      int base;
      if (border) {
        base = ((x + y) % 2 == 0) == s ? 200 : 56;
      } else {
        base = g ? 190 : 60;
      }
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(base + noise(noise_rng), 0, 255));
    }
  }
  return img;
}

ParityCorpus make_parity_corpus(const std::filesystem::path& dir, std::size_t pairs_per_split, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  ParityCorpus corpus;
  corpus.manifest.name = "parity";
  std::mt19937_64 rng(seed);
  const std::size_t pairs = 2 * pairs_per_split;
  for (std::size_t p = 0; p < pairs; ++p) {
    const bool g = p % 2 == 0;
    const std::uint64_t noise_seed = rng();
    for (bool s : {false, true}) {
      std::mt19937_64 noise_rng(noise_seed);
      const RawImage img = parity_image(g, s, noise_rng);
      const auto path = dir / ("p" + std::to_string(p) + (s ? "b" : "a") + ".png");
      save_png(img, path);
      Sample sample;
      sample.image_path = path.string();
      sample.label = (g != s) ? Label::High : Label::Low;
      sample.split = p < pairs_per_split ? Split::Train : Split::Test;
      corpus.manifest.samples.push_back(sample);
    }
  }
  return corpus;
}

DatasetManifest make_brightness_corpus(const std::filesystem::path& dir, std::size_t per_class, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.name = dir.filename().string();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> offset(0.0, 25.0);
  std::uniform_int_distribution<int> noise(-60, 60);
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const bool high = i % 2 == 0;
    const double base = (high ? 150.0 : 105.0) + offset(rng);
    RawImage img = RawImage::filled(16, 16, {0, 0, 0});
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(static_cast<int>(base) + noise(rng), 0, 255));
    const auto path = dir / ("b" + std::to_string(i) + ".png");
    save_png(img, path);
    Sample s;
    s.image_path = path.string();
    s.label = high ? Label::High : Label::Low;
    m.samples.push_back(s);
  }
  return m;
}

}  // namespace aescomp::testing
