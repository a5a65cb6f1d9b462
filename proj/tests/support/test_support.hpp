#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aescomp/dataset.hpp"
#include "aescomp/image.hpp"
#include "aescomp/log.hpp"

namespace aescomp::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Collects warn() messages for the lifetime of the object.
class CapturedWarnings {
 public:
  CapturedWarnings() : previous_(set_warning_sink([this](const std::string& m) { messages_.push_back(m); })) {}
  ~CapturedWarnings() { set_warning_sink(previous_); }
  CapturedWarnings(const CapturedWarnings&) = delete;
  CapturedWarnings& operator=(const CapturedWarnings&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }

 private:
  std::vector<std::string> messages_;
  WarningSink previous_;
};

/// tests/data in the source tree.
std::filesystem::path data_dir();

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

RawImage random_image(int width, int height, std::mt19937_64& rng);

/// Signed random projection recomputed from scratch: its own xorshift64*,
/// one draw per matrix entry in row-major order, top bit set means -1.
std::vector<float> stub_reference(std::uint64_t seed, std::size_t dim, std::span<const float> tensor);

using Matrix = std::vector<std::vector<double>>;

Matrix rbf_matrix(const Matrix& x, double gamma);
double dual_objective_reference(const Matrix& kernel, std::span<const int> y, std::span<const double> alpha);

struct PgaResult {
  std::vector<double> alpha;
  double objective = 0.0;
  double bias = 0.0;
  std::size_t iterations = 0;
};

/// Projected gradient ascent on the soft-margin dual. Each step moves along
/// the gradient by `step` and projects exactly onto {0 <= a <= C, y.a = 0}.
/// Stops after `max_iterations` or once no coordinate moves by more than 1e-15*C.
PgaResult pga_dual_oracle(const Matrix& kernel, std::span<const int> y, double C, double step = 1e-3,
                          std::size_t max_iterations = 1'000'000);

/// Euclidean projection onto the box-and-hyperplane set, by locating the
/// multiplier among the piecewise-linear breakpoints.
std::vector<double> project_dual_feasible(std::span<const double> v, std::span<const int> y, double C);

/// sum_j a_j y_j K(x_j, z) + b computed by direct summation.
double decision_reference(const Matrix& train, std::span<const int> y, std::span<const double> alpha, double bias,
                          double gamma, std::span<const double> z);

/// Two-view parity corpus. Each 32x32 image has a centre block whose
/// brightness carries bit g and a one-pixel checkerboard border whose phase
/// carries bit s; the label is g XOR s. Images come in pairs that share g
/// and noise and differ only in s. Halving the image averages every 2x2
/// block, so both checker phases look identical to a 16-pixel global view
/// and a 0.62 centre crop never reaches the border. Only a full-resolution
/// scene view sees s.
struct ParityCorpus {
  static constexpr int kSide = 32;
  static constexpr int kBorder = 6;
  DatasetManifest manifest;
};

/// Writes 4 * pairs_per_split PNGs and a manifest with the first half of
/// the pairs in Train and the rest in Test.
ParityCorpus make_parity_corpus(const std::filesystem::path& dir, std::size_t pairs_per_split, std::uint64_t seed);
RawImage parity_image(bool g, bool s, std::mt19937_64& noise_rng);

/// Noisy 16x16 images whose mean brightness depends on the label: High
/// images are lighter on average, with enough per-image offset and pixel
/// noise that the classes overlap a little. All samples are unassigned.
DatasetManifest make_brightness_corpus(const std::filesystem::path& dir, std::size_t per_class, std::uint64_t seed);

}  // namespace aescomp::testing
