// Builds AVA1 or AVA2 manifests from the AVA release list.
//
//   make_ava_manifest --ava-list AVA.txt --images images/ --subset ava2 --out ava2.csv

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_set>
#include <vector>

#include "aescomp/dataset.hpp"
#include "aescomp/error.hpp"
#include "aescomp/rng.hpp"

namespace {

constexpr std::size_t kAva2PerClass = 25'553;

std::unordered_set<std::string> read_ids(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw aescomp::IoError("cannot open " + path.string());
  std::unordered_set<std::string> ids;
  for (std::string id; in >> id;) ids.insert(id);
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Build an AVA1 or AVA2 manifest"};
  std::string ava_list, images, subset = "ava1", out, test_list;
  double delta = 0.0;
  std::uint64_t seed = 1;
  app.add_option("--ava-list", ava_list, "AVA.txt from the dataset release")->required();
  app.add_option("--images", images, "Directory holding <image_id>.jpg")->required();
  app.add_option("--subset", subset, "ava1 or ava2")->check(CLI::IsMember({"ava1", "ava2"}));
  app.add_option("--out", out, "Manifest CSV to write")->required();
  app.add_option("--delta", delta, "AVA1 margin around the score threshold")->check(CLI::NonNegativeNumber);
  app.add_option("--test-list", test_list, "AVA1 test image ids, one per line");
  app.add_option("--seed", seed, "AVA2 split seed");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto scored = aescomp::parse_ava_list(ava_list, images);
    aescomp::DatasetManifest m;
    if (subset == "ava1") {
      m = aescomp::build_thresholded_manifest(scored, delta, "AVA1");
      if (!test_list.empty()) {
        const auto test_ids = read_ids(test_list);
        for (auto& s : m.samples) {
          const bool test = test_ids.count(std::filesystem::path(s.image_path).stem().string()) > 0;
          s.split = test ? aescomp::Split::Test : aescomp::Split::Train;
        }
      }
    } else {
      // Half of the whole subset trains. Rounding each class separately
      // would give 25,554 training images, so the split is drawn jointly.
      m = aescomp::build_extremes_manifest(scored, kAva2PerClass, "AVA2");
      std::vector<std::size_t> order(m.samples.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      aescomp::Xorshift64Star rng(seed);
      aescomp::seeded_shuffle(std::span<std::size_t>(order), rng);
      for (std::size_t k = 0; k < order.size(); ++k) {
        m.samples[order[k]].split = k < order.size() / 2 ? aescomp::Split::Train : aescomp::Split::Test;
      }
    }
    aescomp::write_manifest(m, out);
    const auto st = aescomp::dataset_stats(m);
    std::cout << "high=" << st.high << " low=" << st.low << " train=" << st.train << " test=" << st.test << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
