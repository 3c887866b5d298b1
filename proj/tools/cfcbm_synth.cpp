#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfcbm/cfcbm.hpp"

namespace fs = std::filesystem;

// Writes train_P{P}.cfeb, test_P{P}.cfeb and manifest.json for each requested patch count.
int main(int argc, char** argv) {
  CLI::App app{"Planted synthetic datasets in CFEB format"};
  cfcbm::SyntheticSpec spec;
  std::string out;
  std::vector<std::size_t> patches{4};
  std::size_t test_examples = 1000;
  std::uint64_t seed = 0;
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--examples", spec.n_examples, "Training examples")->capture_default_str();
  app.add_option("--test-examples", test_examples, "Held-out examples")->capture_default_str();
  app.add_option("--classes", spec.n_classes, "Classes (one high-level concept each)")
      ->capture_default_str();
  app.add_option("--dim", spec.embed_dim, "Embedding dimension")->capture_default_str();
  app.add_option("--attributes", spec.attributes_per_class, "Attributes per concept")
      ->capture_default_str();
  app.add_option("--patches", patches, "Patch counts (perfect squares)")->delimiter(',');
  app.add_option("--image-noise", spec.image_noise)->capture_default_str();
  app.add_option("--patch-noise", spec.patch_noise)->capture_default_str();
  app.add_option("--spread", spec.attribute_spread, "Attribute spread around its concept")
      ->capture_default_str();
  app.add_option("--seed", seed, "Base seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    fs::create_directories(out);
    spec.concept_seed = seed;
    for (auto P : patches) {
      spec.n_patches = P;
      auto train_spec = spec;
      train_spec.sample_seed = 2 * seed + 1;
      auto test_spec = spec;
      test_spec.sample_seed = 2 * seed + 2;
      test_spec.n_examples = test_examples;
      const auto train = cfcbm::make_synthetic(train_spec);
      const auto test = cfcbm::make_synthetic(test_spec);
      const auto tag = "_P" + std::to_string(P) + ".cfeb";
      cfcbm::write_dataset(fs::path(out) / ("train" + tag), train.bundle);
      cfcbm::write_dataset(fs::path(out) / ("test" + tag), test.bundle);
      cfcbm::save_manifest(fs::path(out) / "manifest.json", train.hierarchy);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
