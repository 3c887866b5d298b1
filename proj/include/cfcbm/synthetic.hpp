#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfcbm/concept_hierarchy.hpp"
#include "cfcbm/embedding_store.hpp"
#include "cfcbm/error.hpp"
#include "cfcbm/noise.hpp"
#include "cfcbm/numerics.hpp"

namespace cfcbm {

/// Planted dataset: one high-level concept per class, L attributes per concept.
/// Images embed near their class concept; each patch embeds near one attribute of the class.
struct SyntheticSpec {
  std::size_t n_examples = 2000;
  std::size_t n_classes = 10;
  std::size_t embed_dim = 32;
  std::size_t attributes_per_class = 4;
  std::size_t n_patches = 4;
  double image_noise = 0.5;
  double patch_noise = 0.5;
  double attribute_spread = 0.3;  // attribute = class concept + spread * random direction
  bool orthogonal_high = true;  // Gram-Schmidt the class concepts (needs n_classes <= embed_dim)
  std::uint64_t concept_seed = 0;  // concept embeddings; share it between train and test splits
  std::uint64_t sample_seed = 1;   // labels, patch attributes and noise
};

struct SyntheticData {
  EmbeddingBundle bundle;
  ConceptHierarchy hierarchy;
};

namespace detail {

enum class SyntheticSection : std::uint64_t {
  kConcepts = 1,
  kLabels = 2,
  kImageNoise = 3,
  kPatchAttribute = 4,
  kPatchNoise = 5,
};

inline CounterStream synthetic_stream(std::uint64_t seed, SyntheticSection section) {
  return CounterStream(seed, {static_cast<std::uint64_t>(StreamId::kSynthetic),
                              static_cast<std::uint64_t>(section)});
}

inline std::vector<double> noisy_unit(std::span<const double> center, const CounterStream& noise,
                                      std::uint64_t offset, double scale) {
  const double per_dim = scale / std::sqrt(static_cast<double>(center.size()));
  std::vector<double> v(center.begin(), center.end());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] += per_dim * noise.normal(offset + k);
  return l2_normalize(v);
}

}  // namespace detail

inline ConceptHierarchy synthetic_hierarchy(std::size_t n_classes, std::size_t attributes_per_class) {
  std::vector<std::string> high;
  std::vector<std::vector<std::string>> low(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    high.push_back("concept_" + std::to_string(c));
    for (std::size_t j = 0; j < attributes_per_class; ++j) {
      low[c].push_back("concept_" + std::to_string(c) + "_attr_" + std::to_string(j));
    }
  }
  return build_general(std::move(high), low);
}

inline ConceptEmbeddings synthetic_concepts(const SyntheticSpec& spec) {
  const auto H = spec.n_classes;
  const auto L = spec.attributes_per_class;
  const auto L_all = H * L;
  const auto K = spec.embed_dim;
  const auto rng = detail::synthetic_stream(spec.concept_seed, detail::SyntheticSection::kConcepts);
  // rows 0..H-1: class concepts, then one random direction per attribute
  Matrix raw(H + L_all, K);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = rng.normal(i);
  if (spec.orthogonal_high && H <= K) {
    for (std::size_t h = 0; h < H; ++h) {
      auto row = raw.row(h);
      for (std::size_t g = 0; g < h; ++g) {
        const auto prev = raw.row(g);
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) dot += row[k] * prev[k];
        for (std::size_t k = 0; k < K; ++k) row[k] -= dot * prev[k];
      }
      const auto unit = l2_normalize(row);
      std::copy(unit.begin(), unit.end(), row.begin());
    }
  }
  l2_normalize_rows(raw);

  ConceptEmbeddings out{Matrix(H, K), Matrix(L_all, K)};
  std::copy_n(raw.values().begin(), H * K, out.high.values().begin());
  for (std::size_t l = 0; l < L_all; ++l) {
    const auto owner = raw.row(l / L);
    const auto direction = raw.row(H + l);
    auto row = out.low.row(l);
    for (std::size_t k = 0; k < K; ++k) row[k] = owner[k] + spec.attribute_spread * direction[k];
  }
  l2_normalize_rows(out.low);
  return out;
}

inline SyntheticData make_synthetic(const SyntheticSpec& spec) {
  if (spec.n_examples == 0 || spec.n_classes == 0 || spec.embed_dim == 0 ||
      spec.attributes_per_class == 0) {
    throw ParameterError("synthetic spec dimensions must be positive");
  }
  if (!is_perfect_square(spec.n_patches) || spec.n_patches == 0) {
    throw ParameterError("synthetic patch count must be a perfect square, got " +
                         std::to_string(spec.n_patches));
  }
  const auto N = spec.n_examples;
  const auto C = spec.n_classes;
  const auto K = spec.embed_dim;
  const auto L = spec.attributes_per_class;
  const auto P = spec.n_patches;
  const auto L_all = C * L;

  SyntheticData out;
  out.hierarchy = synthetic_hierarchy(C, L);
  out.bundle.concepts = synthetic_concepts(spec);
  auto& d = out.bundle.dataset;
  d.n_examples = N;
  d.embed_dim = K;
  d.n_patches = P;
  d.n_classes = C;
  d.image_embeddings = Matrix(N, K);
  d.patch_embeddings = Matrix(N * P, K);
  d.labels.resize(N);
  d.example_attributes = BinaryMatrix(N, L_all);
  d.class_attributes = BinaryMatrix(C, L_all);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t j = 0; j < L; ++j) (*d.class_attributes)(c, c * L + j) = 1;
  }

  using detail::SyntheticSection;
  const auto labels = detail::synthetic_stream(spec.sample_seed, SyntheticSection::kLabels);
  const auto image_noise = detail::synthetic_stream(spec.sample_seed, SyntheticSection::kImageNoise);
  const auto attr_pick = detail::synthetic_stream(spec.sample_seed, SyntheticSection::kPatchAttribute);
  const auto patch_noise = detail::synthetic_stream(spec.sample_seed, SyntheticSection::kPatchNoise);

  for (std::size_t n = 0; n < N; ++n) {
    const auto c = static_cast<std::uint32_t>(labels.below(n, C));
    d.labels[n] = c;
    const auto img = detail::noisy_unit(out.bundle.concepts.high.row(c), image_noise, n * K,
                                        spec.image_noise);
    std::copy(img.begin(), img.end(), d.image_embeddings.row(n).begin());
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t r = n * P + p;
      const std::size_t attr = c * L + attr_pick.below(r, L);
      (*d.example_attributes)(n, attr) = 1;
      const auto patch = detail::noisy_unit(out.bundle.concepts.low.row(attr), patch_noise, r * K,
                                            spec.patch_noise);
      std::copy(patch.begin(), patch.end(), d.patch_embeddings.row(r).begin());
    }
  }
  return out;
}

}  // namespace cfcbm
