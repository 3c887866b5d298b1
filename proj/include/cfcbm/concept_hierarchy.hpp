#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cfcbm/embedding_store.hpp"
#include "cfcbm/error.hpp"
#include "json.hpp"

namespace cfcbm {

enum class Layout {
  kGeneral,  // every high concept owns its own block of L attributes
  kShared,   // attributes may belong to several high concepts
};

inline std::string to_string(Layout layout) {
  return layout == Layout::kGeneral ? "general" : "shared";
}

/// High-level concepts, the low-level attribute pool and the membership matrix B linking them.
struct ConceptHierarchy {
  std::vector<std::string> high_names;
  std::vector<std::string> low_names;
  BinaryMatrix membership;  // L_all x H, B[l,h] = 1 iff attribute l belongs to concept h
  Layout layout = Layout::kGeneral;
  std::size_t per_concept_arity = 0;  // L for the general layout, 0 otherwise

  std::size_t n_high() const noexcept { return high_names.size(); }
  std::size_t n_low() const noexcept { return low_names.size(); }

  /// Attribute indices owned by each high concept, read back from B.
  std::vector<std::vector<std::size_t>> attributes_by_concept() const {
    std::vector<std::vector<std::size_t>> out(membership.cols);
    for (std::size_t l = 0; l < membership.rows; ++l) {
      for (std::size_t h = 0; h < membership.cols; ++h) {
        if (membership(l, h)) out[h].push_back(l);
      }
    }
    return out;
  }

  friend bool operator==(const ConceptHierarchy&, const ConceptHierarchy&) = default;
};

inline ConceptHierarchy build_general(std::vector<std::string> high_names,
                                      const std::vector<std::vector<std::string>>& per_concept) {
  if (high_names.empty()) throw ValidationError("build_general: no high-level concepts");
  if (per_concept.size() != high_names.size()) {
    throw ArityError("build_general: " + std::to_string(high_names.size()) +
                     " high concepts but " + std::to_string(per_concept.size()) +
                     " attribute lists");
  }
  const std::size_t arity = per_concept.front().size();
  if (arity == 0) throw ArityError("build_general: attribute lists are empty");
  ConceptHierarchy out;
  out.layout = Layout::kGeneral;
  out.per_concept_arity = arity;
  for (std::size_t h = 0; h < per_concept.size(); ++h) {
    if (per_concept[h].size() != arity) {
      throw ArityError("build_general: concept " + std::to_string(h) + " has " +
                       std::to_string(per_concept[h].size()) + " attributes, expected " +
                       std::to_string(arity));
    }
    out.low_names.insert(out.low_names.end(), per_concept[h].begin(), per_concept[h].end());
  }
  out.high_names = std::move(high_names);
  out.membership = BinaryMatrix(out.low_names.size(), out.high_names.size());
  for (std::size_t l = 0; l < out.low_names.size(); ++l) out.membership(l, l / arity) = 1;
  return out;
}

inline ConceptHierarchy build_shared(std::vector<std::string> high_names,
                                     std::vector<std::string> low_names,
                                     const std::map<std::size_t, std::set<std::size_t>>& class_to_attrs) {
  ConceptHierarchy out;
  out.layout = Layout::kShared;
  out.membership = BinaryMatrix(low_names.size(), high_names.size());
  for (const auto& [h, attrs] : class_to_attrs) {
    if (h >= high_names.size()) {
      throw IndexError("build_shared: high concept index " + std::to_string(h) + " out of range");
    }
    for (auto l : attrs) {
      if (l >= low_names.size()) {
        throw IndexError("build_shared: attribute index " + std::to_string(l) + " out of range");
      }
      out.membership(l, h) = 1;
    }
  }
  for (std::size_t h = 0; h < high_names.size(); ++h) {
    auto it = class_to_attrs.find(h);
    if (it == class_to_attrs.end() || it->second.empty()) {
      throw CoverageError("build_shared: high concept " + std::to_string(h) +
                          " has no attributes");
    }
  }
  out.high_names = std::move(high_names);
  out.low_names = std::move(low_names);
  return out;
}

/// Checks the hierarchy invariants and agreement with the concept embedding shapes.
inline void validate(const ConceptHierarchy& hierarchy, const ConceptEmbeddings& concepts) {
  const auto H = hierarchy.n_high();
  const auto L_all = hierarchy.n_low();
  if (concepts.high.rows() != H) {
    throw ValidationError("hierarchy names " + std::to_string(H) +
                          " high concepts but embeddings hold " +
                          std::to_string(concepts.high.rows()) + " rows");
  }
  if (concepts.low.rows() != L_all) {
    throw ValidationError("hierarchy names " + std::to_string(L_all) +
                          " attributes but embeddings hold " + std::to_string(concepts.low.rows()) +
                          " rows");
  }
  const auto& B = hierarchy.membership;
  if (B.rows != L_all || B.cols != H || B.data.size() != L_all * H) {
    throw ValidationError("membership matrix must be " + Matrix::shape_string(L_all, H));
  }
  for (std::size_t h = 0; h < H; ++h) {
    bool any = false;
    for (std::size_t l = 0; l < L_all && !any; ++l) any = B(l, h) != 0;
    if (!any) throw ValidationError("high concept " + std::to_string(h) + " has no attributes");
  }
  for (auto v : B.data) {
    if (v > 1) throw ValidationError("membership matrix is not binary");
  }
  if (hierarchy.layout == Layout::kGeneral) {
    const auto L = hierarchy.per_concept_arity;
    if (L == 0 || L * H != L_all) {
      throw ValidationError("general layout requires L_all = H x L, got L_all=" +
                            std::to_string(L_all) + ", H=" + std::to_string(H) +
                            ", L=" + std::to_string(L));
    }
    for (std::size_t l = 0; l < L_all; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        if ((B(l, h) != 0) != (l / L == h)) {
          throw ValidationError("general layout membership is not block structured at (" +
                                std::to_string(l) + ", " + std::to_string(h) + ")");
        }
      }
    }
  }
}

inline nlohmann::json manifest_to_json(const ConceptHierarchy& hierarchy) {
  nlohmann::json j;
  j["high"] = hierarchy.high_names;
  j["low"] = hierarchy.low_names;
  j["layout"] = to_string(hierarchy.layout);
  j["membership"] = hierarchy.attributes_by_concept();
  return j;
}

inline ConceptHierarchy manifest_from_json(const nlohmann::json& j) {
  try {
    auto high = j.at("high").get<std::vector<std::string>>();
    auto low = j.at("low").get<std::vector<std::string>>();
    const auto layout = j.at("layout").get<std::string>();
    const auto membership = j.at("membership").get<std::vector<std::vector<std::size_t>>>();
    if (membership.size() != high.size()) {
      throw ValidationError("manifest: membership has " + std::to_string(membership.size()) +
                            " entries for " + std::to_string(high.size()) + " high concepts");
    }
    std::map<std::size_t, std::set<std::size_t>> class_to_attrs;
    for (std::size_t h = 0; h < membership.size(); ++h) {
      class_to_attrs[h] = std::set<std::size_t>(membership[h].begin(), membership[h].end());
    }
    if (layout == "shared") return build_shared(std::move(high), std::move(low), class_to_attrs);
    if (layout != "general") throw ValidationError("manifest: unknown layout '" + layout + "'");

    std::vector<std::vector<std::string>> per_concept(high.size());
    for (std::size_t h = 0; h < membership.size(); ++h) {
      for (std::size_t l : membership[h]) {
        if (l >= low.size()) throw IndexError("manifest: attribute index out of range");
        per_concept[h].push_back(low[l]);
      }
    }
    auto out = build_general(std::move(high), per_concept);
    // build_general assigns blocks in order; the manifest must describe exactly those blocks.
    if (out.low_names != low || out.attributes_by_concept() != membership) {
      throw ValidationError("manifest: general layout membership must list consecutive blocks");
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
}

inline ConceptHierarchy load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

inline void save_manifest(const std::filesystem::path& path, const ConceptHierarchy& hierarchy) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << manifest_to_json(hierarchy).dump(2) << '\n';
}

}  // namespace cfcbm
