#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "cfcbm/concept_hierarchy.hpp"

using namespace cfcbm;

namespace {

ConceptEmbeddings unit_concepts(std::size_t H, std::size_t L_all, std::size_t K = 3) {
  ConceptEmbeddings c{Matrix(H, K), Matrix(L_all, K)};
  for (std::size_t h = 0; h < H; ++h) c.high(h, 0) = 1.0;
  for (std::size_t l = 0; l < L_all; ++l) c.low(l, 1) = 1.0;
  return c;
}

}  // namespace

TEST(BuildGeneral, TwoConceptsThreeAttributes) {
  const auto h = build_general({"bird", "fish"}, {{"a", "b", "c"}, {"d", "e", "f"}});
  EXPECT_EQ(h.n_high(), 2u);
  EXPECT_EQ(h.n_low(), 6u);
  EXPECT_EQ(h.per_concept_arity, 3u);
  EXPECT_EQ(h.layout, Layout::kGeneral);
  for (std::size_t l = 0; l < 6; ++l) {
    EXPECT_EQ(h.membership(l, 0), l < 3 ? 1 : 0);
    EXPECT_EQ(h.membership(l, 1), l < 3 ? 0 : 1);
  }
  EXPECT_NO_THROW(validate(h, unit_concepts(2, 6)));
}

TEST(BuildGeneral, SingleConceptOwnsEverything) {
  const auto h = build_general({"only"}, {{"x", "y"}});
  EXPECT_EQ(h.membership.data, (std::vector<std::uint8_t>{1, 1}));
}

TEST(BuildGeneral, RaggedListsAreArityErrors) {
  EXPECT_THROW(build_general({"a", "b"}, {{"x", "y"}, {"z"}}), ArityError);
  EXPECT_THROW(build_general({"a", "b"}, {{"x"}}), ArityError);
  EXPECT_THROW(build_general({"a"}, {{}}), ArityError);
  EXPECT_THROW(build_general({}, {}), ValidationError);
}

TEST(BuildShared, OverlappingAttributes) {
  const auto h = build_shared({"a", "b"}, {"p", "q", "r"}, {{0, {0, 1}}, {1, {1, 2}}});
  EXPECT_EQ(h.layout, Layout::kShared);
  EXPECT_EQ(h.membership(1, 0), 1);
  EXPECT_EQ(h.membership(1, 1), 1);
  EXPECT_EQ(h.membership(2, 0), 0);
  EXPECT_EQ(h.attributes_by_concept(),
            (std::vector<std::vector<std::size_t>>{{0, 1}, {1, 2}}));
  EXPECT_NO_THROW(validate(h, unit_concepts(2, 3)));
}

TEST(BuildShared, UncoveredConceptIsCoverageError) {
  EXPECT_THROW(build_shared({"a", "b"}, {"p"}, {{0, {0}}}), CoverageError);
  EXPECT_THROW(build_shared({"a", "b"}, {"p"}, {{0, {0}}, {1, {}}}), CoverageError);
}

TEST(BuildShared, IndicesOutOfRange) {
  EXPECT_THROW(build_shared({"a"}, {"p"}, {{0, {1}}}), IndexError);
  EXPECT_THROW(build_shared({"a"}, {"p"}, {{0, {0}}, {3, {0}}}), IndexError);
}

TEST(Validate, ShapeMismatches) {
  const auto h = build_general({"a", "b"}, {{"x"}, {"y"}});
  EXPECT_THROW(validate(h, unit_concepts(3, 2)), ValidationError);
  EXPECT_THROW(validate(h, unit_concepts(2, 3)), ValidationError);
}

TEST(Validate, BrokenGeneralBlocks) {
  auto h = build_general({"a", "b"}, {{"x", "y"}, {"z", "w"}});
  h.membership(1, 0) = 0;
  h.membership(1, 1) = 1;
  EXPECT_THROW(validate(h, unit_concepts(2, 4)), ValidationError);
}

TEST(Validate, NonBinaryAndEmptyColumns) {
  auto h = build_shared({"a", "b"}, {"p", "q"}, {{0, {0}}, {1, {1}}});
  auto bad = h;
  bad.membership(0, 0) = 2;
  EXPECT_THROW(validate(bad, unit_concepts(2, 2)), ValidationError);
  bad = h;
  bad.membership(1, 1) = 0;
  EXPECT_THROW(validate(bad, unit_concepts(2, 2)), ValidationError);
}

TEST(Manifest, RoundTripBothLayouts) {
  const auto general = build_general({"a", "b"}, {{"x", "y"}, {"z", "w"}});
  EXPECT_EQ(manifest_from_json(manifest_to_json(general)), general);
  const auto shared = build_shared({"a", "b", "c"}, {"p", "q", "r", "s"},
                                   {{0, {0, 3}}, {1, {1, 3}}, {2, {2}}});
  EXPECT_EQ(manifest_from_json(manifest_to_json(shared)), shared);

  const auto path = std::filesystem::path(::testing::TempDir()) / "cfcbm_manifest.json";
  save_manifest(path, shared);
  EXPECT_EQ(load_manifest(path), shared);
}

TEST(Manifest, RejectsMalformedInput) {
  auto j = manifest_to_json(build_general({"a", "b"}, {{"x"}, {"y"}}));
  auto bad = j;
  bad["layout"] = "tree";
  EXPECT_THROW(manifest_from_json(bad), ValidationError);
  bad = j;
  bad.erase("membership");
  EXPECT_THROW(manifest_from_json(bad), ValidationError);
  bad = j;
  bad["membership"] = nlohmann::json::array({{1}, {0}});
  EXPECT_THROW(manifest_from_json(bad), ValidationError);
  bad = j;
  bad["membership"] = nlohmann::json::array({{0}});
  EXPECT_THROW(manifest_from_json(bad), ValidationError);
  EXPECT_THROW(load_manifest("/nonexistent/manifest.json"), IoError);
}

TEST(Membership, ForwardAndInverseAgree) {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t H = 1 + rng() % 5;
    const std::size_t L_all = 1 + rng() % 8;
    std::map<std::size_t, std::set<std::size_t>> owned;
    for (std::size_t h = 0; h < H; ++h) {
      owned[h].insert(rng() % L_all);
      for (std::size_t l = 0; l < L_all; ++l) {
        if (rng() % 3 == 0) owned[h].insert(l);
      }
    }
    std::vector<std::string> high(H, "h"), low(L_all, "l");
    const auto hier = build_shared(high, low, owned);
    const auto inverse = hier.attributes_by_concept();
    for (std::size_t h = 0; h < H; ++h) {
      EXPECT_EQ(std::set<std::size_t>(inverse[h].begin(), inverse[h].end()), owned[h]);
      for (std::size_t l = 0; l < L_all; ++l) {
        EXPECT_EQ(hier.membership(l, h) == 1, owned[h].count(l) == 1);
      }
    }
  }
}
