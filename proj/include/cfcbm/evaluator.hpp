#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfcbm/concept_hierarchy.hpp"
#include "cfcbm/embedding_store.hpp"
#include "cfcbm/error.hpp"
#include "cfcbm/model.hpp"
#include "cfcbm/numerics.hpp"
#include "cfcbm/trainer.hpp"
#include "json.hpp"

namespace cfcbm {

// ---------------------------------------------------------------------------
// Inference

struct InferenceResult {
  std::vector<std::uint32_t> predictions_high;
  std::vector<std::uint32_t> predictions_low;
  Matrix z_high;  // N x H, binary
  Matrix z;       // (N*P) x L_all, binary, linked
  Matrix logits_high;
  Matrix logits_low;
};

/// Deterministic inference: posterior means thresholded at tau, no sampling.
inline InferenceResult infer(const ExampleBlock& data, const ModelParams& params,
                             const Linkage& linkage, Mode mode, double tau) {
  if (data.images.cols() != params.w_hs.rows() || data.s_high.cols() != params.w_hc.rows() ||
      data.s_low.cols() != params.w_lc.rows()) {
    throw DimensionError("infer: data shapes " + data.images.shape() + ", " +
                         data.s_high.shape() + ", " + data.s_low.shape() +
                         " do not match the model parameters");
  }
  const ForwardTrace t = forward(data, params, linkage, mode, ThresholdedGates{tau});
  InferenceResult out;
  out.z_high = t.z_high;
  out.z = t.z;
  out.logits_high = t.logits_high;
  out.logits_low = t.low.logits;
  for (std::size_t n = 0; n < data.size(); ++n) {
    out.predictions_high.push_back(static_cast<std::uint32_t>(argmax(t.logits_high.row(n))));
    out.predictions_low.push_back(static_cast<std::uint32_t>(argmax(t.low.logits.row(n))));
  }
  return out;
}

inline InferenceResult infer(const EmbeddingBundle& bundle, const ModelParams& params,
                             const ConceptHierarchy& hierarchy, double tau,
                             Mode mode = Mode::kJoint) {
  return infer(prepare_examples(bundle), params, Linkage(hierarchy), mode, tau);
}

// ---------------------------------------------------------------------------
// Binary-vector metrics

template <typename T>
concept IndicatorValue = std::integral<T> || std::floating_point<T>;

struct MatchCounts {
  std::size_t m11 = 0;
  std::size_t m10 = 0;  // 1 in prediction, 0 in ground truth
  std::size_t m01 = 0;  // 0 in prediction, 1 in ground truth
  std::size_t m00 = 0;
};

template <IndicatorValue A, IndicatorValue B>
MatchCounts count_matches(std::span<const A> z, std::span<const B> z_gt) {
  if (z.size() != z_gt.size()) {
    throw DimensionError("indicator vectors differ in length: " + std::to_string(z.size()) +
                         " vs " + std::to_string(z_gt.size()));
  }
  auto bit = [](auto v) {
    if (v == 0) return false;
    if (v == 1) return true;
    throw DomainError("indicator entry " + std::to_string(v) + " is not binary");
  };
  MatchCounts m;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const bool a = bit(z[i]);
    const bool b = bit(z_gt[i]);
    if (a && b) ++m.m11;
    else if (a) ++m.m10;
    else if (b) ++m.m01;
    else ++m.m00;
  }
  return m;
}

/// M11 / (M11 + M10 + M01); two all-zero vectors count as perfect agreement (1.0).
template <IndicatorValue A, IndicatorValue B>
double jaccard(std::span<const A> z, std::span<const B> z_gt) {
  const auto m = count_matches(z, z_gt);
  const std::size_t denom = m.m11 + m.m10 + m.m01;
  if (denom == 0) return 1.0;
  return static_cast<double>(m.m11) / static_cast<double>(denom);
}

template <IndicatorValue A, IndicatorValue B>
double matching_accuracy(std::span<const A> z, std::span<const B> z_gt) {
  const auto m = count_matches(z, z_gt);
  if (z.empty()) return 1.0;
  return static_cast<double>(m.m11 + m.m00) / static_cast<double>(z.size());
}

template <IndicatorValue A, IndicatorValue B>
double jaccard(const std::vector<A>& z, const std::vector<B>& z_gt) {
  return jaccard(std::span<const A>(z), std::span<const B>(z_gt));
}

template <IndicatorValue A, IndicatorValue B>
double matching_accuracy(const std::vector<A>& z, const std::vector<B>& z_gt) {
  return matching_accuracy(std::span<const A>(z), std::span<const B>(z_gt));
}

/// Per-example attribute indicator: active iff active in at least one patch.
inline BinaryMatrix example_indicator_for_matching(const Matrix& z, std::size_t n_patches) {
  if (n_patches == 0 || z.rows() % n_patches != 0) {
    throw DimensionError("example_indicator_for_matching: " + std::to_string(z.rows()) +
                         " rows not divisible by P=" + std::to_string(n_patches));
  }
  const std::size_t N = z.rows() / n_patches;
  BinaryMatrix out(N, z.cols());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < n_patches; ++p) {
      const auto row = z.row(n * n_patches + p);
      for (std::size_t l = 0; l < row.size(); ++l) {
        if (row[l] != 0.0) out(n, l) = 1;
      }
    }
  }
  return out;
}

inline BinaryMatrix to_binary(const Matrix& m) {
  BinaryMatrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = m[i] != 0.0 ? 1 : 0;
  return out;
}

struct ClassSummary {
  std::size_t n_classes = 0;
  std::size_t n_concepts = 0;
  std::vector<std::uint64_t> counts;       // C x M, active indicators summed per class
  std::vector<std::uint64_t> class_sizes;  // C
  BinaryMatrix class_active;               // C x M, active in more than 40% of the class

  std::uint64_t count(std::size_t c, std::size_t m) const { return counts[c * n_concepts + m]; }
};

inline ClassSummary class_concept_summary(const BinaryMatrix& indicators,
                                          std::span<const std::uint32_t> labels,
                                          std::size_t n_classes) {
  if (indicators.rows != labels.size()) {
    throw DimensionError("class_concept_summary: " + std::to_string(indicators.rows) +
                         " indicator rows for " + std::to_string(labels.size()) + " labels");
  }
  ClassSummary s;
  s.n_classes = n_classes;
  s.n_concepts = indicators.cols;
  s.counts.assign(n_classes * indicators.cols, 0);
  s.class_sizes.assign(n_classes, 0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto c = labels[n];
    if (c >= n_classes) throw IndexError("class_concept_summary: label out of range");
    ++s.class_sizes[c];
    for (std::size_t m = 0; m < indicators.cols; ++m) {
      s.counts[c * indicators.cols + m] += indicators(n, m);
    }
  }
  s.class_active = BinaryMatrix(n_classes, indicators.cols);
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t m = 0; m < indicators.cols; ++m) {
      // count / size > 0.4, in integers
      s.class_active(c, m) = 5 * s.count(c, m) > 2 * s.class_sizes[c] ? 1 : 0;
    }
  }
  return s;
}

inline constexpr double kBinWidth = 0.05;
inline constexpr std::size_t kBinCount = 40;

struct AlignmentBin {
  double lower = 0.0;
  double upper = 0.0;
  std::uint64_t count = 0;
  std::uint64_t active = 0;
  std::optional<double> active_fraction;  // absent for empty bins

  friend bool operator==(const AlignmentBin&, const AlignmentBin&) = default;
};

/// Edges as (b - 20) / 20 so decimal edges like 0.05 and 0.9 are the nearest doubles.
inline double bin_edge(std::size_t b) noexcept {
  constexpr double half = static_cast<double>(kBinCount / 2);
  return (static_cast<double>(b) - half) / half;
}

/// Bin b covers [edge(b), edge(b+1)); similarity 1.0 falls in the last bin.
inline std::size_t bin_index(double similarity) noexcept {
  if (!(similarity > -1.0)) return 0;
  auto b = static_cast<std::ptrdiff_t>(std::floor((similarity + 1.0) / kBinWidth));
  b = std::clamp<std::ptrdiff_t>(b, 0, kBinCount - 1);
  while (b > 0 && similarity < bin_edge(static_cast<std::size_t>(b))) --b;
  while (b + 1 < static_cast<std::ptrdiff_t>(kBinCount) &&
         similarity >= bin_edge(static_cast<std::size_t>(b + 1))) {
    ++b;
  }
  return static_cast<std::size_t>(b);
}

inline std::vector<AlignmentBin> alignment_bins(const Matrix& similarities,
                                                const Matrix& indicators) {
  require_same_shape(similarities, indicators, "alignment_bins");
  std::vector<AlignmentBin> bins(kBinCount);
  for (std::size_t b = 0; b < kBinCount; ++b) {
    bins[b].lower = bin_edge(b);
    bins[b].upper = bin_edge(b + 1);
  }
  for (std::size_t i = 0; i < similarities.size(); ++i) {
    auto& bin = bins[bin_index(similarities[i])];
    ++bin.count;
    if (indicators[i] != 0.0) ++bin.active;
  }
  for (auto& bin : bins) {
    if (bin.count > 0) {
      bin.active_fraction = static_cast<double>(bin.active) / static_cast<double>(bin.count);
    }
  }
  return bins;
}

/// Mean percentage of active entries per row (rows are examples, or example patches).
inline double sparsity(const Matrix& indicators) { return percent_active(indicators); }

// ---------------------------------------------------------------------------
// Full evaluation

struct CountTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint64_t> values;

  std::uint64_t operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct EvaluationReport {
  double accuracy_high = 0.0;
  double accuracy_low = 0.0;
  double sparsity_high = 0.0;
  double sparsity_low = 0.0;
  std::optional<double> jaccard_example;
  std::optional<double> jaccard_class;
  std::optional<double> matching_accuracy_example;
  std::optional<double> matching_accuracy_class;
  CountTable per_class_activation;       // C x L_all
  CountTable per_class_activation_high;  // C x H
  std::vector<AlignmentBin> alignment_bins_high;
  std::vector<AlignmentBin> alignment_bins_low;
};

inline double fraction_correct(std::span<const std::uint32_t> predictions,
                               std::span<const std::uint32_t> labels) {
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Mean of per-class Jaccard / matching accuracy over classes that have examples.
inline std::pair<double, double> class_wise_scores(const ClassSummary& summary,
                                                   const BinaryMatrix& class_truth) {
  double jac = 0.0, acc = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < summary.n_classes; ++c) {
    if (summary.class_sizes[c] == 0) continue;
    jac += jaccard(summary.class_active.row(c), class_truth.row(c));
    acc += matching_accuracy(summary.class_active.row(c), class_truth.row(c));
    ++used;
  }
  if (used == 0) return {0.0, 0.0};
  return {jac / static_cast<double>(used), acc / static_cast<double>(used)};
}

inline EvaluationReport evaluate(const EmbeddingBundle& bundle, const ModelParams& params,
                                 const ConceptHierarchy& hierarchy, Mode mode, double tau) {
  const auto& d = bundle.dataset;
  const ExampleBlock data = prepare_examples(bundle);
  const Linkage linkage(hierarchy);
  const InferenceResult r = infer(data, params, linkage, mode, tau);

  EvaluationReport rep;
  rep.accuracy_high = fraction_correct(r.predictions_high, d.labels);
  rep.accuracy_low = fraction_correct(r.predictions_low, d.labels);
  rep.sparsity_high = sparsity(r.z_high);
  rep.sparsity_low = sparsity(r.z);

  const BinaryMatrix per_example = example_indicator_for_matching(r.z, d.n_patches);
  if (d.example_attributes) {
    double jac = 0.0, acc = 0.0;
    for (std::size_t n = 0; n < d.n_examples; ++n) {
      jac += jaccard(per_example.row(n), d.example_attributes->row(n));
      acc += matching_accuracy(per_example.row(n), d.example_attributes->row(n));
    }
    const double denom = static_cast<double>(std::max<std::size_t>(1, d.n_examples));
    rep.jaccard_example = jac / denom;
    rep.matching_accuracy_example = acc / denom;
  }
  const ClassSummary low_summary = class_concept_summary(per_example, d.labels, d.n_classes);
  if (d.class_attributes) {
    const auto [jac, acc] = class_wise_scores(low_summary, *d.class_attributes);
    rep.jaccard_class = jac;
    rep.matching_accuracy_class = acc;
  }
  rep.per_class_activation = {low_summary.n_classes, low_summary.n_concepts, low_summary.counts};
  const ClassSummary high_summary = class_concept_summary(to_binary(r.z_high), d.labels, d.n_classes);
  rep.per_class_activation_high = {high_summary.n_classes, high_summary.n_concepts,
                                   high_summary.counts};
  rep.alignment_bins_high = alignment_bins(data.s_high, r.z_high);
  rep.alignment_bins_low = alignment_bins(data.s_low, r.z);
  return rep;
}

// ---------------------------------------------------------------------------
// Report emission

inline nlohmann::json bins_to_json(const std::vector<AlignmentBin>& bins) {
  auto arr = nlohmann::json::array();
  for (const auto& b : bins) {
    nlohmann::json j{{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}};
    if (b.active_fraction) j["active_fraction"] = *b.active_fraction;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline nlohmann::json table_to_json(const CountTable& t) {
  auto arr = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows; ++r) {
    arr.push_back(std::vector<std::uint64_t>(t.values.begin() + r * t.cols,
                                             t.values.begin() + (r + 1) * t.cols));
  }
  return arr;
}

/// Report fields as snake_case keys; optional metrics are omitted when absent.
inline nlohmann::json report_to_json(const EvaluationReport& r) {
  nlohmann::json j;
  j["accuracy_high"] = r.accuracy_high;
  j["accuracy_low"] = r.accuracy_low;
  j["sparsity_high"] = r.sparsity_high;
  j["sparsity_low"] = r.sparsity_low;
  if (r.jaccard_example) j["jaccard_example"] = *r.jaccard_example;
  if (r.jaccard_class) j["jaccard_class"] = *r.jaccard_class;
  if (r.matching_accuracy_example) j["matching_accuracy_example"] = *r.matching_accuracy_example;
  if (r.matching_accuracy_class) j["matching_accuracy_class"] = *r.matching_accuracy_class;
  j["per_class_activation"] = table_to_json(r.per_class_activation);
  j["alignment_bins"] = {{"high", bins_to_json(r.alignment_bins_high)},
                         {"low", bins_to_json(r.alignment_bins_low)}};
  return j;
}

/// Round-trip (%.17g) formatting used for every CSV float.
inline std::string format_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) {
  return v ? format_float(*v) : std::string();
}

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

inline void write_bins_csv(const std::filesystem::path& path, const std::vector<AlignmentBin>& bins) {
  auto out = open_output(path);
  out << "bin_lower,bin_upper,count,active_fraction\n";
  for (const auto& b : bins) {
    out << format_float(b.lower) << ',' << format_float(b.upper) << ',' << b.count << ','
        << format_optional(b.active_fraction) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_counts_csv(const std::filesystem::path& path, const CountTable& t,
                             const std::vector<std::string>& names) {
  auto out = open_output(path);
  out << "class";
  for (std::size_t c = 0; c < t.cols; ++c) {
    out << ',' << (c < names.size() ? names[c] : "concept_" + std::to_string(c));
  }
  out << '\n';
  for (std::size_t r = 0; r < t.rows; ++r) {
    out << r;
    for (std::size_t c = 0; c < t.cols; ++c) out << ',' << t(r, c);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

/// Alignment-bin and per-class activation plot data.
inline void emit_plot_data(const EvaluationReport& report, const std::filesystem::path& out_dir,
                           const ConceptHierarchy* hierarchy = nullptr) {
  std::filesystem::create_directories(out_dir);
  detail::write_bins_csv(out_dir / "alignment_bins_high.csv", report.alignment_bins_high);
  detail::write_bins_csv(out_dir / "alignment_bins_low.csv", report.alignment_bins_low);
  const std::vector<std::string> none;
  detail::write_counts_csv(out_dir / "per_class_activation.csv", report.per_class_activation,
                           hierarchy ? hierarchy->low_names : none);
  detail::write_counts_csv(out_dir / "per_class_activation_high.csv",
                           report.per_class_activation_high,
                           hierarchy ? hierarchy->high_names : none);
}

/// report.json (with the effective config echoed under "config"), metric tables and plot data.
inline void emit_report(const EvaluationReport& report, const std::filesystem::path& out_dir,
                        const nlohmann::json& config_echo = nullptr,
                        const ConceptHierarchy* hierarchy = nullptr) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  auto j = report_to_json(report);
  if (!config_echo.is_null()) j["config"] = config_echo;
  {
    auto out = detail::open_output(out_dir / "report.json");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + (out_dir / "report.json").string());
  }
  {
    auto out = detail::open_output(out_dir / "accuracy_sparsity.csv");
    out << "level,accuracy,sparsity\n";
    out << "high," << format_float(report.accuracy_high) << ','
        << format_float(report.sparsity_high) << '\n';
    out << "low," << format_float(report.accuracy_low) << ','
        << format_float(report.sparsity_low) << '\n';
  }
  if (report.jaccard_example || report.jaccard_class) {
    auto out = detail::open_output(out_dir / "attribute_matching.csv");
    out << "evaluation_set,matching_accuracy,jaccard\n";
    if (report.jaccard_class) {
      out << "class-wise," << format_optional(report.matching_accuracy_class) << ','
          << format_optional(report.jaccard_class) << '\n';
    }
    if (report.jaccard_example) {
      out << "example-wise," << format_optional(report.matching_accuracy_example) << ','
          << format_optional(report.jaccard_example) << '\n';
    }
  }
  emit_plot_data(report, out_dir, hierarchy);
}

}  // namespace cfcbm
