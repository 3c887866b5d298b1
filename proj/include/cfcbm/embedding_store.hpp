#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfcbm/error.hpp"
#include "cfcbm/numerics.hpp"

namespace cfcbm {

/// Row-major matrix of {0,1} bytes (ground-truth attribute indicators).
struct BinaryMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  BinaryMatrix() = default;
  BinaryMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const std::uint8_t> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const BinaryMatrix&, const BinaryMatrix&) = default;
};

struct EmbeddingDataset {
  std::size_t n_examples = 0;
  std::size_t embed_dim = 0;
  std::size_t n_patches = 0;
  std::size_t n_classes = 0;
  Matrix image_embeddings;  // N x K
  Matrix patch_embeddings;  // (N*P) x K, row n*P + p
  std::vector<std::uint32_t> labels;
  std::optional<BinaryMatrix> example_attributes;  // N x L_all
  std::optional<BinaryMatrix> class_attributes;    // C x L_all
};

struct ConceptEmbeddings {
  Matrix high;  // H x K
  Matrix low;   // L_all x K
};

/// Everything stored in one CFEB file.
struct EmbeddingBundle {
  EmbeddingDataset dataset;
  ConceptEmbeddings concepts;
};

inline constexpr std::array<char, 4> kCfebMagic = {'C', 'F', 'E', 'B'};
inline constexpr std::uint32_t kCfebVersion = 1;
inline constexpr std::uint32_t kFlagExampleAttributes = 1u << 0;
inline constexpr std::uint32_t kFlagClassAttributes = 1u << 1;

struct CfebHeader {
  std::uint32_t version = kCfebVersion;
  std::uint32_t flags = 0;
  std::uint64_t n = 0;
  std::uint64_t p = 0;
  std::uint64_t k = 0;
  std::uint64_t c = 0;
  std::uint64_t h = 0;
  std::uint64_t l_all = 0;
};

inline constexpr std::size_t kCfebHeaderBytes = 4 + 4 + 4 + 6 * 8;

inline bool is_perfect_square(std::uint64_t v) noexcept {
  auto r = static_cast<std::uint64_t>(std::llround(std::sqrt(static_cast<double>(v))));
  while (r * r > v) --r;
  while ((r + 1) * (r + 1) <= v) ++r;
  return r * r == v;
}

/// Unit-norm copy of `v`.
inline std::vector<double> l2_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > 1e-12)) throw DegenerateInputError("l2_normalize: vector norm is ~0");
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= norm;
  return out;
}

inline void l2_normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const auto unit = l2_normalize(row);
    std::copy(unit.begin(), unit.end(), row.begin());
  }
}

/// S_H[n,h] = <image n, high concept h>.
inline Matrix similarity_high(const EmbeddingDataset& dataset, const ConceptEmbeddings& concepts) {
  if (dataset.image_embeddings.cols() != concepts.high.cols()) {
    throw DimensionError("similarity_high: image dim " + dataset.image_embeddings.shape() +
                         " vs concept dim " + concepts.high.shape());
  }
  return matmul_transpose_b(dataset.image_embeddings, concepts.high);
}

/// S_L as an (N*P) x L_all matrix; row n*P + p holds patch p of example n.
inline Matrix similarity_low(const EmbeddingDataset& dataset, const ConceptEmbeddings& concepts) {
  if (dataset.patch_embeddings.cols() != concepts.low.cols()) {
    throw DimensionError("similarity_low: patch dim " + dataset.patch_embeddings.shape() +
                         " vs attribute dim " + concepts.low.shape());
  }
  return matmul_transpose_b(dataset.patch_embeddings, concepts.low);
}

namespace detail {

template <typename T>
void put_le(std::vector<char>& out, T value) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
}

class ByteReader {
 public:
  ByteReader(std::span<const char> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  template <typename T>
  T get() {
    if (bytes_.size() - pos_ < sizeof(T)) {
      throw FormatError(context_ + ": truncated file (need " + std::to_string(sizeof(T)) +
                        " bytes at offset " + std::to_string(pos_) + ")");
    }
    std::array<char, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw.data(), sizeof(T));
    return value;
  }

  std::string get_bytes(std::size_t count) {
    if (bytes_.size() - pos_ < count) {
      throw FormatError(context_ + ": truncated file at offset " + std::to_string(pos_));
    }
    std::string s(bytes_.data() + pos_, count);
    pos_ += count;
    return s;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::span<const char> bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, const std::string& context) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    throw FormatError(context + ": header dimensions overflow");
  }
  return a * b;
}

inline Matrix read_f32_rows(ByteReader& in, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(in.get<float>());
  return m;
}

// Rows within 1e-5 of unit norm are kept bit-exact; rows within 1e-2 are renormalized.
inline void enforce_unit_rows(Matrix& m, const char* section) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double sq = 0.0;
    for (double x : row) sq += x * x;
    const double deviation = std::abs(std::sqrt(sq) - 1.0);
    if (!std::isfinite(deviation) || deviation >= 1e-2) {
      throw CorruptDataError(std::string("CFEB ") + section + " row " + std::to_string(r) +
                             " has norm deviating from 1 by " + std::to_string(deviation));
    }
    if (deviation > 1e-5) {
      const auto unit = l2_normalize(row);
      std::copy(unit.begin(), unit.end(), row.begin());
    }
  }
}

inline BinaryMatrix read_binary_rows(ByteReader& in, std::size_t rows, std::size_t cols,
                                     const char* section) {
  BinaryMatrix m(rows, cols);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const auto v = in.get<std::uint8_t>();
    if (v > 1) {
      throw CorruptDataError(std::string("CFEB ") + section + " entry " + std::to_string(i) +
                             " is " + std::to_string(v) + ", expected 0 or 1");
    }
    m.data[i] = v;
  }
  return m;
}

inline CfebHeader parse_header(ByteReader& in, const std::string& context) {
  const std::string magic = in.get_bytes(4);
  if (magic != std::string(kCfebMagic.begin(), kCfebMagic.end())) {
    throw FormatError(context + ": bad magic '" + magic + "', expected 'CFEB'");
  }
  CfebHeader h;
  h.version = in.get<std::uint32_t>();
  if (h.version != kCfebVersion) {
    throw FormatError(context + ": unsupported version " + std::to_string(h.version));
  }
  h.flags = in.get<std::uint32_t>();
  if ((h.flags & ~(kFlagExampleAttributes | kFlagClassAttributes)) != 0) {
    throw FormatError(context + ": unknown flag bits " + std::to_string(h.flags));
  }
  h.n = in.get<std::uint64_t>();
  h.p = in.get<std::uint64_t>();
  h.k = in.get<std::uint64_t>();
  h.c = in.get<std::uint64_t>();
  h.h = in.get<std::uint64_t>();
  h.l_all = in.get<std::uint64_t>();
  return h;
}

inline std::uint64_t expected_payload_bytes(const CfebHeader& h, const std::string& context) {
  std::uint64_t total = checked_mul(h.n, 4, context);
  total += checked_mul(checked_mul(h.n, h.k, context), 4, context);
  total += checked_mul(checked_mul(checked_mul(h.n, h.p, context), h.k, context), 4, context);
  total += checked_mul(checked_mul(h.h, h.k, context), 4, context);
  total += checked_mul(checked_mul(h.l_all, h.k, context), 4, context);
  if (h.flags & kFlagExampleAttributes) total += checked_mul(h.n, h.l_all, context);
  if (h.flags & kFlagClassAttributes) total += checked_mul(h.c, h.l_all, context);
  return total;
}

}  // namespace detail

/// Reads only the fixed-size header of a CFEB file.
inline CfebHeader read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes(kCfebHeaderBytes);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  bytes.resize(static_cast<std::size_t>(in.gcount()));
  detail::ByteReader reader(bytes, path.string());
  return detail::parse_header(reader, path.string());
}

inline std::vector<char> encode_dataset(const EmbeddingBundle& bundle) {
  const auto& d = bundle.dataset;
  const auto& c = bundle.concepts;
  if (d.image_embeddings.rows() != d.n_examples || d.image_embeddings.cols() != d.embed_dim ||
      d.patch_embeddings.rows() != d.n_examples * d.n_patches ||
      d.patch_embeddings.cols() != d.embed_dim || d.labels.size() != d.n_examples ||
      c.high.cols() != d.embed_dim || c.low.cols() != d.embed_dim) {
    throw DimensionError("encode_dataset: inconsistent dataset shapes");
  }
  const std::size_t l_all = c.low.rows();
  std::uint32_t flags = 0;
  if (d.example_attributes) {
    if (d.example_attributes->rows != d.n_examples || d.example_attributes->cols != l_all) {
      throw DimensionError("encode_dataset: example-wise ground truth must be N x L_all");
    }
    flags |= kFlagExampleAttributes;
  }
  if (d.class_attributes) {
    if (d.class_attributes->rows != d.n_classes || d.class_attributes->cols != l_all) {
      throw DimensionError("encode_dataset: class-wise ground truth must be C x L_all");
    }
    flags |= kFlagClassAttributes;
  }

  std::vector<char> out;
  out.insert(out.end(), kCfebMagic.begin(), kCfebMagic.end());
  detail::put_le<std::uint32_t>(out, kCfebVersion);
  detail::put_le<std::uint32_t>(out, flags);
  for (std::uint64_t v : {std::uint64_t{d.n_examples}, std::uint64_t{d.n_patches},
                          std::uint64_t{d.embed_dim}, std::uint64_t{d.n_classes},
                          std::uint64_t{c.high.rows()}, std::uint64_t{l_all}}) {
    detail::put_le<std::uint64_t>(out, v);
  }
  for (auto label : d.labels) detail::put_le<std::uint32_t>(out, label);
  for (const Matrix* m : {&d.image_embeddings, &d.patch_embeddings, &c.high, &c.low}) {
    for (double v : m->values()) detail::put_le<float>(out, static_cast<float>(v));
  }
  if (d.example_attributes) {
    for (auto v : d.example_attributes->data) detail::put_le<std::uint8_t>(out, v);
  }
  if (d.class_attributes) {
    for (auto v : d.class_attributes->data) detail::put_le<std::uint8_t>(out, v);
  }
  return out;
}

inline EmbeddingBundle decode_dataset(std::span<const char> bytes, const std::string& context) {
  detail::ByteReader in(bytes, context);
  const CfebHeader h = detail::parse_header(in, context);
  const auto expected = detail::expected_payload_bytes(h, context);
  if (in.remaining() != expected) {
    throw FormatError(context + ": payload is " + std::to_string(in.remaining()) +
                      " bytes, header implies " + std::to_string(expected));
  }
  if (h.c == 0 || h.p == 0 || h.k == 0 || h.h == 0 || h.l_all == 0) {
    throw CorruptDataError(context + ": zero-sized dimension in header");
  }
  if (!is_perfect_square(h.p)) {
    throw CorruptDataError(context + ": patch count " + std::to_string(h.p) +
                           " is not a perfect square");
  }

  EmbeddingBundle bundle;
  auto& d = bundle.dataset;
  d.n_examples = h.n;
  d.n_patches = h.p;
  d.embed_dim = h.k;
  d.n_classes = h.c;
  d.labels.resize(h.n);
  for (std::size_t i = 0; i < h.n; ++i) {
    d.labels[i] = in.get<std::uint32_t>();
    if (d.labels[i] >= h.c) {
      throw CorruptDataError(context + ": label " + std::to_string(d.labels[i]) + " of example " +
                             std::to_string(i) + " exceeds class count " + std::to_string(h.c));
    }
  }
  d.image_embeddings = detail::read_f32_rows(in, h.n, h.k);
  d.patch_embeddings = detail::read_f32_rows(in, h.n * h.p, h.k);
  bundle.concepts.high = detail::read_f32_rows(in, h.h, h.k);
  bundle.concepts.low = detail::read_f32_rows(in, h.l_all, h.k);
  if (h.flags & kFlagExampleAttributes) {
    d.example_attributes = detail::read_binary_rows(in, h.n, h.l_all, "example-wise ground truth");
  }
  if (h.flags & kFlagClassAttributes) {
    d.class_attributes = detail::read_binary_rows(in, h.c, h.l_all, "class-wise ground truth");
  }
  detail::enforce_unit_rows(d.image_embeddings, "image embedding");
  detail::enforce_unit_rows(d.patch_embeddings, "patch embedding");
  detail::enforce_unit_rows(bundle.concepts.high, "high concept embedding");
  detail::enforce_unit_rows(bundle.concepts.low, "low concept embedding");
  return bundle;
}

inline void write_dataset(const std::filesystem::path& path, const EmbeddingBundle& bundle) {
  detail::write_file(path, encode_dataset(bundle));
}

inline EmbeddingBundle load_dataset(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_dataset(bytes, path.string());
}

}  // namespace cfcbm
