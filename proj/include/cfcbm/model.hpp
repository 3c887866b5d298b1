#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cfcbm/concept_hierarchy.hpp"
#include "cfcbm/discovery.hpp"
#include "cfcbm/embedding_store.hpp"
#include "cfcbm/error.hpp"
#include "cfcbm/noise.hpp"
#include "cfcbm/numerics.hpp"

namespace cfcbm {

/// Which heads are trained and which indicators are learned.
enum class Mode {
  kJoint,        // both levels, low-level indicators masked by the high level
  kHighOnly,     // whole-image head only
  kLowOnly,      // patch head only, no masking
  kNoDiscovery,  // all indicators fixed to 1, plain linear heads
};

inline std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kJoint: return "joint";
    case Mode::kHighOnly: return "high-only";
    case Mode::kLowOnly: return "low-only";
    case Mode::kNoDiscovery: return "no-discovery";
  }
  return "joint";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "joint") return Mode::kJoint;
  if (s == "high-only") return Mode::kHighOnly;
  if (s == "low-only") return Mode::kLowOnly;
  if (s == "no-discovery") return Mode::kNoDiscovery;
  throw ParameterError("unknown mode '" + s + "'");
}

inline bool trains_high(Mode m) noexcept { return m != Mode::kLowOnly; }
inline bool trains_low(Mode m) noexcept { return m != Mode::kHighOnly; }

struct ModelParams {
  Matrix w_hc;  // H x C
  Matrix w_lc;  // L_all x C
  Matrix w_hs;  // K x H
  Matrix w_ls;  // K x L_all

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Classifiers ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); amortization starts at zero (all probs 0.5).
inline ModelParams init_params(std::size_t embed_dim, std::size_t n_high, std::size_t n_low,
                               std::size_t n_classes, std::uint64_t seed) {
  auto uniform_init = [&](std::size_t fan_in, StreamId id) {
    const CounterStream stream(seed, {static_cast<std::uint64_t>(id)});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix w(fan_in, n_classes);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = bound * (2.0 * stream.uniform(i) - 1.0);
    return w;
  };
  return ModelParams{uniform_init(n_high, StreamId::kInitHighClassifier),
                     uniform_init(n_low, StreamId::kInitLowClassifier),
                     Matrix(embed_dim, n_high), Matrix(embed_dim, n_low)};
}

/// Embeddings, similarities and labels for a set of examples.
struct ExampleBlock {
  std::size_t n_patches = 0;
  std::size_t n_classes = 0;
  Matrix images;   // N x K
  Matrix patches;  // (N*P) x K
  Matrix s_high;   // N x H
  Matrix s_low;    // (N*P) x L_all
  std::vector<std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

inline ExampleBlock prepare_examples(const EmbeddingBundle& bundle) {
  const auto& d = bundle.dataset;
  return ExampleBlock{d.n_patches,
                      d.n_classes,
                      d.image_embeddings,
                      d.patch_embeddings,
                      similarity_high(d, bundle.concepts),
                      similarity_low(d, bundle.concepts),
                      d.labels};
}

/// Rows `indices` of `all`, in that order.
inline ExampleBlock gather(const ExampleBlock& all, std::span<const std::size_t> indices) {
  const std::size_t P = all.n_patches;
  ExampleBlock out;
  out.n_patches = P;
  out.n_classes = all.n_classes;
  out.images = Matrix(indices.size(), all.images.cols());
  out.patches = Matrix(indices.size() * P, all.patches.cols());
  out.s_high = Matrix(indices.size(), all.s_high.cols());
  out.s_low = Matrix(indices.size() * P, all.s_low.cols());
  out.labels.reserve(indices.size());
  auto copy_row = [](const Matrix& src, std::size_t from, Matrix& dst, std::size_t to) {
    const auto s = src.row(from);
    std::copy(s.begin(), s.end(), dst.row(to).begin());
  };
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto n = indices[i];
    copy_row(all.images, n, out.images, i);
    copy_row(all.s_high, n, out.s_high, i);
    for (std::size_t p = 0; p < P; ++p) {
      copy_row(all.patches, n * P + p, out.patches, i * P + p);
      copy_row(all.s_low, n * P + p, out.s_low, i * P + p);
    }
    out.labels.push_back(all.labels[n]);
  }
  return out;
}

/// Owner lists derived from B, used by the linkage.
struct Linkage {
  std::size_t n_high = 0;
  std::vector<std::vector<std::uint32_t>> owners;  // per attribute l: h with B[l,h] = 1

  explicit Linkage(const ConceptHierarchy& hierarchy) : n_high(hierarchy.n_high()) {
    const auto& B = hierarchy.membership;
    owners.resize(B.rows);
    for (std::size_t l = 0; l < B.rows; ++l) {
      for (std::size_t h = 0; h < B.cols; ++h) {
        if (B(l, h)) owners[l].push_back(static_cast<std::uint32_t>(h));
      }
    }
  }

  std::size_t n_low() const noexcept { return owners.size(); }

  /// Unclamped sum_h z_h[n,h] B[l,h], shape N x L_all.
  Matrix gate_sums(const Matrix& z_high) const {
    if (z_high.cols() != n_high) {
      throw DimensionError("link: high indicators " + z_high.shape() + " but hierarchy has " +
                           std::to_string(n_high) + " concepts");
    }
    Matrix sums(z_high.rows(), n_low());
    for (std::size_t n = 0; n < z_high.rows(); ++n) {
      for (std::size_t l = 0; l < n_low(); ++l) {
        double acc = 0.0;
        for (auto h : owners[l]) acc += z_high(n, h);
        sums(n, l) = acc;
      }
    }
    return sums;
  }
};

inline Matrix clamp_gate(Matrix sums) {
  for (auto& v : sums.values()) v = std::clamp(v, 0.0, 1.0);
  return sums;
}

/// logits = (z_h * s_h) W_hc
inline Matrix forward_high(const Matrix& s_high, const Matrix& z_high, const Matrix& w_hc) {
  require_same_shape(s_high, z_high, "forward_high");
  return matmul(hadamard(z_high, s_high), w_hc);
}

/// z[n,p,l] = min(1, sum_h z_h[n,h] B[l,h]) * z_l[n,p,l]; rows of z_low are n*P + p.
inline Matrix link_indicators(const Matrix& z_high, const Matrix& z_low, const Linkage& linkage,
                              std::size_t n_patches) {
  if (z_low.rows() != z_high.rows() * n_patches || z_low.cols() != linkage.n_low()) {
    throw DimensionError("link_indicators: low indicators " + z_low.shape() +
                         " incompatible with high indicators " + z_high.shape() + " and P=" +
                         std::to_string(n_patches));
  }
  const Matrix gate = clamp_gate(linkage.gate_sums(z_high));
  Matrix z = z_low;
  for (std::size_t n = 0; n < z_high.rows(); ++n) {
    const auto g = gate.row(n);
    for (std::size_t p = 0; p < n_patches; ++p) {
      auto row = z.row(n * n_patches + p);
      for (std::size_t l = 0; l < row.size(); ++l) row[l] *= g[l];
    }
  }
  return z;
}

inline Matrix link_indicators(const Matrix& z_high, const Matrix& z_low,
                              const ConceptHierarchy& hierarchy, std::size_t n_patches) {
  return link_indicators(z_high, z_low, Linkage(hierarchy), n_patches);
}

struct LowLogits {
  Matrix logits;                            // N x C
  std::vector<std::uint32_t> argmax_patch;  // N x C, row-major
};

/// Per-patch logits (z * s_l) W_lc, reduced by a per-class max over patches (first index wins).
inline LowLogits forward_low(const Matrix& s_low, const Matrix& z, const Matrix& w_lc,
                             std::size_t n_patches) {
  require_same_shape(s_low, z, "forward_low");
  if (n_patches == 0 || s_low.rows() % n_patches != 0) {
    throw DimensionError("forward_low: " + std::to_string(s_low.rows()) +
                         " patch rows not divisible by P=" + std::to_string(n_patches));
  }
  const Matrix per_patch = matmul(hadamard(z, s_low), w_lc);
  const std::size_t N = s_low.rows() / n_patches;
  const std::size_t C = w_lc.cols();
  LowLogits out{Matrix(N, C), std::vector<std::uint32_t>(N * C, 0)};
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double best = per_patch(n * n_patches, c);
      std::uint32_t best_p = 0;
      for (std::size_t p = 1; p < n_patches; ++p) {
        const double v = per_patch(n * n_patches + p, c);
        if (v > best) {
          best = v;
          best_p = static_cast<std::uint32_t>(p);
        }
      }
      out.logits(n, c) = best;
      out.argmax_patch[n * C + c] = best_p;
    }
  }
  return out;
}

/// Relaxed Binary Concrete gates driven by caller-supplied uniforms (training).
struct RelaxedGates {
  double temperature = 0.1;
  Matrix uniforms_high;  // N x H
  Matrix uniforms_low;   // (N*P) x L_all
};

/// Posterior means thresholded at tau (inference).
struct ThresholdedGates {
  double tau = 0.05;
};

using GateRule = std::variant<RelaxedGates, ThresholdedGates>;

/// Hard indicators from posterior means, with the masking the mode applies.
struct HardIndicators {
  Matrix z_high;  // N x H
  Matrix z;       // (N*P) x L_all, linked
};

inline HardIndicators threshold_indicators(const BernoulliPosterior& q_high,
                                           const BernoulliPosterior& q_low,
                                           const Linkage& linkage, Mode mode, double tau,
                                           std::size_t n_patches) {
  HardIndicators out;
  if (mode == Mode::kNoDiscovery) {
    out.z_high = Matrix(q_high.probs.rows(), q_high.probs.cols(), 1.0);
    out.z = Matrix(q_low.probs.rows(), q_low.probs.cols(), 1.0);
    return out;
  }
  const Matrix z_low = threshold_mean(q_low, tau).values;
  if (mode == Mode::kLowOnly) {
    out.z_high = Matrix(q_high.probs.rows(), q_high.probs.cols(), 1.0);
    out.z = z_low;
  } else {
    out.z_high = threshold_mean(q_high, tau).values;
    out.z = link_indicators(out.z_high, z_low, linkage, n_patches);
  }
  return out;
}

struct ForwardTrace {
  Mode mode = Mode::kJoint;
  std::size_t n_patches = 0;
  BernoulliPosterior q_high;  // N x H
  BernoulliPosterior q_low;   // (N*P) x L_all
  Matrix z_high;
  Matrix z_low;
  Matrix gate_sums;  // N x L_all, before clamping
  Matrix z;          // linked indicators fed to the low head
  Matrix logits_high;
  LowLogits low;
  bool relaxed = false;
  double temperature = 0.0;
};

inline ForwardTrace forward(const ExampleBlock& batch, const ModelParams& params,
                            const Linkage& linkage, Mode mode, const GateRule& rule) {
  ForwardTrace t;
  t.mode = mode;
  t.n_patches = batch.n_patches;
  const std::size_t N = batch.size();
  t.q_high = posterior_probs(batch.images, params.w_hs);
  t.q_low = posterior_probs(batch.patches, params.w_ls);

  if (mode == Mode::kNoDiscovery) {
    t.z_high = Matrix(N, params.w_hs.cols(), 1.0);
    t.z_low = Matrix(batch.patches.rows(), params.w_ls.cols(), 1.0);
  } else if (const auto* relaxed = std::get_if<RelaxedGates>(&rule)) {
    t.relaxed = true;
    t.temperature = relaxed->temperature;
    t.z_high = sample_relaxed(t.q_high, relaxed->temperature, relaxed->uniforms_high).values;
    t.z_low = sample_relaxed(t.q_low, relaxed->temperature, relaxed->uniforms_low).values;
  } else {
    const double tau = std::get<ThresholdedGates>(rule).tau;
    t.z_high = threshold_mean(t.q_high, tau).values;
    t.z_low = threshold_mean(t.q_low, tau).values;
  }
  // Standalone patch head: no high-level masking.
  if (mode == Mode::kLowOnly) t.z_high = Matrix(N, params.w_hs.cols(), 1.0);

  t.gate_sums = linkage.gate_sums(t.z_high);
  t.z = link_indicators(t.z_high, t.z_low, linkage, batch.n_patches);
  t.logits_high = forward_high(batch.s_high, t.z_high, params.w_hc);
  t.low = forward_low(batch.s_low, t.z, params.w_lc, batch.n_patches);
  return t;
}

struct LossConfig {
  double alpha_high = 1e-4;
  double alpha_low = 1e-4;
  double beta = 1e-4;
  Mode mode = Mode::kJoint;
};

struct LossBreakdown {
  double ce_high = 0.0;
  double ce_low = 0.0;
  double kl_high = 0.0;
  double kl_low = 0.0;
  double total = 0.0;
};

/// Batch-mean cross-entropy of both heads plus beta-weighted KL of the posteriors to their priors.
/// Terms of a head the mode does not train are zero.
inline LossBreakdown compute_loss(const ForwardTrace& trace, std::span<const std::uint32_t> labels,
                                  const LossConfig& config) {
  const std::size_t N = labels.size();
  if (trace.logits_high.rows() != N) {
    throw DimensionError("compute_loss: " + std::to_string(N) + " labels for " +
                         std::to_string(trace.logits_high.rows()) + " examples");
  }
  LossBreakdown out;
  const bool discovery = config.mode != Mode::kNoDiscovery;
  const double inv_n = 1.0 / static_cast<double>(N);
  if (trains_high(config.mode)) {
    for (std::size_t n = 0; n < N; ++n) {
      out.ce_high += softmax_cross_entropy(trace.logits_high.row(n), labels[n]).loss;
    }
    out.ce_high *= inv_n;
    if (discovery) {
      for (double k : kl_to_prior(trace.q_high, config.alpha_high)) out.kl_high += k;
      out.kl_high *= inv_n;
    }
  }
  if (trains_low(config.mode)) {
    for (std::size_t n = 0; n < N; ++n) {
      out.ce_low += softmax_cross_entropy(trace.low.logits.row(n), labels[n]).loss;
    }
    out.ce_low *= inv_n;
    if (discovery) {
      for (double k : kl_to_prior(trace.q_low, config.alpha_low)) out.kl_low += k;
      out.kl_low *= inv_n;
    }
  }
  out.total = out.ce_high + out.ce_low + config.beta * (out.kl_high + out.kl_low);
  return out;
}

struct Gradients {
  Matrix w_hc;
  Matrix w_lc;
  Matrix w_hs;
  Matrix w_ls;
};

/// Exact gradients of compute_loss through the relaxed samples, the linkage mask and the
/// patch max (routed to the arg-max patch of each class).
inline Gradients backward(const ForwardTrace& trace, const ExampleBlock& batch,
                          const ModelParams& params, const Linkage& linkage,
                          const LossConfig& config) {
  const std::size_t N = batch.size();
  const std::size_t P = batch.n_patches;
  const std::size_t C = params.w_hc.cols();
  const std::size_t H = params.w_hc.rows();
  const std::size_t L = params.w_lc.rows();
  const double inv_n = 1.0 / static_cast<double>(N);
  const bool discovery = config.mode != Mode::kNoDiscovery;

  Gradients g{Matrix(H, C), Matrix(L, C), Matrix(params.w_hs.rows(), H),
              Matrix(params.w_ls.rows(), L)};
  Matrix dz_high(N, H);
  Matrix dz_low(N * P, L);

  if (trains_high(config.mode)) {
    Matrix d_logits(N, C);
    for (std::size_t n = 0; n < N; ++n) {
      const auto ce = softmax_cross_entropy(trace.logits_high.row(n), batch.labels[n]);
      for (std::size_t c = 0; c < C; ++c) d_logits(n, c) = ce.grad[c] * inv_n;
    }
    const Matrix masked = hadamard(trace.z_high, batch.s_high);
    g.w_hc = matmul_transpose_a(masked, d_logits);
    const Matrix d_masked = matmul_transpose_b(d_logits, params.w_hc);
    dz_high = hadamard(d_masked, batch.s_high);
  }

  if (trains_low(config.mode)) {
    Matrix d_patch_logits(N * P, C);
    for (std::size_t n = 0; n < N; ++n) {
      const auto ce = softmax_cross_entropy(trace.low.logits.row(n), batch.labels[n]);
      for (std::size_t c = 0; c < C; ++c) {
        d_patch_logits(n * P + trace.low.argmax_patch[n * C + c], c) = ce.grad[c] * inv_n;
      }
    }
    const Matrix masked = hadamard(trace.z, batch.s_low);
    g.w_lc = matmul_transpose_a(masked, d_patch_logits);
    const Matrix dz = hadamard(matmul_transpose_b(d_patch_logits, params.w_lc), batch.s_low);

    if (config.mode == Mode::kLowOnly) {
      dz_low = dz;
    } else if (discovery) {
      // z = min(1, gate_sum) * z_low, gate shared by all patches of an example.
      Matrix d_gate_sum(N, L);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t l = 0; l < L; ++l) {
          const double sum = trace.gate_sums(n, l);
          const double gate = std::clamp(sum, 0.0, 1.0);
          double acc = 0.0;
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t r = n * P + p;
            dz_low(r, l) = dz(r, l) * gate;
            acc += dz(r, l) * trace.z_low(r, l);
          }
          d_gate_sum(n, l) = sum <= 1.0 ? acc : 0.0;
        }
      }
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t l = 0; l < L; ++l) {
          for (auto h : linkage.owners[l]) dz_high(n, h) += d_gate_sum(n, l);
        }
      }
    }
  }

  if (!discovery) return g;

  // Pre-activation a = E W; q = clamp(sigmoid(a)); z = sigmoid((logit q + noise) / t).
  auto amortization_grad = [&](const Matrix& dz_in, const BernoulliPosterior& q, const Matrix& z,
                               double alpha) {
    Matrix da(dz_in.rows(), dz_in.cols());
    const double kl_scale = config.beta * inv_n;
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double qi = q.probs[i];
      if (probability_is_clamped(qi)) continue;
      double d = 0.0;
      if (trace.relaxed) d += dz_in[i] * z[i] * (1.0 - z[i]) / trace.temperature;
      d += kl_scale * bernoulli_kl_derivative(qi, alpha) * qi * (1.0 - qi);
      da[i] = d;
    }
    return da;
  };

  if (trains_high(config.mode)) {
    const Matrix da = amortization_grad(dz_high, trace.q_high, trace.z_high, config.alpha_high);
    g.w_hs = matmul_transpose_a(batch.images, da);
  }
  if (trains_low(config.mode)) {
    const Matrix da = amortization_grad(dz_low, trace.q_low, trace.z_low, config.alpha_low);
    g.w_ls = matmul_transpose_a(batch.patches, da);
  }
  return g;
}

}  // namespace cfcbm
