#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cfcbm/error.hpp"
#include "cfcbm/numerics.hpp"

namespace cfcbm {

/// Posterior probabilities are kept inside [kProbFloor, 1 - kProbFloor] before any log.
inline constexpr double kProbFloor = 1e-7;

inline double clamp_probability(double p) noexcept {
  return std::clamp(p, kProbFloor, 1.0 - kProbFloor);
}

/// True where the clamp holds p, so derivatives through it vanish.
inline bool probability_is_clamped(double p) noexcept {
  return p <= kProbFloor || p >= 1.0 - kProbFloor;
}

struct BernoulliPosterior {
  Matrix probs;  // every entry strictly inside (0,1)
};

enum class SampleMode { kRelaxed, kHard };

struct IndicatorSample {
  Matrix values;
  SampleMode mode = SampleMode::kHard;
};

/// probs = sigmoid(embeddings * amortization), clamped away from {0,1}.
inline BernoulliPosterior posterior_probs(const Matrix& embeddings, const Matrix& amortization) {
  if (embeddings.cols() != amortization.rows()) {
    throw DimensionError("posterior_probs: embeddings " + embeddings.shape() +
                         " incompatible with amortization " + amortization.shape());
  }
  Matrix probs = matmul(embeddings, amortization);
  for (auto& v : probs.values()) v = clamp_probability(sigmoid(v));
  return {std::move(probs)};
}

inline double logit(double p) noexcept { return std::log(p) - std::log1p(-p); }

/// Binary Concrete draw: sigmoid((logit(prob) + log u - log(1-u)) / temperature).
inline double relaxed_sample(double prob, double uniform, double temperature) noexcept {
  const double q = clamp_probability(prob);
  const double noise = std::log(uniform) - std::log1p(-uniform);
  return sigmoid((logit(q) + noise) / temperature);
}

/// d relaxed_sample / d prob, given the sample it produced.
inline double relaxed_sample_derivative(double prob, double sample, double temperature) noexcept {
  if (probability_is_clamped(prob)) return 0.0;
  return sample * (1.0 - sample) / (temperature * prob * (1.0 - prob));
}

inline void require_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("relaxation temperature must be positive, got " +
                         std::to_string(temperature));
  }
}

inline IndicatorSample sample_relaxed(const BernoulliPosterior& posterior, double temperature,
                                      const Matrix& uniforms) {
  require_temperature(temperature);
  require_same_shape(posterior.probs, uniforms, "sample_relaxed");
  IndicatorSample out{Matrix(uniforms.rows(), uniforms.cols()), SampleMode::kRelaxed};
  for (std::size_t i = 0; i < uniforms.size(); ++i) {
    const double u = uniforms[i];
    if (!(u > 0.0 && u < 1.0)) {
      throw DomainError("sample_relaxed: uniform draw " + std::to_string(u) +
                        " outside (0,1)");
    }
    out.values[i] = relaxed_sample(posterior.probs[i], u, temperature);
  }
  return out;
}

/// 1 where prob > tau, else 0.
inline IndicatorSample threshold_mean(const BernoulliPosterior& posterior, double tau) {
  IndicatorSample out{Matrix(posterior.probs.rows(), posterior.probs.cols()), SampleMode::kHard};
  for (std::size_t i = 0; i < posterior.probs.size(); ++i) {
    out.values[i] = posterior.probs[i] > tau ? 1.0 : 0.0;
  }
  return out;
}

inline void require_prior(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ParameterError("prior probability must lie in (0,1), got " + std::to_string(alpha));
  }
}

/// KL(Bernoulli(q) || Bernoulli(alpha)).
inline double bernoulli_kl(double q, double alpha) noexcept {
  q = clamp_probability(q);
  return q * (std::log(q) - std::log(alpha)) +
         (1.0 - q) * (std::log1p(-q) - std::log1p(-alpha));
}

/// d KL / d q; zero where q is held by the clamp.
inline double bernoulli_kl_derivative(double q, double alpha) noexcept {
  if (probability_is_clamped(q)) return 0.0;
  return logit(q) - logit(alpha);
}

/// Per-row KL to the Bernoulli(alpha) prior, summed over the row's concepts.
inline std::vector<double> kl_to_prior(const BernoulliPosterior& posterior, double alpha) {
  require_prior(alpha);
  std::vector<double> out(posterior.probs.rows(), 0.0);
  for (std::size_t r = 0; r < posterior.probs.rows(); ++r) {
    for (double q : posterior.probs.row(r)) out[r] += bernoulli_kl(q, alpha);
  }
  return out;
}

}  // namespace cfcbm
