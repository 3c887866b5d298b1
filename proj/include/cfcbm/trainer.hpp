#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cfcbm/concept_hierarchy.hpp"
#include "cfcbm/embedding_store.hpp"
#include "cfcbm/error.hpp"
#include "cfcbm/model.hpp"
#include "cfcbm/noise.hpp"
#include "cfcbm/numerics.hpp"
#include "json.hpp"

namespace cfcbm {

struct TrainConfig {
  double alpha_h = 1e-4;
  double alpha_l = 1e-4;
  double beta = 1e-4;
  double gumbel_temperature = 0.1;
  double lr = 1e-3;
  double amortization_lr_multiplier = 10.0;
  std::uint64_t epochs = 100;
  std::uint64_t batch_size = 256;
  std::uint64_t seed = 0;
  double infer_tau = 0.05;
  std::uint64_t patches = 0;  // 0: take P from the dataset
  Mode mode = Mode::kJoint;

  LossConfig loss() const { return LossConfig{alpha_h, alpha_l, beta, mode}; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate_config(const TrainConfig& c) {
  auto open_unit = [](double v, const char* name) {
    if (!(v > 0.0 && v < 1.0)) {
      throw ParameterError(std::string(name) + " must lie in (0,1), got " + std::to_string(v));
    }
  };
  open_unit(c.alpha_h, "alpha_h");
  open_unit(c.alpha_l, "alpha_l");
  open_unit(c.gumbel_temperature, "gumbel_temperature");
  if (!(c.beta >= 0.0) || !std::isfinite(c.beta)) throw ParameterError("beta must be >= 0");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ParameterError("lr must be > 0");
  if (!(c.amortization_lr_multiplier > 0.0)) {
    throw ParameterError("amortization_lr_multiplier must be > 0");
  }
  if (c.batch_size == 0) throw ParameterError("batch_size must be > 0");
  if (!(c.infer_tau >= 0.0 && c.infer_tau <= 1.0)) {
    throw ParameterError("infer_tau must lie in [0,1]");
  }
  if (c.patches != 0 && !is_perfect_square(c.patches)) {
    throw ParameterError("patches must be a perfect square, got " + std::to_string(c.patches));
  }
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"alpha_h", c.alpha_h},
                        {"alpha_l", c.alpha_l},
                        {"beta", c.beta},
                        {"gumbel_temperature", c.gumbel_temperature},
                        {"lr", c.lr},
                        {"amortization_lr_multiplier", c.amortization_lr_multiplier},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"seed", c.seed},
                        {"infer_tau", c.infer_tau},
                        {"patches", c.patches},
                        {"mode", to_string(c.mode)}};
}

/// Applies the keys present in `j` on top of `base`; unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ParameterError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "alpha_h") base.alpha_h = value.get<double>();
      else if (key == "alpha_l") base.alpha_l = value.get<double>();
      else if (key == "beta") base.beta = value.get<double>();
      else if (key == "gumbel_temperature") base.gumbel_temperature = value.get<double>();
      else if (key == "lr") base.lr = value.get<double>();
      else if (key == "amortization_lr_multiplier") base.amortization_lr_multiplier = value.get<double>();
      else if (key == "epochs") base.epochs = value.get<std::uint64_t>();
      else if (key == "batch_size") base.batch_size = value.get<std::uint64_t>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else if (key == "infer_tau") base.infer_tau = value.get<double>();
      else if (key == "patches") base.patches = value.get<std::uint64_t>();
      else if (key == "mode") base.mode = mode_from_string(value.get<std::string>());
      else throw ParameterError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError("config key '" + key + "': " + e.what());
    }
  }
  return base;
}

struct EpochRecord {
  std::uint64_t epoch = 0;
  LossBreakdown loss;
  double accuracy_high = 0.0;
  double accuracy_low = 0.0;
  double sparsity_high = 0.0;  // percent
  double sparsity_low = 0.0;   // percent
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

inline nlohmann::json history_to_json(const TrainHistory& history) {
  auto arr = nlohmann::json::array();
  for (const auto& e : history.epochs) {
    arr.push_back({{"epoch", e.epoch},
                   {"ce_high", e.loss.ce_high},
                   {"ce_low", e.loss.ce_low},
                   {"kl_high", e.loss.kl_high},
                   {"kl_low", e.loss.kl_low},
                   {"total", e.loss.total},
                   {"accuracy_high", e.accuracy_high},
                   {"accuracy_low", e.accuracy_low},
                   {"sparsity_high", e.sparsity_high},
                   {"sparsity_low", e.sparsity_low}});
  }
  return arr;
}

/// Everything needed to continue training bit-exactly.
struct TrainerState {
  TrainConfig config;
  ConceptHierarchy hierarchy;
  ModelParams params;
  AdamState adam_hc;
  AdamState adam_lc;
  AdamState adam_hs;
  AdamState adam_ls;
  std::uint64_t epochs_completed = 0;
};

inline TrainerState init_trainer(std::size_t embed_dim, std::size_t n_classes,
                                 const ConceptHierarchy& hierarchy, const TrainConfig& config) {
  validate_config(config);
  TrainerState s;
  s.config = config;
  s.hierarchy = hierarchy;
  const auto H = hierarchy.n_high();
  const auto L = hierarchy.n_low();
  s.params = init_params(embed_dim, H, L, n_classes, config.seed);
  const double amortization_lr = config.lr * config.amortization_lr_multiplier;
  s.adam_hc = AdamState::for_shape(H, n_classes, config.lr);
  s.adam_lc = AdamState::for_shape(L, n_classes, config.lr);
  s.adam_hs = AdamState::for_shape(embed_dim, H, amortization_lr);
  s.adam_ls = AdamState::for_shape(embed_dim, L, amortization_lr);
  return s;
}

inline void check_compatible(const EmbeddingBundle& bundle, const ConceptHierarchy& hierarchy,
                             const TrainConfig& config) {
  validate(hierarchy, bundle.concepts);
  if (config.patches != 0 && config.patches != bundle.dataset.n_patches) {
    throw ValidationError("config expects P=" + std::to_string(config.patches) +
                          " but dataset has P=" + std::to_string(bundle.dataset.n_patches));
  }
}

inline double percent_active(const Matrix& indicators) {
  if (indicators.empty()) return 0.0;
  double active = 0.0;
  for (double v : indicators.values()) active += v;
  return 100.0 * active / static_cast<double>(indicators.size());
}

/// Runs `n_epochs` more epochs on `data`, continuing from state.epochs_completed.
/// Shuffling and gate noise are keyed by (seed, epoch, batch), so interrupting and resuming
/// from a checkpoint reproduces uninterrupted training bit for bit.
inline void continue_training(TrainerState& state, const ExampleBlock& data,
                              std::uint64_t n_epochs, TrainHistory& history,
                              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  const auto& cfg = state.config;
  validate_config(cfg);
  const Linkage linkage(state.hierarchy);
  const LossConfig loss_cfg = cfg.loss();
  const std::size_t N = data.size();
  if (N == 0) throw ValidationError("training set is empty");
  const std::size_t H = state.hierarchy.n_high();
  const std::size_t L = state.hierarchy.n_low();
  const std::size_t P = data.n_patches;
  std::uint64_t step = state.adam_hc.step_count;

  for (std::uint64_t e = 0; e < n_epochs; ++e) {
    const std::uint64_t epoch = state.epochs_completed;
    const auto order =
        CounterStream(cfg.seed, {static_cast<std::uint64_t>(StreamId::kShuffle), epoch})
            .permutation(N);
    EpochRecord record;
    record.epoch = epoch;
    double correct_high = 0.0, correct_low = 0.0, active_high = 0.0, active_low = 0.0;

    for (std::size_t begin = 0, b = 0; begin < N; begin += cfg.batch_size, ++b) {
      const std::size_t end = std::min<std::size_t>(N, begin + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const ExampleBlock batch = gather(data, idx);
      const std::size_t n = batch.size();

      RelaxedGates gates;
      gates.temperature = cfg.gumbel_temperature;
      gates.uniforms_high =
          CounterStream(cfg.seed, {static_cast<std::uint64_t>(StreamId::kHighGate), epoch, b})
              .uniform_matrix(n, H);
      gates.uniforms_low =
          CounterStream(cfg.seed, {static_cast<std::uint64_t>(StreamId::kLowGate), epoch, b})
              .uniform_matrix(n * P, L);

      const ForwardTrace trace = forward(batch, state.params, linkage, cfg.mode, gates);
      const LossBreakdown loss = compute_loss(trace, batch.labels, loss_cfg);
      ++step;
      if (!std::isfinite(loss.total)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b) + " (step " + std::to_string(step) + ")");
      }
      const Gradients g = backward(trace, batch, state.params, linkage, loss_cfg);
      adam_step(state.params.w_hc, g.w_hc, state.adam_hc);
      adam_step(state.params.w_lc, g.w_lc, state.adam_lc);
      adam_step(state.params.w_hs, g.w_hs, state.adam_hs);
      adam_step(state.params.w_ls, g.w_ls, state.adam_ls);

      const double w = static_cast<double>(n);
      record.loss.ce_high += loss.ce_high * w;
      record.loss.ce_low += loss.ce_low * w;
      record.loss.kl_high += loss.kl_high * w;
      record.loss.kl_low += loss.kl_low * w;
      record.loss.total += loss.total * w;
      for (std::size_t i = 0; i < n; ++i) {
        correct_high += argmax(trace.logits_high.row(i)) == batch.labels[i];
        correct_low += argmax(trace.low.logits.row(i)) == batch.labels[i];
      }
      const auto hard = threshold_indicators(trace.q_high, trace.q_low, linkage, cfg.mode,
                                             cfg.infer_tau, P);
      active_high += percent_active(hard.z_high) * w;
      active_low += percent_active(hard.z) * w;
    }

    const double inv_n = 1.0 / static_cast<double>(N);
    record.loss.ce_high *= inv_n;
    record.loss.ce_low *= inv_n;
    record.loss.kl_high *= inv_n;
    record.loss.kl_low *= inv_n;
    record.loss.total *= inv_n;
    record.accuracy_high = correct_high * inv_n;
    record.accuracy_low = correct_low * inv_n;
    record.sparsity_high = active_high * inv_n;
    record.sparsity_low = active_low * inv_n;
    history.epochs.push_back(record);
    ++state.epochs_completed;
    if (on_epoch) on_epoch(record);
  }
}

struct TrainResult {
  TrainerState state;
  TrainHistory history;
};

/// Validates inputs, initializes parameters from the seed and runs config.epochs epochs.
inline TrainResult train(const EmbeddingBundle& bundle, const ConceptHierarchy& hierarchy,
                         const TrainConfig& config,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate_config(config);
  check_compatible(bundle, hierarchy, config);
  TrainResult out;
  out.state = init_trainer(bundle.dataset.embed_dim, bundle.dataset.n_classes, hierarchy, config);
  out.state.config.patches = bundle.dataset.n_patches;
  const ExampleBlock data = prepare_examples(bundle);
  continue_training(out.state, data, config.epochs, out.history, on_epoch);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CFCK", u32 version, config JSON, manifest JSON, epochs completed, then for
// each of w_hc, w_lc, w_hs, w_ls the parameter matrix followed by its Adam state.
// Matrices are stored as u64 rows, u64 cols and little-endian f64 values.

inline constexpr std::array<char, 4> kCheckpointMagic = {'C', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_string(std::vector<char>& out, const std::string& s) {
  put_le<std::uint64_t>(out, s.size());
  out.insert(out.end(), s.begin(), s.end());
}

inline void put_matrix(std::vector<char>& out, const Matrix& m) {
  put_le<std::uint64_t>(out, m.rows());
  put_le<std::uint64_t>(out, m.cols());
  for (double v : m.values()) put_le<double>(out, v);
}

inline Matrix get_matrix(ByteReader& in, const std::string& context) {
  const auto rows = in.get<std::uint64_t>();
  const auto cols = in.get<std::uint64_t>();
  const auto count = checked_mul(rows, cols, context);
  if (checked_mul(count, 8, context) > in.remaining()) {
    throw FormatError(context + ": truncated matrix payload");
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = in.get<double>();
  return m;
}

inline void put_adam(std::vector<char>& out, const AdamState& s) {
  put_matrix(out, s.first_moment);
  put_matrix(out, s.second_moment);
  put_le<std::uint64_t>(out, s.step_count);
  put_le<double>(out, s.lr);
  put_le<double>(out, s.beta1);
  put_le<double>(out, s.beta2);
  put_le<double>(out, s.epsilon);
}

inline AdamState get_adam(ByteReader& in, const std::string& context) {
  AdamState s;
  s.first_moment = get_matrix(in, context);
  s.second_moment = get_matrix(in, context);
  s.step_count = in.get<std::uint64_t>();
  s.lr = in.get<double>();
  s.beta1 = in.get<double>();
  s.beta2 = in.get<double>();
  s.epsilon = in.get<double>();
  return s;
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const TrainerState& s) {
  std::vector<char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_string(out, config_to_json(s.config).dump());
  detail::put_string(out, manifest_to_json(s.hierarchy).dump());
  detail::put_le<std::uint64_t>(out, s.epochs_completed);
  const std::pair<const Matrix*, const AdamState*> blocks[] = {
      {&s.params.w_hc, &s.adam_hc},
      {&s.params.w_lc, &s.adam_lc},
      {&s.params.w_hs, &s.adam_hs},
      {&s.params.w_ls, &s.adam_ls}};
  for (const auto& [param, adam] : blocks) {
    detail::put_matrix(out, *param);
    detail::put_adam(out, *adam);
  }
  return out;
}

inline TrainerState decode_checkpoint(std::span<const char> bytes, const std::string& context) {
  detail::ByteReader in(bytes, context);
  const std::string magic = in.get_bytes(4);
  if (magic != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) {
    throw FormatError(context + ": bad magic '" + magic + "', expected 'CFCK'");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(context + ": unsupported checkpoint version " + std::to_string(version));
  }
  TrainerState s;
  try {
    const auto config_len = in.get<std::uint64_t>();
    if (config_len > in.remaining()) throw FormatError(context + ": truncated config");
    s.config = config_from_json(nlohmann::json::parse(in.get_bytes(config_len)));
    const auto manifest_len = in.get<std::uint64_t>();
    if (manifest_len > in.remaining()) throw FormatError(context + ": truncated manifest");
    s.hierarchy = manifest_from_json(nlohmann::json::parse(in.get_bytes(manifest_len)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": " + e.what());
  }
  s.epochs_completed = in.get<std::uint64_t>();
  std::pair<Matrix*, AdamState*> blocks[] = {{&s.params.w_hc, &s.adam_hc},
                                             {&s.params.w_lc, &s.adam_lc},
                                             {&s.params.w_hs, &s.adam_hs},
                                             {&s.params.w_ls, &s.adam_ls}};
  for (auto& [param, adam] : blocks) {
    *param = detail::get_matrix(in, context);
    *adam = detail::get_adam(in, context);
    if (!param->same_shape(adam->first_moment) || !param->same_shape(adam->second_moment)) {
      throw FormatError(context + ": optimizer state shape does not match parameter shape");
    }
  }
  if (in.remaining() != 0) throw FormatError(context + ": trailing bytes after checkpoint");
  const auto H = s.hierarchy.n_high();
  const auto L = s.hierarchy.n_low();
  if (s.params.w_hc.rows() != H || s.params.w_lc.rows() != L || s.params.w_hs.cols() != H ||
      s.params.w_ls.cols() != L || s.params.w_hc.cols() != s.params.w_lc.cols() ||
      s.params.w_hs.rows() != s.params.w_ls.rows()) {
    throw FormatError(context + ": parameter shapes disagree with the stored hierarchy");
  }
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainerState& state) {
  detail::write_file(path, encode_checkpoint(state));
}

inline TrainerState load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_checkpoint(bytes, path.string());
}

}  // namespace cfcbm
