#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mole/experts.hpp"
#include "mole/routing.hpp"
#include "mole/signal.hpp"

namespace mole {

// Complete hyper-parameter record of one run. Serialises to JSON losslessly;
// unknown keys are rejected.
struct ExperimentConfig {
  // MoLE
  std::size_t n_experts = 8;
  std::size_t top_k = 4;
  std::size_t rank = 32;
  std::size_t layers = 2;
  // Widths: layer 0 maps d_in -> d_hidden, the last layer d_hidden -> d_out.
  std::size_t d_in = 32;
  std::size_t d_hidden = 64;
  std::size_t d_out = 32;
  std::size_t d_signal = 16;  // D, width of Z_global
  std::size_t d_inst = 32;    // D_inst
  std::size_t seq_len = 16;   // L

  // Synthetic suite
  std::size_t tasks = 4;
  std::size_t filler_tokens = 2;
  std::size_t attr_tokens = 4;
  std::string instructions;  // optional JSON-lines file overriding templates
  double noise_sigma = 0.0;

  // Routing
  nlohmann::json policy = "igr";  // shorthand string or [{layers, name}, ...]
  double capacity_factor = 1.0;
  std::size_t gate_hidden = 0;
  bool gate_bias = false;
  double gate_init_std = 0.02;
  std::string token_context = "prefix_mean";  // or "none"

  // Signal
  std::string signal = "full";
  std::size_t perceiver_layers = 2;

  // Objective
  double lambda_aux = 0.01;
  double lambda_ortho = 0.1;
  std::size_t ortho_warmup = 10;

  // Optimiser
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  // Evaluation
  std::size_t eval_every = 100;
  std::size_t eval_batch = 64;
  bool checkpoint = true;

  MoLEConfig layer_config(std::size_t layer) const;
  std::size_t layer_in_dim(std::size_t layer) const;
  std::size_t layer_out_dim(std::size_t layer) const;
  LayerPolicyMap policy_map() const;
  SignalMode signal_mode() const { return parse_signal_mode(signal); }

  // Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& config, const std::filesystem::path& path);
// Applies MOLE_LAB_SEED when set.
void apply_env_overrides(ExperimentConfig& config);

}  // namespace mole
