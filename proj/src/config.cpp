#include "mole/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace mole {

#define MOLE_CONFIG_FIELDS(X)                                                                     \
  X(n_experts) X(top_k) X(rank) X(layers) X(d_in) X(d_hidden) X(d_out) X(d_signal) X(d_inst)      \
  X(seq_len) X(tasks) X(filler_tokens) X(attr_tokens) X(instructions) X(noise_sigma) X(policy)    \
  X(capacity_factor) X(gate_hidden) X(gate_bias) X(gate_init_std) X(token_context) X(signal)      \
  X(perceiver_layers) X(lambda_aux) X(lambda_ortho) X(ortho_warmup) X(lr) X(weight_decay)         \
  X(beta1) X(beta2) X(adam_eps) X(steps) X(batch_size) X(seed) X(eval_every) X(eval_batch)        \
  X(checkpoint)

MoLEConfig ExperimentConfig::layer_config(std::size_t layer) const {
  return MoLEConfig{n_experts, top_k, rank, layer_in_dim(layer), layer_out_dim(layer)};
}

std::size_t ExperimentConfig::layer_in_dim(std::size_t layer) const {
  return layer == 0 ? d_in : d_hidden;
}

std::size_t ExperimentConfig::layer_out_dim(std::size_t layer) const {
  return layer + 1 == layers ? d_out : d_hidden;
}

LayerPolicyMap ExperimentConfig::policy_map() const {
  if (policy.is_string()) return LayerPolicyMap::from_shorthand(policy.get<std::string>(), layers);
  if (!policy.is_array()) throw ConfigError("policy must be a string or an array of {layers, name}");
  std::vector<LayerPolicyMap::Entry> entries;
  for (const auto& item : policy) {
    if (!item.is_object() || !item.contains("layers") || !item.contains("name")) {
      throw ConfigError("policy entries need 'layers' and 'name'");
    }
    const auto& layers_field = item.at("layers");
    std::pair<std::size_t, std::size_t> range;
    if (layers_field.is_number_unsigned()) {
      const auto v = layers_field.get<std::size_t>();
      range = {v, v};
    } else {
      range = LayerPolicyMap::parse_range(layers_field.get<std::string>());
    }
    entries.push_back({range.first, range.second, parse_policy(item.at("name").get<std::string>())});
  }
  return LayerPolicyMap(std::move(entries));
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (layers < 2) fail("layers: need at least 2 MoLE layers");
  if (tasks < 2) fail("tasks: need at least 2 tasks");
  if (d_in == 0 || d_hidden == 0 || d_out == 0 || d_signal == 0 || d_inst == 0) {
    fail("dims: all widths must be positive");
  }
  if (seq_len == 0) fail("seq_len: must be positive");
  if (batch_size == 0) fail("batch_size: must be positive");
  if (eval_batch == 0) fail("eval_batch: must be positive");
  if (steps == 0) fail("steps: must be positive");
  if (eval_every == 0) fail("eval_every: must be positive");
  if (attr_tokens == 0) fail("attr_tokens: must be positive");
  if (perceiver_layers == 0) fail("perceiver_layers: need S >= 1");
  if (lr < 0.0 || weight_decay < 0.0) fail("lr/weight_decay: must be >= 0");
  if (lambda_aux < 0.0 || lambda_ortho < 0.0) fail("lambda_aux/lambda_ortho: must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("beta1/beta2: must lie in [0, 1)");
  if (adam_eps <= 0.0) fail("adam_eps: must be positive");
  if (noise_sigma < 0.0) fail("noise_sigma: must be >= 0");
  if (!(capacity_factor > 0.0)) fail("capacity_factor: must be positive");
  if (gate_init_std < 0.0) fail("gate_init_std: must be >= 0");
  if (token_context != "prefix_mean" && token_context != "none") {
    fail("token_context: expected prefix_mean or none");
  }
  try {
    (void)signal_mode();
  } catch (const std::invalid_argument& e) {
    fail(std::string("signal: ") + e.what());
  }
  for (std::size_t l = 0; l < layers; ++l) {
    try {
      layer_config(l).validate();
    } catch (const ConfigError& e) {
      fail("layer " + std::to_string(l) + ": " + e.what());
    }
  }
  try {
    policy_map().validate(layers);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    fail(std::string("policy: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json::object();
#define MOLE_TO_JSON(name) j[#name] = c.name;
  MOLE_CONFIG_FIELDS(MOLE_TO_JSON)
#undef MOLE_TO_JSON
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {
#define MOLE_NAME(name) #name,
      MOLE_CONFIG_FIELDS(MOLE_NAME)
#undef MOLE_NAME
  };
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
#define MOLE_FROM_JSON(name)                                                                     \
  if (j.contains(#name)) {                                                                       \
    try {                                                                                        \
      j.at(#name).get_to(c.name);                                                                \
    } catch (const nlohmann::json::exception& e) {                                               \
      throw ConfigError(std::string("field '" #name "': ") + e.what());                          \
    }                                                                                            \
  }
  MOLE_CONFIG_FIELDS(MOLE_FROM_JSON)
#undef MOLE_FROM_JSON
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  // Relative instruction files resolve against the config's directory.
  if (!c.instructions.empty() && std::filesystem::path(c.instructions).is_relative()) {
    c.instructions = (path.parent_path() / c.instructions).string();
  }
  return c;
}

void save_config(const ExperimentConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json(config).dump(2) << "\n";
}

void apply_env_overrides(ExperimentConfig& config) {
  if (const char* s = std::getenv("MOLE_LAB_SEED"); s != nullptr && *s != '\0') {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == nullptr || *end != '\0') throw ConfigError("MOLE_LAB_SEED must be an unsigned integer");
    config.seed = v;
  }
}

}  // namespace mole
