#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mole/autodiff.hpp"
#include "mole/param_store.hpp"
#include "mole/routing.hpp"

namespace mole {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MoLEConfig {
  std::size_t n_experts = 8;
  std::size_t top_k = 4;
  std::size_t rank = 32;
  std::size_t d_in = 64;
  std::size_t d_out = 64;

  // Throws ConfigError on N < 1, k outside [1, N], or r > min(D_in, D_out).
  void validate() const;
};

// One low-rank expert: E(X) = X A B with A [D_in x r] and B [r x D_out].
struct LoRAExpert {
  std::string a_id;
  std::string b_id;
  std::size_t rank = 0;
};

struct MoLELayer {
  std::string w0_id;  // frozen base weight
  std::vector<LoRAExpert> experts;
  GateNet gate;
  MoLEConfig config;
};

// A ~ N(0, 1/D_in), B = 0, so a fresh layer reproduces its frozen base.
std::vector<LoRAExpert> init_experts(ParamStore& store, const std::string& prefix,
                                     const MoLEConfig& config, std::uint64_t seed);

struct GateOptions {
  double init_std = 0.02;
  std::size_t hidden = 0;
  bool bias = false;
};

// Creates W0 (frozen, N(0, 1/D_in) unless given), experts and the gate.
MoLELayer make_mole_layer(ParamStore& store, const std::string& prefix, const MoLEConfig& config,
                          std::size_t gate_in_dim, std::uint64_t seed,
                          std::optional<Tensor> w0 = std::nullopt, const GateOptions& gate = {});

// (X A) B
Var expert_forward(const ParamBinder& bind, const LoRAExpert& expert, Var x);
Tensor expert_forward(const ParamStore& store, const LoRAExpert& expert, const Tensor& x);

// Raw pre-gating outputs of every expert on x.
std::vector<Var> all_expert_outputs(const ParamBinder& bind, const MoLELayer& layer, Var x);

// Y = X W0 + sum over selected (expert, weight) pairs of weight * E(X), per
// routing row. Only selected experts are evaluated. When `probs` is given the
// weights are gathered from it differentiably; otherwise decision.weights are
// used as constants.
Var mole_forward(const ParamBinder& bind, const MoLELayer& layer, Var x,
                 const RoutingDecision& decision, std::optional<Var> probs = std::nullopt);
Tensor mole_forward(const ParamStore& store, const MoLELayer& layer, const Tensor& x,
                    const RoutingDecision& decision);

}  // namespace mole
