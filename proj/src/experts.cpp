#include "mole/experts.hpp"

#include <algorithm>
#include <cmath>

#include "mole/rng.hpp"

namespace mole {

void MoLEConfig::validate() const {
  if (n_experts < 1) throw ConfigError("MoLE needs at least one expert");
  if (top_k < 1 || top_k > n_experts) {
    throw ConfigError("top_k=" + std::to_string(top_k) + " outside [1, N=" +
                      std::to_string(n_experts) + "]");
  }
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw ConfigError("expert rank r=" + std::to_string(rank) + " must lie in [1, min(D_in, D_out)=" +
                      std::to_string(std::min(d_in, d_out)) + "]");
  }
}

std::vector<LoRAExpert> init_experts(ParamStore& store, const std::string& prefix,
                                     const MoLEConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_in));
  std::vector<LoRAExpert> experts;
  for (std::size_t i = 0; i < config.n_experts; ++i) {
    LoRAExpert e{prefix + ".expert" + std::to_string(i) + ".a",
                 prefix + ".expert" + std::to_string(i) + ".b", config.rank};
    store.add(e.a_id, rng.normal_tensor({config.d_in, config.rank}, stddev));
    store.add(e.b_id, Tensor({config.rank, config.d_out}));
    experts.push_back(std::move(e));
  }
  return experts;
}

MoLELayer make_mole_layer(ParamStore& store, const std::string& prefix, const MoLEConfig& config,
                          std::size_t gate_in_dim, std::uint64_t seed, std::optional<Tensor> w0,
                          const GateOptions& gate) {
  config.validate();
  MoLELayer layer;
  layer.config = config;
  layer.w0_id = prefix + ".w0";
  Rng rng(mix_seed(seed, 1));
  if (!w0) {
    w0 = rng.normal_tensor({config.d_in, config.d_out}, 1.0 / std::sqrt(double(config.d_in)));
  } else if (w0->shape() != Shape{config.d_in, config.d_out}) {
    throw ShapeError("W0 must be " + shape_str({config.d_in, config.d_out}) + ", got " +
                     shape_str(w0->shape()));
  }
  store.add(layer.w0_id, std::move(*w0), /*frozen=*/true);
  layer.experts = init_experts(store, prefix, config, mix_seed(seed, 2));
  Rng gate_rng(mix_seed(seed, 3));
  layer.gate = make_gate(store, prefix + ".gate", gate_in_dim, config.n_experts, gate_rng,
                         gate.init_std, gate.hidden, gate.bias);
  return layer;
}

Var expert_forward(const ParamBinder& bind, const LoRAExpert& expert, Var x) {
  return ad::matmul(ad::matmul(x, bind(expert.a_id)), bind(expert.b_id));
}

Tensor expert_forward(const ParamStore& store, const LoRAExpert& expert, const Tensor& x) {
  Tape tape;
  return expert_forward(constant_binder(tape, store), expert, tape.constant(x)).value();
}

std::vector<Var> all_expert_outputs(const ParamBinder& bind, const MoLELayer& layer, Var x) {
  std::vector<Var> out;
  out.reserve(layer.experts.size());
  for (const auto& e : layer.experts) out.push_back(expert_forward(bind, e, x));
  return out;
}

Var mole_forward(const ParamBinder& bind, const MoLELayer& layer, Var x,
                 const RoutingDecision& decision, std::optional<Var> probs) {
  const Tensor& xv = x.value();
  const std::size_t n = layer.config.n_experts;
  if (xv.cols() != layer.config.d_in) {
    throw ShapeError("MoLE layer expects width " + std::to_string(layer.config.d_in) + ", got " +
                     shape_str(xv.shape()));
  }
  const std::size_t tokens = xv.rows();
  if (decision.n_experts != n) throw std::invalid_argument("decision is for a different expert count");
  if (decision.batch * decision.seq_len != tokens) {
    throw ShapeError("decision covers " + std::to_string(decision.batch) + "x" +
                     std::to_string(decision.seq_len) + " tokens, input has " + std::to_string(tokens));
  }
  if (decision.policy != Policy::expert_choice && decision.slots != layer.config.top_k) {
    throw std::invalid_argument("decision carries " + std::to_string(decision.slots) +
                                " weights per row, layer expects k=" +
                                std::to_string(layer.config.top_k));
  }
  const std::size_t rows = decision.routing_rows();
  if (decision.indices.size() != rows * decision.slots || decision.weights.size() != rows * decision.slots) {
    throw std::invalid_argument("decision index/weight arrays have the wrong length");
  }

  // Token rows and weight positions per expert.
  std::vector<std::vector<std::size_t>> token_rows(n), prob_pos(n);
  std::vector<std::vector<double>> const_weights(n);
  for (std::size_t t = 0; t < tokens; ++t) {
    const std::size_t r = decision.routing_row_of_token(t);
    for (std::size_t s = 0; s < decision.slots; ++s) {
      const int e = decision.indices[r * decision.slots + s];
      if (e < 0) continue;
      if (static_cast<std::size_t>(e) >= n) {
        throw std::out_of_range("expert index " + std::to_string(e) + " out of range for N=" +
                                std::to_string(n));
      }
      const double w = decision.weights[r * decision.slots + s];
      if (!std::isfinite(w) || w < 0.0 || w > 1.0) {
        throw std::invalid_argument("routing weight outside [0, 1]: " + std::to_string(w));
      }
      token_rows[e].push_back(t);
      prob_pos[e].push_back(r * n + static_cast<std::size_t>(e));
      const_weights[e].push_back(w);
    }
  }

  Var x2 = ad::reshape(x, {tokens, xv.cols()});
  Var base = ad::matmul(x2, bind(layer.w0_id));
  std::vector<Var> contributions;
  std::vector<std::vector<std::size_t>> targets;
  for (std::size_t e = 0; e < n; ++e) {
    if (token_rows[e].empty()) continue;
    Var xe = ad::gather_rows(x2, token_rows[e]);
    Var out = expert_forward(bind, layer.experts[e], xe);
    Var w = probs ? ad::gather_elements(*probs, prob_pos[e])
                  : x.tape->constant(Tensor({const_weights[e].size()}, const_weights[e]));
    contributions.push_back(ad::scale_rows(out, w));
    targets.push_back(std::move(token_rows[e]));
  }
  Var y = ad::scatter_add_rows(base, std::move(contributions), std::move(targets));
  Shape out_shape = xv.shape();
  out_shape.back() = layer.config.d_out;
  return ad::reshape(y, out_shape);
}

Tensor mole_forward(const ParamStore& store, const MoLELayer& layer, const Tensor& x,
                    const RoutingDecision& decision) {
  Tape tape;
  return mole_forward(constant_binder(tape, store), layer, tape.constant(x), decision).value();
}

}  // namespace mole
