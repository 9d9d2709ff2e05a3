#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mole/autodiff.hpp"
#include "mole/param_store.hpp"
#include "mole/rng.hpp"
#include "mole/tensor.hpp"

namespace mole {

enum class Policy { igr, token_topk, expert_choice };
enum class Granularity { instance, token };

std::string_view policy_name(Policy p);
Policy parse_policy(std::string_view name);
Granularity granularity_of(Policy p);

// Per-layer gating network mapping a routing input to N expert logits. With
// hidden == 0 it is a single linear map.
struct GateNet {
  std::string prefix;
  std::size_t in_dim = 0;
  std::size_t n_experts = 0;
  std::size_t hidden = 0;
  bool bias = false;
};

GateNet make_gate(ParamStore& store, const std::string& prefix, std::size_t in_dim,
                  std::size_t n_experts, Rng& rng, double init_std = 0.02, std::size_t hidden = 0,
                  bool bias = false);
Var gate_logits(const ParamBinder& bind, const GateNet& gate, Var input);

// Selected experts per routing row. Rows are instances (instance granularity)
// or tokens. Each row has `slots` entries; an index of -1 marks an empty slot,
// which only expert-choice routing produces.
struct RoutingDecision {
  Policy policy = Policy::igr;
  Granularity granularity = Granularity::instance;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t n_experts = 0;
  std::size_t slots = 0;
  std::vector<int> indices;
  std::vector<double> weights;
  Tensor full_probs;  // [batch x (1 | seq_len) x n_experts]

  std::size_t routing_rows() const {
    return granularity == Granularity::instance ? batch : batch * seq_len;
  }
  std::size_t routing_row_of_token(std::size_t token_row) const {
    return granularity == Granularity::instance ? token_row / seq_len : token_row;
  }
  // Sorted selected expert set of a routing row.
  std::vector<int> selected(std::size_t routing_row) const;
  // Selected set seen by token l of instance b.
  std::vector<int> token_selection(std::size_t b, std::size_t l) const {
    return selected(routing_row_of_token(b * seq_len + l));
  }
};

// A decision plus the differentiable probability rows it was drawn from,
// shaped [routing_rows x N].
struct Routed {
  RoutingDecision decision;
  Var probs;
};

// k largest entries, ties to the lowest index.
std::pair<std::vector<std::size_t>, std::vector<double>> topk(std::span<const double> p,
                                                              std::size_t k);

Routed igr_route(const ParamBinder& bind, const GateNet& gate, Var z_global, std::size_t k,
                 std::size_t seq_len);
// x is [B x L x D] (the gate input per token).
Routed token_topk_route(const ParamBinder& bind, const GateNet& gate, Var x, std::size_t k);
Routed expert_choice_route(const ParamBinder& bind, const GateNet& gate, Var x, std::size_t k,
                           double capacity_factor);
std::size_t expert_choice_capacity(std::size_t tokens, std::size_t k, std::size_t n_experts,
                                   double capacity_factor);

// Value-level wrappers.
RoutingDecision igr_route(const ParamStore& store, const GateNet& gate, const Tensor& z_global,
                          std::size_t k, std::size_t seq_len);
RoutingDecision token_topk_route(const ParamStore& store, const GateNet& gate, const Tensor& x,
                                 std::size_t k);
RoutingDecision expert_choice_route(const ParamStore& store, const GateNet& gate, const Tensor& x,
                                    std::size_t k, double capacity_factor);

// Fraction of within-instance token pairs with identical selected sets,
// averaged over the batch. Requires seq_len >= 2.
double consistency(const RoutingDecision& decision);

std::size_t routing_logit_count(Policy policy, std::size_t batch, std::size_t seq_len,
                                std::size_t n_experts);

// Ordered, non-overlapping assignment of inclusive layer ranges to policies.
class LayerPolicyMap {
 public:
  struct Entry {
    std::size_t first;
    std::size_t last;
    Policy policy;
  };

  LayerPolicyMap() = default;
  explicit LayerPolicyMap(std::vector<Entry> entries) : entries_(std::move(entries)) {}

  static LayerPolicyMap uniform(Policy p, std::size_t layers);
  // "igr", "token_topk", or "a+b" (a on the early half, b on the rest).
  static LayerPolicyMap from_shorthand(std::string_view spec, std::size_t layers);
  // Parses ranges written "0..2" (inclusive) or a single index "3".
  static std::pair<std::size_t, std::size_t> parse_range(std::string_view text);

  // Throws unless the ranges cover [0, layers) exactly once.
  void validate(std::size_t layers) const;
  Policy policy_for(std::size_t layer) const;
  bool any_token_level() const;
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

}  // namespace mole
