#include "mole/routing.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mole/numerics.hpp"

namespace mole {

std::string_view policy_name(Policy p) {
  switch (p) {
    case Policy::igr: return "igr";
    case Policy::token_topk: return "token_topk";
    case Policy::expert_choice: return "expert_choice";
  }
  return "?";
}

Policy parse_policy(std::string_view name) {
  if (name == "igr") return Policy::igr;
  if (name == "token_topk" || name == "token") return Policy::token_topk;
  if (name == "expert_choice") return Policy::expert_choice;
  throw std::invalid_argument("unknown routing policy '" + std::string(name) +
                              "' (expected igr, token_topk, expert_choice)");
}

Granularity granularity_of(Policy p) {
  return p == Policy::igr ? Granularity::instance : Granularity::token;
}

GateNet make_gate(ParamStore& store, const std::string& prefix, std::size_t in_dim,
                  std::size_t n_experts, Rng& rng, double init_std, std::size_t hidden, bool bias) {
  GateNet g{prefix, in_dim, n_experts, hidden, bias};
  if (hidden == 0) {
    store.add(prefix + ".w", rng.normal_tensor({in_dim, n_experts}, init_std));
  } else {
    store.add(prefix + ".w1", rng.normal_tensor({in_dim, hidden}, 1.0 / std::sqrt(double(in_dim))));
    store.add(prefix + ".b1", Tensor({hidden}));
    store.add(prefix + ".w", rng.normal_tensor({hidden, n_experts}, init_std));
  }
  if (bias) store.add(prefix + ".b", Tensor({n_experts}));
  return g;
}

Var gate_logits(const ParamBinder& bind, const GateNet& gate, Var input) {
  if (input.value().cols() != gate.in_dim) {
    throw ShapeError("gate " + gate.prefix + " expects input width " + std::to_string(gate.in_dim) +
                     ", got " + shape_str(input.shape()));
  }
  Var h = input;
  if (gate.hidden > 0) {
    h = ad::gelu(ad::add_bias(ad::matmul(h, bind(gate.prefix + ".w1")), bind(gate.prefix + ".b1")));
  }
  Var logits = ad::matmul(h, bind(gate.prefix + ".w"));
  if (gate.bias) logits = ad::add_bias(logits, bind(gate.prefix + ".b"));
  return logits;
}

std::vector<int> RoutingDecision::selected(std::size_t routing_row) const {
  std::vector<int> out;
  out.reserve(slots);
  for (std::size_t s = 0; s < slots; ++s) {
    const int e = indices[routing_row * slots + s];
    if (e >= 0) out.push_back(e);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<double>> topk(std::span<const double> p,
                                                              std::size_t k) {
  if (k < 1 || k > p.size()) {
    throw std::invalid_argument("topk: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(p.size()) + "]");
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  order.resize(k);
  std::vector<double> values(k);
  for (std::size_t i = 0; i < k; ++i) values[i] = p[order[i]];
  return {std::move(order), std::move(values)};
}

namespace {

RoutingDecision topk_decision(Policy policy, const Tensor& probs, std::size_t batch,
                              std::size_t seq_len, std::size_t k) {
  const std::size_t n = probs.cols(), rows = probs.rows();
  RoutingDecision d;
  d.policy = policy;
  d.granularity = granularity_of(policy);
  d.batch = batch;
  d.seq_len = seq_len;
  d.n_experts = n;
  d.slots = k;
  d.indices.resize(rows * k);
  d.weights.resize(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    auto [idx, vals] = topk(probs.data().subspan(r * n, n), k);
    for (std::size_t s = 0; s < k; ++s) {
      d.indices[r * k + s] = static_cast<int>(idx[s]);
      d.weights[r * k + s] = vals[s];
    }
  }
  d.full_probs = probs.reshaped({batch, rows / batch, n});
  return d;
}

void require_rank3(const char* who, const Tensor& x) {
  if (x.rank() != 3) throw ShapeError(std::string(who) + " expects [B x L x D], got " + shape_str(x.shape()));
}

}  // namespace

Routed igr_route(const ParamBinder& bind, const GateNet& gate, Var z_global, std::size_t k,
                 std::size_t seq_len) {
  if (z_global.value().rank() != 2) {
    throw ShapeError("igr_route expects Z_global as [B x D], got " + shape_str(z_global.shape()));
  }
  if (seq_len == 0) throw std::invalid_argument("igr_route: seq_len must be positive");
  Var probs = ad::softmax(gate_logits(bind, gate, z_global));
  const std::size_t batch = z_global.value().dim(0);
  return {topk_decision(Policy::igr, probs.value(), batch, seq_len, k), probs};
}

Routed token_topk_route(const ParamBinder& bind, const GateNet& gate, Var x, std::size_t k) {
  require_rank3("token_topk_route", x.value());
  const std::size_t batch = x.value().dim(0), seq_len = x.value().dim(1);
  Var logits = gate_logits(bind, gate, x);
  Var probs = ad::softmax(ad::reshape(logits, {batch * seq_len, gate.n_experts}));
  return {topk_decision(Policy::token_topk, probs.value(), batch, seq_len, k), probs};
}

std::size_t expert_choice_capacity(std::size_t tokens, std::size_t k, std::size_t n_experts,
                                   double capacity_factor) {
  const double raw = std::floor(capacity_factor * static_cast<double>(tokens * k) /
                                static_cast<double>(n_experts));
  if (!(raw >= 1.0)) {
    throw std::invalid_argument("expert_choice capacity is 0 (capacity_factor too small)");
  }
  return static_cast<std::size_t>(std::min(raw, static_cast<double>(tokens)));
}

Routed expert_choice_route(const ParamBinder& bind, const GateNet& gate, Var x, std::size_t k,
                           double capacity_factor) {
  require_rank3("expert_choice_route", x.value());
  const std::size_t batch = x.value().dim(0), seq_len = x.value().dim(1);
  const std::size_t tokens = batch * seq_len, n = gate.n_experts;
  const std::size_t capacity = expert_choice_capacity(tokens, k, n, capacity_factor);
  Var logits = ad::reshape(gate_logits(bind, gate, x), {tokens, n});
  Var probs = ad::softmax(logits);
  const Tensor& lv = logits.value();

  RoutingDecision d;
  d.policy = Policy::expert_choice;
  d.granularity = Granularity::token;
  d.batch = batch;
  d.seq_len = seq_len;
  d.n_experts = n;
  d.slots = n;
  d.indices.assign(tokens * n, -1);
  d.weights.assign(tokens * n, 0.0);
  std::vector<std::size_t> order(tokens);
  for (std::size_t e = 0; e < n; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(capacity), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double la = lv.at(a, e), lb = lv.at(b, e);
                        return la > lb || (la == lb && a < b);
                      });
    for (std::size_t i = 0; i < capacity; ++i) {
      const std::size_t tok = order[i];
      d.indices[tok * n + e] = static_cast<int>(e);
      d.weights[tok * n + e] = probs.value().at(tok, e);
    }
  }
  d.full_probs = probs.value().reshaped({batch, seq_len, n});
  return {std::move(d), probs};
}

RoutingDecision igr_route(const ParamStore& store, const GateNet& gate, const Tensor& z_global,
                          std::size_t k, std::size_t seq_len) {
  Tape tape;
  return igr_route(constant_binder(tape, store), gate, tape.constant(z_global), k, seq_len).decision;
}

RoutingDecision token_topk_route(const ParamStore& store, const GateNet& gate, const Tensor& x,
                                 std::size_t k) {
  Tape tape;
  return token_topk_route(constant_binder(tape, store), gate, tape.constant(x), k).decision;
}

RoutingDecision expert_choice_route(const ParamStore& store, const GateNet& gate, const Tensor& x,
                                    std::size_t k, double capacity_factor) {
  Tape tape;
  return expert_choice_route(constant_binder(tape, store), gate, tape.constant(x), k, capacity_factor)
      .decision;
}

double consistency(const RoutingDecision& decision) {
  const std::size_t len = decision.seq_len;
  if (len < 2) throw std::invalid_argument("consistency needs at least two tokens per instance");
  if (decision.batch == 0) throw std::invalid_argument("consistency of an empty batch");
  const double pairs = static_cast<double>(len * (len - 1) / 2);
  double total = 0.0;
  std::vector<std::vector<int>> sets(len);
  for (std::size_t b = 0; b < decision.batch; ++b) {
    for (std::size_t l = 0; l < len; ++l) sets[l] = decision.token_selection(b, l);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = i + 1; j < len; ++j) agree += sets[i] == sets[j] ? 1 : 0;
    total += static_cast<double>(agree) / pairs;
  }
  return total / static_cast<double>(decision.batch);
}

std::size_t routing_logit_count(Policy policy, std::size_t batch, std::size_t seq_len,
                                std::size_t n_experts) {
  if (batch == 0 || seq_len == 0 || n_experts == 0) {
    throw std::invalid_argument("routing_logit_count needs positive arguments");
  }
  return granularity_of(policy) == Granularity::instance ? batch * n_experts
                                                         : batch * seq_len * n_experts;
}

LayerPolicyMap LayerPolicyMap::uniform(Policy p, std::size_t layers) {
  if (layers == 0) throw std::invalid_argument("policy map over zero layers");
  return LayerPolicyMap({{0, layers - 1, p}});
}

LayerPolicyMap LayerPolicyMap::from_shorthand(std::string_view spec, std::size_t layers) {
  const auto plus = spec.find('+');
  if (plus == std::string_view::npos) return uniform(parse_policy(spec), layers);
  if (layers < 2) throw std::invalid_argument("hybrid policy needs at least two layers");
  const Policy early = parse_policy(spec.substr(0, plus));
  const Policy late = parse_policy(spec.substr(plus + 1));
  const std::size_t split = (layers + 1) / 2;
  return LayerPolicyMap({{0, split - 1, early}, {split, layers - 1, late}});
}

std::pair<std::size_t, std::size_t> LayerPolicyMap::parse_range(std::string_view text) {
  auto parse = [&](std::string_view s) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
      throw std::invalid_argument("bad layer range '" + std::string(text) + "'");
    }
    return v;
  };
  const auto dots = text.find("..");
  if (dots == std::string_view::npos) {
    const auto v = parse(text);
    return {v, v};
  }
  const auto first = parse(text.substr(0, dots));
  const auto last = parse(text.substr(dots + 2));
  if (last < first) throw std::invalid_argument("layer range '" + std::string(text) + "' is reversed");
  return {first, last};
}

void LayerPolicyMap::validate(std::size_t layers) const {
  std::vector<int> hits(layers, 0);
  for (const auto& e : entries_) {
    if (e.last >= layers || e.first > e.last) {
      throw std::invalid_argument("policy range " + std::to_string(e.first) + ".." +
                                  std::to_string(e.last) + " outside " + std::to_string(layers) +
                                  " layers");
    }
    for (std::size_t l = e.first; l <= e.last; ++l) ++hits[l];
  }
  for (std::size_t l = 0; l < layers; ++l) {
    if (hits[l] != 1) {
      throw std::invalid_argument("layer " + std::to_string(l) + " is covered " +
                                  std::to_string(hits[l]) + " times by the policy map");
    }
  }
}

Policy LayerPolicyMap::policy_for(std::size_t layer) const {
  for (const auto& e : entries_)
    if (layer >= e.first && layer <= e.last) return e.policy;
  throw std::out_of_range("no policy for layer " + std::to_string(layer));
}

bool LayerPolicyMap::any_token_level() const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [](const Entry& e) { return granularity_of(e.policy) == Granularity::token; });
}

}  // namespace mole
