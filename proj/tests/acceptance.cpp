// Acceptance gate: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.
//
//   acceptance [--runs DIR] [--reuse] [--only 1,2,...] [--report FILE]
//
// Training runs go to DIR (default ./acceptance_runs) and are recreated
// unless --reuse is given and a finished run is already there.
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mole/analysis.hpp"
#include "mole/experts.hpp"
#include "mole/losses.hpp"
#include "mole/numerics.hpp"
#include "mole/training.hpp"
#include "oracles.hpp"

using namespace mole;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// ------------------------------------------------------------------ runs

struct Runs {
  fs::path root;
  bool reuse = false;
  std::map<std::string, RunSummary> cache;

  RunSummary get(const std::string& name, const ExperimentConfig& config) {
    if (auto it = cache.find(name); it != cache.end()) return it->second;
    const fs::path dir = root / name;
    RunSummary s;
    if (reuse && fs::exists(dir / "summary.json")) {
      std::ifstream in(dir / "summary.json");
      const auto j = nlohmann::json::parse(in);
      s.run_dir = dir;
      s.final_eval_task = j["final_eval_task"];
      s.initial_eval_task = j["initial_eval_task"];
      s.gram_offdiag_mean = j["gram_offdiag_mean"];
      s.seconds = j["seconds"];
      s.snapshot_steps = j["snapshot_steps"].get<std::vector<std::size_t>>();
    } else {
      fs::remove_all(dir);
      s = run_experiment(config, dir);
    }
    std::printf("  run %-28s eval task %.4g -> %.4g, gram %.4g, %.1f s\n", name.c_str(), s.initial_eval_task,
                s.final_eval_task, s.gram_offdiag_mean, s.seconds);
    std::fflush(stdout);
    return cache[name] = s;
  }
};

ExperimentConfig default_with(const std::string& policy, std::uint64_t seed) {
  ExperimentConfig c;
  c.policy = policy;
  c.seed = seed;
  return c;
}

// ------------------------------------------------------------ criteria

Verdict gradients() {
  const auto t0 = Clock::now();
  const auto reports = model_grad_check(true);
  const double secs = seconds_since(t0);
  double worst = 0.0, frozen = 0.0;
  bool ok = true;
  for (const auto& r : reports) {
    worst = std::max(worst, r.report.max_rel_error);
    frozen = std::max(frozen, r.report.frozen_grad_max);
    ok = ok && r.report.passed;
  }
  return {ok && worst < 1e-4 && frozen == 0.0 && secs < 30.0,
          fmt("%zu policies, max rel error %.2e, frozen grad %.1g, %.2f s", reports.size(), worst, frozen, secs)};
}

Verdict instance_routing() {
  Rng rng(2024);
  std::size_t igr_ok = 0, token_broken = 0;
  const std::size_t cases = 1000;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 2 + rng.below(7), k = 1 + rng.below(n - 1), len = 2 + rng.below(31);
    const std::size_t b = 1 + rng.below(4), d = 3 + rng.below(6);
    ParamStore store;
    Rng gate_rng(mix_seed(7, c));
    const GateNet gate = make_gate(store, "g", d, n, gate_rng, 1.0);
    const Tensor x = rng.normal_tensor({b, len, d}, 1.0);
    Tensor z({b, d});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t j = 0; j < d; ++j) z.at(i, j) += x.at(i, l, j) / double(len);
    const auto igr = igr_route(store, gate, z, k, len);
    igr_ok += consistency(igr) == 1.0 && fragmentation(igr) == 0.0;
    token_broken += consistency(token_topk_route(store, gate, x, k)) < 1.0;
  }
  const double share = double(token_broken) / double(cases);
  return {igr_ok == cases && share >= 0.95,
          fmt("IGR consistency 1 and fragmentation 0 in %zu/%zu; token consistency < 1 in %.1f%%", igr_ok, cases,
              100.0 * share)};
}

Verdict loss_oracles() {
  Rng rng(99);
  double aux_err = 0.0, ortho_err = 0.0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = 2 + rng.below(7), k = 1 + rng.below(n), len = 1 + rng.below(6), b = 1 + rng.below(4);
    ParamStore store;
    const GateNet gate = make_gate(store, "g", 4, n, rng, 1.0);
    const Tensor x = rng.normal_tensor({b, len, 4}, 1.0);
    const RoutingDecision d = c % 2 ? token_topk_route(store, gate, x, k)
                                    : igr_route(store, gate, rng.normal_tensor({b, 4}, 1.0), k, len);
    aux_err = std::max(aux_err, std::abs(aux_loss(usage_stats(d), n) - oracle::aux_loss(d)));

    std::vector<Tensor> outs;
    for (std::size_t i = 0; i < n; ++i) outs.push_back(rng.normal_tensor({len, 3}, 1.0 + i));
    ortho_err = std::max(ortho_err, std::abs(ortho_loss(outs) - oracle::ortho_loss(outs)));
  }

  auto decision = [](std::size_t n, const std::vector<int>& idx, const std::vector<double>& probs) {
    RoutingDecision d;
    d.batch = idx.size();
    d.seq_len = 1;
    d.n_experts = n;
    d.slots = 1;
    d.indices = idx;
    d.weights.assign(idx.size(), 0.5);
    d.full_probs = Tensor({idx.size(), 1, n});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < n; ++i) d.full_probs[r * n + i] = probs[i];
    return d;
  };
  const double uniform = aux_loss(usage_stats(decision(4, {0, 1, 2, 3}, {0.25, 0.25, 0.25, 0.25})), 4);
  const double collapse = aux_loss(usage_stats(decision(8, {3, 3}, {0, 0, 0, 1, 0, 0, 0, 0})), 8);
  const Tensor v = rng.normal_tensor({5, 3}, 1.0);
  const double same = ortho_loss(std::vector<Tensor>{v, v, v, v});
  const double orth = ortho_loss(std::vector<Tensor>{Tensor({3}, {1, 0, 0}), Tensor({3}, {0, 2, 0}),
                                                     Tensor({3}, {0, 0, -1})});
  const bool ok = aux_err < 1e-10 && ortho_err < 1e-10 && uniform == 1.0 && collapse == 8.0 && same == 1.0 &&
                  orth == 0.0;
  return {ok, fmt("max |err| aux %.1e ortho %.1e; uniform %.17g, collapse(N=8) %.17g, identical %.17g, "
                  "orthogonal %.17g",
                  aux_err, ortho_err, uniform, collapse, same, orth)};
}

Verdict diversity() {
  const auto t0 = Clock::now();
  const std::size_t n = 4, d = 8;
  ParamStore store;
  Rng rng(5);
  // Start from nearly collinear outputs.
  const Tensor base = rng.normal_tensor({d}, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor v = rng.normal_tensor({d}, 0.1);
    for (std::size_t j = 0; j < d; ++j) v[j] += base[j];
    store.add("v" + std::to_string(i), v);
  }
  std::vector<Tensor> outs;
  auto collect = [&] {
    outs.clear();
    for (std::size_t i = 0; i < n; ++i) outs.push_back(store.value("v" + std::to_string(i)));
  };
  collect();
  const double start = gram_offdiag_max(squared_cosine_gram(outs));
  AdamW opt(0.05, 0.0, 0.9, 0.999, 1e-8);
  std::size_t steps = 0;
  for (; steps < 500; ++steps) {
    store.zero_grad();
    Tape tape;
    const auto bind = trainable_binder(tape, store);
    std::vector<Var> vars;
    for (std::size_t i = 0; i < n; ++i) vars.push_back(bind("v" + std::to_string(i)));
    tape.backward(ortho_loss(vars));
    opt.step(store);
  }
  collect();
  const double end = gram_offdiag_max(squared_cosine_gram(outs));
  Tensor stacked({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) stacked.at(i, j) = outs[i][j];
  const auto sv = singular_values(stacked);
  const std::size_t rank = numerical_rank(stacked, 1e-6);
  const double secs = seconds_since(t0);
  return {end < 0.05 && rank == n && secs < 60.0,
          fmt("max off-diagonal cos^2 %.3f -> %.2e after %zu steps, rank %zu (smallest sv %.3g), %.2f s", start, end,
              steps, rank, sv.back(), secs)};
}

Verdict sparse_dense() {
  Rng rng(31);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = 2 + rng.below(7), k = 1 + rng.below(n), r = 1 + rng.below(4);
    const std::size_t d_in = 4 + rng.below(5), d_out = 4 + rng.below(5), b = 1 + rng.below(3),
                      len = 1 + rng.below(6);
    ParamStore store;
    const MoLELayer layer = make_mole_layer(store, "l", MoLEConfig{n, k, r, d_in, d_out}, d_in, 500 + c,
                                            std::nullopt, GateOptions{1.0});
    for (const auto& e : layer.experts) store.value(e.b_id) = rng.normal_tensor({r, d_out}, 0.5);
    std::vector<std::pair<Tensor, Tensor>> experts;
    for (const auto& e : layer.experts) experts.emplace_back(store.value(e.a_id), store.value(e.b_id));
    const Tensor x = rng.normal_tensor({b, len, d_in}, 1.0);
    const double cf = b * len * k >= n ? 1.0 : double(n);
    for (const auto& d : {igr_route(store, layer.gate, rng.normal_tensor({b, d_in}, 1.0), k, len),
                          token_topk_route(store, layer.gate, x, k),
                          expert_choice_route(store, layer.gate, x, k, cf)}) {
      const Tensor dense = oracle::dense_mixture(x.reshaped({b * len, d_in}), store.value(layer.w0_id), experts, d);
      worst = std::max(worst, max_abs_diff(mole_forward(store, layer, x, d).reshaped({b * len, d_out}), dense));
      ++checked;
    }
  }
  return {worst < 1e-10, fmt("%zu layer/policy pairs, max |sparse - dense| %.2e", checked, worst)};
}

const std::vector<std::string> kPolicies = {"igr", "expert_choice", "token_topk"};

Verdict policy_ordering(Runs& runs) {
  std::map<std::string, double> mean;
  double seconds = 0.0;
  bool igr_beats_token = true;
  std::string per_seed;
  for (std::uint64_t s = 0; s < 3; ++s) {
    std::map<std::string, double> loss;
    for (const auto& p : kPolicies) {
      const auto r = runs.get(p + "_seed" + std::to_string(s), default_with(p, s));
      loss[p] = r.final_eval_task;
      mean[p] += r.final_eval_task / 3.0;
      seconds += r.seconds;
    }
    igr_beats_token = igr_beats_token && loss["igr"] < loss["token_topk"];
    per_seed += fmt(" seed%llu %.3g/%.3g/%.3g", static_cast<unsigned long long>(s), loss["igr"],
                    loss["expert_choice"], loss["token_topk"]);
  }
  const bool ok = mean["igr"] <= mean["expert_choice"] && mean["expert_choice"] <= mean["token_topk"] &&
                  igr_beats_token && seconds < 1800.0;
  return {ok, fmt("mean final eval task loss igr %.4g <= expert_choice %.4g <= token_topk %.4g; per seed "
                  "(igr/ec/token):%s; training time %.0f s",
                  mean["igr"], mean["expert_choice"], mean["token_topk"], per_seed.c_str(), seconds)};
}

Verdict signal_and_ortho(Runs& runs) {
  double full = 0.0, pooled = 0.0, gram_on = 0.0, gram_off = 0.0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto with = runs.get("igr_seed" + std::to_string(s), default_with("igr", s));
    auto c = default_with("igr", s);
    c.signal = "pooled_only";
    c.lambda_ortho = 0.0;
    const auto base = runs.get("pooled_noortho_seed" + std::to_string(s), c);
    auto no_ortho = default_with("igr", s);
    no_ortho.lambda_ortho = 0.0;
    const auto off = runs.get("igr_noortho_seed" + std::to_string(s), no_ortho);
    full += with.final_eval_task / 3.0;
    pooled += base.final_eval_task / 3.0;
    gram_on += with.gram_offdiag_mean / 3.0;
    gram_off += off.gram_offdiag_mean / 3.0;
  }
  return {full <= pooled && gram_on < gram_off,
          fmt("mean final eval task loss full+ortho %.4g <= pooled_only %.4g; mean gram off-diagonal "
              "lambda_ortho 0.1 %.4g < 0 %.4g",
              full, pooled, gram_on, gram_off)};
}

Verdict specialization(Runs& runs) {
  bool ok = true;
  std::string detail;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto r = runs.get("igr_seed" + std::to_string(s), default_with("igr", s));
    const std::size_t first = r.snapshot_steps.front(), last = r.snapshot_steps.back();
    const auto early = load_report(r.run_dir, first), late = load_report(r.run_dir, last);
    std::size_t layer = 0;
    for (std::size_t l = 1; l < late.size(); ++l)
      if (late[l].mean_entropy() < late[layer].mean_entropy()) layer = l;
    const double drop = 1.0 - late[layer].mean_entropy() / early[layer].mean_entropy();

    // Dominant map at every evaluation in the last 20% of training.
    const CsvTable evals = read_csv(r.run_dir / "evals.csv");
    const std::size_t c_step = evals.column("step"), c_layer = evals.column("layer"),
                      c_task = evals.column("task"), c_dom = evals.column("dominant_expert");
    std::map<std::size_t, std::map<std::string, std::string>> maps;
    for (const auto& row : evals.rows) {
      const std::size_t step = std::stoul(row[c_step]);
      if (std::stoul(row[c_layer]) != layer || 5 * step < 4 * last) continue;
      maps[step][row[c_task]] = row[c_dom];
    }
    bool stable = maps.size() >= 2;
    for (const auto& [step, m] : maps) stable = stable && m == maps.begin()->second;
    ok = ok && drop >= 0.30 && stable;
    detail += fmt("%sseed%llu layer %zu entropy %.3f -> %.3f (-%.0f%%), map %s over %zu evals",
                  s ? "; " : "", static_cast<unsigned long long>(s), layer, early[layer].mean_entropy(),
                  late[layer].mean_entropy(), 100.0 * drop, stable ? "stable" : "UNSTABLE", maps.size());
  }
  return {ok, detail};
}

Verdict logit_ratio() {
  std::size_t cases = 0, exact = 0;
  for (std::size_t b : {1u, 2u, 7u, 64u})
    for (std::size_t len : {1u, 2u, 16u, 33u, 256u})
      for (std::size_t n : {2u, 8u, 16u}) {
        ++cases;
        const std::size_t token = routing_logit_count(Policy::token_topk, b, len, n);
        const std::size_t igr = routing_logit_count(Policy::igr, b, len, n);
        exact += token == len * igr && double(token) / double(igr) == double(len);
      }
  return {exact == cases, fmt("token/IGR logit count == L in %zu/%zu (B, L, N) cases", exact, cases)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism(const fs::path& root) {
  std::string detail;
  bool ok = true;
  std::vector<ExperimentConfig> configs;
  auto hybrid = default_with("igr+token_topk", 3);
  hybrid.steps = 150;
  auto ec = default_with("expert_choice", 4);
  ec.steps = 100;
  auto noisy = default_with("igr", 5);
  noisy.steps = 150;
  noisy.noise_sigma = 0.1;
  for (const auto& c : {hybrid, ec, noisy}) {
    const fs::path a = root / "det_a", b = root / "det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    run_experiment(c, a);
    run_experiment(c, b);
    const std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
    const bool same = !ma.empty() && ma == mb;
    ok = ok && same;
    detail += fmt("%s%s seed %llu %zu steps: %s (%zu bytes)", detail.empty() ? "" : "; ",
                  c.policy.get<std::string>().c_str(), static_cast<unsigned long long>(c.seed), c.steps,
                  same ? "identical" : "DIFFERENT", ma.size());
    fs::remove_all(a);
    fs::remove_all(b);
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string runs_dir = "acceptance_runs";
  bool reuse = false;
  std::vector<int> only;
  app.add_option("--runs", runs_dir, "Directory for training runs");
  app.add_flag("--reuse", reuse, "Reuse finished runs found in the runs directory");
  app.add_option("--only", only, "Criteria to evaluate")->delimiter(',');
  std::string report_path;
  app.add_option("--report", report_path, "Also write the verdict lines here");
  CLI11_PARSE(app, argc, argv);

  Runs runs{runs_dir, reuse, {}};
  fs::create_directories(runs.root);
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient check on the micro-model", gradients},
      {"instance routing is consistent and unfragmented", instance_routing},
      {"aux and ortho losses match brute-force oracles", loss_oracles},
      {"ortho loss alone diversifies expert outputs", diversity},
      {"sparse top-k equals the dense masked mixture", sparse_dense},
      {"policy ordering igr <= expert_choice <= token_topk", [&] { return policy_ordering(runs); }},
      {"full signal with ortho vs pooled without; ortho lowers Gram overlap", [&] { return signal_and_ortho(runs); }},
      {"routing specializes and settles", [&] { return specialization(runs); }},
      {"routing logit ratio token/IGR equals L", logit_ratio},
      {"re-runs reproduce metrics.csv bitwise", [&] { return determinism(runs.root); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  std::ofstream report;
  if (!report_path.empty()) report.open(report_path);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    const std::string line = fmt("%s criterion %d: %s: %s [%.1f s]", v.pass ? "PASS" : "FAIL", id,
                                 criteria[i].first.c_str(), v.detail.c_str(), seconds_since(t0));
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    if (report) report << line << "\n" << std::flush;
  }
  return failed;
}
