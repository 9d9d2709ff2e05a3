#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mole/ablation.hpp"
#include "mole/analysis.hpp"
#include "mole/training.hpp"
#include "oracles.hpp"

using namespace mole;
namespace fs = std::filesystem;

namespace {

RoutingDecision token_decision(std::size_t batch, std::size_t len, const std::vector<int>& per_token) {
  RoutingDecision d;
  d.policy = Policy::token_topk;
  d.granularity = Granularity::token;
  d.batch = batch;
  d.seq_len = len;
  d.n_experts = 8;
  d.slots = 1;
  for (int e : per_token) {
    d.indices.push_back(e);
    d.weights.push_back(0.5);
  }
  return d;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mole_test_analysis_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("fragmentation examples") {
  CHECK(fragmentation(token_decision(1, 4, {0, 1, 0, 1})) == 1.0);
  CHECK(fragmentation(token_decision(1, 4, {2, 2, 2, 2})) == 0.0);
  CHECK(fragmentation(token_decision(1, 5, {2, 2, 3, 3, 3})) == 0.25);
  CHECK(fragmentation(token_decision(2, 3, {0, 0, 0, 0, 1, 2})) == 0.5);
  CHECK(fragmentation(token_decision(1, 1, {3})) == 0.0);

  const auto d = token_decision(1, 4, {0, 1, 0, 0});
  CHECK(fragmentation(d, {{0, 2}, {2, 3}}) == 0.0);
  CHECK(fragmentation(d, {{0, 1}}) == 1.0);
  CHECK_THROWS_AS(fragmentation(d, {{0, 4}}), std::out_of_range);

  ParamStore store;
  Rng rng(2);
  const GateNet gate = make_gate(store, "g", 4, 8, rng, 1.0);
  const auto igr = igr_route(store, gate, rng.normal_tensor({3, 4}, 1.0), 3, 9);
  CHECK(fragmentation(igr) == 0.0);
}

TEST_CASE("fragmentation of random token routing matches pair counting") {
  ParamStore store;
  Rng rng(6);
  const GateNet gate = make_gate(store, "g", 5, 8, rng, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + trial % 3, l = 2 + trial % 11;
    const auto d = token_topk_route(store, gate, rng.normal_tensor({b, l, 5}, 1.0), 1);
    CHECK(fragmentation(d) == doctest::Approx(oracle::fragmentation(d)).epsilon(1e-15));
  }
}

TEST_CASE("entropy") {
  const std::vector<double> uniform(4, 0.25), peaked = {1.0, 0.0, 0.0};
  CHECK(entropy(uniform) == doctest::Approx(std::log(4.0)));
  CHECK(entropy(peaked) == 0.0);
  const std::vector<double> half = {0.5, 0.5};
  CHECK(entropy(half) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("routing snapshot") {
  RoutingDecision d;
  d.batch = 3;
  d.seq_len = 2;
  d.n_experts = 2;
  d.slots = 1;
  d.indices = {0, 1, 0};
  d.weights = {0.9, 0.6, 0.7};
  d.full_probs = Tensor({3, 1, 2}, {0.9, 0.1, 0.4, 0.6, 0.7, 0.3});
  const auto s = routing_snapshot(d, {0, 1, 0}, 3, 1, 40);
  CHECK(s.layer == 1);
  CHECK(s.step == 40);
  CHECK(s.distribution.at(0, 0) == doctest::Approx(0.8));
  CHECK(s.distribution.at(1, 1) == doctest::Approx(0.6));
  CHECK(std::isnan(s.distribution.at(2, 0)));
  CHECK(s.dominant_map()[0] == 0);
  CHECK(s.dominant_map()[1] == 1);
  CHECK(s.consistency == 1.0);
  CHECK(s.fragmentation == 0.0);
  CHECK(s.mean_entropy() == doctest::Approx((entropy(std::vector<double>{0.8, 0.2}) +
                                            entropy(std::vector<double>{0.4, 0.6})) / 2));
  CHECK_THROWS(routing_snapshot(d, {0, 1}, 3, 0, 0));
  CHECK_THROWS(routing_snapshot(d, {0, 1, 5}, 3, 0, 0));
}

TEST_CASE("csv and snapshot round trip") {
  const fs::path dir = scratch("csv");
  CsvTable t;
  t.header = {"a", "b"};
  t.rows = {{"1", format_double(0.1)}, {"x", format_double(std::nan(""))}};
  fs::create_directories(dir);
  write_csv(t, dir / "t.csv");
  const CsvTable back = read_csv(dir / "t.csv");
  CHECK(back.header == t.header);
  CHECK(back.rows == t.rows);
  CHECK(back.column("b") == 1);
  CHECK_THROWS(back.column("c"));
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);

  Rng rng(3);
  RoutingSnapshot s;
  s.layer = 2;
  s.step = 17;
  s.distribution = Tensor({3, 4});
  for (std::size_t t2 = 0; t2 < 3; ++t2) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) sum += s.distribution.at(t2, i) = rng.uniform();
    for (std::size_t i = 0; i < 4; ++i) s.distribution.at(t2, i) /= sum;
  }
  s.consistency = 0.375;
  s.fragmentation = 1.0 / 7.0;
  write_snapshot(s, dir / "routing" / "2" / "17.csv");
  const auto r = read_snapshot(dir / "routing" / "2" / "17.csv");
  CHECK(r.layer == 2);
  CHECK(r.step == 17);
  CHECK(r.distribution == s.distribution);
  CHECK(r.consistency == s.consistency);
  CHECK(r.fragmentation == s.fragmentation);
  const CsvTable raw = read_csv(dir / "routing" / "2" / "17.csv");
  CHECK(raw.header == std::vector<std::string>{"layer", "step", "task", "p_0", "p_1", "p_2", "p_3", "entropy",
                                               "log_n", "consistency", "fragmentation"});

  std::ofstream(dir / "bad.csv") << "a,b\n1\n";
  CHECK_THROWS(read_csv(dir / "bad.csv"));
  fs::remove_all(dir);
}

TEST_CASE("load_report lists what exists") {
  const fs::path dir = scratch("report");
  RoutingSnapshot s;
  s.distribution = Tensor({2, 2}, {0.5, 0.5, 1.0, 0.0});
  for (std::size_t layer : {0u, 1u})
    for (std::size_t step : {1u, 10u}) {
      s.layer = layer;
      s.step = step;
      write_snapshot(s, dir / "routing" / std::to_string(layer) / (std::to_string(step) + ".csv"));
    }
  CHECK(load_report(dir, 10).size() == 2);
  CHECK(load_report(dir, 1, 1).front().layer == 1);
  try {
    load_report(dir, 5);
    FAIL("expected ReportError");
  } catch (const ReportError& e) {
    CHECK(std::string(e.what()) == "no snapshot for step 5; available steps: 1, 10");
  }
  try {
    load_report(dir, 1, 7);
    FAIL("expected ReportError");
  } catch (const ReportError& e) {
    CHECK(std::string(e.what()) == "layer 7 not found; valid layers: 0, 1");
  }
  CHECK_THROWS_AS(load_report(dir / "nope", 1), ReportError);
  const std::string text = format_report(load_report(dir, 1));
  CHECK(text.find("layer 1 step 1") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("expert gram") {
  ExperimentConfig c = micro_config("igr");
  c.n_experts = 3;
  Model model(c);
  const Batch probe = model.sample(4, 1);
  SUBCASE("fresh experts are zero and flagged") {
    for (const Tensor& g : expert_gram(model, probe)) {
      CHECK(g.shape() == Shape{3, 3});
      for (double v : g.data()) CHECK(std::isnan(v));
      CHECK(std::isnan(gram_offdiag_mean(g)));
    }
  }
  SUBCASE("duplicated experts have unit off-diagonals") {
    Rng rng(4);
    for (const auto& layer : model.layers()) {
      const auto& e = layer.experts;
      const Tensor b = rng.normal_tensor(model.store().value(e[0].b_id).shape(), 1.0);
      for (const auto& x : e) {
        model.store().value(x.a_id) = model.store().value(e[0].a_id);
        model.store().value(x.b_id) = b;
      }
    }
    for (const Tensor& g : expert_gram(model, probe))
      for (double v : g.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("ablation plans") {
  const fs::path dir = scratch("ablate");
  fs::create_directories(dir);
  nlohmann::json base = micro_config("igr");
  base["steps"] = 3;
  base["eval_every"] = 2;

  auto spec = nlohmann::json{{"base", base}, {"axis", "policy"}, {"values", {"igr", "token_topk"}},
                             {"seeds", {0, 1}}, {"out", (dir / "out").string()}};
  const AblationPlan plan = parse_ablation(spec, dir);
  REQUIRE(plan.cells.size() == 2);
  CHECK(plan.config_for(plan.cells[1], 1).policy == "token_topk");
  CHECK(plan.config_for(plan.cells[1], 1).seed == 1);
  CHECK(plan.run_dir(plan.cells[0], 1) == dir / "out" / "igr" / "seed1");

  auto ortho = spec;
  ortho["axis"] = "ortho";
  ortho["values"] = {0.0, 0.1};
  const AblationPlan op = parse_ablation(ortho, dir);
  CHECK(op.config_for(op.cells[1], 0).lambda_ortho == 0.1);

  auto cells = spec;
  cells.erase("values");
  cells["axis"] = "mole";
  cells["cells"] = {{{"label", "k1"}, {"overrides", {{"top_k", 1}}}}};
  CHECK(parse_ablation(cells, dir).config_for(parse_ablation(cells, dir).cells[0], 0).top_k == 1);

  auto empty = spec;
  empty["values"] = nlohmann::json::array();
  CHECK_THROWS_AS(parse_ablation(empty, dir), ConfigError);
  auto dup = spec;
  dup["values"] = {"igr", "igr"};
  CHECK_THROWS_AS(parse_ablation(dup, dir), ConfigError);
  auto invalid = cells;
  invalid["cells"][0]["overrides"] = {{"top_k", 5}};
  CHECK_THROWS_AS(parse_ablation(invalid, dir), ConfigError);
  CHECK_THROWS(load_ablation(dir / "missing.json"));

  const auto results = run_ablation(plan, false);
  CHECK(results.size() == 4);
  const CsvTable cmp = read_csv(dir / "out" / "comparison.csv");
  CHECK(cmp.rows.size() == 6);
  CHECK(cmp.header.front() == "label");
  CHECK_THROWS(run_ablation(plan, false));
  CHECK(run_ablation(plan, true).size() == 4);
  // Re-running a cell reproduces its row.
  CHECK(read_csv(dir / "out" / "comparison.csv").rows == cmp.rows);
  fs::remove_all(dir);
}
