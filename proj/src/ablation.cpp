#include "mole/ablation.hpp"

#include <fstream>
#include <map>
#include <set>

#include "mole/analysis.hpp"

namespace mole {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string label_of(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number()) return format_double(v.get<double>());
  return v.dump();
}

}  // namespace

ExperimentConfig AblationPlan::config_for(const AblationCell& cell, std::uint64_t seed) const {
  json merged = base;
  for (const auto& [key, value] : cell.overrides.items()) merged[key] = value;
  merged["seed"] = seed;
  ExperimentConfig c = merged.get<ExperimentConfig>();
  c.validate();
  return c;
}

fs::path AblationPlan::run_dir(const AblationCell& cell, std::uint64_t seed) const {
  return out_dir / cell.label / ("seed" + std::to_string(seed));
}

AblationPlan parse_ablation(const json& spec, const fs::path& base_dir) {
  if (!spec.is_object()) throw ConfigError("ablation matrix must be a JSON object");
  AblationPlan plan;
  if (spec.contains("base")) {
    const json& b = spec.at("base");
    plan.base = b.is_string() ? load_config(base_dir / b.get<std::string>()) : b.get<ExperimentConfig>();
  }
  plan.axis = spec.value("axis", std::string("custom"));
  if (spec.contains("cells")) {
    for (const auto& c : spec.at("cells")) {
      plan.cells.push_back({c.at("label").get<std::string>(), c.value("overrides", json::object())});
    }
  } else if (spec.contains("values")) {
    static const std::map<std::string, std::string> field = {
        {"policy", "policy"}, {"signal", "signal"}, {"ortho", "lambda_ortho"}};
    const auto it = field.find(plan.axis);
    if (it == field.end()) {
      throw ConfigError("axis '" + plan.axis + "' needs explicit cells (values work for policy, signal, ortho)");
    }
    for (const auto& v : spec.at("values")) plan.cells.push_back({label_of(v), json{{it->second, v}}});
  }
  if (plan.cells.empty()) throw ConfigError("ablation matrix has no cells");
  std::set<std::string> labels;
  for (const auto& c : plan.cells) {
    if (c.label.empty() || c.label.find_first_of("/\\") != std::string::npos) {
      throw ConfigError("invalid cell label '" + c.label + "'");
    }
    if (!labels.insert(c.label).second) throw ConfigError("duplicate cell label '" + c.label + "'");
  }
  plan.seeds = spec.value("seeds", std::vector<std::uint64_t>{0, 1, 2});
  if (plan.seeds.empty()) throw ConfigError("ablation matrix has no seeds");
  if (std::set<std::uint64_t>(plan.seeds.begin(), plan.seeds.end()).size() != plan.seeds.size()) {
    throw ConfigError("ablation seeds must be distinct");
  }
  const fs::path out = spec.value("out", std::string("runs/ablation"));
  plan.out_dir = out.is_relative() ? base_dir / out : out;
  // Surface bad overrides before any training starts.
  for (const auto& c : plan.cells) (void)plan.config_for(c, plan.seeds.front());
  return plan;
}

AblationPlan load_ablation(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config not found: " + path.string());
  json spec;
  try {
    in >> spec;
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("matrix is not valid JSON: ") + e.what());
  }
  return parse_ablation(spec, path.parent_path());
}

std::vector<AblationResult> run_ablation(const AblationPlan& plan, bool force, const RunOptions& options) {
  if (!force) {
    for (const auto& c : plan.cells) {
      for (auto s : plan.seeds) {
        const fs::path dir = plan.run_dir(c, s);
        if (fs::exists(dir) && !fs::is_empty(dir)) {
          throw ConfigError("run directory " + dir.string() + " already exists; pass --force to overwrite");
        }
      }
    }
  }
  std::vector<AblationResult> results;
  for (const auto& c : plan.cells) {
    for (auto s : plan.seeds) {
      const fs::path dir = plan.run_dir(c, s);
      if (force) fs::remove_all(dir);
      results.push_back({c.label, s, run_experiment(plan.config_for(c, s), dir, options)});
    }
  }

  CsvTable table;
  table.header = {"label", "seed", "initial_eval_task", "final_eval_task", "final_train_total",
                  "gram_offdiag_mean", "consistency", "fragmentation", "routing_logits"};
  auto row_of = [](const std::string& label, const std::string& seed, double init, double fin,
                   double train, double gram, double cons, double frag, double logits) {
    return std::vector<std::string>{label, seed, format_double(init), format_double(fin),
                                    format_double(train), format_double(gram), format_double(cons),
                                    format_double(frag), format_double(logits)};
  };
  for (const auto& r : results) {
    const auto& s = r.summary;
    table.rows.push_back(row_of(r.label, std::to_string(r.seed), s.initial_eval_task, s.final_eval_task,
                                s.final_train.total, s.gram_offdiag_mean, s.consistency,
                                s.fragmentation, static_cast<double>(s.routing_logits)));
  }
  for (const auto& c : plan.cells) {
    double v[7] = {};
    double n = 0.0;
    for (const auto& r : results) {
      if (r.label != c.label) continue;
      const auto& s = r.summary;
      const double add[7] = {s.initial_eval_task, s.final_eval_task, s.final_train.total,
                             s.gram_offdiag_mean, s.consistency, s.fragmentation,
                             static_cast<double>(s.routing_logits)};
      for (int i = 0; i < 7; ++i) v[i] += add[i];
      n += 1.0;
    }
    for (double& x : v) x /= n;
    table.rows.push_back(row_of(c.label, "mean", v[0], v[1], v[2], v[3], v[4], v[5], v[6]));
  }
  fs::create_directories(plan.out_dir);
  write_csv(table, plan.out_dir / "comparison.csv");
  return results;
}

}  // namespace mole
