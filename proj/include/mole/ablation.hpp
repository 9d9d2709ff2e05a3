#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mole/config.hpp"
#include "mole/training.hpp"

namespace mole {

struct AblationCell {
  std::string label;
  nlohmann::json overrides;  // merged onto the base config
};

// One axis of variation crossed with a list of seeds.
//
//   {"base": {...} | "base.json", "axis": "policy", "values": ["igr", "token_topk"],
//    "seeds": [0, 1, 2], "out": "runs/policy"}
//
// Axes policy, signal and ortho map values onto the matching config field
// (ortho sets lambda_ortho). Any axis may instead list explicit
// "cells": [{"label": ..., "overrides": {...}}].
struct AblationPlan {
  ExperimentConfig base;
  std::string axis;
  std::vector<AblationCell> cells;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out_dir;

  ExperimentConfig config_for(const AblationCell& cell, std::uint64_t seed) const;
  std::filesystem::path run_dir(const AblationCell& cell, std::uint64_t seed) const;
};

AblationPlan parse_ablation(const nlohmann::json& spec, const std::filesystem::path& base_dir);
AblationPlan load_ablation(const std::filesystem::path& path);

struct AblationResult {
  std::string label;
  std::uint64_t seed = 0;
  RunSummary summary;
};

// Runs every (cell, seed) pair and writes out_dir/comparison.csv. Refuses to
// reuse existing run directories unless `force`.
std::vector<AblationResult> run_ablation(const AblationPlan& plan, bool force,
                                         const RunOptions& options = {});

}  // namespace mole
