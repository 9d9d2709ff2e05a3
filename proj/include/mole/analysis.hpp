#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mole/routing.hpp"
#include "mole/tensor.hpp"

namespace mole {

// Plain comma-separated table, no quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const CsvTable& table, const std::filesystem::path& path);
// Shortest round-trip representation of a double.
std::string format_double(double v);

// Within-instance position pairs considered adjacent.
using Adjacency = std::vector<std::pair<std::size_t, std::size_t>>;
Adjacency chain_adjacency(std::size_t seq_len);

// Share of adjacent token pairs whose selected sets differ, averaged over the
// batch. Instance-level decisions always give 0.
double fragmentation(const RoutingDecision& decision, const Adjacency& adjacency);
double fragmentation(const RoutingDecision& decision);

// Natural-log entropy of a probability vector; 0 * log 0 = 0.
double entropy(std::span<const double> p);

// Per-task mean routing distribution at one layer and step.
struct RoutingSnapshot {
  std::size_t layer = 0;
  std::size_t step = 0;
  Tensor distribution;  // [T x N], rows sum to 1
  double consistency = 1.0;
  double fragmentation = 0.0;

  std::size_t tasks() const { return distribution.rows(); }
  std::size_t n_experts() const { return distribution.cols(); }
  double task_entropy(std::size_t task) const;
  double mean_entropy() const;
  std::size_t dominant_expert(std::size_t task) const;
  std::vector<std::size_t> dominant_map() const;
};

// Averages full_probs over all routing rows of each task. Tasks absent from
// the batch get a NaN row.
RoutingSnapshot routing_snapshot(const RoutingDecision& decision,
                                 const std::vector<std::size_t>& task_ids, std::size_t tasks,
                                 std::size_t layer, std::size_t step);

void write_snapshot(const RoutingSnapshot& snapshot, const std::filesystem::path& path);
RoutingSnapshot read_snapshot(const std::filesystem::path& path);

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Available snapshot steps and layers in a run directory.
std::vector<std::size_t> snapshot_layers(const std::filesystem::path& run_dir);
std::vector<std::size_t> snapshot_steps(const std::filesystem::path& run_dir, std::size_t layer);

// Loads the snapshots of `step` (all layers, or one). Throws ReportError
// listing what exists when the step or layer is missing.
std::vector<RoutingSnapshot> load_report(const std::filesystem::path& run_dir, std::size_t step,
                                         std::optional<std::size_t> layer = std::nullopt);
std::string format_report(const std::vector<RoutingSnapshot>& snapshots);

}  // namespace mole
