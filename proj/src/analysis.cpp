#include "mole/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace mole {

namespace fs = std::filesystem;

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::out_of_range("csv has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a number: '" + s + "'");
  }
  return v;
}

std::size_t parse_index(const std::string& s) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::invalid_argument("not an index: '" + s + "'");
  }
  return v;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out.empty() ? "(none)" : out;
}

}  // namespace

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + " is empty");
  table.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split_line(line);
    if (row.size() != table.header.size()) {
      throw std::runtime_error(path.string() + ": row has " + std::to_string(row.size()) +
                               " fields, header has " + std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_csv(const CsvTable& table, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto emit = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << fields[i];
    out << "\n";
  };
  emit(table.header);
  for (const auto& row : table.rows) emit(row);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

Adjacency chain_adjacency(std::size_t seq_len) {
  Adjacency adj;
  for (std::size_t l = 0; l + 1 < seq_len; ++l) adj.emplace_back(l, l + 1);
  return adj;
}

double fragmentation(const RoutingDecision& decision, const Adjacency& adjacency) {
  if (decision.granularity == Granularity::instance || adjacency.empty() || decision.batch == 0) {
    return 0.0;
  }
  double total = 0.0;
  for (std::size_t b = 0; b < decision.batch; ++b) {
    std::size_t changes = 0;
    for (const auto& [i, j] : adjacency) {
      if (i >= decision.seq_len || j >= decision.seq_len) {
        throw std::out_of_range("adjacency pair outside the sequence");
      }
      if (decision.token_selection(b, i) != decision.token_selection(b, j)) ++changes;
    }
    total += static_cast<double>(changes) / static_cast<double>(adjacency.size());
  }
  return total / static_cast<double>(decision.batch);
}

double fragmentation(const RoutingDecision& decision) {
  return fragmentation(decision, chain_adjacency(decision.seq_len));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double RoutingSnapshot::task_entropy(std::size_t task) const {
  return entropy(distribution.data().subspan(task * n_experts(), n_experts()));
}

double RoutingSnapshot::mean_entropy() const {
  double sum = 0.0;
  std::size_t seen = 0;
  for (std::size_t t = 0; t < tasks(); ++t) {
    if (std::isnan(distribution.at(t, 0))) continue;
    sum += task_entropy(t);
    ++seen;
  }
  return seen ? sum / static_cast<double>(seen) : std::numeric_limits<double>::quiet_NaN();
}

std::size_t RoutingSnapshot::dominant_expert(std::size_t task) const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n_experts(); ++i) {
    if (distribution.at(task, i) > distribution.at(task, best)) best = i;
  }
  return best;
}

std::vector<std::size_t> RoutingSnapshot::dominant_map() const {
  std::vector<std::size_t> out(tasks());
  for (std::size_t t = 0; t < tasks(); ++t) out[t] = dominant_expert(t);
  return out;
}

RoutingSnapshot routing_snapshot(const RoutingDecision& decision,
                                 const std::vector<std::size_t>& task_ids, std::size_t tasks,
                                 std::size_t layer, std::size_t step) {
  if (task_ids.size() != decision.batch) {
    throw std::invalid_argument("task_ids must have one entry per instance");
  }
  const std::size_t n = decision.n_experts;
  const std::size_t per_instance = decision.granularity == Granularity::instance ? 1 : decision.seq_len;
  RoutingSnapshot snap;
  snap.layer = layer;
  snap.step = step;
  snap.distribution = Tensor({tasks, n});
  std::vector<std::size_t> counts(tasks, 0);
  const auto probs = decision.full_probs.data();
  for (std::size_t b = 0; b < decision.batch; ++b) {
    const std::size_t t = task_ids[b];
    if (t >= tasks) throw std::out_of_range("task id " + std::to_string(t) + " out of range");
    for (std::size_t r = 0; r < per_instance; ++r) {
      const std::size_t row = b * per_instance + r;
      for (std::size_t i = 0; i < n; ++i) snap.distribution.at(t, i) += probs[row * n + i];
    }
    counts[t] += per_instance;
  }
  for (std::size_t t = 0; t < tasks; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double& v = snap.distribution.at(t, i);
      v = counts[t] ? v / static_cast<double>(counts[t]) : std::numeric_limits<double>::quiet_NaN();
    }
  }
  snap.consistency = decision.seq_len >= 2 ? consistency(decision) : 1.0;
  snap.fragmentation = fragmentation(decision);
  return snap;
}

void write_snapshot(const RoutingSnapshot& s, const fs::path& path) {
  CsvTable table;
  table.header = {"layer", "step", "task"};
  for (std::size_t i = 0; i < s.n_experts(); ++i) table.header.push_back("p_" + std::to_string(i));
  for (const char* c : {"entropy", "log_n", "consistency", "fragmentation"}) table.header.emplace_back(c);
  const double log_n = std::log(static_cast<double>(s.n_experts()));
  for (std::size_t t = 0; t < s.tasks(); ++t) {
    std::vector<std::string> row = {std::to_string(s.layer), std::to_string(s.step), std::to_string(t)};
    for (std::size_t i = 0; i < s.n_experts(); ++i) row.push_back(format_double(s.distribution.at(t, i)));
    row.push_back(format_double(s.task_entropy(t)));
    row.push_back(format_double(log_n));
    row.push_back(format_double(s.consistency));
    row.push_back(format_double(s.fragmentation));
    table.rows.push_back(std::move(row));
  }
  fs::create_directories(path.parent_path());
  write_csv(table, path);
}

RoutingSnapshot read_snapshot(const fs::path& path) {
  const CsvTable table = read_csv(path);
  std::size_t n = 0;
  while (std::find(table.header.begin(), table.header.end(), "p_" + std::to_string(n)) !=
         table.header.end()) {
    ++n;
  }
  if (n == 0 || table.rows.empty()) throw std::runtime_error(path.string() + " is not a routing snapshot");
  RoutingSnapshot s;
  s.distribution = Tensor({table.rows.size(), n});
  const std::size_t c_layer = table.column("layer"), c_step = table.column("step");
  const std::size_t c_task = table.column("task"), c_p0 = table.column("p_0");
  for (const auto& row : table.rows) {
    const std::size_t t = parse_index(row[c_task]);
    if (t >= table.rows.size()) throw std::runtime_error(path.string() + ": task ids are not dense");
    for (std::size_t i = 0; i < n; ++i) s.distribution.at(t, i) = parse_double(row[c_p0 + i]);
  }
  s.layer = parse_index(table.rows.front()[c_layer]);
  s.step = parse_index(table.rows.front()[c_step]);
  s.consistency = parse_double(table.rows.front()[table.column("consistency")]);
  s.fragmentation = parse_double(table.rows.front()[table.column("fragmentation")]);
  return s;
}

namespace {

std::vector<std::size_t> numeric_entries(const fs::path& dir, bool directories) {
  std::set<std::size_t> out;
  if (!fs::is_directory(dir)) return {};
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() != directories) continue;
    const std::string stem = directories ? entry.path().filename().string() : entry.path().stem().string();
    if (!directories && entry.path().extension() != ".csv") continue;
    try {
      out.insert(parse_index(stem));
    } catch (const std::invalid_argument&) {
    }
  }
  return {out.begin(), out.end()};
}

}  // namespace

std::vector<std::size_t> snapshot_layers(const fs::path& run_dir) {
  return numeric_entries(run_dir / "routing", true);
}

std::vector<std::size_t> snapshot_steps(const fs::path& run_dir, std::size_t layer) {
  return numeric_entries(run_dir / "routing" / std::to_string(layer), false);
}

std::vector<RoutingSnapshot> load_report(const fs::path& run_dir, std::size_t step,
                                         std::optional<std::size_t> layer) {
  if (!fs::is_directory(run_dir)) throw ReportError("run directory not found: " + run_dir.string());
  const auto layers = snapshot_layers(run_dir);
  if (layers.empty()) throw ReportError("no routing snapshots under " + run_dir.string());
  if (layer && std::find(layers.begin(), layers.end(), *layer) == layers.end()) {
    throw ReportError("layer " + std::to_string(*layer) + " not found; valid layers: " + join(layers));
  }
  std::vector<RoutingSnapshot> out;
  for (std::size_t l : layers) {
    if (layer && l != *layer) continue;
    const fs::path file = run_dir / "routing" / std::to_string(l) / (std::to_string(step) + ".csv");
    if (!fs::exists(file)) {
      throw ReportError("no snapshot for step " + std::to_string(step) + "; available steps: " +
                        join(snapshot_steps(run_dir, l)));
    }
    out.push_back(read_snapshot(file));
  }
  return out;
}

std::string format_report(const std::vector<RoutingSnapshot>& snapshots) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(3);
  for (const auto& s : snapshots) {
    out << "layer " << s.layer << " step " << s.step << "  consistency " << s.consistency
        << "  fragmentation " << s.fragmentation << "  log N " << std::log(double(s.n_experts())) << "\n";
    out << "  task  entropy  dominant  distribution\n";
    for (std::size_t t = 0; t < s.tasks(); ++t) {
      out << "  " << t << "     " << s.task_entropy(t) << "    " << s.dominant_expert(t) << "        ";
      for (std::size_t i = 0; i < s.n_experts(); ++i) out << (i ? " " : "") << s.distribution.at(t, i);
      out << "\n";
    }
  }
  return out.str();
}

}  // namespace mole
