#include "mole/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include <Eigen/QR>
#include <json.hpp>

#include "mole/analysis.hpp"
#include "mole/checkpoint.hpp"
#include "mole/rng.hpp"

namespace mole {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- instructions

std::vector<InstructionRecord> load_instructions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("instruction file not found: " + path.string());
  std::vector<InstructionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      InstructionRecord r;
      r.task = j.at("task").get<std::size_t>();
      r.attrs = j.value("attrs", std::vector<int>{});
      r.text_ids = j.at("text_ids").get<std::vector<int>>();
      if (r.text_ids.empty()) throw std::invalid_argument("empty text_ids");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.task < b.task; });
  for (std::size_t t = 0; t < out.size(); ++t) {
    if (out[t].task != t) throw ConfigError(path.string() + ": tasks must be numbered 0..T-1 once each");
  }
  return out;
}

void save_instructions(const std::vector<InstructionRecord>& records, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    out << json{{"task", r.task}, {"attrs", r.attrs}, {"text_ids", r.text_ids}}.dump() << "\n";
  }
}

// Vocabulary: fillers [0, F), task tokens [F, F+T), attribute tokens after.
std::vector<InstructionRecord> default_instructions(std::size_t tasks, std::size_t filler_tokens,
                                                    std::size_t attr_tokens) {
  std::vector<InstructionRecord> out;
  for (std::size_t t = 0; t < tasks; ++t) {
    InstructionRecord r;
    r.task = t;
    for (std::size_t f = 0; f < filler_tokens; ++f) r.text_ids.push_back(static_cast<int>(f));
    r.text_ids.push_back(static_cast<int>(filler_tokens + t));
    const int attr = static_cast<int>(t % attr_tokens);
    r.attrs = {attr};
    r.text_ids.push_back(static_cast<int>(filler_tokens + tasks) + attr);
    out.push_back(std::move(r));
  }
  return out;
}

std::size_t instruction_vocab(const std::vector<InstructionRecord>& records) {
  int top = -1;
  for (const auto& r : records) {
    for (int id : r.text_ids) {
      if (id < 0) throw ConfigError("negative instruction token id");
      top = std::max(top, id);
    }
  }
  return static_cast<std::size_t>(top + 1);
}

// ------------------------------------------------------------------ task suite

namespace {

// Random matrix with orthonormal columns (D_in >= D_out) or rows.
Tensor random_orthogonal(std::size_t d_in, std::size_t d_out, Rng& rng) {
  const bool tall = d_in >= d_out;
  const std::size_t m = tall ? d_in : d_out, n = tall ? d_out : d_in;
  Eigen::MatrixXd g(m, n);
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, n);
  // Fix column signs so Q does not depend on the Householder convention.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  Tensor out({d_in, d_out});
  for (std::size_t i = 0; i < d_in; ++i) {
    for (std::size_t j = 0; j < d_out; ++j) {
      out.at(i, j) = tall ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                          : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
    }
  }
  return out;
}

}  // namespace

std::vector<TaskSpec> make_task_suite(std::size_t tasks, std::size_t d_in, std::size_t d_out,
                                      std::uint64_t seed, double noise_sigma,
                                      const std::vector<InstructionRecord>& instructions) {
  if (tasks < 2) throw ConfigError("task suite needs T >= 2, got " + std::to_string(tasks));
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  if (!instructions.empty() && instructions.size() != tasks) {
    throw ConfigError("instruction file has " + std::to_string(instructions.size()) +
                      " tasks, config says " + std::to_string(tasks));
  }
  const auto templates = instructions.empty() ? default_instructions(tasks, 2, 4) : instructions;
  std::vector<TaskSpec> suite;
  for (std::size_t t = 0; t < tasks; ++t) {
    Rng rng(mix_seed(seed, t));
    suite.push_back({t, random_orthogonal(d_in, d_out, rng), templates[t].text_ids, noise_sigma});
  }
  return suite;
}

Batch sample_batch(const std::vector<TaskSpec>& suite, const ParamStore& store,
                   const ToyEncoder& encoder, std::size_t batch, std::size_t seq_len,
                   std::uint64_t seed, bool balanced) {
  if (suite.empty()) throw std::invalid_argument("empty task suite");
  const std::size_t d_in = suite.front().target_map.rows();
  const std::size_t d_out = suite.front().target_map.cols();
  Rng rng(seed);
  Batch out;
  out.x = Tensor({batch, seq_len, d_in});
  out.targets = Tensor({batch, seq_len, d_out});
  std::vector<std::vector<int>> texts;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t t = balanced ? b % suite.size() : rng.below(suite.size());
    const TaskSpec& task = suite[t];
    out.task_ids.push_back(t);
    texts.push_back(task.instruction);
    for (std::size_t l = 0; l < seq_len; ++l) {
      for (std::size_t i = 0; i < d_in; ++i) out.x.at(b, l, i) = rng.normal();
      for (std::size_t j = 0; j < d_out; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d_in; ++i) acc += out.x.at(b, l, i) * task.target_map.at(i, j);
        out.targets.at(b, l, j) = acc + task.noise_sigma * rng.normal();
      }
    }
  }
  out.encoding = toy_encode(store, encoder, texts);
  return out;
}

// ----------------------------------------------------------------------- model

Model::Model(const ExperimentConfig& config) : config_(config) {
  config_.validate();
  policy_ = config_.policy_map();
  instructions_ = config_.instructions.empty()
                      ? default_instructions(config_.tasks, config_.filler_tokens, config_.attr_tokens)
                      : load_instructions(config_.instructions);
  const std::size_t len = instructions_.front().text_ids.size();
  for (const auto& r : instructions_) {
    if (r.text_ids.size() != len) throw ConfigError("all instructions must have the same token count");
  }
  const std::uint64_t seed = config_.seed;
  encoder_ = make_toy_encoder(store_, instruction_vocab(instructions_), config_.d_inst,
                              config_.d_signal, mix_seed(seed, 10));
  suite_ = make_task_suite(config_.tasks, config_.d_in, config_.d_out, mix_seed(seed, 20),
                           config_.noise_sigma, instructions_);
  if (uses_prefix()) {
    Rng rng(mix_seed(seed, 25));
    store_.add(kPrefixProjection,
               rng.normal_tensor({config_.d_inst, config_.d_in}, 1.0 / std::sqrt(double(config_.d_inst))),
               /*frozen=*/true);
  }
  if (uses_signal()) {
    perceiver_ = make_perceiver(store_, "signal", config_.d_inst, config_.d_signal,
                                config_.perceiver_layers, mix_seed(seed, 30));
  }
  const GateOptions gate{config_.gate_init_std, config_.gate_hidden, config_.gate_bias};
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const bool igr = policy_.policy_for(l) == Policy::igr;
    const std::size_t gate_in = igr ? config_.d_signal : config_.layer_in_dim(l);
    layers_.push_back(make_mole_layer(store_, "layer" + std::to_string(l), config_.layer_config(l),
                                      gate_in, mix_seed(seed, 40 + l), std::nullopt, gate));
  }
}

bool Model::uses_signal() const {
  for (const auto& e : policy_.entries()) {
    if (e.policy == Policy::igr) return true;
  }
  return false;
}

Batch Model::sample(std::size_t batch, std::uint64_t seed, bool balanced) const {
  return sample_batch(suite_, store_, encoder_, batch, config_.seq_len, seed, balanced);
}

// --------------------------------------------------------------------- forward

ForwardPass forward(const ParamBinder& bind, Tape& tape, const Model& model, const Batch& batch) {
  const ExperimentConfig& c = model.config();
  const std::size_t bsz = batch.x.dim(0), seq = batch.x.dim(1);
  ForwardPass pass;
  pass.prefix_len = model.prefix_len();
  const std::size_t p = pass.prefix_len, total = p + seq;

  Var h = tape.constant(batch.x);
  if (p > 0) {
    // Instruction tokens enter the sequence through a frozen projection.
    const Tensor prefix =
        ad::matmul(tape.constant(batch.encoding.h_inst), bind(kPrefixProjection)).value();
    Tensor joined({bsz, total, c.d_in});
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t l = 0; l < total; ++l) {
        for (std::size_t i = 0; i < c.d_in; ++i) {
          joined.at(b, l, i) = l < p ? prefix.at(b, l, i) : batch.x.at(b, l - p, i);
        }
      }
    }
    h = tape.constant(joined);
  }
  if (model.uses_signal()) {
    pass.z_global = signal_variant(c.signal_mode())(bind, model.perceiver(), batch.encoding, tape);
  }

  const auto& layers = model.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const MoLELayer& layer = layers[l];
    const Policy policy = model.policy_map().policy_for(l);
    pass.layer_inputs.push_back(h);
    Routed routed;
    if (policy == Policy::igr) {
      routed = igr_route(bind, layer.gate, *pass.z_global, c.top_k, total);
    } else {
      Var gate_in = h;
      if (p > 0 && c.token_context == "prefix_mean") {
        const std::size_t width = h.shape().back();
        std::vector<std::size_t> prefix_rows, owner;
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t l2 = 0; l2 < p; ++l2) prefix_rows.push_back(b * total + l2);
          for (std::size_t l2 = 0; l2 < total; ++l2) owner.push_back(b);
        }
        Var ctx = ad::mean_middle(ad::reshape(ad::gather_rows(h, prefix_rows), {bsz, p, width}));
        gate_in = ad::add(h, ad::reshape(ad::gather_rows(ctx, owner), {bsz, total, width}));
      }
      routed = policy == Policy::token_topk
                   ? token_topk_route(bind, layer.gate, gate_in, c.top_k)
                   : expert_choice_route(bind, layer.gate, gate_in, c.top_k, c.capacity_factor);
    }
    Var y = mole_forward(bind, layer, h, routed.decision, routed.probs);
    h = l + 1 < layers.size() ? ad::gelu(y) : y;
    pass.routes.push_back(std::move(routed));
  }

  if (p > 0) {
    std::vector<std::size_t> data_rows;
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t l = 0; l < seq; ++l) data_rows.push_back(b * total + p + l);
    }
    h = ad::reshape(ad::gather_rows(h, std::move(data_rows)), {bsz, seq, c.d_out});
  }
  pass.prediction = h;
  return pass;
}

std::vector<Tensor> expert_gram(const Model& model, const Batch& probe) {
  Tape tape;
  const ParamBinder bind = constant_binder(tape, model.store());
  const ForwardPass pass = forward(bind, tape, model, probe);
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    std::vector<Tensor> outs;
    for (const Var& v : all_expert_outputs(bind, model.layers()[l], pass.layer_inputs[l])) {
      outs.push_back(v.value());
    }
    out.push_back(squared_cosine_gram(outs));
  }
  return out;
}

StepObjective compute_objective(const ParamBinder& bind, const Model& model, const ForwardPass& pass,
                                const Batch& batch, bool ortho_active) {
  const ExperimentConfig& c = model.config();
  const std::size_t n_layers = model.layers().size();
  // A single expert has no pairs to decorrelate.
  ortho_active = ortho_active && c.n_experts >= 2;
  StepObjective obj;
  LossReport& rep = obj.report;

  Var task = ad::mse(pass.prediction, batch.targets);
  rep.task = task.value().item();

  std::vector<Var> aux, ortho;
  for (std::size_t l = 0; l < n_layers; ++l) {
    aux.push_back(aux_loss(pass.routes[l].probs, pass.routes[l].decision));
    rep.aux_per_layer.push_back(aux.back().value().item());
    if (ortho_active) {
      const auto outs = all_expert_outputs(bind, model.layers()[l], pass.layer_inputs[l]);
      ortho.push_back(ad::ortho_loss(outs));
      rep.ortho_per_layer.push_back(ortho.back().value().item());
    } else {
      rep.ortho_per_layer.push_back(0.0);
    }
  }
  const std::vector<double> avg(n_layers, 1.0 / static_cast<double>(n_layers));
  Var aux_mean = ad::linear_combination(aux, avg);
  rep.aux = aux_mean.value().item();

  std::vector<Var> terms = {task, aux_mean};
  std::vector<double> coefs = {1.0, c.lambda_aux};
  if (ortho_active) {
    Var ortho_mean = ad::linear_combination(ortho, avg);
    rep.ortho = ortho_mean.value().item();
    // Logged even when lambda_ortho is zero; the term then carries no weight.
    if (c.lambda_ortho > 0.0) {
      terms.push_back(ortho_mean);
      coefs.push_back(c.lambda_ortho);
    }
  }
  obj.total = ad::linear_combination(terms, coefs);
  rep.total = obj.total.value().item();
  return obj;
}

// ------------------------------------------------------------------- optimiser

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr < 0.0 || weight_decay < 0.0 || eps <= 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 ||
      beta2 >= 1.0) {
    throw ConfigError("invalid AdamW hyper-parameters");
  }
}

void AdamW::step(ParamStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [id, param] : store) {
    if (param.frozen) continue;
    auto it = moments_.find(id);
    if (it == moments_.end()) {
      it = moments_.emplace(id, std::make_pair(Tensor(param.value.shape()), Tensor(param.value.shape()))).first;
    }
    auto w = param.value.data();
    const auto g = param.grad.data();
    auto m = it->second.first.data();
    auto v = it->second.second.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_) + wd_ * w[i];
      w[i] -= lr_ * update;
    }
  }
}

// -------------------------------------------------------------------- training

LossReport train_step(Model& model, const Batch& batch, AdamW& optimizer, std::size_t step) {
  ParamStore& store = model.store();
  store.zero_grad();
  Tape tape;
  const ParamBinder bind = trainable_binder(tape, store);
  const ForwardPass pass = forward(bind, tape, model, batch);
  const bool ortho_active = step > model.config().ortho_warmup;
  StepObjective obj = compute_objective(bind, model, pass, batch, ortho_active);
  const LossReport& r = obj.report;
  if (!std::isfinite(r.total)) {
    throw TrainingError("non-finite loss at step " + std::to_string(step) + ": task=" +
                        format_double(r.task) + " aux=" + format_double(r.aux) +
                        " ortho=" + format_double(r.ortho));
  }
  tape.backward(obj.total);
  for (const auto& [id, param] : store) {
    if (!param.grad.all_finite()) {
      throw TrainingError("non-finite gradient for '" + id + "' at step " + std::to_string(step));
    }
  }
  optimizer.step(store);
  return obj.report;
}

std::vector<std::size_t> default_snapshot_steps(std::size_t steps) {
  std::set<std::size_t> s;
  for (std::size_t pct : {1, 10, 100}) s.insert(std::max<std::size_t>(1, steps * pct / 100));
  return {s.begin(), s.end()};
}

namespace {

struct Evaluation {
  double task = 0.0;
  std::vector<RoutingSnapshot> snapshots;
  std::vector<double> gram_offdiag;
  std::vector<double> consistency;
  std::vector<double> fragmentation;
};

Evaluation evaluate(const Model& model, const Batch& batch, std::size_t step) {
  Tape tape;
  const ParamBinder bind = constant_binder(tape, model.store());
  const ForwardPass pass = forward(bind, tape, model, batch);
  Evaluation ev;
  ev.task = task_loss(pass.prediction.value(), batch.targets);
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const RoutingDecision& d = pass.routes[l].decision;
    ev.snapshots.push_back(routing_snapshot(d, batch.task_ids, model.config().tasks, l, step));
    std::vector<Tensor> outs;
    for (const Var& v : all_expert_outputs(bind, model.layers()[l], pass.layer_inputs[l])) {
      outs.push_back(v.value());
    }
    ev.gram_offdiag.push_back(outs.size() >= 2 ? gram_offdiag_mean(squared_cosine_gram(outs)) : 0.0);
    ev.consistency.push_back(ev.snapshots.back().consistency);
    ev.fragmentation.push_back(ev.snapshots.back().fragmentation);
  }
  return ev;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void write_summary(const RunSummary& s, const std::vector<Evaluation>& history,
                   const std::vector<std::size_t>& history_steps, const fs::path& path) {
  json j;
  j["final_train"] = {{"total", s.final_train.total},
                      {"task", s.final_train.task},
                      {"aux", s.final_train.aux},
                      {"ortho", s.final_train.ortho}};
  j["initial_eval_task"] = s.initial_eval_task;
  j["final_eval_task"] = s.final_eval_task;
  j["gram_offdiag_mean"] = s.gram_offdiag_mean;
  j["consistency"] = s.consistency;
  j["fragmentation"] = s.fragmentation;
  j["routing_logits"] = s.routing_logits;
  j["snapshot_steps"] = s.snapshot_steps;
  j["seconds"] = s.seconds;
  json evals = json::array();
  for (std::size_t i = 0; i < history.size(); ++i) {
    json layers = json::array();
    for (const auto& snap : history[i].snapshots) {
      layers.push_back({{"entropy", snap.mean_entropy()}, {"dominant", snap.dominant_map()}});
    }
    evals.push_back({{"step", history_steps[i]}, {"eval_task", history[i].task}, {"layers", layers}});
  }
  j["evals"] = evals;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

double eval_task_loss(const Model& model, const Batch& batch) {
  Tape tape;
  const ParamBinder bind = constant_binder(tape, model.store());
  return task_loss(forward(bind, tape, model, batch).prediction.value(), batch.targets);
}

ForgettingProbe forgetting_probe(const ExperimentConfig& config, std::size_t steps_per_phase) {
  Model model(config);
  AdamW opt(config);
  const auto& suite = model.suite();
  const auto& c = model.config();
  auto task_batch = [&](std::size_t task, std::size_t batch, std::uint64_t seed) {
    return sample_batch({suite[task]}, model.store(), model.encoder(), batch, c.seq_len, seed);
  };
  const Batch probe0 = task_batch(0, c.eval_batch, mix_seed(c.seed, 0xF0));
  const Batch probe1 = task_batch(1, c.eval_batch, mix_seed(c.seed, 0xF1));
  ForgettingProbe out;
  std::size_t step = 0;
  for (std::size_t phase = 0; phase < 2; ++phase) {
    for (std::size_t s = 0; s < steps_per_phase; ++s) {
      ++step;
      train_step(model, task_batch(phase, c.batch_size, mix_seed(c.seed, 1000 + step)), opt, step);
    }
    if (phase == 0) out.task0_after_phase1 = eval_task_loss(model, probe0);
  }
  out.task0_after_phase2 = eval_task_loss(model, probe0);
  out.task1_after_phase2 = eval_task_loss(model, probe1);
  return out;
}

RunSummary run_experiment(const ExperimentConfig& config, const fs::path& run_dir,
                          const RunOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  fs::create_directories(run_dir);
  save_config(config, run_dir / "config.json");

  Model model(config);
  save_instructions(model.instructions(), run_dir / "instructions.jsonl");
  AdamW optimizer(config);
  const std::size_t n_layers = config.layers;

  RunSummary summary;
  summary.run_dir = run_dir;
  summary.snapshot_steps = options.snapshot_steps.empty() ? default_snapshot_steps(config.steps)
                                                           : options.snapshot_steps;
  const std::set<std::size_t> snapshot_at(summary.snapshot_steps.begin(), summary.snapshot_steps.end());

  const Batch eval_batch = model.sample(config.eval_batch, mix_seed(config.seed, 0xE7A1), true);
  summary.initial_eval_task = evaluate(model, eval_batch, 0).task;

  std::ofstream metrics(run_dir / "metrics.csv");
  std::ofstream evals(run_dir / "evals.csv");
  if (!metrics || !evals) throw std::runtime_error("cannot write logs in " + run_dir.string());
  metrics << "step,task,aux,ortho,total";
  for (std::size_t l = 0; l < n_layers; ++l) metrics << ",aux_l" << l;
  for (std::size_t l = 0; l < n_layers; ++l) metrics << ",ortho_l" << l;
  metrics << "\n";
  evals << "step,layer,task,dominant_expert,entropy,consistency,fragmentation,gram_offdiag_mean,"
           "eval_task_loss\n";

  std::vector<Evaluation> history;
  std::vector<std::size_t> history_steps;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const Batch batch = model.sample(config.batch_size, mix_seed(config.seed, 1000 + step));
    LossReport rep;
    try {
      rep = train_step(model, batch, optimizer, step);
    } catch (const TrainingError& e) {
      std::ofstream diag(run_dir / "diagnostic.json");
      json d = {{"step", step}, {"error", e.what()}, {"task_ids", batch.task_ids}};
      diag << d.dump(2) << "\n";
      throw;
    }
    summary.final_train = rep;
    metrics << step << "," << format_double(rep.task) << "," << format_double(rep.aux) << ","
            << format_double(rep.ortho) << "," << format_double(rep.total);
    for (double v : rep.aux_per_layer) metrics << "," << format_double(v);
    for (double v : rep.ortho_per_layer) metrics << "," << format_double(v);
    metrics << "\n";

    const bool eval_now = step % config.eval_every == 0 || step == config.steps;
    const bool snap_now = snapshot_at.contains(step);
    if (!eval_now && !snap_now) continue;
    Evaluation ev = evaluate(model, eval_batch, step);
    if (snap_now) {
      for (const auto& s : ev.snapshots) {
        write_snapshot(s, run_dir / "routing" / std::to_string(s.layer) / (std::to_string(step) + ".csv"));
      }
    }
    if (eval_now) {
      for (std::size_t l = 0; l < n_layers; ++l) {
        const RoutingSnapshot& s = ev.snapshots[l];
        for (std::size_t t = 0; t < s.tasks(); ++t) {
          evals << step << "," << l << "," << t << "," << s.dominant_expert(t) << ","
                << format_double(s.task_entropy(t)) << "," << format_double(s.consistency) << ","
                << format_double(s.fragmentation) << "," << format_double(ev.gram_offdiag[l]) << ","
                << format_double(ev.task) << "\n";
        }
      }
      if (!options.quiet) {
        std::cerr << "step " << step << "  train " << rep.total << "  eval task " << ev.task << "\n";
      }
      history.push_back(std::move(ev));
      history_steps.push_back(step);
    }
  }
  metrics.close();
  evals.close();

  const Evaluation& last = history.back();
  summary.final_eval_task = last.task;
  summary.gram_offdiag_mean = mean_of(last.gram_offdiag);
  summary.consistency = mean_of(last.consistency);
  summary.fragmentation = mean_of(last.fragmentation);
  const std::size_t total_len = config.seq_len + model.prefix_len();
  for (std::size_t l = 0; l < n_layers; ++l) {
    summary.routing_logits += routing_logit_count(model.policy_map().policy_for(l), config.batch_size,
                                                  total_len, config.n_experts);
  }
  if (config.checkpoint) save_checkpoint(model.store(), run_dir / "checkpoint.bin");
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_summary(summary, history, history_steps, run_dir / "summary.json");
  return summary;
}

}  // namespace mole

namespace mole {

ExperimentConfig micro_config(const std::string& policy) {
  ExperimentConfig c;
  c.layers = 2;
  c.n_experts = 2;
  c.top_k = 1;
  c.rank = 2;
  c.d_in = 3;
  c.d_hidden = 4;
  c.d_out = 3;
  c.d_signal = 4;
  c.d_inst = 4;
  c.seq_len = 3;
  c.tasks = 2;
  c.filler_tokens = 1;
  c.attr_tokens = 2;
  c.policy = policy;
  c.batch_size = 2;
  c.steps = 1;
  c.ortho_warmup = 0;
  return c;
}

std::vector<ModelGradCheck> model_grad_check(bool full, const GradCheckOptions& opts) {
  const std::vector<std::string> policies =
      full ? std::vector<std::string>{"igr", "token_topk", "expert_choice", "igr+token_topk"}
           : std::vector<std::string>{"igr+token_topk"};
  std::vector<ModelGradCheck> out;
  for (const auto& name : policies) {
    Model model(micro_config(name));
    Rng rng(mix_seed(7, out.size()));
    for (auto& [id, p] : model.store()) {
      if (p.frozen) continue;
      for (auto& v : p.value.data()) v += 0.3 * rng.normal();
    }
    const Batch batch = model.sample(2, 11);
    LossFn f = [&](Tape& tape, ParamStore& store) {
      const ParamBinder bind = trainable_binder(tape, store);
      const ForwardPass pass = forward(bind, tape, model, batch);
      return compute_objective(bind, model, pass, batch, true).total;
    };
    out.push_back({name, grad_check(f, model.store(), opts)});
  }
  return out;
}

}  // namespace mole
