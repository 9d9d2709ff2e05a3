#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mole/config.hpp"
#include "mole/experts.hpp"
#include "mole/grad_check.hpp"
#include "mole/losses.hpp"
#include "mole/routing.hpp"
#include "mole/signal.hpp"

namespace mole {

struct TaskSpec {
  std::size_t id = 0;
  Tensor target_map;  // M_t [D_in x D_out], frozen
  std::vector<int> instruction;
  double noise_sigma = 0.0;
};

struct InstructionRecord {
  std::size_t task = 0;
  std::vector<int> attrs;
  std::vector<int> text_ids;
};

// One JSON object per line: {"task": int, "attrs": [int], "text_ids": [int]}.
std::vector<InstructionRecord> load_instructions(const std::filesystem::path& path);
void save_instructions(const std::vector<InstructionRecord>& records, const std::filesystem::path& path);

// Default templates: shared filler tokens, the task token, one attribute token.
std::vector<InstructionRecord> default_instructions(std::size_t tasks, std::size_t filler_tokens,
                                                    std::size_t attr_tokens);
std::size_t instruction_vocab(const std::vector<InstructionRecord>& records);

// T >= 2 tasks with random orthogonal target maps.
std::vector<TaskSpec> make_task_suite(std::size_t tasks, std::size_t d_in, std::size_t d_out,
                                      std::uint64_t seed, double noise_sigma = 0.0,
                                      const std::vector<InstructionRecord>& instructions = {});

struct Batch {
  Tensor x;        // [B x L x D_in]
  Tensor targets;  // [B x L x D_out]
  InstructionEncoding encoding;
  std::vector<std::size_t> task_ids;
};

// With `balanced`, instance b gets task b mod T instead of a uniform draw.
Batch sample_batch(const std::vector<TaskSpec>& suite, const ParamStore& store,
                   const ToyEncoder& encoder, std::size_t batch, std::size_t seq_len,
                   std::uint64_t seed, bool balanced = false);

// Frozen backbone of stacked MoLE blocks plus the routing-signal module.
class Model {
 public:
  explicit Model(const ExperimentConfig& config);

  const ExperimentConfig& config() const { return config_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const std::vector<MoLELayer>& layers() const { return layers_; }
  const LayerPolicyMap& policy_map() const { return policy_; }
  const PerceiverBottleneck& perceiver() const { return perceiver_; }
  const ToyEncoder& encoder() const { return encoder_; }
  const std::vector<TaskSpec>& suite() const { return suite_; }
  const std::vector<InstructionRecord>& instructions() const { return instructions_; }

  // Token-level layers see the instruction tokens as a sequence prefix.
  bool uses_prefix() const { return policy_.any_token_level(); }
  bool uses_signal() const;
  std::size_t prefix_len() const { return uses_prefix() ? suite_.front().instruction.size() : 0; }

  Batch sample(std::size_t batch, std::uint64_t seed, bool balanced = false) const;

 private:
  ExperimentConfig config_;
  ParamStore store_;
  std::vector<MoLELayer> layers_;
  LayerPolicyMap policy_;
  PerceiverBottleneck perceiver_;
  ToyEncoder encoder_;
  std::vector<InstructionRecord> instructions_;
  std::vector<TaskSpec> suite_;
};

inline constexpr const char* kPrefixProjection = "encoder.prefix_proj";

struct ForwardPass {
  Var prediction;                  // [B x L x D_out], data positions only
  std::vector<Routed> routes;      // per layer
  std::vector<Var> layer_inputs;   // per layer, [B x L_total x width]
  std::optional<Var> z_global;
  std::size_t prefix_len = 0;
};

ForwardPass forward(const ParamBinder& bind, Tape& tape, const Model& model, const Batch& batch);

// Squared-cosine Gram of all experts' raw outputs on the probe batch, one
// N x N matrix per layer. Zero-output experts give NaN columns.
std::vector<Tensor> expert_gram(const Model& model, const Batch& probe);

struct StepObjective {
  LossReport report;
  Var total;
};

// Training objective: task MSE plus weighted aux and ortho terms
// averaged over layers. Ortho is only included when `ortho_active`.
StepObjective compute_objective(const ParamBinder& bind, const Model& model, const ForwardPass& pass,
                                const Batch& batch, bool ortho_active);

// Adam with decoupled weight decay over the non-frozen parameters.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1, double beta2, double eps);
  explicit AdamW(const ExperimentConfig& c)
      : AdamW(c.lr, c.weight_decay, c.beta1, c.beta2, c.adam_eps) {}

  void step(ParamStore& store);
  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>, std::less<>> moments_;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One optimisation step (1-based `step`). Throws TrainingError on a
// non-finite loss without touching the parameters.
LossReport train_step(Model& model, const Batch& batch, AdamW& optimizer, std::size_t step);

struct RunOptions {
  bool quiet = true;
  // Steps at which routing snapshots are written; empty -> {1%, 10%, 100%}.
  std::vector<std::size_t> snapshot_steps;
};

struct RunSummary {
  std::filesystem::path run_dir;
  LossReport final_train;
  double final_eval_task = 0.0;
  double initial_eval_task = 0.0;
  double gram_offdiag_mean = 0.0;
  double consistency = 0.0;
  double fragmentation = 0.0;
  std::size_t routing_logits = 0;
  std::vector<std::size_t> snapshot_steps;
  double seconds = 0.0;
};

std::vector<std::size_t> default_snapshot_steps(std::size_t steps);

// Task MSE of the model on a batch, no gradients.
double eval_task_loss(const Model& model, const Batch& batch);

struct ForgettingProbe {
  double task0_after_phase1 = 0.0;
  double task0_after_phase2 = 0.0;
  double task1_after_phase2 = 0.0;
  double retention() const { return task0_after_phase2 / task0_after_phase1; }
};

// Trains on task 0 only, then on task 1 only, `steps_per_phase` steps each,
// and tracks task-0 loss on a fixed held-out batch.
ForgettingProbe forgetting_probe(const ExperimentConfig& config, std::size_t steps_per_phase);

// Trains from scratch and writes config.json, metrics.csv, evals.csv,
// routing/<layer>/<step>.csv, checkpoint.bin and summary.json into run_dir.
RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& run_dir,
                          const RunOptions& options = {});

// 2 layers, N=2, r=2, B=2, L=3.
ExperimentConfig micro_config(const std::string& policy);

struct ModelGradCheck {
  std::string policy;
  GradCheckReport report;
};

// Gradient check of the full objective (ortho active) on the micro-model with
// every trainable parameter moved to a random point, so zero-initialised
// expert B matrices do not hide the gate and A gradients. `full` covers every
// policy; otherwise only the igr+token_topk hybrid.
std::vector<ModelGradCheck> model_grad_check(bool full, const GradCheckOptions& opts = {});

}  // namespace mole
