#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "changetitans/data.hpp"
#include "changetitans/metrics.hpp"
#include "changetitans/pipeline.hpp"
#include "changetitans/serialize.hpp"

namespace ctitans {

/// Raised when the loss or a gradient goes non-finite. `module` names the
/// first forward stage whose output was non-finite (or the parameter whose
/// gradient was, when the forward pass is clean).
class NonFiniteError : public NumericError {
 public:
  NonFiniteError(std::string module, std::size_t step, const std::string& what)
      : NumericError(what), module_(std::move(module)), step_(step) {}
  const std::string& module() const { return module_; }
  std::size_t step() const { return step_; }

 private:
  std::string module_;
  std::size_t step_;
};

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. max_norm = 0 leaves them alone.
Scalar clip_grad_norm(const ParamList& params, Scalar max_norm);
Scalar grad_norm(const ParamList& params);

/// First forward stage whose output contains a non-finite value, or "" when
/// every stage is finite.
std::string first_nonfinite_module(const ChangeTitans& model, const SamplePair& sample);

/// Loss of one sample with the tape recording.
Tensor sample_loss(const ChangeTitans& model, const SamplePair& sample);

/// Outer-loop optimizer over every learnable tensor of a model. One sample
/// per step, visiting the dataset in order.
class Trainer {
 public:
  Trainer(ChangeTitans& model, const TrainConfig& cfg);

  /// One optimizer step on `sample`; returns the loss before the update.
  Scalar step(const SamplePair& sample);
  /// Runs until `step_count() == until`, cycling through `data`. Calls
  /// `on_step(step, loss)` after every step.
  std::vector<Scalar> run(const std::vector<SamplePair>& data, std::size_t until,
                          const std::function<void(std::size_t, Scalar)>& on_step = {});

  std::size_t step_count() const { return steps_; }
  const TrainConfig& config() const { return cfg_; }
  /// Optimizer buffers under "<param>.m1" / "<param>.m2".
  NamedTensors state() const;
  void load_state(const NamedTensors& state, std::size_t steps);

 private:
  ChangeTitans& model_;
  TrainConfig cfg_;
  ParamList params_;
  std::vector<std::vector<Scalar>> m1_, m2_;
  std::size_t steps_ = 0;
};

/// Evaluates the model's binary masks against the sample masks.
std::vector<MetricReport> evaluate_model(const ChangeTitans& model, const std::vector<SamplePair>& data,
                                         double tau = 2.0, double trimap_width = 3.0);
/// Pixel F1 of the pooled confusion counts over `data`.
double dataset_f1(const ChangeTitans& model, const std::vector<SamplePair>& data);

struct Checkpoint {
  RunConfig config;
  std::uint64_t config_hash = 0;
  std::size_t step = 0;
  NamedTensors weights;
  NamedTensors optimizer;
  std::vector<Scalar> loss_trace;
};

/// Directory layout: checkpoint.txt (format line, hash, step), config.txt,
/// weights.tcdt(+.manifest), optimizer.tcdt(+.manifest), loss.csv.
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, const ChangeTitans& model,
                     const Trainer* trainer, const std::vector<Scalar>& loss_trace);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
/// Copies checkpoint weights into `model`; names and shapes must match exactly.
void assign_weights(ChangeTitans& model, const NamedTensors& weights);

/// Versioned loss-trace CSV ("step,loss").
std::string loss_csv(const std::vector<Scalar>& losses, std::size_t first_step = 1);

}  // namespace ctitans
