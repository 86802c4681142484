#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace promptrestore {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Parameters by dotted name, each underlying tensor listed once (modules
/// registered under several parents keep their first name).
NamedTensors unique_named_parameters(const torch::nn::Module& module);

/// Adam with decoupled weight decay. Parameters without a gradient are skipped.
class AdamW {
 public:
  struct Options {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
  };

  AdamW(NamedTensors params, Options options);

  void zero_grad();
  /// One update at the given learning rate.
  void step(double lr);
  void step() { step(options_.lr); }

  int64_t step_count() const { return step_count_; }
  const Options& options() const { return options_; }
  const NamedTensors& parameters() const { return params_; }

  /// Moment estimates as "exp_avg.<name>" / "exp_avg_sq.<name>".
  NamedTensors state_tensors() const;
  void load_state(const NamedTensors& state, int64_t step_count);

 private:
  NamedTensors params_;
  std::vector<torch::Tensor> exp_avg_;
  std::vector<torch::Tensor> exp_avg_sq_;
  Options options_;
  int64_t step_count_ = 0;
};

}  // namespace promptrestore
