#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "quadgate/model.hpp"
#include "quadgate/transmix.hpp"

namespace qg {

// Per-level loss weights w_l = N / (c_l * k); empty levels get weight 0
// (they can never be looked up for an in-range score anyway).
struct WeightTable {
  Modality modality = Modality::cip;
  std::vector<double> weights;  // one per score level
  long total = 0;
  int k = 0;

  double weight_for(double score) const {
    return weights[static_cast<std::size_t>(nearest_level(modality, score))];
  }
};

WeightTable build_weight_table(const std::vector<long>& counts, long total, Modality modality);

// Mean over the batch of w_i * |y_i - yhat_i| with w_i looked up from the
// target's nearest level. Differentiable in preds (subgradient 0 at zero
// error).
Tensor weighted_l1_loss(const Tensor& preds, const std::vector<double>& targets,
                        const WeightTable& table);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay:
//   p <- p - lr * (mhat / (sqrt(vhat) + eps) + wd * p)
// with bias-corrected first/second moments. Parameters with no gradient are
// treated as having a zero gradient (decay still applies).
class AdamW {
 public:
  AdamW(AdamWConfig cfg, const ParamList& params);

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long step_count() const { return step_; }

  // One update over all parameters; throws numeric_error on non-finite
  // gradients before touching any parameter.
  void step(const ParamList& params);

 private:
  AdamWConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Cosine annealing with warm restarts:
//   lr = eta_min + (eta_max - eta_min) * (1 + cos(pi * t/T)) / 2,
// restarting with T <- mult*T when t reaches T.
struct CosineWarmRestarts {
  double eta_max = 1e-5;
  double eta_min = 0.0;
  long period = 100;
  long t = 0;
  int mult = 2;

  double lr() const;
  void tick();
};

struct Metrics {
  double mae = 0.0;
  double pc = std::numeric_limits<double>::quiet_NaN();  // NaN marks undefined
  double ae_sd = 0.0;

  bool pc_defined() const { return !std::isnan(pc); }
};

// MAE, sample Pearson correlation and the population standard deviation of
// absolute errors. PC is left undefined (NaN) when the targets are constant.
Metrics evaluate(const std::vector<double>& preds, const std::vector<double>& targets);

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  AdamWConfig optimizer{1e-3, 0.5, 0.99, 1e-8, 0.01};
  double eta_min = 0.0;
  long scheduler_period = 0;  // 0: one epoch's worth of iterations
  int scheduler_mult = 2;
  bool use_transmix = true;
  std::uint64_t seed = 0;
  std::string metrics_csv;  // optional path for the per-epoch log
};

struct EpochRow {
  int epoch = 0;
  std::string split;
  Metrics metrics;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> log;
  bool aborted = false;        // non-finite loss stopped training
  std::string abort_reason;
  double first_epoch_loss = 0.0;
  double final_epoch_loss = 0.0;
};

// Epoch loop: seeded shuffle, optional conditional mixing per batch, forward,
// weighted L1, backward, optimizer step and scheduler tick per iteration.
// Metrics rows are appended per epoch for the train split and, when a test
// set is given, the test split. On a non-finite loss the model is rolled
// back to the last epoch boundary and the result is marked aborted.
TrainResult train(Model& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& test_set, const TrainConfig& cfg);

// Predictions in score units for a whole dataset (no gradients).
std::vector<double> predict_all(const Model& model, const std::vector<Sample>& data);

}  // namespace qg
