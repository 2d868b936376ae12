#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "darccc/data.hpp"
#include "darccc/models.hpp"
#include "darccc/tensor.hpp"

namespace darccc {

// Loss hyperparameters. `eta` scales the reconstruction term, which is a
// pixel-sum squared error; 0.0005 keeps it a mild regularizer next to the
// classification loss (sweeps at larger eta trade away accuracy).
struct LossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
  double eta = 0.0005;
};

// Margin loss over class scores [b,J]: for each class,
//   T_k max(0, m+ - s_k)^2 + lambda (1 - T_k) max(0, s_k - m-)^2
// summed over classes and averaged over the batch.
Tensor margin_loss(const Tensor& scores, const std::vector<int>& labels,
                   const LossConfig& lc = {});

// Mean over the batch of the summed squared pixel error. Both arguments are
// [b,p] with values in [0,1].
Tensor reconstruction_loss(const Tensor& x_flat, const Tensor& recon);

// Margin loss for the capsule network, mean softmax cross-entropy otherwise.
Tensor classification_loss(Arch arch, const Tensor& scores,
                           const std::vector<int>& labels,
                           const LossConfig& lc = {});

struct BatchEval {
  Tensor loss;  // scalar; classification plus eta-weighted reconstruction
  int correct;  // argmax prediction matches the label
};

// Forward pass plus full training objective for one batch. Reconstruction,
// when the model has a decoder, is conditioned on the true labels.
BatchEval batch_loss(const Model& m, const Batch& b, const LossConfig& lc = {});

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters update in registration order; state
// lives here, so keep one instance per training run. The parameter vector
// must outlive the optimizer.
class Adam {
 public:
  explicit Adam(std::vector<std::pair<std::string, Tensor>>& params,
                const AdamConfig& cfg = {});
  void step();  // consumes current gradients; caller zeroes them afterwards
  long steps() const { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor>>* params_;
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m1_, m2_;
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 128;
  std::uint64_t seed = 1;        // epoch e shuffles with seed + e - 1
  AdamConfig adam;
  LossConfig loss;
  std::string metrics_path;      // per-epoch CSV, empty to skip
  std::string checkpoint_path;   // best-validation checkpoint, empty to skip
  int log_every = 0;             // progress line every N batches, 0 = off
};

struct EpochMetrics {
  int epoch;
  double train_loss, train_acc, val_loss, val_acc;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;
  double best_val_acc = 0.0;
};

// Accuracy over a dataset; optionally reports the mean objective as well.
double evaluate(const Model& m, const Dataset& d, int batch_size,
                double* loss_out = nullptr, const LossConfig& lc = {});

// Deterministic training loop: shuffled batches with per-epoch derived seeds,
// Adam updates, per-epoch metrics, checkpoint at the best validation accuracy
// (earliest epoch wins ties). Throws NumericError naming the epoch and batch
// if the loss stops being finite.
TrainResult train_model(Model& m, const Split& split, const TrainConfig& cfg,
                        std::ostream* log = nullptr);

// --- checkpoints -----------------------------------------------------------
//
// Binary format, little-endian: magic "DRCC", u32 version, architecture tag,
// key=value config block, tensor table (name, rank, dims, f32 values), and an
// optional calibrated detection threshold.

void save_checkpoint(const std::string& path, const Model& m,
                     std::optional<double> threshold = std::nullopt);

struct LoadedModel {
  Model model;
  std::optional<double> threshold;
};

LoadedModel load_checkpoint(const std::string& path);

}  // namespace darccc
