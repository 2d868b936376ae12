#pragma once

#include <string>
#include <vector>

#include "darccc/attacks.hpp"
#include "darccc/data.hpp"
#include "darccc/models.hpp"
#include "darccc/tensor.hpp"

namespace darccc {

// Reconstruction-distance detection: flag an input when the L2 distance
// between the image and its winning-class reconstruction exceeds a threshold
// calibrated on clean data.

struct Threshold {
  double value = 0.0;
  std::string method = "percentile";  // percentile | train_max
  double percentile = 95.0;
  long calibration_n = 0;
  double calibration_flag_rate = 0.0;  // strictly-above fraction, <= (100-p)/100
};

struct DistanceResult {
  std::vector<int> pred;         // winning class per example
  std::vector<double> distance;  // sqrt(sum (x - r)^2), r from the winning class
};

// Winning-class predictions and reconstruction distances, batched.
DistanceResult reconstruction_distances(const Model& m, const Tensor& images,
                                        int batch_size = 128);

// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value, no
// interpolation. p must lie in (0, 100].
double nearest_rank_percentile(std::vector<double> values, double p);

// Percentile threshold over clean distances (the paper's p=95 on validation
// data), or the maximum distance over a clean set (the draft's train-max
// variant). Both throw NumericError if the calibrated value is not positive.
Threshold calibrate(const Model& m, const Dataset& d, double p = 95.0,
                    int batch_size = 128);
Threshold calibrate_train_max(const Model& m, const Dataset& d,
                              int batch_size = 128);

// Strictly-greater rule: distance == threshold passes. This keeps the
// calibration-set false-positive bound (100-p)/100 exact.
std::vector<char> detect(const std::vector<double>& distances,
                         const Threshold& t);

// Class with the smallest all-class reconstruction distance; ties break to
// the lowest index.
std::vector<int> classify_by_distance(const Model& m, const Tensor& images,
                                      int batch_size = 128);

// Rank-based AUC (midranks for ties): probability a random adversarial
// distance exceeds a random clean one.
double roc_auc(const std::vector<double>& clean_distances,
               const std::vector<double>& adv_distances);

struct DetectionReport {
  std::vector<long> indices;
  std::vector<int> true_labels, targets;   // target -1 when untargeted
  std::vector<int> pred_before, pred_after;
  std::vector<double> distance;            // adversarial-side distances
  std::vector<double> clean_distance;      // same examples, unperturbed
  std::vector<char> flagged;

  Threshold threshold;
  long n = 0, successes = 0, flagged_count = 0, flagged_successes = 0;
  double attack_success_rate = 0.0;
  double attack_detection_rate = 0.0;
  double successful_attack_detection_rate = 0.0;  // over successes only
  double false_positive_rate = 0.0;               // clean-side flag rate
  double auc = 0.0;
};

// Fills the counts and rates from the per-example vectors. Success means the
// defended model predicts the target (targeted) or anything but the true
// label (untargeted).
void compute_aggregates(DetectionReport& r);

// Evaluates one attack batch against a (possibly different) defended model:
// predictions on clean and adversarial images, distances on both sides,
// flags, and all aggregate rates.
DetectionReport make_report(const Model& m, const AttackOutput& attack,
                            const Tensor& clean_images, const Threshold& thr,
                            int batch_size = 128);

// One row per example (index,true,target,pred_before,pred_after,distance,
// flagged) and a single '#' aggregate footer line.
void write_report_csv(const std::string& path, const DetectionReport& r);

// 50 bins of width max/50 over [0, max across both sides]:
// bin_low,bin_high,clean_count,adv_count.
void write_histogram_csv(const std::string& path,
                         const std::vector<double>& clean_distances,
                         const std::vector<double>& adv_distances);

// P5 graymap, rows = input then one reconstruction row per class, so
// (num_classes+1)*hw tall and n*hw wide. Pose normalization is only defined
// for the capsule model.
void write_recon_grid(const std::string& path, const Model& m,
                      const Tensor& images, bool normalize);

}  // namespace darccc
