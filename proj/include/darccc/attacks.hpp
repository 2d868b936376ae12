#pragma once

#include <string>
#include <vector>

#include "darccc/data.hpp"
#include "darccc/models.hpp"
#include "darccc/tensor.hpp"

namespace darccc {

// White-box gradient attacks on [0,1] images. The objective is the same for
// every architecture: mean softmax cross-entropy over the class scores. All
// attacks are batched but per-example independent, and every output stays
// inside [0,1] and within the stated infinity-ball around the input.

// Untargeted FGSM: x' = clip01(x + eps * sign(dJ/dx)) at the true labels.
// sign(0) = 0, so zero-gradient pixels do not move.
Tensor fgsm(const Model& m, const Tensor& x, const std::vector<int>& labels,
            double eps);

// Targeted FGSM steps against the gradient at the target labels.
Tensor fgsm_targeted(const Model& m, const Tensor& x,
                     const std::vector<int>& targets, double eps);

// Targeted BIM: `steps` targeted FGSM steps of size alpha, iterating from the
// previous iterate. Total budget eps = alpha * steps.
Tensor bim(const Model& m, const Tensor& x, const std::vector<int>& targets,
           double alpha, int steps);

// Reconstruction-aware BIM: each step also descends gamma times the gradient
// of the reconstruction distance for the currently predicted class, which is
// re-predicted every step. gamma = 0 reproduces bim() bit for bit; gamma != 0
// requires a model with a decoder.
Tensor rbim(const Model& m, const Tensor& x, const std::vector<int>& targets,
            double alpha, int steps, double gamma);

// The fixed target scheme for targeted attacks: (label + 1) mod num_classes.
std::vector<int> default_targets(const std::vector<int>& labels, int num_classes);

struct AttackSpec {
  std::string kind = "fgsm";  // fgsm | bim | rbim
  bool targeted = false;      // fgsm only; bim and rbim are always targeted
  double eps = 0.3;           // fgsm budget
  double alpha = 0.01;        // bim/rbim step size
  int steps = 1;
  double gamma = 0.0;         // rbim reconstruction weight
  int fixed_target = -1;      // >= 0 overrides the (label+1) scheme
};

struct AttackOutput {
  Tensor adv;                  // [n,1,h,w]
  Tensor clean;                // the unperturbed originals, same shape
  std::vector<long> indices;   // positions in the source dataset
  std::vector<int> true_labels;
  std::vector<int> targets;    // -1 for untargeted runs
  std::vector<int> pred_before, pred_after;
  AttackSpec spec;
  double budget = 0.0;         // eps, or alpha * steps for iterative attacks
};

// Runs one attack over a batch and records predictions before and after.
AttackOutput run_attack(const Model& m, const Batch& b, const AttackSpec& spec);

// Writes <prefix>.csv (index,true,target,pred_before,pred_after) plus DRCT
// tensor files <prefix>_adv.drct and <prefix>_clean.drct, so a detection run
// needs nothing but the prefix.
void save_attack(const std::string& prefix, const AttackOutput& out);
AttackOutput load_attack(const std::string& prefix);

}  // namespace darccc
