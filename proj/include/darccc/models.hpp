#pragma once

// The four networks: capsule classifier with dynamic routing and a masked
// reconstruction decoder, CNN+R, Masked CNN+R, and the plain attacker CNN
// used as the black-box surrogate.
//
// All sizes live in ModelConfig with defaults matching the reference design;
// tests shrink them to make exhaustive gradient checks affordable. The three
// defended models share one decoder shape (in = num_classes*pose_dim) so the
// same reconstruction machinery applies to each.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "darccc/tensor.hpp"

namespace darccc {

enum class Arch { capsule, cnn_r, masked_cnn_r, attacker_cnn };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& name);  // throws ShapeError on unknown tag

struct ModelConfig {
  Arch arch = Arch::capsule;
  int num_classes = 10;
  int pose_dim = 16;
  int routing_iterations = 3;
  int input_hw = 28;

  // capsule sizes
  int conv1_channels = 256;
  int primary_blocks = 32;  // groups of primary capsules
  int primary_dim = 8;
  int caps_kernel = 9;

  // cnn trunk (cnn_r / masked_cnn_r) and attacker sizes
  int cnn_conv1 = 32;
  int cnn_conv2 = 64;
  int cnn_fc1 = 2048;
  int cnn_kernel = 5;  // odd; applied with 'same' padding
  int atk_fc1 = 512;
  int atk_fc2 = 256;

  // decoder hidden widths (input = num_classes*pose_dim, output = input_hw^2)
  int dec_hidden1 = 512;
  int dec_hidden2 = 1024;
};

struct ClassPoseBlock {
  Tensor poses;         // [b, num_classes, pose_dim]; undefined for attacker_cnn
  Tensor class_scores;  // [b, num_classes]: capsule lengths, group sums, or logits
  Tensor penultimate;   // [b, num_classes*pose_dim] for the cnn trunks only
};

// v = (|s|^2 / (1+|s|^2)) * (s/|s|) along the last axis; squash(0) = 0.
Tensor squash(const Tensor& s);

// Routing-by-agreement over u_hat [b, n_in, num_classes, pose_dim]. Logits
// start at zero; each round couples with softmax over classes, squashes the
// weighted sum, and (for all but the last round) adds the agreement term.
// The loop is unrolled in-graph, so gradients flow through the couplings.
ClassPoseBlock dynamic_routing(const Tensor& u_hat, int iterations);

// Zeroes every pose but the selected class's, flattened to [b, J*D].
Tensor mask_poses(const ClassPoseBlock& block, const std::vector<int>& classes);

// Rescales each pose vector to unit length (exact-zero poses stay zero);
// scores are left untouched. Used only for the all-class image grids.
ClassPoseBlock normalize_poses(const ClassPoseBlock& block);

std::vector<int> argmax_rows(const Tensor& scores);  // ties -> lowest index

class Model {
 public:
  // Fresh model: truncated-normal(sigma 0.05) weights, zero biases, drawn
  // from Rng(seed) in registration order.
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  Arch arch() const { return cfg_.arch; }
  bool has_decoder() const { return cfg_.arch != Arch::attacker_cnn; }

  // Named parameters in registration (checkpoint) order. The tensors are
  // shared handles: mutating them mutates the model.
  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  Tensor& param(const std::string& name);  // throws ShapeError on unknown name
  const Tensor& param(const std::string& name) const;
  long param_count() const;
  void zero_grads();

  ClassPoseBlock forward(const Tensor& x) const;  // x [b,1,hw,hw]

  // masked [b, num_classes*pose_dim] -> image [b, hw*hw] in (0,1)
  Tensor decode(const Tensor& masked) const;

  // Reconstruction conditioned per-architecture: capsule and masked_cnn_r
  // decode the class-masked poses; cnn_r decodes the whole penultimate
  // vector (classes ignored). Throws on the decoder-less attacker.
  Tensor reconstruct(const ClassPoseBlock& block, const std::vector<int>& classes) const;

 private:
  Tensor register_param(const std::string& name, const Shape& shape);
  void init_weights(std::uint64_t seed);
  ClassPoseBlock forward_capsule(const Tensor& x) const;
  ClassPoseBlock forward_cnn(const Tensor& x) const;
  ClassPoseBlock forward_attacker(const Tensor& x) const;
  Tensor cnn_trunk(const Tensor& x) const;  // conv/pool/conv/pool + flatten

  ModelConfig cfg_;
  int caps_grid_ = 0;  // primary-capsule grid side
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace darccc
