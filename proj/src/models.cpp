#include "darccc/models.hpp"

#include <algorithm>
#include <cmath>

#include "darccc/util.hpp"

namespace darccc {

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::capsule: return "capsule";
    case Arch::cnn_r: return "cnn_r";
    case Arch::masked_cnn_r: return "masked_cnn_r";
    case Arch::attacker_cnn: return "attacker";
  }
  throw ShapeError("arch_name: bad enum value");
}

Arch arch_from_name(const std::string& name) {
  if (name == "capsule") return Arch::capsule;
  if (name == "cnn_r") return Arch::cnn_r;
  if (name == "masked_cnn_r") return Arch::masked_cnn_r;
  if (name == "attacker") return Arch::attacker_cnn;
  throw ShapeError("unknown architecture tag '" + name + "'");
}

Tensor squash(const Tensor& s) {
  const Tensor n = l2_norm(s, s.rank() - 1);
  return scale_vecs(s, div(n, add_scalar(square(n), 1.0)));
}

ClassPoseBlock dynamic_routing(const Tensor& u_hat, int iterations) {
  if (iterations < 1) throw ShapeError("dynamic_routing: iterations must be >= 1");
  if (u_hat.rank() != 4) {
    throw ShapeError("dynamic_routing: u_hat must be [b,I,J,D], got " +
                     shape_str(u_hat.shape()));
  }
  Tensor logits = Tensor::zeros({u_hat.dim(0), u_hat.dim(1), u_hat.dim(2)});
  Tensor v;
  for (int t = 0; t < iterations; ++t) {
    const Tensor c = softmax(logits, 2);
    v = squash(coupling_weighted_sum(u_hat, c));
    if (t + 1 < iterations) logits = add(logits, agreement(u_hat, v));
  }
  ClassPoseBlock out;
  out.poses = v;
  out.class_scores = l2_norm(v, 2);
  return out;
}

Tensor mask_poses(const ClassPoseBlock& block, const std::vector<int>& classes) {
  return mask_select(block.poses, classes);
}

ClassPoseBlock normalize_poses(const ClassPoseBlock& block) {
  const Tensor& p = block.poses;
  if (!p.defined() || p.rank() != 3) {
    throw ShapeError("normalize_poses: block has no [b,J,D] poses");
  }
  const int b = p.dim(0), j = p.dim(1), d = p.dim(2);
  std::vector<double> out(p.data());
  for (int r = 0; r < b * j; ++r) {
    double* vec = out.data() + static_cast<long>(r) * d;
    double norm2 = 0.0;
    for (int k = 0; k < d; ++k) norm2 += vec[k] * vec[k];
    if (norm2 <= 0.0) continue;  // zero pose stays zero
    const double inv = 1.0 / std::sqrt(norm2);
    for (int k = 0; k < d; ++k) vec[k] *= inv;
  }
  ClassPoseBlock res;
  res.poses = Tensor({b, j, d}, std::move(out));
  res.class_scores = block.class_scores;
  res.penultimate = block.penultimate;
  return res;
}

std::vector<int> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) {
    throw ShapeError("argmax_rows: expected [b,J], got " + shape_str(scores.shape()));
  }
  const int b = scores.dim(0), j = scores.dim(1);
  std::vector<int> out(static_cast<size_t>(b));
  const double* p = scores.ptr();
  for (int bi = 0; bi < b; ++bi) {
    const double* row = p + static_cast<long>(bi) * j;
    int best = 0;
    for (int k = 1; k < j; ++k) {
      if (row[k] > row[best]) best = k;
    }
    out[static_cast<size_t>(bi)] = best;
  }
  return out;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  const int hw = cfg_.input_hw;
  const int pen = cfg_.num_classes * cfg_.pose_dim;
  switch (cfg_.arch) {
    case Arch::capsule: {
      const int h1 = hw - cfg_.caps_kernel + 1;
      if (h1 < cfg_.caps_kernel) {
        throw ShapeError(strfmt("capsule config: input %d is too small for two "
                                "%dx%d convolutions", hw, cfg_.caps_kernel, cfg_.caps_kernel));
      }
      caps_grid_ = (h1 - cfg_.caps_kernel) / 2 + 1;  // stride-2 valid conv, floor
      const int pc = cfg_.primary_blocks * cfg_.primary_dim;
      register_param("conv1.w", {cfg_.conv1_channels, 1, cfg_.caps_kernel, cfg_.caps_kernel});
      register_param("conv1.b", {cfg_.conv1_channels});
      register_param("primary.w", {pc, cfg_.conv1_channels, cfg_.caps_kernel, cfg_.caps_kernel});
      register_param("primary.b", {pc});
      register_param("transform.w",
                     {cfg_.primary_blocks * caps_grid_ * caps_grid_, cfg_.num_classes,
                      cfg_.primary_dim, cfg_.pose_dim});
      break;
    }
    case Arch::cnn_r:
    case Arch::masked_cnn_r:
    case Arch::attacker_cnn: {
      if (hw % 4 != 0) {
        throw ShapeError(strfmt("cnn config: input %d not divisible by 4 (two pools)", hw));
      }
      if (cfg_.cnn_kernel % 2 == 0) {
        throw ShapeError("cnn config: kernel must be odd for 'same' padding");
      }
      const int flat = cfg_.cnn_conv2 * (hw / 4) * (hw / 4);
      register_param("conv1.w", {cfg_.cnn_conv1, 1, cfg_.cnn_kernel, cfg_.cnn_kernel});
      register_param("conv1.b", {cfg_.cnn_conv1});
      register_param("conv2.w", {cfg_.cnn_conv2, cfg_.cnn_conv1, cfg_.cnn_kernel, cfg_.cnn_kernel});
      register_param("conv2.b", {cfg_.cnn_conv2});
      if (cfg_.arch == Arch::attacker_cnn) {
        register_param("fc1.w", {flat, cfg_.atk_fc1});
        register_param("fc1.b", {cfg_.atk_fc1});
        register_param("fc2.w", {cfg_.atk_fc1, cfg_.atk_fc2});
        register_param("fc2.b", {cfg_.atk_fc2});
        register_param("fc3.w", {cfg_.atk_fc2, cfg_.num_classes});
        register_param("fc3.b", {cfg_.num_classes});
      } else {
        register_param("fc1.w", {flat, cfg_.cnn_fc1});
        register_param("fc1.b", {cfg_.cnn_fc1});
        register_param("fc2.w", {cfg_.cnn_fc1, pen});
        register_param("fc2.b", {pen});
        if (cfg_.arch == Arch::cnn_r) {
          register_param("head.w", {pen, cfg_.num_classes});
          register_param("head.b", {cfg_.num_classes});
        }
      }
      break;
    }
  }
  if (has_decoder()) {
    register_param("decoder.fc1.w", {pen, cfg_.dec_hidden1});
    register_param("decoder.fc1.b", {cfg_.dec_hidden1});
    register_param("decoder.fc2.w", {cfg_.dec_hidden1, cfg_.dec_hidden2});
    register_param("decoder.fc2.b", {cfg_.dec_hidden2});
    register_param("decoder.fc3.w", {cfg_.dec_hidden2, hw * hw});
    register_param("decoder.fc3.b", {hw * hw});
  }
  init_weights(seed);
}

Tensor Model::register_param(const std::string& name, const Shape& shape) {
  Tensor t = Tensor::zeros(shape);
  t.set_requires_grad(true);
  params_.emplace_back(name, t);
  return t;
}

void Model::init_weights(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, t] : params_) {
    const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (is_bias) continue;  // biases start at zero
    double* p = t.ptr();
    for (long i = 0; i < t.numel(); ++i) p[i] = rng.truncated_normal(0.05);
  }
}

Tensor& Model::param(const std::string& name) {
  for (auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw ShapeError("unknown parameter '" + name + "' in " + arch_name(cfg_.arch));
}

const Tensor& Model::param(const std::string& name) const {
  return const_cast<Model*>(this)->param(name);
}

long Model::param_count() const {
  long n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void Model::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

}  // namespace

ClassPoseBlock Model::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.input_hw ||
      x.dim(3) != cfg_.input_hw) {
    throw ShapeError(strfmt("forward: expected [b,1,%d,%d], got %s", cfg_.input_hw,
                            cfg_.input_hw, shape_str(x.shape()).c_str()));
  }
  switch (cfg_.arch) {
    case Arch::capsule: return forward_capsule(x);
    case Arch::cnn_r:
    case Arch::masked_cnn_r: return forward_cnn(x);
    case Arch::attacker_cnn: return forward_attacker(x);
  }
  throw ShapeError("forward: bad architecture enum");
}

ClassPoseBlock Model::forward_capsule(const Tensor& x) const {
  auto P = [&](const char* n) -> const Tensor& { return param(n); };
  const int b = x.dim(0);
  const int g = caps_grid_;
  const int n_caps = cfg_.primary_blocks * g * g;

  Tensor h1 = relu(conv2d(x, P("conv1.w"), P("conv1.b"), 1, 0));
  Tensor pc = conv2d(h1, P("primary.w"), P("primary.b"), 2, 0);
  // [b, blocks*dim, g, g] -> [b, blocks, dim, g*g] -> [b, blocks, g*g, dim]
  Tensor u = reshape(pc, {b, cfg_.primary_blocks, cfg_.primary_dim, g * g});
  u = permute(u, {0, 1, 3, 2});
  u = squash(reshape(u, {b, n_caps, cfg_.primary_dim}));
  Tensor u_hat = caps_transform(u, P("transform.w"));
  return dynamic_routing(u_hat, cfg_.routing_iterations);
}

Tensor Model::cnn_trunk(const Tensor& x) const {
  auto P = [&](const char* n) -> const Tensor& { return param(n); };
  const int pad = (cfg_.cnn_kernel - 1) / 2;
  Tensor h1 = maxpool2(relu(conv2d(x, P("conv1.w"), P("conv1.b"), 1, pad)));
  Tensor h2 = maxpool2(relu(conv2d(h1, P("conv2.w"), P("conv2.b"), 1, pad)));
  const int flat = cfg_.cnn_conv2 * (cfg_.input_hw / 4) * (cfg_.input_hw / 4);
  return reshape(h2, {x.dim(0), flat});
}

ClassPoseBlock Model::forward_cnn(const Tensor& x) const {
  auto P = [&](const char* n) -> const Tensor& { return param(n); };
  Tensor f1 = relu(linear(cnn_trunk(x), P("fc1.w"), P("fc1.b")));
  Tensor pen = relu(linear(f1, P("fc2.w"), P("fc2.b")));
  ClassPoseBlock out;
  out.penultimate = pen;
  out.poses = reshape(pen, {x.dim(0), cfg_.num_classes, cfg_.pose_dim});
  if (cfg_.arch == Arch::masked_cnn_r) {
    out.class_scores = sum(out.poses, 2);  // group sums as logits
  } else {
    out.class_scores = linear(pen, P("head.w"), P("head.b"));
  }
  return out;
}

ClassPoseBlock Model::forward_attacker(const Tensor& x) const {
  auto P = [&](const char* n) -> const Tensor& { return param(n); };
  Tensor f1 = relu(linear(cnn_trunk(x), P("fc1.w"), P("fc1.b")));
  Tensor f2 = relu(linear(f1, P("fc2.w"), P("fc2.b")));
  ClassPoseBlock out;
  out.class_scores = linear(f2, P("fc3.w"), P("fc3.b"));
  return out;
}

Tensor Model::decode(const Tensor& masked) const {
  if (!has_decoder()) {
    throw ShapeError("decode: " + arch_name(cfg_.arch) + " has no decoder");
  }
  auto P = [&](const char* n) -> const Tensor& { return param(n); };
  Tensor d1 = relu(linear(masked, P("decoder.fc1.w"), P("decoder.fc1.b")));
  Tensor d2 = relu(linear(d1, P("decoder.fc2.w"), P("decoder.fc2.b")));
  return sigmoid(linear(d2, P("decoder.fc3.w"), P("decoder.fc3.b")));
}

Tensor Model::reconstruct(const ClassPoseBlock& block,
                          const std::vector<int>& classes) const {
  if (cfg_.arch == Arch::cnn_r) return decode(block.penultimate);
  return decode(mask_poses(block, classes));
}

}  // namespace darccc
