#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "darccc/models.hpp"
#include "darccc/tensor.hpp"
#include "darccc/util.hpp"
#include "support/grad_check.hpp"

using namespace darccc;
using testsupport::check_gradients;

namespace {

// Brute-force routing-by-agreement, plain loops, mirroring the declared
// algorithm exactly (including the epsilon inside the norm). Returns the
// final v and the coupling coefficients of the last iteration.
void reference_routing(const std::vector<double>& uhat, int b, int I, int J, int D,
                       int iters, std::vector<double>& v_out,
                       std::vector<double>& c_out) {
  std::vector<double> logits(static_cast<size_t>(b) * I * J, 0.0);
  std::vector<double> c(logits.size());
  std::vector<double> v(static_cast<size_t>(b) * J * D);
  auto uh = [&](int bi, int i, int j, int d) {
    return uhat[((static_cast<size_t>(bi) * I + i) * J + j) * D + d];
  };
  for (int t = 0; t < iters; ++t) {
    for (int bi = 0; bi < b; ++bi) {
      for (int i = 0; i < I; ++i) {
        double mx = logits[(static_cast<size_t>(bi) * I + i) * J];
        for (int j = 1; j < J; ++j) {
          mx = std::max(mx, logits[(static_cast<size_t>(bi) * I + i) * J + j]);
        }
        double sum = 0.0;
        for (int j = 0; j < J; ++j) {
          const size_t k = (static_cast<size_t>(bi) * I + i) * J + j;
          c[k] = std::exp(logits[k] - mx);
          sum += c[k];
        }
        double check = 0.0;
        for (int j = 0; j < J; ++j) {
          const size_t k = (static_cast<size_t>(bi) * I + i) * J + j;
          c[k] /= sum;
          check += c[k];
        }
        CHECK(std::abs(check - 1.0) <= 1e-12);  // couplings are a distribution
      }
    }
    for (int bi = 0; bi < b; ++bi) {
      for (int j = 0; j < J; ++j) {
        std::vector<double> s(static_cast<size_t>(D), 0.0);
        for (int i = 0; i < I; ++i) {
          const double cij = c[(static_cast<size_t>(bi) * I + i) * J + j];
          for (int d = 0; d < D; ++d) s[static_cast<size_t>(d)] += cij * uh(bi, i, j, d);
        }
        double n2 = 1e-12;
        for (double sv : s) n2 += sv * sv;
        const double n = std::sqrt(n2);
        const double factor = n / (1.0 + n * n);
        for (int d = 0; d < D; ++d) {
          v[(static_cast<size_t>(bi) * J + j) * D + d] = factor * s[static_cast<size_t>(d)];
        }
      }
    }
    if (t + 1 < iters) {
      for (int bi = 0; bi < b; ++bi) {
        for (int i = 0; i < I; ++i) {
          for (int j = 0; j < J; ++j) {
            double dot = 0.0;
            for (int d = 0; d < D; ++d) {
              dot += uh(bi, i, j, d) * v[(static_cast<size_t>(bi) * J + j) * D + d];
            }
            logits[(static_cast<size_t>(bi) * I + i) * J + j] += dot;
          }
        }
      }
    }
  }
  v_out = v;
  c_out = c;
}

ModelConfig tiny_capsule() {
  ModelConfig cfg;
  cfg.arch = Arch::capsule;
  cfg.input_hw = 13;
  cfg.caps_kernel = 5;
  cfg.conv1_channels = 4;
  cfg.primary_blocks = 2;
  cfg.primary_dim = 3;
  cfg.num_classes = 3;
  cfg.pose_dim = 4;
  cfg.dec_hidden1 = 8;
  cfg.dec_hidden2 = 10;
  return cfg;
}

ModelConfig tiny_cnn(Arch arch) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.input_hw = 8;
  cfg.cnn_kernel = 3;
  cfg.cnn_conv1 = 3;
  cfg.cnn_conv2 = 4;
  cfg.cnn_fc1 = 10;
  cfg.atk_fc1 = 6;
  cfg.atk_fc2 = 5;
  cfg.num_classes = 3;
  cfg.pose_dim = 4;
  cfg.dec_hidden1 = 8;
  cfg.dec_hidden2 = 10;
  return cfg;
}

Tensor rand_image(Rng& rng, int b, int hw) {
  std::vector<double> v(static_cast<size_t>(b) * hw * hw);
  for (double& x : v) x = rng.uniform();
  return Tensor({b, 1, hw, hw}, std::move(v));
}

// classification + reconstruction objective used for end-to-end checks
Tensor model_loss(const Model& m, const Tensor& x, const std::vector<int>& labels) {
  ClassPoseBlock block = m.forward(x);
  Tensor loss = mean(softmax_cross_entropy(block.class_scores, labels));
  if (m.has_decoder()) {
    const int hw = m.config().input_hw;
    Tensor rec = m.reconstruct(block, labels);
    Tensor diff = sub(reshape(x, {x.dim(0), hw * hw}), rec);
    loss = add(loss, mul_scalar(mean(sum(square(diff), 1)), 0.05));
  }
  return loss;
}

}  // namespace

TEST_CASE("squash: pinned values and guards") {
  CHECK(squash(Tensor({1, 2}, {0.0, 0.0})).data() == std::vector<double>{0.0, 0.0});

  Tensor v = squash(Tensor({1, 2}, {3.0, 4.0}));
  CHECK(v.data()[0] == doctest::Approx(0.576923).epsilon(1e-6));
  CHECK(v.data()[1] == doctest::Approx(0.769231).epsilon(1e-6));

  // |s| = 100 -> output norm 100^2/(1+100^2)
  Tensor big = squash(Tensor({1, 2}, {60.0, 80.0}));
  const double n = std::hypot(big.data()[0], big.data()[1]);
  CHECK(n == doctest::Approx(10000.0 / 10001.0).epsilon(1e-9));

  // norm < 1 and monotone increasing in input norm
  double prev = 0.0;
  for (double scale : {0.1, 0.5, 1.0, 3.0, 10.0, 1000.0}) {
    Tensor s = squash(Tensor({1, 2}, {scale, 0.0}));
    const double len = std::abs(s.data()[0]);
    CHECK(len < 1.0);
    CHECK(len > prev);
    prev = len;
    // direction preserved
    CHECK(s.data()[0] >= 0.0);
    CHECK(s.data()[1] == 0.0);
  }
}

TEST_CASE("dynamic_routing: uniform coupling at a single iteration") {
  // one input capsule, b=0 -> c = 1/J for each class -> v_j = squash(u_j / J)
  Rng rng(41);
  const int J = 4, D = 3;
  std::vector<double> uv(static_cast<size_t>(J) * D);
  for (double& x : uv) x = 2.0 * rng.uniform() - 1.0;
  Tensor uhat({1, 1, J, D}, uv);
  ClassPoseBlock out = dynamic_routing(uhat, 1);
  Tensor expected = squash(mul_scalar(reshape(uhat, {1, J, D}), 1.0 / J));
  for (long i = 0; i < expected.numel(); ++i) {
    CHECK(out.poses.data()[static_cast<size_t>(i)] ==
          doctest::Approx(expected.data()[static_cast<size_t>(i)]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(dynamic_routing(uhat, 0), ShapeError);
  CHECK_THROWS_AS(dynamic_routing(Tensor::zeros({2, 3, 4}), 3), ShapeError);
}

TEST_CASE("dynamic_routing matches the brute-force reference") {
  Rng rng(42);
  const int b = 2, I = 5, J = 3, D = 4, iters = 3;
  std::vector<double> uv(static_cast<size_t>(b) * I * J * D);
  for (double& x : uv) x = 2.0 * rng.uniform() - 1.0;

  std::vector<double> v_ref, c_ref;
  reference_routing(uv, b, I, J, D, iters, v_ref, c_ref);

  ClassPoseBlock out = dynamic_routing(Tensor({b, I, J, D}, uv), iters);
  REQUIRE(out.poses.shape() == Shape{b, J, D});
  for (size_t i = 0; i < v_ref.size(); ++i) {
    CHECK(out.poses.data()[i] == doctest::Approx(v_ref[i]).epsilon(1e-12));
  }
  // scores are the pose norms
  for (int bi = 0; bi < b; ++bi) {
    for (int j = 0; j < J; ++j) {
      double n2 = 1e-12;
      for (int d = 0; d < D; ++d) {
        const double pv = out.poses.at({bi, j, d});
        n2 += pv * pv;
      }
      CHECK(out.class_scores.at({bi, j}) == doctest::Approx(std::sqrt(n2)).epsilon(1e-12));
      CHECK(out.class_scores.at({bi, j}) < 1.0);
    }
  }
}

TEST_CASE("routing shifts coupling toward the agreeing class") {
  // capsule 1 predicts (1,0) for class 0, an orthogonal vector for class 1;
  // capsule 0 reinforces class 0 with the same (1,0) prediction
  std::vector<double> uv = {
      // capsule 0: class 0 -> (1,0), class 1 -> (0,1)
      1, 0, 0, 1,
      // capsule 1: class 0 -> (1,0), class 1 -> (0,-1)
      1, 0, 0, -1,
  };
  std::vector<double> v_ref, c_ref;
  reference_routing(uv, 1, 2, 2, 2, 3, v_ref, c_ref);
  const double c10 = c_ref[2];  // capsule 1 -> class 0
  const double c11 = c_ref[3];
  CHECK(c10 > c11);

  ClassPoseBlock out = dynamic_routing(Tensor({1, 2, 2, 2}, uv), 3);
  for (size_t i = 0; i < v_ref.size(); ++i) {
    CHECK(out.poses.data()[i] == doctest::Approx(v_ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("full-size parameter counts and parity") {
  ModelConfig caps;
  caps.arch = Arch::capsule;
  ModelConfig cnn_r = caps;
  cnn_r.arch = Arch::cnn_r;
  ModelConfig masked = caps;
  masked.arch = Arch::masked_cnn_r;
  ModelConfig atk = caps;
  atk.arch = Arch::attacker_cnn;

  Model mc(caps, 1), mr(cnn_r, 1), mm(masked, 1), ma(atk, 1);
  CHECK(mc.param_count() == 8215568);
  CHECK(mm.param_count() == 8215856);
  CHECK(mr.param_count() == 8215856 + 1610);
  CHECK(ma.param_count() == 1792138);

  const double lo = static_cast<double>(mc.param_count());
  const double hi = static_cast<double>(mr.param_count());
  CHECK((hi - lo) / lo < 0.05);  // parity within 5%
}

TEST_CASE("forward shapes, score ranges, and symmetry breaking") {
  Rng rng(43);
  SUBCASE("capsule") {
    Model m(tiny_capsule(), 7);
    Tensor x = rand_image(rng, 2, 13);
    ClassPoseBlock out = m.forward(x);
    CHECK(out.poses.shape() == Shape{2, 3, 4});
    CHECK(out.class_scores.shape() == Shape{2, 3});
    bool all_same = true;
    for (int bi = 0; bi < 2; ++bi) {
      for (int j = 0; j < 3; ++j) {
        const double s = out.class_scores.at({bi, j});
        CHECK(s >= 0.0);
        CHECK(s < 1.0);
        if (std::abs(s - out.class_scores.at({bi, 0})) > 1e-12) all_same = false;
      }
      // scores equal pose norms (same epsilon-in-sqrt formula)
      for (int j = 0; j < 3; ++j) {
        double n2 = 1e-12;
        for (int d = 0; d < 4; ++d) n2 += out.poses.at({bi, j, d}) * out.poses.at({bi, j, d});
        CHECK(std::abs(out.class_scores.at({bi, j}) - std::sqrt(n2)) <= 1e-9);
      }
    }
    CHECK_FALSE(all_same);  // random weights break class symmetry
    CHECK_THROWS_AS(m.forward(Tensor::zeros({2, 1, 12, 12})), ShapeError);
  }
  SUBCASE("masked_cnn_r: logits are the group sums") {
    Model m(tiny_cnn(Arch::masked_cnn_r), 7);
    ClassPoseBlock out = m.forward(rand_image(rng, 2, 8));
    CHECK(out.poses.shape() == Shape{2, 3, 4});
    for (int bi = 0; bi < 2; ++bi) {
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int d = 0; d < 4; ++d) s += out.poses.at({bi, j, d});
        CHECK(std::abs(out.class_scores.at({bi, j}) - s) <= 1e-9);
      }
    }
  }
  SUBCASE("cnn_r: head logits, class-invariant reconstruction") {
    Model m(tiny_cnn(Arch::cnn_r), 7);
    ClassPoseBlock out = m.forward(rand_image(rng, 2, 8));
    CHECK(out.class_scores.shape() == Shape{2, 3});
    CHECK(out.penultimate.shape() == Shape{2, 12});
    Tensor r0 = m.reconstruct(out, {0, 0});
    Tensor r2 = m.reconstruct(out, {2, 1});
    CHECK(r0.data() == r2.data());  // no masking on cnn_r
  }
  SUBCASE("attacker: plain logits, no decoder") {
    Model m(tiny_cnn(Arch::attacker_cnn), 7);
    ClassPoseBlock out = m.forward(rand_image(rng, 2, 8));
    CHECK(out.class_scores.shape() == Shape{2, 3});
    CHECK_FALSE(out.poses.defined());
    CHECK_FALSE(m.has_decoder());
    CHECK_THROWS_AS(m.decode(Tensor::zeros({2, 12})), ShapeError);
  }
  SUBCASE("argmax unchanged by softmax of the scores") {
    Model m(tiny_cnn(Arch::cnn_r), 9);
    ClassPoseBlock out = m.forward(rand_image(rng, 4, 8));
    CHECK(argmax_rows(out.class_scores) == argmax_rows(softmax(out.class_scores, 1)));
  }
}

TEST_CASE("mask_poses: selection window and idempotence") {
  const int b = 1, J = 10, D = 16;
  ClassPoseBlock block;
  block.poses = Tensor::full({b, J, D}, 1.0);
  Tensor m = mask_poses(block, {3});
  CHECK(m.shape() == Shape{1, 160});
  for (int i = 0; i < 160; ++i) {
    const bool inside = i >= 48 && i < 64;
    CHECK(m.data()[static_cast<size_t>(i)] == (inside ? 1.0 : 0.0));
  }
  // exactly (J-1)*D zeros
  long zeros = 0;
  for (double v : m.data()) zeros += v == 0.0;
  CHECK(zeros == (J - 1) * D);
  // masking an already-masked block changes nothing
  ClassPoseBlock again;
  again.poses = reshape(m, {b, J, D});
  CHECK(mask_poses(again, {3}).data() == m.data());
}

TEST_CASE("decoder: range, shape, and bias-only behavior at zero input") {
  Model m(tiny_cnn(Arch::masked_cnn_r), 11);
  Tensor out = m.decode(Tensor::zeros({2, 12}));
  CHECK(out.shape() == Shape{2, 64});
  for (double v : out.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  // zero input -> rows identical: the output depends only on biases
  for (int i = 0; i < 64; ++i) {
    CHECK(out.at({0, i}) == out.at({1, i}));
  }
}

TEST_CASE("masked gradient isolation: unselected poses receive zero gradient") {
  Model m(tiny_capsule(), 13);
  Tensor poses = Tensor::leaf({2, 3, 4}, std::vector<double>(24, 0.5));
  Graph g;
  {
    Graph::Activation act(g);
    ClassPoseBlock block;
    block.poses = poses;
    Tensor rec = m.decode(mask_poses(block, {1, 2}));
    g.backward(sum(rec));
  }
  for (int bi = 0; bi < 2; ++bi) {
    const int sel = bi == 0 ? 1 : 2;
    for (int j = 0; j < 3; ++j) {
      double sum_abs = 0.0;
      for (int d = 0; d < 4; ++d) {
        sum_abs += std::abs(poses.grad()[static_cast<size_t>((bi * 3 + j) * 4 + d)]);
      }
      if (j == sel) {
        CHECK(sum_abs > 0.0);
      } else {
        CHECK(sum_abs == 0.0);
      }
    }
  }
}

TEST_CASE("normalize_poses") {
  ClassPoseBlock block;
  block.poses = Tensor({1, 3, 4}, {3, 4, 0, 0,
                                   0, 0, 0, 0,
                                   1, 0, 0, 0});
  block.class_scores = Tensor({1, 3}, {0.5, 0.1, 0.2});
  ClassPoseBlock n = normalize_poses(block);
  const std::vector<double> want = {0.6, 0.8, 0, 0,
                                    0, 0, 0, 0,
                                    1, 0, 0, 0};
  for (size_t i = 0; i < want.size(); ++i) {
    CHECK(n.poses.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
  // the zero pose is untouched bit-for-bit, and so are the scores
  for (int d = 0; d < 4; ++d) CHECK(n.poses.at({0, 1, d}) == 0.0);
  CHECK(n.class_scores.data() == block.class_scores.data());

  ClassPoseBlock empty;
  CHECK_THROWS_AS(normalize_poses(empty), ShapeError);
}

TEST_CASE("deterministic initialization") {
  Model a(tiny_capsule(), 5), b(tiny_capsule(), 5), c(tiny_capsule(), 6);
  REQUIRE(a.params().size() == b.params().size());
  for (size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].first == b.params()[i].first);
    CHECK(a.params()[i].second.data() == b.params()[i].second.data());
  }
  CHECK(a.param("conv1.w").data() != c.param("conv1.w").data());
  // biases start at zero; weights are bounded by the 2-sigma truncation
  for (double v : a.param("conv1.b").data()) CHECK(v == 0.0);
  for (double v : a.param("conv1.w").data()) CHECK(std::abs(v) <= 0.1);
  CHECK_THROWS_AS(a.param("nope.w"), ShapeError);
}

TEST_CASE("config validation") {
  ModelConfig bad = tiny_capsule();
  bad.input_hw = 7;  // 7-5+1=3 < 5: second conv cannot fit
  CHECK_THROWS_AS(Model(bad, 1), ShapeError);

  // stride-2 floor geometry: 14-5+1=10 -> grid floor((10-5)/2)+1 = 3
  ModelConfig odd = tiny_capsule();
  odd.input_hw = 14;
  Model modd(odd, 1);
  CHECK(modd.forward(Tensor::zeros({1, 1, 14, 14})).poses.shape() == Shape{1, 3, 4});

  ModelConfig bad2 = tiny_cnn(Arch::cnn_r);
  bad2.input_hw = 10;
  CHECK_THROWS_AS(Model(bad2, 1), ShapeError);

  ModelConfig bad3 = tiny_cnn(Arch::attacker_cnn);
  bad3.cnn_kernel = 4;
  CHECK_THROWS_AS(Model(bad3, 1), ShapeError);

  CHECK(arch_from_name("capsule") == Arch::capsule);
  CHECK(arch_from_name("attacker") == Arch::attacker_cnn);
  CHECK(arch_name(Arch::masked_cnn_r) == "masked_cnn_r");
  CHECK_THROWS_AS(arch_from_name("resnet"), ShapeError);
}

TEST_CASE("argmax_rows breaks ties toward the lowest index") {
  Tensor s({2, 3}, {1.0, 1.0, 0.5,
                    0.2, 0.9, 0.9});
  CHECK(argmax_rows(s) == std::vector<int>{0, 1});
  CHECK_THROWS_AS(argmax_rows(Tensor::zeros({3})), ShapeError);
}

TEST_CASE("end-to-end gradients: every parameter of every architecture") {
  Rng rng(44);
  const std::vector<int> labels = {2, 0};

  auto run = [&](const ModelConfig& cfg, std::uint64_t seed) {
    Model m(cfg, seed);
    // Move every parameter (biases included) to a generic point: the fresh
    // zero-bias init leaves relu pre-activations within the finite-difference
    // step of their kinks, where one-sided derivatives are expected.
    Rng prng(seed + 100);
    for (auto& [name, t] : m.params()) {
      double* p = t.ptr();
      for (long k = 0; k < t.numel(); ++k) p[k] = 0.4 * prng.uniform() - 0.2;
    }
    Tensor x = rand_image(rng, 2, cfg.input_hw);
    x.set_requires_grad(true);
    std::vector<Tensor> inputs = {x};
    for (auto& [name, t] : m.params()) inputs.push_back(t);
    auto r = check_gradients(inputs, [&] { return model_loss(m, x, labels); });
    INFO(arch_name(cfg.arch), ": ", r.worst);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_err <= 1e-3);
  };

  run(tiny_capsule(), 17);                    // includes routing + decoder
  run(tiny_cnn(Arch::masked_cnn_r), 18);
  run(tiny_cnn(Arch::cnn_r), 19);
  run(tiny_cnn(Arch::attacker_cnn), 20);
}
