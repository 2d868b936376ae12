#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "darccc/attacks.hpp"
#include "darccc/util.hpp"

using namespace darccc;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("darccc_attacks_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

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

// Random weights at a generic point so input gradients are well away from zero.
Model generic_model(Arch arch, std::uint64_t seed) {
  Model m(tiny_cnn(arch), seed);
  Rng rng(seed + 1000);
  for (auto& [name, t] : m.params()) {
    double* p = t.ptr();
    for (long i = 0; i < t.numel(); ++i) p[i] = 0.5 * rng.uniform() - 0.25;
  }
  return m;
}

Tensor rand_images(Rng& rng, int n, int hw) {
  std::vector<double> v(static_cast<size_t>(n) * hw * hw);
  for (double& x : v) x = rng.uniform();
  return Tensor({n, 1, hw, hw}, std::move(v));
}

// The attack objective's input gradient, recomputed independently here.
std::vector<double> manual_grad(const Model& m, const Tensor& x,
                                const std::vector<int>& labels) {
  Tensor xg = x.clone();
  xg.set_requires_grad(true);
  Graph g;
  {
    Graph::Activation act(g);
    g.backward(mean(softmax_cross_entropy(m.forward(xg).class_scores, labels)));
  }
  return xg.grad();
}

}  // namespace

TEST_CASE("fgsm: eps 0 is the identity, output matches the manual gradient step") {
  Rng rng(51);
  Model m = generic_model(Arch::attacker_cnn, 51);
  Tensor x = rand_images(rng, 3, 8);
  const std::vector<int> y = {0, 2, 1};

  CHECK(fgsm(m, x, y, 0.0).data() == x.data());

  std::vector<double> g = manual_grad(m, x, y);
  Tensor adv = fgsm(m, x, y, 0.1);
  Tensor tadv = fgsm_targeted(m, x, y, 0.1);
  bool saw_positive_mid = false;
  for (size_t i = 0; i < g.size(); ++i) {
    const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
    const double want = std::min(1.0, std::max(0.0, x.data()[i] + 0.1 * s));
    const double want_t = std::min(1.0, std::max(0.0, x.data()[i] - 0.1 * s));
    CHECK(adv.data()[i] == want);
    CHECK(tadv.data()[i] == want_t);
    // the canonical picture: a mid-range pixel with positive gradient moves
    // up by exactly eps
    if (s > 0 && x.data()[i] > 0.2 && x.data()[i] < 0.8) {
      CHECK(adv.data()[i] == x.data()[i] + 0.1);
      saw_positive_mid = true;
    }
  }
  CHECK(saw_positive_mid);
}

TEST_CASE("fgsm: sign(0) = 0 leaves zero-gradient pixels in place") {
  Model m = generic_model(Arch::attacker_cnn, 53);
  for (auto& [name, t] : m.params()) {
    std::fill(t.ptr(), t.ptr() + t.numel(), 0.0);
  }
  Rng rng(53);
  Tensor x = rand_images(rng, 2, 8);
  // constant logits: every input gradient is exactly zero
  CHECK(fgsm(m, x, {0, 1}, 0.3).data() == x.data());
  CHECK(fgsm_targeted(m, x, {1, 2}, 0.3).data() == x.data());
}

TEST_CASE("attack outputs stay in [0,1] and inside the infinity ball") {
  Rng rng(55);
  Model m = generic_model(Arch::attacker_cnn, 55);
  Tensor x = rand_images(rng, 4, 8);
  const std::vector<int> y = {0, 1, 2, 0};
  const std::vector<int> t = default_targets(y, 3);

  auto check_ball = [&](const Tensor& adv, double budget) {
    REQUIRE(adv.shape() == x.shape());
    for (size_t i = 0; i < adv.data().size(); ++i) {
      CHECK(adv.data()[i] >= 0.0);
      CHECK(adv.data()[i] <= 1.0);
      CHECK(std::abs(adv.data()[i] - x.data()[i]) <= budget + 1e-9);
    }
  };
  check_ball(fgsm(m, x, y, 0.3), 0.3);
  check_ball(bim(m, x, t, 0.05, 4), 0.2);

  Model masked = generic_model(Arch::masked_cnn_r, 56);
  check_ball(rbim(masked, x, t, 0.05, 4, 0.1), 0.2);
}

TEST_CASE("bim: one step equals targeted fgsm; iteration composes as a prefix") {
  Rng rng(57);
  Model m = generic_model(Arch::attacker_cnn, 57);
  Tensor x = rand_images(rng, 2, 8);
  const std::vector<int> t = {1, 0};

  CHECK(bim(m, x, t, 0.02, 1).data() == fgsm_targeted(m, x, t, 0.02).data());

  Tensor two = bim(m, x, t, 0.02, 2);
  Tensor three = bim(m, x, t, 0.02, 3);
  CHECK(three.data() == bim(m, two, t, 0.02, 1).data());
}

TEST_CASE("rbim: gamma 0 reproduces bim bit for bit; decoder required otherwise") {
  Rng rng(59);
  Model masked = generic_model(Arch::masked_cnn_r, 59);
  Tensor x = rand_images(rng, 2, 8);
  const std::vector<int> t = {2, 1};

  CHECK(rbim(masked, x, t, 0.03, 3, 0.0).data() == bim(masked, x, t, 0.03, 3).data());

  // the reconstruction term changes the walk
  Tensor with_recon = rbim(masked, x, t, 0.03, 3, 0.5);
  CHECK(with_recon.data() != bim(masked, x, t, 0.03, 3).data());

  Model atk = generic_model(Arch::attacker_cnn, 59);
  CHECK_THROWS_AS(rbim(atk, x, t, 0.03, 3, 0.5), ShapeError);
  CHECK_NOTHROW(rbim(atk, x, t, 0.03, 1, 0.0));  // bim path needs no decoder
}

TEST_CASE("attacks are per-example independent") {
  Rng rng(61);
  Model m = generic_model(Arch::attacker_cnn, 61);
  Tensor x = rand_images(rng, 3, 8);
  const std::vector<int> y = {0, 1, 2};
  const std::vector<int> t = default_targets(y, 3);

  Tensor joint_f = fgsm(m, x, y, 0.2);
  Tensor joint_b = bim(m, x, t, 0.05, 3);
  for (int i = 0; i < 3; ++i) {
    std::vector<double> one(x.data().begin() + i * 64, x.data().begin() + (i + 1) * 64);
    Tensor xi({1, 1, 8, 8}, one);
    Tensor fi = fgsm(m, xi, {y[static_cast<size_t>(i)]}, 0.2);
    Tensor bi = bim(m, xi, {t[static_cast<size_t>(i)]}, 0.05, 3);
    for (int k = 0; k < 64; ++k) {
      CHECK(joint_f.data()[static_cast<size_t>(i * 64 + k)] == fi.data()[static_cast<size_t>(k)]);
      CHECK(joint_b.data()[static_cast<size_t>(i * 64 + k)] == bi.data()[static_cast<size_t>(k)]);
    }
  }
}

TEST_CASE("default_targets and input validation") {
  CHECK(default_targets({0, 9, 5}, 10) == std::vector<int>{1, 0, 6});
  CHECK(default_targets({2}, 3) == std::vector<int>{0});
  CHECK_THROWS_AS(default_targets({0}, 1), ShapeError);

  Rng rng(63);
  Model m = generic_model(Arch::attacker_cnn, 63);
  Tensor x = rand_images(rng, 2, 8);
  CHECK_THROWS_AS(fgsm(m, x, {0}, 0.1), ShapeError);          // batch mismatch
  CHECK_THROWS_AS(fgsm(m, x, {0, 7}, 0.1), ShapeError);       // label range
  CHECK_THROWS_AS(fgsm(m, x, {0, 1}, -0.1), ShapeError);      // negative eps
  CHECK_THROWS_AS(bim(m, x, {0, 1}, -0.1, 3), ShapeError);    // negative alpha
  CHECK_THROWS_AS(bim(m, x, {0, 1}, 0.1, 0), ShapeError);     // zero steps
  CHECK_THROWS_AS(fgsm(m, Tensor::zeros({2, 64}), {0, 1}, 0.1), ShapeError);
}

TEST_CASE("run_attack: dispatch, metadata, and persistence round trip") {
  TempDir tmp;
  Rng rng(65);
  Model m = generic_model(Arch::masked_cnn_r, 65);
  Batch b{rand_images(rng, 3, 8), {0, 1, 2}, {10, 20, 30}};

  AttackSpec fspec;
  fspec.kind = "fgsm";
  fspec.eps = 0.25;
  AttackOutput fout = run_attack(m, b, fspec);
  CHECK(fout.targets == std::vector<int>{-1, -1, -1});
  CHECK(fout.budget == 0.25);
  CHECK(fout.adv.data() == fgsm(m, b.images, b.labels, 0.25).data());
  CHECK(fout.pred_before == argmax_rows(m.forward(b.images).class_scores));
  CHECK(fout.pred_after == argmax_rows(m.forward(fout.adv).class_scores));

  AttackSpec tspec = fspec;
  tspec.targeted = true;
  AttackOutput tout = run_attack(m, b, tspec);
  CHECK(tout.targets == std::vector<int>{1, 2, 0});
  CHECK(tout.adv.data() == fgsm_targeted(m, b.images, tout.targets, 0.25).data());

  AttackSpec rspec;
  rspec.kind = "rbim";
  rspec.alpha = 0.05;
  rspec.steps = 3;
  rspec.gamma = 0.2;
  AttackOutput rout = run_attack(m, b, rspec);
  CHECK(rout.budget == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(rout.targets == std::vector<int>{1, 2, 0});

  // fixed target overrides the (label+1) scheme
  AttackSpec fixed = tspec;
  fixed.fixed_target = 2;
  CHECK(run_attack(m, b, fixed).targets == std::vector<int>{2, 2, 2});
  fixed.fixed_target = 3;
  CHECK_THROWS_AS(run_attack(m, b, fixed), ShapeError);

  AttackSpec bad;
  bad.kind = "pgd";
  CHECK_THROWS_AS(run_attack(m, b, bad), DataError);

  // round trip: manifest fields and both image files come back exactly
  save_attack(tmp.file("atk"), rout);
  AttackOutput back = load_attack(tmp.file("atk"));
  CHECK(back.indices == rout.indices);
  CHECK(back.true_labels == rout.true_labels);
  CHECK(back.targets == rout.targets);
  CHECK(back.pred_before == rout.pred_before);
  CHECK(back.pred_after == rout.pred_after);
  CHECK(back.adv.shape() == rout.adv.shape());
  CHECK(back.adv.data() == rout.adv.data());  // f64 storage, bit-exact
  CHECK(back.clean.data() == b.images.data());

  std::ofstream(tmp.file("bad.csv")) << "wrong,header\n1,2\n";
  save_tensor(tmp.file("bad_adv.drct"), rout.adv);
  save_tensor(tmp.file("bad_clean.drct"), rout.clean);
  CHECK_THROWS_AS(load_attack(tmp.file("bad")), DataError);
}

TEST_CASE("tensor files: round trip and error handling") {
  TempDir tmp;
  Rng rng(67);
  std::vector<double> v(24);
  for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
  Tensor t({2, 3, 4}, v);
  save_tensor(tmp.file("t.drct"), t);
  Tensor back = load_tensor(tmp.file("t.drct"));
  CHECK(back.shape() == t.shape());
  CHECK(back.data() == t.data());

  std::ofstream(tmp.file("junk.drct")) << "not a tensor";
  CHECK_THROWS_AS(load_tensor(tmp.file("junk.drct")), DataError);

  std::ifstream in(tmp.file("t.drct"), std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  std::ofstream cut(tmp.file("cut.drct"), std::ios::binary);
  cut.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  cut.close();
  CHECK_THROWS_AS(load_tensor(tmp.file("cut.drct")), DataError);

  CHECK_THROWS_AS(load_tensor(tmp.file("missing.drct")), DataError);
  CHECK_THROWS_AS(save_tensor(tmp.file("x.drct"), Tensor()), DataError);
}
