#include "darccc/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "darccc/util.hpp"

namespace darccc {

namespace {

void check_attack_input(const char* who, const Model& m, const Tensor& x,
                        const std::vector<int>& labels) {
  if (x.rank() != 4 || x.dim(1) != 1) {
    throw ShapeError(strfmt("%s: expected [b,1,h,w] images, got %s", who,
                            shape_str(x.shape()).c_str()));
  }
  if (static_cast<long>(labels.size()) != x.dim(0)) {
    throw ShapeError(strfmt("%s: %zu labels for batch of %d", who, labels.size(),
                            x.dim(0)));
  }
  const int classes = m.config().num_classes;
  for (int l : labels) {
    if (l < 0 || l >= classes) {
      throw ShapeError(strfmt("%s: label %d out of range [0,%d)", who, l, classes));
    }
  }
}

// Gradient of the attack objective with respect to the input, mapped to
// {-1, 0, +1} per element.
std::vector<double> grad_sign(const Model& m, const Tensor& x,
                              const std::vector<int>& labels, double gamma) {
  Tensor xg = x.clone();
  xg.set_requires_grad(true);
  Graph g;
  {
    Graph::Activation act(g);
    ClassPoseBlock out = m.forward(xg);
    Tensor j = mean(softmax_cross_entropy(out.class_scores, labels));
    if (gamma != 0.0) {
      // reconstruction distance of the class the model currently predicts
      std::vector<int> winners = argmax_rows(out.class_scores);
      Tensor flat = reshape(xg, {xg.dim(0), xg.dim(2) * xg.dim(3)});
      Tensor rec = m.reconstruct(out, winners);
      Tensor dist = sqrt_op(add_scalar(sum(square(sub(flat, rec)), 1), 1e-12));
      j = add(j, mul_scalar(mean(dist), gamma));
    }
    g.backward(j);
  }
  std::vector<double> s(xg.grad().size());
  for (size_t i = 0; i < s.size(); ++i) {
    const double gv = xg.grad()[i];
    s[i] = (gv > 0.0) ? 1.0 : (gv < 0.0 ? -1.0 : 0.0);
  }
  return s;
}

Tensor signed_step(const Tensor& x, const std::vector<double>& sign, double scale) {
  std::vector<double> out(x.data());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::min(1.0, std::max(0.0, out[i] + scale * sign[i]));
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace

Tensor fgsm(const Model& m, const Tensor& x, const std::vector<int>& labels,
            double eps) {
  check_attack_input("fgsm", m, x, labels);
  if (eps < 0.0) throw ShapeError("fgsm: eps must be >= 0");
  return signed_step(x, grad_sign(m, x, labels, 0.0), eps);
}

Tensor fgsm_targeted(const Model& m, const Tensor& x,
                     const std::vector<int>& targets, double eps) {
  check_attack_input("fgsm_targeted", m, x, targets);
  if (eps < 0.0) throw ShapeError("fgsm_targeted: eps must be >= 0");
  return signed_step(x, grad_sign(m, x, targets, 0.0), -eps);
}

Tensor bim(const Model& m, const Tensor& x, const std::vector<int>& targets,
           double alpha, int steps) {
  return rbim(m, x, targets, alpha, steps, 0.0);
}

Tensor rbim(const Model& m, const Tensor& x, const std::vector<int>& targets,
            double alpha, int steps, double gamma) {
  check_attack_input("rbim", m, x, targets);
  if (alpha < 0.0) throw ShapeError("rbim: alpha must be >= 0");
  if (steps < 1) throw ShapeError("rbim: steps must be >= 1");
  if (gamma != 0.0 && !m.has_decoder()) {
    throw ShapeError("rbim: " + arch_name(m.arch()) +
                     " has no decoder for the reconstruction term");
  }
  Tensor cur = x.clone();
  for (int t = 0; t < steps; ++t) {
    cur = signed_step(cur, grad_sign(m, cur, targets, gamma), -alpha);
  }
  return cur;
}

std::vector<int> default_targets(const std::vector<int>& labels, int num_classes) {
  if (num_classes < 2) throw ShapeError("default_targets: need at least 2 classes");
  std::vector<int> out(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    out[i] = (labels[i] + 1) % num_classes;
  }
  return out;
}

AttackOutput run_attack(const Model& m, const Batch& b, const AttackSpec& spec) {
  AttackOutput out;
  out.spec = spec;
  out.clean = b.images;
  out.indices = b.indices;
  out.true_labels = b.labels;
  out.pred_before = argmax_rows(m.forward(b.images).class_scores);

  const bool targeted = spec.targeted || spec.kind != "fgsm";
  if (targeted) {
    if (spec.fixed_target >= 0) {
      if (spec.fixed_target >= m.config().num_classes) {
        throw ShapeError(strfmt("run_attack: target %d out of range [0,%d)",
                                spec.fixed_target, m.config().num_classes));
      }
      out.targets.assign(b.labels.size(), spec.fixed_target);
    } else {
      out.targets = default_targets(b.labels, m.config().num_classes);
    }
  } else {
    out.targets.assign(b.labels.size(), -1);
  }

  if (spec.kind == "fgsm") {
    out.adv = targeted ? fgsm_targeted(m, b.images, out.targets, spec.eps)
                       : fgsm(m, b.images, b.labels, spec.eps);
    out.budget = spec.eps;
  } else if (spec.kind == "bim") {
    out.adv = bim(m, b.images, out.targets, spec.alpha, spec.steps);
    out.budget = spec.alpha * spec.steps;
  } else if (spec.kind == "rbim") {
    out.adv = rbim(m, b.images, out.targets, spec.alpha, spec.steps, spec.gamma);
    out.budget = spec.alpha * spec.steps;
  } else {
    throw DataError("unknown attack kind \"" + spec.kind + "\"");
  }

  out.pred_after = argmax_rows(m.forward(out.adv).class_scores);
  return out;
}

void save_attack(const std::string& prefix, const AttackOutput& out) {
  const std::string csv_path = prefix + ".csv";
  std::ofstream f(csv_path);
  if (!f) throw DataError("cannot open " + csv_path);
  f << "index,true,target,pred_before,pred_after\n";
  for (size_t i = 0; i < out.true_labels.size(); ++i) {
    f << strfmt("%ld,%d,%d,%d,%d\n", out.indices[i], out.true_labels[i],
                out.targets[i], out.pred_before[i], out.pred_after[i]);
  }
  if (!f) throw DataError("write failed on " + csv_path);
  f.close();
  save_tensor(prefix + "_adv.drct", out.adv);
  save_tensor(prefix + "_clean.drct", out.clean);
}

AttackOutput load_attack(const std::string& prefix) {
  const std::string csv_path = prefix + ".csv";
  std::ifstream f(csv_path);
  if (!f) throw DataError("cannot open " + csv_path);
  std::string line;
  if (!std::getline(f, line) || line != "index,true,target,pred_before,pred_after") {
    throw DataError("bad attack manifest header in " + csv_path);
  }
  AttackOutput out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    long idx;
    int t, tgt, pb, pa;
    char c1, c2, c3, c4;
    if (!(row >> idx >> c1 >> t >> c2 >> tgt >> c3 >> pb >> c4 >> pa) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw DataError("bad attack manifest row in " + csv_path + ": " + line);
    }
    out.indices.push_back(idx);
    out.true_labels.push_back(t);
    out.targets.push_back(tgt);
    out.pred_before.push_back(pb);
    out.pred_after.push_back(pa);
  }
  out.adv = load_tensor(prefix + "_adv.drct");
  out.clean = load_tensor(prefix + "_clean.drct");
  if (out.adv.rank() != 4 ||
      out.adv.dim(0) != static_cast<long>(out.true_labels.size()) ||
      out.clean.shape() != out.adv.shape()) {
    throw DataError("attack files under " + prefix + " do not match the manifest");
  }
  return out;
}

}  // namespace darccc
