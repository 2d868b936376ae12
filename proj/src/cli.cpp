#include "darccc/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "darccc/attacks.hpp"
#include "darccc/data.hpp"
#include "darccc/detection.hpp"
#include "darccc/models.hpp"
#include "darccc/tensor.hpp"
#include "darccc/training.hpp"
#include "darccc/util.hpp"

namespace darccc {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kToolVersion = "0.1.0";

struct GlobalOpts {
  std::uint64_t seed = 1;
  std::string data_dir;           // empty -> $DARCCC_DATA_DIR at use time
  std::string out_dir = ".";
  std::vector<std::string> argv;  // the raw command line, for the manifest
};

std::string out_path(const GlobalOpts& g, const std::string& name) {
  return (fs::path(g.out_dir) / name).string();
}

// Every command records how it was invoked beside whatever it wrote, so a
// run can be reproduced from its output directory alone.
void write_manifest(const GlobalOpts& g, const std::string& command,
                    const json& flags, const std::vector<std::string>& outputs) {
  json j;
  j["command"] = command;
  j["argv"] = g.argv;
  j["seed"] = g.seed;
  j["out_dir"] = g.out_dir;
  j["flags"] = flags;
  j["versions"] = {{"tool", kToolVersion},
                   {"checkpoint_format", 1},
                   {"tensor_format", 1}};
  j["outputs"] = outputs;
  const std::string path = out_path(g, command + "-manifest.json");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write manifest " + path);
  f << j.dump(2) << "\n";
}

Arch arch_from_cli(const std::string& name) {
  return name == "attacker" ? Arch::attacker_cnn : arch_from_name(name);
}

void check_square(const Dataset& d) {
  if (d.images.dim(2) != d.images.dim(3)) {
    throw DataError(strfmt("dataset \"%s\": expected square images, got %ldx%ld",
                           d.name.c_str(), d.images.dim(2), d.images.dim(3)));
  }
}

void check_model_data(const Model& m, const Dataset& d) {
  if (d.images.dim(2) != m.config().input_hw ||
      d.images.dim(3) != m.config().input_hw) {
    throw DataError(strfmt(
        "dataset \"%s\" images are %ldx%ld but the model expects %dx%d",
        d.name.c_str(), d.images.dim(2), d.images.dim(3), m.config().input_hw,
        m.config().input_hw));
  }
}

Split load_split(const std::string& dir, const std::string& name,
                 double val_fraction, std::uint64_t seed) {
  Dataset train = load_named(dir, name, true);
  Dataset test = load_named(dir, name, false);
  return split_dataset(train, test, val_fraction, seed);
}

LoadedModel load_model(const std::string& path, bool need_decoder,
                       bool need_threshold) {
  LoadedModel lm = load_checkpoint(path);
  if (need_decoder && !lm.model.has_decoder()) {
    throw DataError("checkpoint \"" + path +
                    "\" has no decoder; the detector needs reconstructions");
  }
  if (need_threshold && !lm.threshold) {
    throw DataError("checkpoint \"" + path +
                    "\" has no calibrated threshold; run calibrate first");
  }
  return lm;
}

Threshold checkpoint_threshold(const LoadedModel& lm) {
  Threshold t;
  t.value = *lm.threshold;
  t.method = "checkpoint";
  return t;
}

// Attacks one batch at a time (bounded graph memory) and stitches the
// results back into a single output in sample order.
AttackOutput attack_dataset(const Model& m, const Dataset& sample,
                            const AttackSpec& spec, int batch_size) {
  Batcher batches(sample, batch_size, std::nullopt);
  std::vector<Tensor> adv, clean;
  AttackOutput all;
  auto append = [](auto& into, const auto& from) {
    into.insert(into.end(), from.begin(), from.end());
  };
  while (std::optional<Batch> b = batches.next()) {
    AttackOutput part = run_attack(m, *b, spec);
    all.spec = part.spec;
    all.budget = part.budget;
    adv.push_back(part.adv);
    clean.push_back(part.clean);
    append(all.indices, part.indices);
    append(all.true_labels, part.true_labels);
    append(all.targets, part.targets);
    append(all.pred_before, part.pred_before);
    append(all.pred_after, part.pred_after);
  }
  all.adv = adv.size() == 1 ? adv[0] : concat(adv, 0);
  all.clean = clean.size() == 1 ? clean[0] : concat(clean, 0);
  return all;
}

long count_flips(const AttackOutput& out) {
  long flipped = 0;
  for (size_t i = 0; i < out.pred_after.size(); ++i) {
    flipped += out.pred_after[i] != out.pred_before[i];
  }
  return flipped;
}

// --- train ------------------------------------------------------------------

struct TrainOpts {
  std::string arch, dataset;
  int epochs = 20, batch_size = 128, routing = 3, log_every = 0;
  double lr = 1e-3, eta = 0.0005, val_fraction = 0.1;
  long train_subset = 0, val_subset = 0;
};

int run_train(const GlobalOpts& g, const TrainOpts& o) {
  const std::string dir = resolve_data_dir(g.data_dir);
  Split split = load_split(dir, o.dataset, o.val_fraction, g.seed);
  check_square(split.train);
  if (o.train_subset > 0) split.train = subset(split.train, o.train_subset, g.seed);
  if (o.val_subset > 0) split.validation = subset(split.validation, o.val_subset, g.seed);

  ModelConfig cfg;
  cfg.arch = arch_from_cli(o.arch);
  cfg.routing_iterations = o.routing;
  cfg.input_hw = static_cast<int>(split.train.images.dim(2));
  Model m(cfg, g.seed);

  const std::string stem = o.arch + "_" + o.dataset;
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.seed = g.seed;
  tc.adam.lr = o.lr;
  tc.loss.eta = o.eta;
  tc.metrics_path = out_path(g, stem + "_metrics.csv");
  tc.checkpoint_path = out_path(g, stem + ".drcc");
  tc.log_every = o.log_every;

  std::cout << strfmt(
      "train arch=%s dataset=%s n_train=%ld n_val=%ld n_test=%ld params=%ld\n",
      o.arch.c_str(), o.dataset.c_str(), split.train.size(),
      split.validation.size(), split.test.size(), m.param_count());
  TrainResult res = train_model(m, split, tc, &std::cout);

  LoadedModel best = load_checkpoint(tc.checkpoint_path);
  const double test_acc = evaluate(best.model, split.test, tc.batch_size);
  std::cout << strfmt("best_epoch=%d best_val_accuracy=%.6f\n", res.best_epoch,
                      res.best_val_acc);
  std::cout << strfmt("test_accuracy=%.6f\n", test_acc);

  json flags = {{"arch", o.arch},
                {"dataset", o.dataset},
                {"data_dir", dir},
                {"epochs", o.epochs},
                {"batch_size", o.batch_size},
                {"lr", o.lr},
                {"eta", o.eta},
                {"routing", o.routing},
                {"val_fraction", o.val_fraction},
                {"train_subset", o.train_subset},
                {"val_subset", o.val_subset},
                {"best_epoch", res.best_epoch},
                {"test_accuracy", test_acc}};
  write_manifest(g, "train", flags, {tc.checkpoint_path, tc.metrics_path});
  return 0;
}

// --- calibrate --------------------------------------------------------------

struct CalibrateOpts {
  std::string model, dataset, method = "percentile";
  double percentile = 95.0, val_fraction = 0.1;
  long cal_subset = 0;
  int batch_size = 128;
};

int run_calibrate(const GlobalOpts& g, const CalibrateOpts& o) {
  LoadedModel lm = load_model(o.model, /*need_decoder=*/true, false);
  const std::string dir = resolve_data_dir(g.data_dir);
  Split split = load_split(dir, o.dataset, o.val_fraction, g.seed);
  // The percentile rule calibrates on held-out validation data; train-max by
  // definition uses the training side.
  Dataset cal = o.method == "train-max" ? std::move(split.train)
                                        : std::move(split.validation);
  if (o.cal_subset > 0) cal = subset(cal, o.cal_subset, g.seed);
  check_square(cal);
  check_model_data(lm.model, cal);

  Threshold thr = o.method == "train-max"
                      ? calibrate_train_max(lm.model, cal, o.batch_size)
                      : calibrate(lm.model, cal, o.percentile, o.batch_size);
  save_checkpoint(o.model, lm.model, thr.value);
  std::cout << strfmt("threshold=%.9f method=%s n=%ld flag_rate=%.6f\n",
                      thr.value, thr.method.c_str(), thr.calibration_n,
                      thr.calibration_flag_rate);

  json flags = {{"model", o.model},
                {"dataset", o.dataset},
                {"data_dir", dir},
                {"method", o.method},
                {"percentile", o.percentile},
                {"val_fraction", o.val_fraction},
                {"cal_subset", o.cal_subset},
                {"threshold", thr.value},
                {"flag_rate", thr.calibration_flag_rate}};
  write_manifest(g, "calibrate", flags, {o.model});
  return 0;
}

// --- attack -----------------------------------------------------------------

struct AttackOpts {
  std::string model, dataset, family, prefix = "attack";
  double eps = 0.3, alpha = 0.01, gamma = 1.0;
  int steps = 30, batch_size = 100, target = -1;
  long count = 100;
  bool targeted = false;
};

AttackSpec spec_from_opts(const AttackOpts& o) {
  AttackSpec spec;
  spec.kind = o.family;
  // A fixed target implies a targeted run; bim/rbim are targeted by design.
  spec.targeted = o.targeted || o.target >= 0 || o.family != "fgsm";
  spec.fixed_target = o.target;
  if (o.family == "fgsm") {
    spec.eps = o.eps;
    spec.alpha = o.eps;  // one step of size eps
    spec.steps = 1;
    spec.gamma = 0.0;
  } else {
    spec.alpha = o.alpha;
    spec.steps = o.steps;
    spec.gamma = o.family == "rbim" ? o.gamma : 0.0;
  }
  return spec;
}

int run_attack_cmd(const GlobalOpts& g, const AttackOpts& o) {
  LoadedModel lm = load_checkpoint(o.model);
  const std::string dir = resolve_data_dir(g.data_dir);
  Dataset test = load_named(dir, o.dataset, false);
  check_square(test);
  check_model_data(lm.model, test);
  Dataset sample = subset(test, o.count, g.seed);

  AttackSpec spec = spec_from_opts(o);
  AttackOutput out = attack_dataset(lm.model, sample, spec, o.batch_size);
  const std::string prefix = out_path(g, o.prefix);
  save_attack(prefix, out);

  const long n = static_cast<long>(out.true_labels.size());
  const long flipped = count_flips(out);
  std::cout << strfmt("attack family=%s n=%ld eps=%.6f flipped=%ld flip_rate=%.6f\n",
                      o.family.c_str(), n, out.budget, flipped,
                      static_cast<double>(flipped) / static_cast<double>(n));

  json flags = {{"model", o.model},
                {"dataset", o.dataset},
                {"data_dir", dir},
                {"family", o.family},
                {"eps", out.budget},  // derived alpha*steps for bim/rbim
                {"alpha", spec.alpha},
                {"steps", spec.steps},
                {"gamma", spec.gamma},
                {"targeted", spec.targeted},
                {"target", o.target},
                {"count", n},
                {"flipped", flipped}};
  write_manifest(g, "attack", flags,
                 {prefix + ".csv", prefix + "_adv.drct", prefix + "_clean.drct"});
  return 0;
}

// --- detect -----------------------------------------------------------------

struct DetectOpts {
  std::string model, batch;
  int batch_size = 128;
};

int run_detect(const GlobalOpts& g, const DetectOpts& o) {
  LoadedModel lm = load_model(o.model, /*need_decoder=*/true, /*need_threshold=*/true);
  AttackOutput att = load_attack(o.batch);
  if (att.adv.dim(2) != lm.model.config().input_hw ||
      att.adv.dim(3) != lm.model.config().input_hw) {
    throw DataError(strfmt(
        "attack batch images are %ldx%ld but the model expects %dx%d",
        att.adv.dim(2), att.adv.dim(3), lm.model.config().input_hw,
        lm.model.config().input_hw));
  }

  DetectionReport rep =
      make_report(lm.model, att, att.clean, checkpoint_threshold(lm), o.batch_size);
  const std::string report_path = out_path(g, "report.csv");
  const std::string hist_path = out_path(g, "histogram.csv");
  write_report_csv(report_path, rep);
  write_histogram_csv(hist_path, rep.clean_distance, rep.distance);
  std::cout << strfmt(
      "detect n=%ld attack_success_rate=%.6f attack_detection_rate=%.6f "
      "successful_attack_detection_rate=%.6f false_positive_rate=%.6f "
      "auc=%.6f threshold=%.9f\n",
      rep.n, rep.attack_success_rate, rep.attack_detection_rate,
      rep.successful_attack_detection_rate, rep.false_positive_rate, rep.auc,
      rep.threshold.value);

  json flags = {{"model", o.model},
                {"batch", o.batch},
                {"threshold", rep.threshold.value},
                {"attack_success_rate", rep.attack_success_rate},
                {"attack_detection_rate", rep.attack_detection_rate},
                {"successful_attack_detection_rate", rep.successful_attack_detection_rate},
                {"false_positive_rate", rep.false_positive_rate},
                {"auc", rep.auc}};
  write_manifest(g, "detect", flags, {report_path, hist_path});
  return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalOpts {
  std::string model, dataset, split = "test";
  double val_fraction = 0.1;
  long eval_subset = 0;
  int batch_size = 128;
};

int run_eval(const GlobalOpts& g, const EvalOpts& o) {
  LoadedModel lm = load_checkpoint(o.model);
  const std::string dir = resolve_data_dir(g.data_dir);
  Dataset d;
  if (o.split == "test") {
    d = load_named(dir, o.dataset, false);
  } else {
    Split s = load_split(dir, o.dataset, o.val_fraction, g.seed);
    d = o.split == "train" ? std::move(s.train) : std::move(s.validation);
  }
  if (o.eval_subset > 0) d = subset(d, o.eval_subset, g.seed);
  check_square(d);
  check_model_data(lm.model, d);

  double mean_loss = 0.0;
  const double acc = evaluate(lm.model, d, o.batch_size, &mean_loss);
  std::cout << strfmt("eval dataset=%s split=%s n=%ld\n", o.dataset.c_str(),
                      o.split.c_str(), d.size());
  std::cout << strfmt("accuracy=%.6f mean_loss=%.8f\n", acc, mean_loss);

  const std::string csv_path = out_path(g, "eval.csv");
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw DataError("cannot write " + csv_path);
  csv << "metric,value\n";
  csv << strfmt("n,%ld\n", d.size());
  csv << strfmt("accuracy,%.6f\n", acc);
  csv << strfmt("mean_loss,%.8f\n", mean_loss);

  json flags = {{"model", o.model},     {"dataset", o.dataset},
                {"data_dir", dir},      {"split", o.split},
                {"val_fraction", o.val_fraction},
                {"eval_subset", o.eval_subset},
                {"accuracy", acc}};
  if (lm.model.has_decoder() && lm.threshold) {
    Threshold thr = checkpoint_threshold(lm);
    DistanceResult dist =
        reconstruction_distances(lm.model, d.images, o.batch_size);
    std::vector<char> flagged = detect(dist.distance, thr);
    const long hits = std::count(flagged.begin(), flagged.end(), char(1));
    const double flag_rate =
        static_cast<double>(hits) / static_cast<double>(d.size());
    std::cout << strfmt("clean_flag_rate=%.6f threshold=%.9f\n", flag_rate,
                        thr.value);
    csv << strfmt("clean_flag_rate,%.6f\n", flag_rate);
    csv << strfmt("threshold,%.9f\n", thr.value);
    flags["clean_flag_rate"] = flag_rate;
    flags["threshold"] = thr.value;
  }
  write_manifest(g, "eval", flags, {csv_path});
  return 0;
}

// --- recon-grid -------------------------------------------------------------

struct GridOpts {
  std::string model, dataset;
  long count = 8;
  bool normalize = false;
};

int run_recon_grid(const GlobalOpts& g, const GridOpts& o) {
  LoadedModel lm = load_model(o.model, /*need_decoder=*/true, false);
  const std::string dir = resolve_data_dir(g.data_dir);
  Dataset test = load_named(dir, o.dataset, false);
  check_square(test);
  check_model_data(lm.model, test);
  Dataset sample = take(test, o.count);

  const std::string path = out_path(g, "recon_grid.pgm");
  write_recon_grid(path, lm.model, sample.images, o.normalize);
  std::cout << strfmt("recon_grid=%s columns=%ld rows=%d\n", path.c_str(),
                      sample.size(), lm.model.config().num_classes + 1);

  json flags = {{"model", o.model},
                {"dataset", o.dataset},
                {"data_dir", dir},
                {"count", sample.size()},
                {"normalize", o.normalize}};
  write_manifest(g, "recon-grid", flags, {path});
  return 0;
}

// --- report -----------------------------------------------------------------

struct ReportOpts {
  std::string model, attack_model, dataset, family;
  std::vector<double> eps_grid;
  std::vector<int> steps_grid;
  double alpha = 0.01, gamma = 1.0;
  long count = 100;
  int batch_size = 100, target = -1;
  bool targeted = false;
};

int run_report(const GlobalOpts& g, const ReportOpts& o) {
  LoadedModel defended =
      load_model(o.model, /*need_decoder=*/true, /*need_threshold=*/true);
  std::optional<LoadedModel> surrogate;
  if (!o.attack_model.empty()) surrogate = load_checkpoint(o.attack_model);
  const Model& crafted_on = surrogate ? surrogate->model : defended.model;

  const std::string dir = resolve_data_dir(g.data_dir);
  Dataset test = load_named(dir, o.dataset, false);
  check_square(test);
  check_model_data(defended.model, test);
  check_model_data(crafted_on, test);
  Dataset sample = subset(test, o.count, g.seed);

  std::vector<double> eps_grid = o.eps_grid;
  std::vector<int> steps_grid = o.steps_grid;
  if (o.family == "fgsm" && eps_grid.empty()) {
    eps_grid = {0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  }
  if (o.family != "fgsm" && steps_grid.empty()) {
    steps_grid = {10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  }
  const size_t n_points =
      o.family == "fgsm" ? eps_grid.size() : steps_grid.size();

  const Threshold thr = checkpoint_threshold(defended);
  const std::string curves_path = out_path(g, "curves.csv");
  std::ofstream curves(curves_path, std::ios::binary);
  if (!curves) throw DataError("cannot write " + curves_path);
  curves << "family,eps,alpha,steps,gamma,n,error_rate,success_rate,"
            "detection_rate,successful_attack_detection_rate,"
            "false_positive_rate,auc\n";
  std::vector<std::string> outputs = {curves_path};

  for (size_t i = 0; i < n_points; ++i) {
    AttackOpts point;
    point.family = o.family;
    point.alpha = o.alpha;
    point.gamma = o.gamma;
    point.targeted = o.targeted;
    point.target = o.target;
    std::string tag;
    if (o.family == "fgsm") {
      point.eps = eps_grid[i];
      tag = strfmt("eps_%g", point.eps);
    } else {
      point.steps = steps_grid[i];
      tag = strfmt("steps_%d", point.steps);
    }
    AttackSpec spec = spec_from_opts(point);
    AttackOutput att = attack_dataset(crafted_on, sample, spec, o.batch_size);
    DetectionReport rep =
        make_report(defended.model, att, att.clean, thr, o.batch_size);

    long errors = 0;
    for (size_t k = 0; k < rep.pred_after.size(); ++k) {
      errors += rep.pred_after[k] != rep.true_labels[k];
    }
    const double error_rate =
        static_cast<double>(errors) / static_cast<double>(rep.n);
    curves << strfmt("%s,%.6f,%.6f,%d,%.6f,%ld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                     o.family.c_str(), att.budget, spec.alpha, spec.steps,
                     spec.gamma, rep.n, error_rate, rep.attack_success_rate,
                     rep.attack_detection_rate,
                     rep.successful_attack_detection_rate,
                     rep.false_positive_rate, rep.auc);
    curves.flush();

    const std::string hist_path = out_path(g, "hist_" + tag + ".csv");
    write_histogram_csv(hist_path, rep.clean_distance, rep.distance);
    outputs.push_back(hist_path);
    std::cout << strfmt(
        "%s: error_rate=%.6f success_rate=%.6f detection_rate=%.6f "
        "sadr=%.6f fp=%.6f auc=%.6f\n",
        tag.c_str(), error_rate, rep.attack_success_rate,
        rep.attack_detection_rate, rep.successful_attack_detection_rate,
        rep.false_positive_rate, rep.auc);
  }

  json flags = {{"model", o.model},
                {"attack_model", o.attack_model},
                {"dataset", o.dataset},
                {"data_dir", dir},
                {"family", o.family},
                {"eps_grid", eps_grid},
                {"steps_grid", steps_grid},
                {"alpha", o.alpha},
                {"gamma", o.gamma},
                {"count", sample.size()},
                {"targeted", o.targeted},
                {"target", o.target}};
  write_manifest(g, "report", flags, outputs);
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
  GlobalOpts g;
  g.argv.assign(argv, argv + argc);

  CLI::App app{"darccc: detecting adversaries by reconstruction from class-"
               "conditional capsules"};
  app.require_subcommand(1);
  app.add_option("--seed", g.seed, "global RNG seed")->capture_default_str();
  app.add_option("--data-dir", g.data_dir,
                 "dataset root (default $DARCCC_DATA_DIR)");
  app.add_option("--out-dir", g.out_dir, "output directory")
      ->capture_default_str();

  TrainOpts t;
  CLI::App* ct = app.add_subcommand(
      "train", "train a model and keep the best-validation checkpoint");
  ct->add_option("--arch", t.arch, "architecture")
      ->required()
      ->check(CLI::IsMember({"capsule", "cnn_r", "masked_cnn_r", "attacker"}));
  ct->add_option("--dataset", t.dataset, "dataset name")
      ->required()
      ->check(CLI::IsMember({"mnist", "fashion"}));
  ct->add_option("--epochs", t.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  ct->add_option("--batch-size", t.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  ct->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str();
  ct->add_option("--eta", t.eta, "reconstruction loss weight")->capture_default_str();
  ct->add_option("--routing", t.routing, "routing iterations")
      ->check(CLI::PositiveNumber)->capture_default_str();
  ct->add_option("--val-fraction", t.val_fraction)->capture_default_str();
  ct->add_option("--subset", t.train_subset,
                 "cap the training split at N seeded-random examples (0 = all)")
      ->capture_default_str();
  ct->add_option("--val-subset", t.val_subset,
                 "cap the validation split (0 = all)")->capture_default_str();
  ct->add_option("--log-every", t.log_every,
                 "progress line every N batches (0 = off)")->capture_default_str();

  CalibrateOpts c;
  CLI::App* cc = app.add_subcommand(
      "calibrate", "write a detection threshold into a checkpoint");
  cc->add_option("--model", c.model, "checkpoint path")->required();
  cc->add_option("--dataset", c.dataset)->required()
      ->check(CLI::IsMember({"mnist", "fashion"}));
  cc->add_option("--percentile", c.percentile,
                 "nearest-rank percentile of clean validation distances")
      ->capture_default_str();
  cc->add_option("--method", c.method)
      ->check(CLI::IsMember({"percentile", "train-max"}))->capture_default_str();
  cc->add_option("--val-fraction", c.val_fraction)->capture_default_str();
  cc->add_option("--subset", c.cal_subset,
                 "cap the calibration set (0 = all)")->capture_default_str();
  cc->add_option("--batch-size", c.batch_size)->check(CLI::PositiveNumber)
      ->capture_default_str();

  AttackOpts a;
  CLI::App* ca = app.add_subcommand(
      "attack", "craft an adversarial batch from test images");
  ca->add_option("--model", a.model, "checkpoint path")->required();
  ca->add_option("--dataset", a.dataset)->required()
      ->check(CLI::IsMember({"mnist", "fashion"}));
  ca->add_option("--family", a.family)->required()
      ->check(CLI::IsMember({"fgsm", "bim", "rbim"}));
  ca->add_option("--eps", a.eps, "fgsm budget")->capture_default_str();
  ca->add_option("--alpha", a.alpha, "bim/rbim step size")->capture_default_str();
  ca->add_option("--steps", a.steps, "bim/rbim step count")
      ->check(CLI::PositiveNumber)->capture_default_str();
  ca->add_option("--gamma", a.gamma, "rbim reconstruction weight")
      ->capture_default_str();
  ca->add_flag("--targeted", a.targeted,
               "target (label+1) mod classes instead of untargeted fgsm");
  ca->add_option("--target", a.target, "fixed target class (-1 = per-label)")
      ->capture_default_str();
  ca->add_option("--count", a.count, "number of test images")
      ->check(CLI::PositiveNumber)->capture_default_str();
  ca->add_option("--batch-size", a.batch_size)->check(CLI::PositiveNumber)
      ->capture_default_str();
  ca->add_option("--prefix", a.prefix, "output file prefix")
      ->capture_default_str();

  DetectOpts d;
  CLI::App* cd = app.add_subcommand(
      "detect", "run the detector over a saved adversarial batch");
  cd->add_option("--model", d.model, "calibrated checkpoint path")->required();
  cd->add_option("--batch", d.batch, "attack file prefix")->required();
  cd->add_option("--batch-size", d.batch_size)->check(CLI::PositiveNumber)
      ->capture_default_str();

  EvalOpts e;
  CLI::App* ce = app.add_subcommand(
      "eval", "clean accuracy (and flag rate when calibrated)");
  ce->add_option("--model", e.model, "checkpoint path")->required();
  ce->add_option("--dataset", e.dataset)->required()
      ->check(CLI::IsMember({"mnist", "fashion"}));
  ce->add_option("--split", e.split)
      ->check(CLI::IsMember({"train", "validation", "test"}))
      ->capture_default_str();
  ce->add_option("--val-fraction", e.val_fraction)->capture_default_str();
  ce->add_option("--subset", e.eval_subset, "cap the split (0 = all)")
      ->capture_default_str();
  ce->add_option("--batch-size", e.batch_size)->check(CLI::PositiveNumber)
      ->capture_default_str();

  GridOpts r;
  CLI::App* cr = app.add_subcommand(
      "recon-grid", "write a PGM grid of all-class reconstructions");
  cr->add_option("--model", r.model, "checkpoint path")->required();
  cr->add_option("--dataset", r.dataset)->required()
      ->check(CLI::IsMember({"mnist", "fashion"}));
  cr->add_option("--count", r.count, "images (grid columns)")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cr->add_flag("--normalize", r.normalize,
               "unit-normalize capsule poses before decoding");

  ReportOpts p;
  CLI::App* cp = app.add_subcommand(
      "report", "attack/detection curves over an eps or step grid");
  cp->add_option("--model", p.model, "defended calibrated checkpoint")->required();
  cp->add_option("--attack-model", p.attack_model,
                 "craft attacks on this checkpoint instead (black box)");
  cp->add_option("--dataset", p.dataset)->required()
      ->check(CLI::IsMember({"mnist", "fashion"}));
  cp->add_option("--family", p.family)->required()
      ->check(CLI::IsMember({"fgsm", "bim", "rbim"}));
  cp->add_option("--eps-grid", p.eps_grid, "fgsm budgets")->delimiter(',');
  cp->add_option("--steps-grid", p.steps_grid, "bim/rbim step counts")
      ->delimiter(',');
  cp->add_option("--alpha", p.alpha)->capture_default_str();
  cp->add_option("--gamma", p.gamma)->capture_default_str();
  cp->add_option("--count", p.count, "number of test images")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cp->add_option("--batch-size", p.batch_size)->check(CLI::PositiveNumber)
      ->capture_default_str();
  cp->add_flag("--targeted", p.targeted, "targeted fgsm");
  cp->add_option("--target", p.target, "fixed target class (-1 = per-label)")
      ->capture_default_str();

  // Let the global --seed/--data-dir/--out-dir appear after the subcommand.
  for (CLI::App* sub : {ct, cc, ca, cd, ce, cr, cp}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 1;
  }

  try {
    fs::create_directories(g.out_dir);
    if (ct->parsed()) return run_train(g, t);
    if (cc->parsed()) return run_calibrate(g, c);
    if (ca->parsed()) return run_attack_cmd(g, a);
    if (cd->parsed()) return run_detect(g, d);
    if (ce->parsed()) return run_eval(g, e);
    if (cr->parsed()) return run_recon_grid(g, r);
    if (cp->parsed()) return run_report(g, p);
  } catch (const DataError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const ShapeError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace darccc
