// Drives the installed binary end to end: synthetic IDX fixtures, every
// subcommand, the exit-code contract (0 ok / 1 usage / 2 data / 3 numeric),
// and byte-identical reruns. DARCCC_BIN is injected by the build.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "darccc/util.hpp"

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("darccc_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  std::string subdir(const std::string& name) const {
    fs::path p = path / name;
    fs::create_directories(p);
    return p.string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool same_bytes(const std::string& a, const std::string& b) {
  return slurp(a) == slurp(b);
}

void put_be32(std::ofstream& f, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) f.put(static_cast<char>((v >> s) & 0xff));
}

// Label-banded brightness with noise: enough signal that a couple of epochs
// learn something, and every class appears.
void write_idx_pair(const std::string& dir, const std::string& stem, int n,
                    int hw, std::uint64_t seed) {
  darccc::Rng rng(seed);
  std::ofstream imgs(dir + "/" + stem + "-images-idx3-ubyte", std::ios::binary);
  std::ofstream labs(dir + "/" + stem + "-labels-idx1-ubyte", std::ios::binary);
  REQUIRE(imgs);
  REQUIRE(labs);
  put_be32(imgs, 0x803);
  put_be32(imgs, static_cast<std::uint32_t>(n));
  put_be32(imgs, static_cast<std::uint32_t>(hw));
  put_be32(imgs, static_cast<std::uint32_t>(hw));
  put_be32(labs, 0x801);
  put_be32(labs, static_cast<std::uint32_t>(n));
  for (int i = 0; i < n; ++i) {
    const int label = i % 10;
    labs.put(static_cast<char>(label));
    for (int p = 0; p < hw * hw; ++p) {
      const double px = 20.0 + 23.0 * label + rng.uniform(-18.0, 18.0);
      imgs.put(static_cast<char>(px < 0 ? 0 : (px > 255 ? 255 : px)));
    }
  }
}

struct RunResult {
  int code = -1;
  std::string out, err;
};

struct CliEnv {
  TempDir dir;
  std::string data_dir;     // contains mnist/{train,t10k}-...
  std::string model;        // calibrated masked_cnn_r checkpoint
  std::string uncal_model;  // the same weights, no threshold
  std::string attacker;     // decoder-less checkpoint
  double threshold95 = 0.0;
  int io_counter = 0;
};

CliEnv* g_env = nullptr;

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  const std::string base =
      g_env->dir.file("io_" + std::to_string(g_env->io_counter++));
  const std::string cmd = env_prefix + std::string(DARCCC_BIN) + " " + args +
                          " > " + base + ".out 2> " + base + ".err";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  r.out = slurp(base + ".out");
  r.err = slurp(base + ".err");
  return r;
}

// Pulls "key=1.234" out of a stdout line.
double parse_metric(const std::string& text, const std::string& key) {
  const size_t at = text.find(key + "=");
  REQUIRE(at != std::string::npos);
  return std::stod(text.substr(at + key.size() + 1));
}

CliEnv& env() {
  static CliEnv e;
  if (g_env) return *g_env;
  g_env = &e;
  e.data_dir = e.dir.subdir("data");
  const std::string mnist = e.dir.subdir("data/mnist");
  write_idx_pair(mnist, "train", 120, 12, 7);
  write_idx_pair(mnist, "t10k", 40, 12, 8);

  const std::string out = e.dir.subdir("models");
  RunResult t = run_cli("--data-dir " + e.data_dir + " --out-dir " + out +
                        " --seed 3 train --arch masked_cnn_r --dataset mnist "
                        "--epochs 2 --batch-size 32 --eta 0.05");
  REQUIRE(t.code == 0);
  REQUIRE(t.out.find("test_accuracy=") != std::string::npos);
  e.model = out + "/masked_cnn_r_mnist.drcc";
  REQUIRE(fs::exists(e.model));

  e.uncal_model = out + "/uncalibrated.drcc";
  fs::copy_file(e.model, e.uncal_model);

  RunResult a = run_cli("--data-dir " + e.data_dir + " --out-dir " + out +
                        " --seed 3 train --arch attacker --dataset mnist "
                        "--epochs 1 --batch-size 32");
  REQUIRE(a.code == 0);
  e.attacker = out + "/attacker_mnist.drcc";
  REQUIRE(fs::exists(e.attacker));

  RunResult c = run_cli("--data-dir " + e.data_dir + " --out-dir " + out +
                        " --seed 3 calibrate --model " + e.model +
                        " --dataset mnist");
  REQUIRE(c.code == 0);
  e.threshold95 = parse_metric(c.out, "threshold");
  REQUIRE(e.threshold95 > 0.0);
  return e;
}

}  // namespace

TEST_CASE("cli: help exits 0, usage mistakes exit 1") {
  CliEnv& e = env();
  RunResult help = run_cli("--help");
  CHECK(help.code == 0);
  CHECK(help.out.find("train") != std::string::npos);
  CHECK(help.out.find("recon-grid") != std::string::npos);

  CHECK(run_cli("").code == 1);            // a subcommand is required
  CHECK(run_cli("frobnicate").code == 1);  // unknown subcommand
  CHECK(run_cli("train --arch nope --dataset mnist --data-dir " + e.data_dir)
            .code == 1);
  CHECK(run_cli("train --arch capsule --data-dir " + e.data_dir).code == 1);
  CHECK(run_cli("attack --model " + e.model + " --dataset mnist --family pgd "
                "--data-dir " + e.data_dir).code == 1);
}

TEST_CASE("cli: missing data or models exit 2") {
  CliEnv& e = env();
  CHECK(run_cli("eval --model /no/such.drcc --dataset mnist --data-dir " +
                e.data_dir).code == 2);
  CHECK(run_cli("train --arch attacker --dataset mnist --data-dir /no/such/dir "
                "--out-dir " + e.dir.subdir("x1")).code == 2);
  // neither --data-dir nor DARCCC_DATA_DIR
  CHECK(run_cli("train --arch attacker --dataset mnist --out-dir " +
                e.dir.subdir("x2"), "DARCCC_DATA_DIR= ").code == 2);

  // detector misuse: no threshold yet / no decoder at all
  RunResult nothr = run_cli("detect --model " + e.uncal_model + " --batch " +
                            e.dir.file("nope"));
  CHECK(nothr.code == 2);
  CHECK(nothr.err.find("no calibrated threshold") != std::string::npos);
  RunResult nodec = run_cli("calibrate --model " + e.attacker +
                            " --dataset mnist --data-dir " + e.data_dir +
                            " --out-dir " + e.dir.subdir("x3"));
  CHECK(nodec.code == 2);
  CHECK(nodec.err.find("no decoder") != std::string::npos);
}

TEST_CASE("cli: train writes checkpoint, metrics, manifest; env var supplies data") {
  CliEnv& e = env();
  const std::string out = e.dir.subdir("train_env");
  RunResult r = run_cli("--out-dir " + out + " --seed 5 train --arch attacker "
                        "--dataset mnist --epochs 1 --batch-size 32",
                        "DARCCC_DATA_DIR=" + e.data_dir + " ");
  CHECK(r.code == 0);
  CHECK(fs::exists(out + "/attacker_mnist.drcc"));
  const std::string metrics = slurp(out + "/attacker_mnist_metrics.csv");
  CHECK(metrics.rfind("epoch,train_loss,train_acc,val_loss,val_acc\n", 0) == 0);
  const std::string manifest = slurp(out + "/train-manifest.json");
  CHECK(manifest.find("\"command\": \"train\"") != std::string::npos);
  CHECK(manifest.find("\"seed\": 5") != std::string::npos);
  CHECK(r.out.find("test_accuracy=") != std::string::npos);
}

TEST_CASE("cli: calibrate is monotone in the percentile and supports train-max") {
  CliEnv& e = env();
  const std::string copy = e.dir.file("cal99.drcc");
  fs::copy_file(e.uncal_model, copy, fs::copy_options::overwrite_existing);
  RunResult p99 = run_cli("--data-dir " + e.data_dir + " --out-dir " +
                          e.dir.subdir("cal_a") + " --seed 3 calibrate --model " +
                          copy + " --dataset mnist --percentile 99");
  CHECK(p99.code == 0);
  CHECK(parse_metric(p99.out, "threshold") >= e.threshold95);
  CHECK(parse_metric(p99.out, "flag_rate") <= 0.01 + 1e-12);

  RunResult tm = run_cli("--data-dir " + e.data_dir + " --out-dir " +
                         e.dir.subdir("cal_b") + " --seed 3 calibrate --model " +
                         copy + " --dataset mnist --method train-max");
  CHECK(tm.code == 0);
  CHECK(tm.out.find("method=train_max") != std::string::npos);
  CHECK(parse_metric(tm.out, "flag_rate") == 0.0);
}

TEST_CASE("cli: bim manifest records the derived eps and reruns are byte-identical") {
  CliEnv& e = env();
  const std::string base = "--data-dir " + e.data_dir + " --seed 3 attack "
                           "--model " + e.model + " --dataset mnist "
                           "--family bim --alpha 0.05 --steps 4 --count 6";
  const std::string o1 = e.dir.subdir("bim1"), o2 = e.dir.subdir("bim2");
  CHECK(run_cli("--out-dir " + o1 + " " + base).code == 0);
  CHECK(run_cli("--out-dir " + o2 + " " + base).code == 0);
  for (const char* f : {"/attack.csv", "/attack_adv.drct", "/attack_clean.drct"}) {
    CHECK(same_bytes(o1 + f, o2 + f));
  }
  const std::string manifest = slurp(o1 + "/attack-manifest.json");
  CHECK(manifest.find("\"eps\": 0.2") != std::string::npos);  // 0.05 * 4
  CHECK(manifest.find("\"command\": \"attack\"") != std::string::npos);
}

TEST_CASE("cli: rbim with gamma 0 reproduces bim outputs bit for bit") {
  CliEnv& e = env();
  const std::string o1 = e.dir.subdir("fam_bim"), o2 = e.dir.subdir("fam_rbim");
  const std::string tail = " --dataset mnist --alpha 0.05 --steps 4 --count 6 "
                           "--data-dir " + e.data_dir + " --seed 3";
  CHECK(run_cli("--out-dir " + o1 + " attack --model " + e.model +
                " --family bim" + tail).code == 0);
  CHECK(run_cli("--out-dir " + o2 + " attack --model " + e.model +
                " --family rbim --gamma 0" + tail).code == 0);
  for (const char* f : {"/attack.csv", "/attack_adv.drct", "/attack_clean.drct"}) {
    CHECK(same_bytes(o1 + f, o2 + f));
  }
}

TEST_CASE("cli: fgsm with eps 0 flips nothing; out-of-range target exits 1") {
  CliEnv& e = env();
  RunResult r = run_cli("--out-dir " + e.dir.subdir("eps0") + " --seed 3 "
                        "attack --model " + e.model + " --dataset mnist "
                        "--family fgsm --eps 0 --count 8 --data-dir " + e.data_dir);
  CHECK(r.code == 0);
  CHECK(r.out.find("flipped=0 ") != std::string::npos);

  CHECK(run_cli("--out-dir " + e.dir.subdir("badt") + " attack --model " +
                e.model + " --dataset mnist --family fgsm --target 12 "
                "--count 4 --data-dir " + e.data_dir).code == 1);
}

TEST_CASE("cli: detect writes the report and histogram formats") {
  CliEnv& e = env();
  const std::string aout = e.dir.subdir("det_a");
  CHECK(run_cli("--out-dir " + aout + " --seed 3 attack --model " + e.model +
                " --dataset mnist --family fgsm --eps 0.2 --count 16 "
                "--data-dir " + e.data_dir).code == 0);
  const std::string dout = e.dir.subdir("det_b");
  RunResult r = run_cli("--out-dir " + dout + " detect --model " + e.model +
                        " --batch " + aout + "/attack");
  CHECK(r.code == 0);
  const std::string report = slurp(dout + "/report.csv");
  CHECK(report.rfind("index,true,target,pred_before,pred_after,distance,flagged\n",
                     0) == 0);
  CHECK(report.find("\n# n=16,attack_success_rate=") != std::string::npos);
  CHECK(report.find("method=checkpoint") != std::string::npos);
  const std::string hist = slurp(dout + "/histogram.csv");
  CHECK(hist.rfind("bin_low,bin_high,clean_count,adv_count\n", 0) == 0);
  CHECK(parse_metric(r.out, "threshold") == doctest::Approx(e.threshold95));

  // identical rerun, identical bytes
  const std::string dout2 = e.dir.subdir("det_c");
  CHECK(run_cli("--out-dir " + dout2 + " detect --model " + e.model +
                " --batch " + aout + "/attack").code == 0);
  CHECK(same_bytes(dout + "/report.csv", dout2 + "/report.csv"));
  CHECK(same_bytes(dout + "/histogram.csv", dout2 + "/histogram.csv"));
}

TEST_CASE("cli: eval prints accuracy and the clean flag rate") {
  CliEnv& e = env();
  const std::string out = e.dir.subdir("eval_a");
  RunResult r = run_cli("--out-dir " + out + " --seed 3 eval --model " +
                        e.model + " --dataset mnist --data-dir " + e.data_dir);
  CHECK(r.code == 0);
  CHECK(r.out.find("accuracy=") != std::string::npos);
  CHECK(r.out.find("clean_flag_rate=") != std::string::npos);
  const std::string csv = slurp(out + "/eval.csv");
  CHECK(csv.rfind("metric,value\n", 0) == 0);
  CHECK(csv.find("clean_flag_rate,") != std::string::npos);
}

TEST_CASE("cli: recon-grid writes a P5 graymap; pose normalization needs capsules") {
  CliEnv& e = env();
  const std::string out = e.dir.subdir("grid");
  RunResult r = run_cli("--out-dir " + out + " recon-grid --model " + e.model +
                        " --dataset mnist --count 4 --data-dir " + e.data_dir);
  CHECK(r.code == 0);
  const std::string pgm = slurp(out + "/recon_grid.pgm");
  CHECK(pgm.rfind("P5\n48 132\n255\n", 0) == 0);  // 4*12 wide, (10+1)*12 tall

  CHECK(run_cli("--out-dir " + e.dir.subdir("gridn") + " recon-grid --model " +
                e.model + " --dataset mnist --count 4 --normalize "
                "--data-dir " + e.data_dir).code == 1);
}

TEST_CASE("cli: report sweeps a grid into curves.csv deterministically") {
  CliEnv& e = env();
  const std::string base = "--data-dir " + e.data_dir + " --seed 3 report "
                           "--model " + e.model + " --attack-model " +
                           e.attacker + " --dataset mnist --family fgsm "
                           "--eps-grid 0.05,0.15 --count 8";
  const std::string o1 = e.dir.subdir("rep1"), o2 = e.dir.subdir("rep2");
  RunResult r = run_cli("--out-dir " + o1 + " " + base);
  CHECK(r.code == 0);
  const std::string curves = slurp(o1 + "/curves.csv");
  CHECK(curves.rfind("family,eps,alpha,steps,gamma,n,error_rate,success_rate,"
                     "detection_rate,successful_attack_detection_rate,"
                     "false_positive_rate,auc\n", 0) == 0);
  CHECK(curves.find("\nfgsm,0.050000,") != std::string::npos);
  CHECK(curves.find("\nfgsm,0.150000,") != std::string::npos);
  CHECK(fs::exists(o1 + "/hist_eps_0.05.csv"));
  CHECK(fs::exists(o1 + "/hist_eps_0.15.csv"));

  CHECK(run_cli("--out-dir " + o2 + " " + base).code == 0);
  CHECK(same_bytes(o1 + "/curves.csv", o2 + "/curves.csv"));
}

TEST_CASE("cli: divergent training exits 3 with the epoch and batch") {
  CliEnv& e = env();
  RunResult r = run_cli("--out-dir " + e.dir.subdir("div") + " train "
                        "--arch attacker --dataset mnist --epochs 1 "
                        "--batch-size 16 --lr 1e100 --data-dir " + e.data_dir);
  CHECK(r.code == 3);
  CHECK(r.err.find("training diverged") != std::string::npos);
}
