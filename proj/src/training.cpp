#include "darccc/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "darccc/util.hpp"

namespace darccc {

namespace {

void check_scores(const char* who, const Tensor& scores,
                  const std::vector<int>& labels) {
  if (scores.rank() != 2) {
    throw ShapeError(strfmt("%s: expected [b,classes] scores, got %s", who,
                            shape_str(scores.shape()).c_str()));
  }
  if (static_cast<long>(labels.size()) != scores.dim(0)) {
    throw ShapeError(strfmt("%s: %zu labels for batch of %d", who, labels.size(),
                            scores.dim(0)));
  }
  for (int l : labels) {
    if (l < 0 || l >= scores.dim(1)) {
      throw ShapeError(strfmt("%s: label %d out of range [0,%d)", who, l,
                              scores.dim(1)));
    }
  }
}

}  // namespace

Tensor margin_loss(const Tensor& scores, const std::vector<int>& labels,
                   const LossConfig& lc) {
  check_scores("margin_loss", scores, labels);
  const int b = scores.dim(0), j = scores.dim(1);
  std::vector<double> hot(static_cast<size_t>(b) * j, 0.0);
  for (int i = 0; i < b; ++i) {
    hot[static_cast<size_t>(i) * j + labels[static_cast<size_t>(i)]] = 1.0;
  }
  Tensor t({b, j}, std::move(hot));
  Tensor present = square(max_scalar(sub(Tensor::scalar(lc.m_plus), scores), 0.0));
  Tensor absent = square(max_scalar(add_scalar(scores, -lc.m_minus), 0.0));
  Tensor per_class = add(mul(t, present),
                         mul_scalar(mul(sub(Tensor::scalar(1.0), t), absent), lc.lambda));
  return mean(sum(per_class, 1));
}

Tensor reconstruction_loss(const Tensor& x_flat, const Tensor& recon) {
  if (x_flat.rank() != 2 || x_flat.shape() != recon.shape()) {
    throw ShapeError(strfmt("reconstruction_loss: shape mismatch %s vs %s",
                            shape_str(x_flat.shape()).c_str(),
                            shape_str(recon.shape()).c_str()));
  }
  return mean(sum(square(sub(x_flat, recon)), 1));
}

Tensor classification_loss(Arch arch, const Tensor& scores,
                           const std::vector<int>& labels, const LossConfig& lc) {
  if (arch == Arch::capsule) return margin_loss(scores, labels, lc);
  check_scores("classification_loss", scores, labels);
  return mean(softmax_cross_entropy(scores, labels));
}

BatchEval batch_loss(const Model& m, const Batch& b, const LossConfig& lc) {
  ClassPoseBlock out = m.forward(b.images);
  Tensor loss = classification_loss(m.arch(), out.class_scores, b.labels, lc);
  if (m.has_decoder()) {
    const int n = b.images.dim(0);
    Tensor flat = reshape(b.images, {n, b.images.dim(2) * b.images.dim(3)});
    Tensor rec = m.reconstruct(out, b.labels);
    loss = add(loss, mul_scalar(reconstruction_loss(flat, rec), lc.eta));
  }
  std::vector<int> pred = argmax_rows(out.class_scores);
  int correct = 0;
  for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
  return {loss, correct};
}

Adam::Adam(std::vector<std::pair<std::string, Tensor>>& params,
           const AdamConfig& cfg)
    : params_(&params), cfg_(cfg) {
  for (const auto& [name, t] : params) {
    m1_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    m2_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  auto& params = *params_;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p].second;
    if (!t.has_grad()) {
      throw GraphError("Adam::step: parameter " + params[p].first +
                       " has no gradient; run backward first");
    }
    const double* g = t.grad().data();
    double* w = t.ptr();
    double* m1 = m1_[p].data();
    double* m2 = m2_[p].data();
    for (long i = 0; i < t.numel(); ++i) {
      m1[i] = cfg_.beta1 * m1[i] + (1.0 - cfg_.beta1) * g[i];
      m2[i] = cfg_.beta2 * m2[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= cfg_.lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg_.eps);
    }
  }
}

double evaluate(const Model& m, const Dataset& d, int batch_size,
                double* loss_out, const LossConfig& lc) {
  if (d.size() == 0) throw DataError("evaluate: empty dataset");
  if (batch_size < 1) throw DataError("evaluate: batch size must be positive");
  Batcher batcher(d, batch_size, std::nullopt);
  double loss_sum = 0.0;
  long correct = 0;
  while (auto b = batcher.next()) {
    BatchEval ev = batch_loss(m, *b, lc);
    loss_sum += ev.loss.item() * static_cast<double>(b->labels.size());
    correct += ev.correct;
  }
  if (loss_out) *loss_out = loss_sum / static_cast<double>(d.size());
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

TrainResult train_model(Model& m, const Split& split, const TrainConfig& cfg,
                        std::ostream* log) {
  if (cfg.epochs < 1) throw DataError("train: epochs must be positive");
  if (cfg.batch_size < 1) throw DataError("train: batch size must be positive");
  if (split.train.size() == 0 || split.validation.size() == 0) {
    throw DataError("train: empty train or validation split");
  }

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path);
    if (!metrics) throw DataError("cannot open metrics file " + cfg.metrics_path);
    metrics << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  }

  Adam opt(m.params(), cfg.adam);
  Batcher batcher(split.train, cfg.batch_size, cfg.seed);
  TrainResult res;
  res.best_val_acc = -1.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (epoch > 1) batcher.reset(cfg.seed + static_cast<std::uint64_t>(epoch) - 1);
    double loss_sum = 0.0;
    long correct = 0, seen = 0;
    int batch_idx = 0;
    while (auto b = batcher.next()) {
      ++batch_idx;
      Graph g;
      double loss_val;
      {
        Graph::Activation act(g);
        BatchEval ev = batch_loss(m, *b, cfg.loss);
        loss_val = ev.loss.item();
        if (!std::isfinite(loss_val)) {
          throw NumericError(strfmt(
              "training diverged: non-finite loss at epoch %d batch %d", epoch,
              batch_idx));
        }
        correct += ev.correct;
        g.backward(ev.loss);
      }
      opt.step();
      m.zero_grads();
      const long n = static_cast<long>(b->labels.size());
      loss_sum += loss_val * static_cast<double>(n);
      seen += n;
      if (log && cfg.log_every > 0 && batch_idx % cfg.log_every == 0) {
        (*log) << strfmt("epoch %d batch %d/%ld loss %.6f\n", epoch, batch_idx,
                         batcher.num_batches(), loss_val);
        log->flush();
      }
    }

    double val_loss = 0.0;
    const double val_acc =
        evaluate(m, split.validation, cfg.batch_size, &val_loss, cfg.loss);
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(seen);
    em.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    em.val_loss = val_loss;
    em.val_acc = val_acc;
    res.epochs.push_back(em);

    if (metrics.is_open()) {
      metrics << strfmt("%d,%.8f,%.6f,%.8f,%.6f\n", em.epoch, em.train_loss,
                        em.train_acc, em.val_loss, em.val_acc);
      metrics.flush();
    }
    if (log) {
      (*log) << strfmt(
          "epoch %d: train_loss %.6f train_acc %.4f val_loss %.6f val_acc %.4f\n",
          em.epoch, em.train_loss, em.train_acc, em.val_loss, em.val_acc);
      log->flush();
    }

    if (val_acc > res.best_val_acc) {
      res.best_val_acc = val_acc;
      res.best_epoch = epoch;
      if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, m);
    }
  }
  return res;
}

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 8);
}

void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

struct Cursor {
  const std::string& buf;
  const std::string& path;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw DataError("truncated checkpoint " + path);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i]))
           << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i]))
           << (8 * i);
    }
    pos += 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<unsigned char>(buf[pos++]);
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

std::vector<std::pair<std::string, int ModelConfig::*>> config_fields() {
  return {
      {"num_classes", &ModelConfig::num_classes},
      {"pose_dim", &ModelConfig::pose_dim},
      {"routing_iterations", &ModelConfig::routing_iterations},
      {"input_hw", &ModelConfig::input_hw},
      {"conv1_channels", &ModelConfig::conv1_channels},
      {"primary_blocks", &ModelConfig::primary_blocks},
      {"primary_dim", &ModelConfig::primary_dim},
      {"caps_kernel", &ModelConfig::caps_kernel},
      {"cnn_conv1", &ModelConfig::cnn_conv1},
      {"cnn_conv2", &ModelConfig::cnn_conv2},
      {"cnn_fc1", &ModelConfig::cnn_fc1},
      {"cnn_kernel", &ModelConfig::cnn_kernel},
      {"atk_fc1", &ModelConfig::atk_fc1},
      {"atk_fc2", &ModelConfig::atk_fc2},
      {"dec_hidden1", &ModelConfig::dec_hidden1},
      {"dec_hidden2", &ModelConfig::dec_hidden2},
  };
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& m,
                     std::optional<double> threshold) {
  std::string out;
  out.reserve(64 + static_cast<size_t>(m.param_count()) * 4);
  out.append("DRCC");
  put_u32(out, kCheckpointVersion);
  put_str(out, arch_name(m.arch()));

  const auto fields = config_fields();
  put_u32(out, static_cast<std::uint32_t>(fields.size()));
  for (const auto& [key, member] : fields) {
    put_str(out, key);
    put_str(out, std::to_string(m.config().*member));
  }

  const auto& params = m.params();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_str(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) {
      put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
    }
    const double* p = t.ptr();
    for (long i = 0; i < t.numel(); ++i) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(p[i])));
    }
  }

  put_u32(out, threshold.has_value() ? 1 : 0);
  if (threshold) put_u64(out, std::bit_cast<std::uint64_t>(*threshold));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open checkpoint file " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("write failed on " + path);
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint file " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  Cursor c{buf, path};

  c.need(4);
  if (buf.compare(0, 4, "DRCC") != 0) {
    throw DataError("not a DRCC checkpoint: " + path);
  }
  c.pos = 4;
  const std::uint32_t version = c.u32();
  if (version != kCheckpointVersion) {
    throw DataError(strfmt("unsupported checkpoint version %u in %s", version,
                           path.c_str()));
  }

  const std::string tag = c.str();
  ModelConfig cfg;
  try {
    cfg.arch = arch_from_name(tag);
  } catch (const ShapeError&) {
    throw DataError("unknown architecture tag \"" + tag + "\" in " + path);
  }

  std::map<std::string, int ModelConfig::*> known;
  for (const auto& [key, member] : config_fields()) known[key] = member;
  const std::uint32_t n_cfg = c.u32();
  for (std::uint32_t i = 0; i < n_cfg; ++i) {
    const std::string key = c.str();
    const std::string val = c.str();
    auto it = known.find(key);
    if (it == known.end()) {
      throw DataError("unknown config key \"" + key + "\" in " + path);
    }
    try {
      cfg.*(it->second) = std::stoi(val);
    } catch (const std::exception&) {
      throw DataError("bad value for config key \"" + key + "\" in " + path);
    }
  }

  LoadedModel out{Model(cfg, 0), std::nullopt};
  auto& params = out.model.params();
  const std::uint32_t n_tensors = c.u32();
  if (n_tensors != params.size()) {
    throw DataError(strfmt("checkpoint %s has %u tensors, model expects %zu",
                           path.c_str(), n_tensors, params.size()));
  }
  for (auto& [name, t] : params) {
    const std::string got = c.str();
    if (got != name) {
      throw DataError(strfmt("checkpoint %s: tensor \"%s\" where \"%s\" expected",
                             path.c_str(), got.c_str(), name.c_str()));
    }
    const std::uint32_t rank = c.u32();
    Shape dims(rank);
    for (std::uint32_t d = 0; d < rank; ++d) dims[d] = static_cast<int>(c.u32());
    if (dims != t.shape()) {
      throw DataError(strfmt("checkpoint %s: tensor \"%s\" has shape %s, expected %s",
                             path.c_str(), name.c_str(), shape_str(dims).c_str(),
                             shape_str(t.shape()).c_str()));
    }
    double* p = t.ptr();
    for (long i = 0; i < t.numel(); ++i) {
      p[i] = static_cast<double>(std::bit_cast<float>(c.u32()));
    }
  }

  if (c.u32() != 0) {
    out.threshold = std::bit_cast<double>(c.u64());
  }
  return out;
}

}  // namespace darccc
