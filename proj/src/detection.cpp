#include "darccc/detection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "darccc/util.hpp"

namespace darccc {

namespace {

Tensor image_rows(const Tensor& images, long start, long count) {
  const long per = images.numel() / images.dim(0);
  std::vector<double> v(images.ptr() + start * per,
                        images.ptr() + (start + count) * per);
  Shape s = images.shape();
  s[0] = static_cast<int>(count);
  return Tensor(s, std::move(v));
}

void check_images(const char* who, const Model& m, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1 ||
      images.dim(2) != m.config().input_hw || images.dim(3) != m.config().input_hw) {
    throw ShapeError(strfmt("%s: expected [n,1,%d,%d] images, got %s", who,
                            m.config().input_hw, m.config().input_hw,
                            shape_str(images.shape()).c_str()));
  }
}

// Exact per-example L2 distance between flat images and reconstructions.
std::vector<double> l2_distances(const Tensor& x, const Tensor& rec) {
  const long n = x.dim(0);
  const long p = x.numel() / n;
  std::vector<double> out(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    double s = 0.0;
    const double* xi = x.ptr() + i * p;
    const double* ri = rec.ptr() + i * p;
    for (long k = 0; k < p; ++k) {
      const double d = xi[k] - ri[k];
      s += d * d;
    }
    out[static_cast<size_t>(i)] = std::sqrt(s);
  }
  return out;
}

}  // namespace

DistanceResult reconstruction_distances(const Model& m, const Tensor& images,
                                        int batch_size) {
  if (!m.has_decoder()) {
    throw ShapeError("reconstruction_distances: " + arch_name(m.arch()) +
                     " has no decoder");
  }
  check_images("reconstruction_distances", m, images);
  if (batch_size < 1) throw ShapeError("reconstruction_distances: bad batch size");

  DistanceResult res;
  const long n = images.dim(0);
  for (long start = 0; start < n; start += batch_size) {
    const long count = std::min<long>(batch_size, n - start);
    Tensor x = image_rows(images, start, count);
    ClassPoseBlock out = m.forward(x);
    std::vector<int> winners = argmax_rows(out.class_scores);
    Tensor rec = m.reconstruct(out, winners);
    std::vector<double> d = l2_distances(x, rec);
    res.pred.insert(res.pred.end(), winners.begin(), winners.end());
    res.distance.insert(res.distance.end(), d.begin(), d.end());
  }
  return res;
}

double nearest_rank_percentile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("nearest_rank_percentile: empty set");
  if (!(p > 0.0) || p > 100.0) {
    throw DataError(strfmt("nearest_rank_percentile: p=%g outside (0,100]", p));
  }
  std::sort(values.begin(), values.end());
  const double exact = p / 100.0 * static_cast<double>(values.size());
  long rank = static_cast<long>(std::ceil(exact));
  if (rank < 1) rank = 1;
  return values[static_cast<size_t>(rank - 1)];
}

namespace {

Threshold finish_threshold(Threshold t, const std::vector<double>& distances) {
  long above = 0;
  for (double d : distances) above += d > t.value;
  t.calibration_n = static_cast<long>(distances.size());
  t.calibration_flag_rate =
      static_cast<double>(above) / static_cast<double>(distances.size());
  if (!(t.value > 0.0)) {
    throw NumericError("calibrate: threshold is not positive; reconstructions "
                       "collapse onto the inputs");
  }
  return t;
}

}  // namespace

Threshold calibrate(const Model& m, const Dataset& d, double p, int batch_size) {
  if (d.size() == 0) throw DataError("calibrate: empty calibration set");
  DistanceResult dist = reconstruction_distances(m, d.images, batch_size);
  Threshold t;
  t.value = nearest_rank_percentile(dist.distance, p);
  t.method = "percentile";
  t.percentile = p;
  return finish_threshold(t, dist.distance);
}

Threshold calibrate_train_max(const Model& m, const Dataset& d, int batch_size) {
  if (d.size() == 0) throw DataError("calibrate: empty calibration set");
  DistanceResult dist = reconstruction_distances(m, d.images, batch_size);
  Threshold t;
  t.value = *std::max_element(dist.distance.begin(), dist.distance.end());
  t.method = "train_max";
  t.percentile = 100.0;
  return finish_threshold(t, dist.distance);
}

std::vector<char> detect(const std::vector<double>& distances, const Threshold& t) {
  std::vector<char> out(distances.size());
  for (size_t i = 0; i < distances.size(); ++i) {
    out[i] = distances[i] > t.value ? 1 : 0;
  }
  return out;
}

std::vector<int> classify_by_distance(const Model& m, const Tensor& images,
                                      int batch_size) {
  if (!m.has_decoder()) {
    throw ShapeError("classify_by_distance: " + arch_name(m.arch()) +
                     " has no decoder");
  }
  check_images("classify_by_distance", m, images);
  if (batch_size < 1) throw ShapeError("classify_by_distance: bad batch size");

  std::vector<int> out;
  const long n = images.dim(0);
  const int classes = m.config().num_classes;
  for (long start = 0; start < n; start += batch_size) {
    const long count = std::min<long>(batch_size, n - start);
    Tensor x = image_rows(images, start, count);
    ClassPoseBlock block = m.forward(x);
    std::vector<double> best(static_cast<size_t>(count),
                             std::numeric_limits<double>::infinity());
    std::vector<int> pick(static_cast<size_t>(count), 0);
    for (int k = 0; k < classes; ++k) {
      Tensor rec = m.decode(mask_poses(block, std::vector<int>(count, k)));
      std::vector<double> d = l2_distances(x, rec);
      for (long i = 0; i < count; ++i) {
        if (d[static_cast<size_t>(i)] < best[static_cast<size_t>(i)]) {
          best[static_cast<size_t>(i)] = d[static_cast<size_t>(i)];
          pick[static_cast<size_t>(i)] = k;
        }
      }
    }
    out.insert(out.end(), pick.begin(), pick.end());
  }
  return out;
}

double roc_auc(const std::vector<double>& clean_distances,
               const std::vector<double>& adv_distances) {
  if (clean_distances.empty() || adv_distances.empty()) {
    throw DataError("roc_auc: both distance sets must be nonempty");
  }
  // midrank Mann-Whitney: AUC = (R_adv - m(m+1)/2) / (n*m)
  struct Item {
    double v;
    bool adv;
  };
  std::vector<Item> all;
  all.reserve(clean_distances.size() + adv_distances.size());
  for (double v : clean_distances) all.push_back({v, false});
  for (double v : adv_distances) all.push_back({v, true});
  std::sort(all.begin(), all.end(),
            [](const Item& a, const Item& b) { return a.v < b.v; });
  double rank_sum_adv = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (size_t k = i; k < j; ++k) {
      if (all[k].adv) rank_sum_adv += midrank;
    }
    i = j;
  }
  const double m_adv = static_cast<double>(adv_distances.size());
  const double n_clean = static_cast<double>(clean_distances.size());
  return (rank_sum_adv - m_adv * (m_adv + 1.0) / 2.0) / (n_clean * m_adv);
}

void compute_aggregates(DetectionReport& r) {
  r.n = static_cast<long>(r.distance.size());
  r.successes = r.flagged_count = r.flagged_successes = 0;
  for (long i = 0; i < r.n; ++i) {
    const size_t k = static_cast<size_t>(i);
    const bool success = r.targets[k] >= 0
                             ? r.pred_after[k] == r.targets[k]
                             : r.pred_after[k] != r.true_labels[k];
    r.successes += success;
    r.flagged_count += r.flagged[k] != 0;
    r.flagged_successes += success && r.flagged[k] != 0;
  }
  const double n = static_cast<double>(r.n);
  r.attack_success_rate = r.n ? static_cast<double>(r.successes) / n : 0.0;
  r.attack_detection_rate = r.n ? static_cast<double>(r.flagged_count) / n : 0.0;
  r.successful_attack_detection_rate =
      r.successes ? static_cast<double>(r.flagged_successes) /
                        static_cast<double>(r.successes)
                  : 0.0;
  long clean_flagged = 0;
  for (double d : r.clean_distance) clean_flagged += d > r.threshold.value;
  r.false_positive_rate =
      r.clean_distance.empty()
          ? 0.0
          : static_cast<double>(clean_flagged) /
                static_cast<double>(r.clean_distance.size());
  r.auc = (!r.clean_distance.empty() && !r.distance.empty())
              ? roc_auc(r.clean_distance, r.distance)
              : 0.0;
}

DetectionReport make_report(const Model& m, const AttackOutput& attack,
                            const Tensor& clean_images, const Threshold& thr,
                            int batch_size) {
  check_images("make_report", m, attack.adv);
  if (clean_images.shape() != attack.adv.shape()) {
    throw ShapeError(strfmt("make_report: clean images %s do not match attack %s",
                            shape_str(clean_images.shape()).c_str(),
                            shape_str(attack.adv.shape()).c_str()));
  }
  DetectionReport r;
  r.threshold = thr;
  r.indices = attack.indices;
  r.true_labels = attack.true_labels;
  r.targets = attack.targets;
  DistanceResult clean = reconstruction_distances(m, clean_images, batch_size);
  DistanceResult adv = reconstruction_distances(m, attack.adv, batch_size);
  r.pred_before = clean.pred;
  r.pred_after = adv.pred;
  r.clean_distance = clean.distance;
  r.distance = adv.distance;
  r.flagged = detect(r.distance, thr);
  compute_aggregates(r);
  return r;
}

void write_report_csv(const std::string& path, const DetectionReport& r) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path);
  f << "index,true,target,pred_before,pred_after,distance,flagged\n";
  for (long i = 0; i < r.n; ++i) {
    const size_t k = static_cast<size_t>(i);
    f << strfmt("%ld,%d,%d,%d,%d,%.9f,%d\n", r.indices[k], r.true_labels[k],
                r.targets[k], r.pred_before[k], r.pred_after[k], r.distance[k],
                r.flagged[k] != 0 ? 1 : 0);
  }
  f << strfmt("# n=%ld,attack_success_rate=%.6f,attack_detection_rate=%.6f,"
              "successful_attack_detection_rate=%.6f,false_positive_rate=%.6f,"
              "threshold=%.9f,method=%s,auc=%.6f\n",
              r.n, r.attack_success_rate, r.attack_detection_rate,
              r.successful_attack_detection_rate, r.false_positive_rate,
              r.threshold.value, r.threshold.method.c_str(), r.auc);
  if (!f) throw DataError("write failed on " + path);
}

void write_histogram_csv(const std::string& path,
                         const std::vector<double>& clean_distances,
                         const std::vector<double>& adv_distances) {
  if (clean_distances.empty() && adv_distances.empty()) {
    throw DataError("write_histogram_csv: no distances");
  }
  double max_d = 0.0;
  for (double v : clean_distances) max_d = std::max(max_d, v);
  for (double v : adv_distances) max_d = std::max(max_d, v);
  const int bins = 50;
  const double width = max_d > 0.0 ? max_d / bins : 1.0;

  std::vector<long> clean_count(bins, 0), adv_count(bins, 0);
  auto bin_of = [&](double v) {
    int b = static_cast<int>(v / width);
    return std::min(b, bins - 1);  // the maximum lands in the last bin
  };
  for (double v : clean_distances) ++clean_count[static_cast<size_t>(bin_of(v))];
  for (double v : adv_distances) ++adv_count[static_cast<size_t>(bin_of(v))];

  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path);
  f << "bin_low,bin_high,clean_count,adv_count\n";
  for (int b = 0; b < bins; ++b) {
    f << strfmt("%.9f,%.9f,%ld,%ld\n", b * width, (b + 1) * width,
                clean_count[static_cast<size_t>(b)],
                adv_count[static_cast<size_t>(b)]);
  }
  if (!f) throw DataError("write failed on " + path);
}

void write_recon_grid(const std::string& path, const Model& m,
                      const Tensor& images, bool normalize) {
  if (!m.has_decoder()) {
    throw ShapeError("write_recon_grid: " + arch_name(m.arch()) +
                     " has no decoder");
  }
  if (normalize && m.arch() != Arch::capsule) {
    throw ShapeError("write_recon_grid: pose normalization requires a capsule "
                     "model, got " + arch_name(m.arch()));
  }
  check_images("write_recon_grid", m, images);

  const int n = images.dim(0);
  const int hw = m.config().input_hw;
  const int classes = m.config().num_classes;

  ClassPoseBlock block = m.forward(images);
  if (normalize) block = normalize_poses(block);
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(classes));
  for (int k = 0; k < classes; ++k) {
    rows.push_back(m.decode(mask_poses(block, std::vector<int>(n, k))));
  }

  auto px = [](double v) {
    return static_cast<unsigned char>(
        std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
  };

  std::string body;
  body.reserve(static_cast<size_t>(classes + 1) * hw * n * hw);
  for (int row = 0; row <= classes; ++row) {
    for (int y = 0; y < hw; ++y) {
      for (int i = 0; i < n; ++i) {
        const double* src = row == 0
                                ? images.ptr() + (static_cast<long>(i) * hw + y) * hw
                                : rows[static_cast<size_t>(row - 1)].ptr() +
                                      (static_cast<long>(i) * hw + y) * hw;
        for (int x = 0; x < hw; ++x) body.push_back(static_cast<char>(px(src[x])));
      }
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path);
  f << strfmt("P5\n%d %d\n255\n", n * hw, (classes + 1) * hw);
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!f) throw DataError("write failed on " + path);
}

}  // namespace darccc
