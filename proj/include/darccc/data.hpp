#pragma once

// MNIST/Fashion-MNIST ingestion: IDX parsing, train/validation splitting,
// and batching. Pixels are scaled to [0,1] doubles at load time since the
// attack budgets and clipping are defined on that range.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "darccc/tensor.hpp"

namespace darccc {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct Dataset {
  std::string name;
  Tensor images;            // [n, 1, rows, cols], values in [0,1]
  std::vector<int> labels;  // one per image, in [0,10)
  long size() const { return labels.empty() ? 0 : images.dim(0); }
};

struct Split {
  Dataset train;
  Dataset validation;  // carved out of the official train set
  Dataset test;
  std::uint64_t seed = 0;
};

// Parses a big-endian IDX image/label file pair. Throws DataError on bad
// magic (0x00000803 images / 0x00000801 labels), truncation, image/label
// count mismatch, or labels outside [0,10).
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& name);

// Loads <data_dir>/<name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte.
Dataset load_named(const std::string& data_dir, const std::string& name, bool train);

// --data-dir flag if nonempty, else $DARCCC_DATA_DIR, else DataError.
std::string resolve_data_dir(const std::string& flag_value);

// Seeded shuffled partition of the official train set; val_fraction must be
// in (0,1). Index sets are disjoint, exhaustive, and identical for equal
// seeds. Each side is emitted in ascending original-index order.
Split split_dataset(const Dataset& train_full, const Dataset& test,
                    double val_fraction, std::uint64_t seed);

// Deterministic random subset of n examples (seeded shuffle, first n kept,
// ascending order). n >= dataset size returns a copy of the whole set.
Dataset subset(const Dataset& d, long n, std::uint64_t seed);

// First n examples in order (fixed evaluation samples).
Dataset take(const Dataset& d, long n);

// Binary tensor file ("DRCT"): u32 version, u32 rank, u32 dims, f64 values,
// all little-endian. Full precision so perturbation budgets survive a round
// trip. Throws DataError on unreadable, foreign, or truncated files.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

struct Batch {
  Tensor images;             // [b, 1, rows, cols]
  std::vector<int> labels;
  std::vector<long> indices;  // positions within the source dataset
};

// Yields batches covering every example exactly once; the last batch may be
// short. With a seed the order is a seeded permutation, otherwise natural.
class Batcher {
 public:
  Batcher(const Dataset& d, int batch_size, std::optional<std::uint64_t> shuffle_seed);
  std::optional<Batch> next();
  long num_batches() const;
  void reset(std::optional<std::uint64_t> shuffle_seed);  // restart a new epoch

 private:
  const Dataset* d_;
  std::vector<long> order_;
  long pos_ = 0;
  int batch_size_;
};

// Copies the images at `indices` into one [n,1,rows,cols] tensor.
Batch gather(const Dataset& d, const std::vector<long>& indices);

}  // namespace darccc
