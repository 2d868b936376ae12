#include "darccc/data.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <fstream>

#include "darccc/util.hpp"

namespace darccc {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(buf.data()), size);
  if (!in) throw DataError("read failed on " + path);
  return buf;
}

std::uint32_t be32(const std::vector<unsigned char>& buf, size_t off,
                   const std::string& path) {
  if (off + 4 > buf.size()) throw DataError("truncated file " + path);
  return (static_cast<std::uint32_t>(buf[off]) << 24) |
         (static_cast<std::uint32_t>(buf[off + 1]) << 16) |
         (static_cast<std::uint32_t>(buf[off + 2]) << 8) |
         static_cast<std::uint32_t>(buf[off + 3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& name) {
  const auto ibuf = read_file(images_path);
  const std::uint32_t imagic = be32(ibuf, 0, images_path);
  if (imagic != kImagesMagic) {
    throw DataError(strfmt("bad magic 0x%08x in %s (expected 0x%08x)", imagic,
                           images_path.c_str(), kImagesMagic));
  }
  const std::uint32_t n = be32(ibuf, 4, images_path);
  const std::uint32_t rows = be32(ibuf, 8, images_path);
  const std::uint32_t cols = be32(ibuf, 12, images_path);
  const size_t expect = 16 + static_cast<size_t>(n) * rows * cols;
  if (ibuf.size() < expect) throw DataError("truncated file " + images_path);

  const auto lbuf = read_file(labels_path);
  const std::uint32_t lmagic = be32(lbuf, 0, labels_path);
  if (lmagic != kLabelsMagic) {
    throw DataError(strfmt("bad magic 0x%08x in %s (expected 0x%08x)", lmagic,
                           labels_path.c_str(), kLabelsMagic));
  }
  const std::uint32_t ln = be32(lbuf, 4, labels_path);
  if (lbuf.size() < 8 + static_cast<size_t>(ln)) {
    throw DataError("truncated file " + labels_path);
  }
  if (n != ln) {
    throw DataError(strfmt("count mismatch: %u images in %s vs %u labels in %s", n,
                           images_path.c_str(), ln, labels_path.c_str()));
  }
  if (n == 0) throw DataError("empty dataset in " + images_path);

  std::vector<double> pixels(static_cast<size_t>(n) * rows * cols);
  for (size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<double>(ibuf[16 + i]) / 255.0;
  }
  std::vector<int> labels(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(lbuf[8 + i]);
    if (labels[i] < 0 || labels[i] > 9) {
      throw DataError(strfmt("label %d out of range [0,10) in %s", labels[i],
                             labels_path.c_str()));
    }
  }

  Dataset d;
  d.name = name;
  d.images = Tensor({static_cast<int>(n), 1, static_cast<int>(rows),
                     static_cast<int>(cols)},
                    std::move(pixels));
  d.labels = std::move(labels);
  return d;
}

Dataset load_named(const std::string& data_dir, const std::string& name, bool train) {
  const std::string base = data_dir + "/" + name + "/";
  const std::string prefix = train ? "train" : "t10k";
  return load_idx(base + prefix + "-images-idx3-ubyte",
                  base + prefix + "-labels-idx1-ubyte", name);
}

std::string resolve_data_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("DARCCC_DATA_DIR"); env && *env) return env;
  throw DataError("no data directory: pass --data-dir or set DARCCC_DATA_DIR");
}

namespace {

Dataset select(const Dataset& d, const std::vector<long>& indices) {
  Batch b = gather(d, indices);
  Dataset out;
  out.name = d.name;
  out.images = b.images;
  out.labels = std::move(b.labels);
  return out;
}

}  // namespace

Split split_dataset(const Dataset& train_full, const Dataset& test,
                    double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw DataError(strfmt("val_fraction %g out of range (0,1)", val_fraction));
  }
  const long n = train_full.size();
  const long n_val = static_cast<long>(val_fraction * static_cast<double>(n) + 0.5);
  if (n_val < 1 || n_val >= n) {
    throw DataError(strfmt("val_fraction %g leaves no usable split of %ld examples",
                           val_fraction, n));
  }
  std::vector<long> idx(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  std::vector<long> val_idx(idx.begin(), idx.begin() + n_val);
  std::vector<long> train_idx(idx.begin() + n_val, idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  Split s;
  s.seed = seed;
  s.train = select(train_full, train_idx);
  s.validation = select(train_full, val_idx);
  s.test = test;
  return s;
}

Dataset subset(const Dataset& d, long n, std::uint64_t seed) {
  if (n <= 0) throw DataError(strfmt("subset size %ld must be positive", n));
  const long total = d.size();
  if (n >= total) {
    std::vector<long> all(static_cast<size_t>(total));
    for (long i = 0; i < total; ++i) all[static_cast<size_t>(i)] = i;
    return select(d, all);
  }
  std::vector<long> idx(static_cast<size_t>(total));
  for (long i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(n));
  std::sort(idx.begin(), idx.end());
  return select(d, idx);
}

Dataset take(const Dataset& d, long n) {
  if (n <= 0 || n > d.size()) {
    throw DataError(strfmt("take: %ld of %ld examples", n, d.size()));
  }
  std::vector<long> idx(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  return select(d, idx);
}

Batch gather(const Dataset& d, const std::vector<long>& indices) {
  if (indices.empty()) throw DataError("gather: empty index list");
  const long px = static_cast<long>(d.images.dim(1)) * d.images.dim(2) * d.images.dim(3);
  Shape shape = d.images.shape();
  shape[0] = static_cast<int>(indices.size());
  std::vector<double> out(indices.size() * static_cast<size_t>(px));
  std::vector<int> labels(indices.size());
  const double* src = d.images.ptr();
  for (size_t i = 0; i < indices.size(); ++i) {
    const long id = indices[i];
    if (id < 0 || id >= d.size()) throw DataError("gather: index out of range");
    std::copy_n(src + id * px, px, out.data() + static_cast<long>(i) * px);
    labels[i] = d.labels[static_cast<size_t>(id)];
  }
  Batch b;
  b.images = Tensor(shape, std::move(out));
  b.labels = std::move(labels);
  b.indices = indices;
  return b;
}

Batcher::Batcher(const Dataset& d, int batch_size,
                 std::optional<std::uint64_t> shuffle_seed)
    : d_(&d), batch_size_(batch_size) {
  if (batch_size < 1) throw DataError("batch size must be >= 1");
  order_.resize(static_cast<size_t>(d.size()));
  for (long i = 0; i < d.size(); ++i) order_[static_cast<size_t>(i)] = i;
  reset(shuffle_seed);
}

void Batcher::reset(std::optional<std::uint64_t> shuffle_seed) {
  pos_ = 0;
  std::sort(order_.begin(), order_.end());
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(order_);
  }
}

long Batcher::num_batches() const {
  return (static_cast<long>(order_.size()) + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> Batcher::next() {
  if (pos_ >= static_cast<long>(order_.size())) return std::nullopt;
  const long end = std::min(pos_ + batch_size_, static_cast<long>(order_.size()));
  std::vector<long> idx(order_.begin() + pos_, order_.begin() + end);
  pos_ = end;
  return gather(*d_, idx);
}

namespace {

constexpr std::uint32_t kTensorFileVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, size_t& pos, const std::string& path) {
  if (pos + 4 > buf.size()) throw DataError("truncated tensor file " + path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  }
  pos += 4;
  return v;
}

std::uint64_t get_u64(const std::string& buf, size_t& pos, const std::string& path) {
  if (pos + 8 > buf.size()) throw DataError("truncated tensor file " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  }
  pos += 8;
  return v;
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  if (!t.defined()) throw DataError("save_tensor: undefined tensor");
  std::string out;
  out.reserve(16 + static_cast<size_t>(t.numel()) * 8);
  out.append("DRCT");
  put_u32(out, kTensorFileVersion);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
  const double* p = t.ptr();
  for (long i = 0; i < t.numel(); ++i) {
    put_u64(out, std::bit_cast<std::uint64_t>(p[i]));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("write failed on " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 || buf.compare(0, 4, "DRCT") != 0) {
    throw DataError("not a tensor file: " + path);
  }
  size_t pos = 4;
  const std::uint32_t version = get_u32(buf, pos, path);
  if (version != kTensorFileVersion) {
    throw DataError(strfmt("unsupported tensor file version %u in %s", version,
                           path.c_str()));
  }
  const std::uint32_t rank = get_u32(buf, pos, path);
  if (rank > 8) throw DataError("implausible tensor rank in " + path);
  Shape shape(rank);
  long n = 1;
  for (std::uint32_t d = 0; d < rank; ++d) {
    shape[d] = static_cast<int>(get_u32(buf, pos, path));
    n *= shape[d];
  }
  std::vector<double> values(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    values[static_cast<size_t>(i)] = std::bit_cast<double>(get_u64(buf, pos, path));
  }
  return Tensor(shape, std::move(values));
}

}  // namespace darccc
