#include "darccc/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <numeric>

#include "darccc/util.hpp"

extern "C" void openblas_set_num_threads(int);

namespace darccc {

namespace {
// Threaded BLAS reductions reorder additions and break run-to-run bitwise
// reproducibility, so pin to one thread before any GEMM runs.
[[maybe_unused]] const bool blas_pinned = [] {
  openblas_set_num_threads(1);
  return true;
}();
}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

static long shape_numel(const Shape& s) {
  long n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(s));
    n *= d;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<long>(values.size())) {
    throw ShapeError(strfmt("tensor: %zu values do not fill shape %s",
                            values.size(), shape_str(shape_).c_str()));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::leaf(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

long Tensor::numel() const { return data_ ? static_cast<long>(data_->size()) : 0; }

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) {
    throw ShapeError(strfmt("dim: axis %d out of range for shape %s", i,
                            shape_str(shape_).c_str()));
  }
  return shape_[static_cast<size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor has shape " + shape_str(shape_) + ", expected one element");
  }
  return (*data_)[0];
}

double Tensor::at(const std::vector<int>& index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("at: index rank mismatch for shape " + shape_str(shape_));
  }
  long off = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= shape_[i]) {
      throw ShapeError("at: index out of range for shape " + shape_str(shape_));
    }
    off = off * shape_[i] + index[i];
  }
  return (*data_)[static_cast<size_t>(off)];
}

void Tensor::ensure_grad() {
  if (!grad_) grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
}

void Tensor::set_requires_grad(bool b) {
  requires_grad_ = b;
  if (b) ensure_grad();
}

std::vector<double>& Tensor::grad() {
  ensure_grad();
  return *grad_;
}

const std::vector<double>& Tensor::grad() const {
  if (!grad_) throw GraphError("grad: no gradient buffer allocated");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

namespace {
thread_local Graph* tl_active_graph = nullptr;
}

Graph::~Graph() = default;

Graph::Activation::Activation(Graph& g) : prev_(tl_active_graph) { tl_active_graph = &g; }

Graph::Activation::~Activation() { tl_active_graph = prev_; }

Graph* Graph::active() { return tl_active_graph; }

void Graph::record(std::function<void()> backward_fn) {
  tl_active_graph->nodes_.push_back(std::move(backward_fn));
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) {
    throw GraphError("backward: graph already consumed; record a fresh graph first");
  }
  if (loss.numel() != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad() || !loss.grad_) {
    throw GraphError("backward: loss was not recorded on a graph");
  }
  consumed_ = true;
  (*loss.grad_)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)();
  }
  nodes_.clear();
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

bool grad_wanted(std::initializer_list<const Tensor*> inputs) {
  if (!Graph::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void check_defined(const char* op, std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (!t->defined()) throw ShapeError(std::string(op) + ": undefined tensor operand");
  }
}

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

enum class Broadcast { same, scalar_rhs, scalar_lhs, bias };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b,
                         bool allow_bias) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar_rhs;
  if (a.numel() == 1) return Broadcast::scalar_lhs;
  if (allow_bias && b.rank() == 1 && a.rank() >= 2 &&
      a.shape().back() == b.dim(0)) {
    return Broadcast::bias;
  }
  throw ShapeError(strfmt("%s: shape mismatch %s vs %s", op,
                          shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined("add", {&a, &b});
  const Broadcast kind = broadcast_kind("add", a, b, /*allow_bias=*/true);
  const Tensor& big = (kind == Broadcast::scalar_lhs) ? b : a;
  const long n = big.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  switch (kind) {
    case Broadcast::same:
      for (long i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
      break;
    case Broadcast::scalar_rhs:
      for (long i = 0; i < n; ++i) out[i] = pa[i] + pb[0];
      break;
    case Broadcast::scalar_lhs:
      for (long i = 0; i < n; ++i) out[i] = pa[0] + pb[i];
      break;
    case Broadcast::bias: {
      const long d = b.numel();
      for (long i = 0; i < n; ++i) out[i] = pa[i] + pb[i % d];
      break;
    }
  }
  Tensor res(big.shape(), std::move(out));
  if (grad_wanted({&a, &b})) {
    res.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = res;
    Graph::record([ac, bc, oc, kind, n]() mutable {
      const double* go = oc.grad().data();
      if (ac.requires_grad()) {
        double* ga = ac.grad().data();
        if (kind == Broadcast::scalar_lhs) {
          for (long i = 0; i < n; ++i) ga[0] += go[i];
        } else {
          for (long i = 0; i < n; ++i) ga[i] += go[i];
        }
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad().data();
        if (kind == Broadcast::scalar_rhs) {
          for (long i = 0; i < n; ++i) gb[0] += go[i];
        } else if (kind == Broadcast::bias) {
          const long d = bc.numel();
          for (long i = 0; i < n; ++i) gb[i % d] += go[i];
        } else {
          for (long i = 0; i < n; ++i) gb[i] += go[i];
        }
      }
    });
  }
  return res;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined("sub", {&a, &b});
  const Broadcast kind = broadcast_kind("sub", a, b, /*allow_bias=*/false);
  const Tensor& big = (kind == Broadcast::scalar_lhs) ? b : a;
  const long n = big.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  switch (kind) {
    case Broadcast::same:
      for (long i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
      break;
    case Broadcast::scalar_rhs:
      for (long i = 0; i < n; ++i) out[i] = pa[i] - pb[0];
      break;
    case Broadcast::scalar_lhs:
      for (long i = 0; i < n; ++i) out[i] = pa[0] - pb[i];
      break;
    default:
      break;
  }
  Tensor res(big.shape(), std::move(out));
  if (grad_wanted({&a, &b})) {
    res.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = res;
    Graph::record([ac, bc, oc, kind, n]() mutable {
      const double* go = oc.grad().data();
      if (ac.requires_grad()) {
        double* ga = ac.grad().data();
        if (kind == Broadcast::scalar_lhs) {
          for (long i = 0; i < n; ++i) ga[0] += go[i];
        } else {
          for (long i = 0; i < n; ++i) ga[i] += go[i];
        }
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad().data();
        if (kind == Broadcast::scalar_rhs) {
          for (long i = 0; i < n; ++i) gb[0] -= go[i];
        } else {
          for (long i = 0; i < n; ++i) gb[i] -= go[i];
        }
      }
    });
  }
  return res;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined("mul", {&a, &b});
  const Broadcast kind = broadcast_kind("mul", a, b, /*allow_bias=*/false);
  const Tensor& big = (kind == Broadcast::scalar_lhs) ? b : a;
  const long n = big.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  switch (kind) {
    case Broadcast::same:
      for (long i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
      break;
    case Broadcast::scalar_rhs:
      for (long i = 0; i < n; ++i) out[i] = pa[i] * pb[0];
      break;
    case Broadcast::scalar_lhs:
      for (long i = 0; i < n; ++i) out[i] = pa[0] * pb[i];
      break;
    default:
      break;
  }
  Tensor res(big.shape(), std::move(out));
  if (grad_wanted({&a, &b})) {
    res.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = res;
    Graph::record([ac, bc, oc, kind, n]() mutable {
      const double* go = oc.grad().data();
      const double* pa = ac.ptr();
      const double* pb = bc.ptr();
      if (ac.requires_grad()) {
        double* ga = ac.grad().data();
        switch (kind) {
          case Broadcast::same:
            for (long i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
            break;
          case Broadcast::scalar_rhs:
            for (long i = 0; i < n; ++i) ga[i] += go[i] * pb[0];
            break;
          case Broadcast::scalar_lhs:
            for (long i = 0; i < n; ++i) ga[0] += go[i] * pb[i];
            break;
          default:
            break;
        }
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad().data();
        switch (kind) {
          case Broadcast::same:
            for (long i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
            break;
          case Broadcast::scalar_rhs:
            for (long i = 0; i < n; ++i) gb[0] += go[i] * pa[i];
            break;
          case Broadcast::scalar_lhs:
            for (long i = 0; i < n; ++i) gb[i] += go[i] * pa[0];
            break;
          default:
            break;
        }
      }
    });
  }
  return res;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_defined("div", {&a, &b});
  const Broadcast kind = broadcast_kind("div", a, b, /*allow_bias=*/false);
  for (double v : b.data()) {
    if (v == 0.0) throw NumericError("div: zero divisor");
  }
  const Tensor& big = (kind == Broadcast::scalar_lhs) ? b : a;
  const long n = big.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  switch (kind) {
    case Broadcast::same:
      for (long i = 0; i < n; ++i) out[i] = pa[i] / pb[i];
      break;
    case Broadcast::scalar_rhs:
      for (long i = 0; i < n; ++i) out[i] = pa[i] / pb[0];
      break;
    case Broadcast::scalar_lhs:
      for (long i = 0; i < n; ++i) out[i] = pa[0] / pb[i];
      break;
    default:
      break;
  }
  Tensor res(big.shape(), std::move(out));
  if (grad_wanted({&a, &b})) {
    res.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = res;
    Graph::record([ac, bc, oc, kind, n]() mutable {
      const double* go = oc.grad().data();
      const double* pa = ac.ptr();
      const double* pb = bc.ptr();
      if (ac.requires_grad()) {
        double* ga = ac.grad().data();
        switch (kind) {
          case Broadcast::same:
            for (long i = 0; i < n; ++i) ga[i] += go[i] / pb[i];
            break;
          case Broadcast::scalar_rhs:
            for (long i = 0; i < n; ++i) ga[i] += go[i] / pb[0];
            break;
          case Broadcast::scalar_lhs:
            for (long i = 0; i < n; ++i) ga[0] += go[i] / pb[i];
            break;
          default:
            break;
        }
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad().data();
        switch (kind) {
          case Broadcast::same:
            for (long i = 0; i < n; ++i) gb[i] -= go[i] * pa[i] / (pb[i] * pb[i]);
            break;
          case Broadcast::scalar_rhs:
            for (long i = 0; i < n; ++i) gb[0] -= go[i] * pa[i] / (pb[0] * pb[0]);
            break;
          case Broadcast::scalar_lhs:
            for (long i = 0; i < n; ++i) gb[i] -= go[i] * pa[0] / (pb[i] * pb[i]);
            break;
          default:
            break;
        }
      }
    });
  }
  return res;
}

Tensor add_scalar(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }

Tensor mul_scalar(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined("matmul", {&a, &b});
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError(strfmt("matmul: shape mismatch %s vs %s",
                            shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor res = Tensor::zeros({m, n});
  gemm(false, false, m, n, k, 1.0, a.ptr(), k, b.ptr(), n, 0.0, res.ptr(), n);
  if (grad_wanted({&a, &b})) {
    res.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = res;
    Graph::record([ac, bc, oc, m, n, k]() mutable {
      const double* go = oc.grad().data();
      if (ac.requires_grad()) {
        gemm(false, true, m, k, n, 1.0, go, n, bc.ptr(), n, 1.0, ac.grad().data(), k);
      }
      if (bc.requires_grad()) {
        gemm(true, false, k, n, m, 1.0, ac.ptr(), k, go, n, 1.0, bc.grad().data(), n);
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// conv2d (im2col + GEMM, chunked over images to bound the patch buffer)
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int batch, ic, h, w, oc, kh, kw, oh, ow, stride, pad;
  long patch_k;  // ic*kh*kw
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw ShapeError(strfmt("conv2d: shape mismatch %s vs kernel %s",
                            shape_str(x.shape()).c_str(), shape_str(w.shape()).c_str()));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  ConvDims d;
  d.batch = x.dim(0); d.ic = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
  d.oc = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
  d.stride = stride; d.pad = pad;
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad || d.oh <= 0 || d.ow <= 0) {
    throw ShapeError(strfmt("conv2d: kernel %s does not fit input %s (pad %d)",
                            shape_str(w.shape()).c_str(), shape_str(x.shape()).c_str(), pad));
  }
  d.patch_k = static_cast<long>(d.ic) * d.kh * d.kw;
  return d;
}

// Fills col[(oy*ow+ox), (c*kh+ky)*kw+kx] for images [img0, img0+count).
void im2col(const ConvDims& d, const double* x, int img0, int count, double* col) {
  const long plane = static_cast<long>(d.h) * d.w;
  const long img_sz = plane * d.ic;
  const long patches_per_img = static_cast<long>(d.oh) * d.ow;
  for (int img = 0; img < count; ++img) {
    const double* xi = x + (img0 + img) * img_sz;
    double* ci = col + img * patches_per_img * d.patch_k;
    for (int oy = 0; oy < d.oh; ++oy) {
      for (int ox = 0; ox < d.ow; ++ox) {
        double* patch = ci + (static_cast<long>(oy) * d.ow + ox) * d.patch_k;
        const int y0 = oy * d.stride - d.pad;
        const int x0 = ox * d.stride - d.pad;
        long idx = 0;
        for (int c = 0; c < d.ic; ++c) {
          const double* xc = xi + c * plane;
          for (int ky = 0; ky < d.kh; ++ky) {
            const int y = y0 + ky;
            if (y < 0 || y >= d.h) {
              for (int kx = 0; kx < d.kw; ++kx) patch[idx++] = 0.0;
              continue;
            }
            for (int kx = 0; kx < d.kw; ++kx) {
              const int xx = x0 + kx;
              patch[idx++] = (xx < 0 || xx >= d.w) ? 0.0 : xc[static_cast<long>(y) * d.w + xx];
            }
          }
        }
      }
    }
  }
}

// Scatter-add of the patch-gradient buffer back into dx.
void col2im(const ConvDims& d, const double* col, int img0, int count, double* dx) {
  const long plane = static_cast<long>(d.h) * d.w;
  const long img_sz = plane * d.ic;
  const long patches_per_img = static_cast<long>(d.oh) * d.ow;
  for (int img = 0; img < count; ++img) {
    double* xi = dx + (img0 + img) * img_sz;
    const double* ci = col + img * patches_per_img * d.patch_k;
    for (int oy = 0; oy < d.oh; ++oy) {
      for (int ox = 0; ox < d.ow; ++ox) {
        const double* patch = ci + (static_cast<long>(oy) * d.ow + ox) * d.patch_k;
        const int y0 = oy * d.stride - d.pad;
        const int x0 = ox * d.stride - d.pad;
        long idx = 0;
        for (int c = 0; c < d.ic; ++c) {
          double* xc = xi + c * plane;
          for (int ky = 0; ky < d.kh; ++ky) {
            const int y = y0 + ky;
            if (y < 0 || y >= d.h) {
              idx += d.kw;
              continue;
            }
            for (int kx = 0; kx < d.kw; ++kx) {
              const int xx = x0 + kx;
              if (xx >= 0 && xx < d.w) xc[static_cast<long>(y) * d.w + xx] += patch[idx];
              ++idx;
            }
          }
        }
      }
    }
  }
}

int conv_chunk_images(const ConvDims& d) {
  const long bytes_per_img = static_cast<long>(d.oh) * d.ow * d.patch_k * 8;
  long imgs = (64L << 20) / std::max(bytes_per_img, 1L);
  return static_cast<int>(std::clamp(imgs, 1L, static_cast<long>(d.batch)));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  check_defined("conv2d", {&x, &w});
  const ConvDims d = conv_dims(x, w, stride, pad);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.oc)) {
    throw ShapeError(strfmt("conv2d: bias shape %s does not match %d output channels",
                            shape_str(bias.shape()).c_str(), d.oc));
  }
  Tensor res = Tensor::zeros({d.batch, d.oc, d.oh, d.ow});
  const long patches_per_img = static_cast<long>(d.oh) * d.ow;
  const int chunk = conv_chunk_images(d);
  std::vector<double> col(static_cast<size_t>(chunk) * patches_per_img * d.patch_k);
  std::vector<double> out_mat(static_cast<size_t>(chunk) * patches_per_img * d.oc);
  const double* pb = bias.defined() ? bias.ptr() : nullptr;
  for (int img0 = 0; img0 < d.batch; img0 += chunk) {
    const int count = std::min(chunk, d.batch - img0);
    const long p = count * patches_per_img;
    im2col(d, x.ptr(), img0, count, col.data());
    // out_mat[p, oc] = col[p, K] * W[oc, K]^T
    gemm(false, true, static_cast<int>(p), d.oc, static_cast<int>(d.patch_k), 1.0,
         col.data(), static_cast<int>(d.patch_k), w.ptr(), static_cast<int>(d.patch_k),
         0.0, out_mat.data(), d.oc);
    // scatter [patch, oc] -> NCHW
    for (int img = 0; img < count; ++img) {
      double* oi = res.ptr() + (static_cast<long>(img0 + img) * d.oc) * patches_per_img;
      const double* mi = out_mat.data() + static_cast<long>(img) * patches_per_img * d.oc;
      for (long q = 0; q < patches_per_img; ++q) {
        for (int o = 0; o < d.oc; ++o) {
          oi[static_cast<long>(o) * patches_per_img + q] = mi[q * d.oc + o] + (pb ? pb[o] : 0.0);
        }
      }
    }
  }
  const bool rec = bias.defined() ? grad_wanted({&x, &w, &bias}) : grad_wanted({&x, &w});
  if (rec) {
    res.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = bias, oc_t = res;
    Graph::record([xc, wc, bc, oc_t, d]() mutable {
      const long patches_per_img = static_cast<long>(d.oh) * d.ow;
      const int chunk = conv_chunk_images(d);
      std::vector<double> col(static_cast<size_t>(chunk) * patches_per_img * d.patch_k);
      std::vector<double> go_mat(static_cast<size_t>(chunk) * patches_per_img * d.oc);
      std::vector<double> dcol;
      if (xc.requires_grad()) dcol.resize(col.size());
      const double* go = oc_t.grad().data();
      for (int img0 = 0; img0 < d.batch; img0 += chunk) {
        const int count = std::min(chunk, d.batch - img0);
        const long p = count * patches_per_img;
        // gather NCHW grad -> [patch, oc]
        for (int img = 0; img < count; ++img) {
          const double* gi = go + (static_cast<long>(img0 + img) * d.oc) * patches_per_img;
          double* mi = go_mat.data() + static_cast<long>(img) * patches_per_img * d.oc;
          for (long q = 0; q < patches_per_img; ++q) {
            for (int o = 0; o < d.oc; ++o) {
              mi[q * d.oc + o] = gi[static_cast<long>(o) * patches_per_img + q];
            }
          }
        }
        if (wc.requires_grad() || xc.requires_grad()) {
          im2col(d, xc.ptr(), img0, count, col.data());
        }
        if (wc.requires_grad()) {
          // dW[oc, K] += go_mat^T[oc, p] * col[p, K]
          gemm(true, false, d.oc, static_cast<int>(d.patch_k), static_cast<int>(p), 1.0,
               go_mat.data(), d.oc, col.data(), static_cast<int>(d.patch_k), 1.0,
               wc.grad().data(), static_cast<int>(d.patch_k));
        }
        if (xc.requires_grad()) {
          // dcol[p, K] = go_mat[p, oc] * W[oc, K]
          gemm(false, false, static_cast<int>(p), static_cast<int>(d.patch_k), d.oc, 1.0,
               go_mat.data(), d.oc, wc.ptr(), static_cast<int>(d.patch_k), 0.0,
               dcol.data(), static_cast<int>(d.patch_k));
          col2im(d, dcol.data(), img0, count, xc.grad().data());
        }
        if (bc.defined() && bc.requires_grad()) {
          double* gb = bc.grad().data();
          for (long q = 0; q < p; ++q) {
            for (int o = 0; o < d.oc; ++o) gb[o] += go_mat[q * d.oc + o];
          }
        }
      }
    });
  }
  return res;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// ---------------------------------------------------------------------------
// maxpool2
// ---------------------------------------------------------------------------

Tensor maxpool2(const Tensor& x) {
  check_defined("maxpool2", {&x});
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("maxpool2: input must be [b,c,h,w] with even h and w, got " +
                     shape_str(x.shape()));
  }
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / 2, ow = w / 2;
  Tensor res = Tensor::zeros({b, c, oh, ow});
  auto argmax = std::make_shared<std::vector<long>>(static_cast<size_t>(res.numel()));
  const double* px = x.ptr();
  double* po = res.ptr();
  long oi = 0;
  for (int i = 0; i < b * c; ++i) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++oi) {
        long best = static_cast<long>(i) * h * w + (2L * oy) * w + 2 * ox;
        double bv = px[best];
        const long cand[3] = {best + 1, best + w, best + w + 1};
        for (long cd : cand) {
          if (px[cd] > bv) { bv = px[cd]; best = cd; }
        }
        po[oi] = bv;
        (*argmax)[static_cast<size_t>(oi)] = best;
      }
    }
  }
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, argmax]() mutable {
      if (!xc.requires_grad()) return;
      const double* go = oc.grad().data();
      double* gx = xc.grad().data();
      for (size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += go[i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// unary nonlinearities
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  check_defined("relu", {&x});
  const long n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.ptr();
  for (long i = 0; i < n; ++i) out[i] = px[i] > 0.0 ? px[i] : 0.0;
  Tensor res(x.shape(), std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, n]() mutable {
      const double* go = oc.grad().data();
      const double* px = xc.ptr();
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) {
        if (px[i] > 0.0) gx[i] += go[i];
      }
    });
  }
  return res;
}

Tensor sigmoid(const Tensor& x) {
  check_defined("sigmoid", {&x});
  const long n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.ptr();
  for (long i = 0; i < n; ++i) {
    const double v = px[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  Tensor res(x.shape(), std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, n]() mutable {
      const double* go = oc.grad().data();
      const double* py = oc.ptr();
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) gx[i] += go[i] * py[i] * (1.0 - py[i]);
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// axis reductions / softmax
// ---------------------------------------------------------------------------

namespace {

// Decomposes a shape around `axis` into [outer, axis, inner].
struct AxisView {
  long outer, len, inner;
};

AxisView axis_view(const char* op, const Shape& s, int axis) {
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError(strfmt("%s: axis out of range for shape %s", op, shape_str(s).c_str()));
  }
  AxisView v{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

int normalize_axis(const Shape& s, int axis) {
  return axis < 0 ? axis + static_cast<int>(s.size()) : axis;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  check_defined("softmax", {&x});
  const AxisView v = axis_view("softmax", x.shape(), axis);
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* px = x.ptr();
  for (long o = 0; o < v.outer; ++o) {
    for (long in = 0; in < v.inner; ++in) {
      const long base = o * v.len * v.inner + in;
      double mx = px[base];
      for (long i = 1; i < v.len; ++i) mx = std::max(mx, px[base + i * v.inner]);
      double s = 0.0;
      for (long i = 0; i < v.len; ++i) {
        const double e = std::exp(px[base + i * v.inner] - mx);
        out[static_cast<size_t>(base + i * v.inner)] = e;
        s += e;
      }
      for (long i = 0; i < v.len; ++i) out[static_cast<size_t>(base + i * v.inner)] /= s;
    }
  }
  Tensor res(x.shape(), std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, v]() mutable {
      const double* go = oc.grad().data();
      const double* py = oc.ptr();
      double* gx = xc.grad().data();
      for (long o = 0; o < v.outer; ++o) {
        for (long in = 0; in < v.inner; ++in) {
          const long base = o * v.len * v.inner + in;
          double dot = 0.0;
          for (long i = 0; i < v.len; ++i) {
            const long k = base + i * v.inner;
            dot += go[k] * py[k];
          }
          for (long i = 0; i < v.len; ++i) {
            const long k = base + i * v.inner;
            gx[k] += py[k] * (go[k] - dot);
          }
        }
      }
    });
  }
  return res;
}

Tensor sum(const Tensor& x) {
  check_defined("sum", {&x});
  const long n = x.numel();
  const double* px = x.ptr();
  double s = 0.0;
  for (long i = 0; i < n; ++i) s += px[i];
  Tensor res = Tensor::scalar(s);
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, n]() mutable {
      const double g = oc.grad()[0];
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return res;
}

Tensor sum(const Tensor& x, int axis) {
  check_defined("sum", {&x});
  const AxisView v = axis_view("sum", x.shape(), axis);
  const int ax = normalize_axis(x.shape(), axis);
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != ax) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(static_cast<size_t>(v.outer * v.inner), 0.0);
  const double* px = x.ptr();
  for (long o = 0; o < v.outer; ++o) {
    for (long i = 0; i < v.len; ++i) {
      const long base = (o * v.len + i) * v.inner;
      for (long in = 0; in < v.inner; ++in) out[o * v.inner + in] += px[base + in];
    }
  }
  Tensor res(out_shape, std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, v]() mutable {
      const double* go = oc.grad().data();
      double* gx = xc.grad().data();
      for (long o = 0; o < v.outer; ++o) {
        for (long i = 0; i < v.len; ++i) {
          const long base = (o * v.len + i) * v.inner;
          for (long in = 0; in < v.inner; ++in) gx[base + in] += go[o * v.inner + in];
        }
      }
    });
  }
  return res;
}

Tensor mean(const Tensor& x) {
  check_defined("mean", {&x});
  const long n = x.numel();
  const double* px = x.ptr();
  double s = 0.0;
  for (long i = 0; i < n; ++i) s += px[i];
  Tensor res = Tensor::scalar(s / static_cast<double>(n));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, n]() mutable {
      const double g = oc.grad()[0] / static_cast<double>(n);
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// pointwise math
// ---------------------------------------------------------------------------

Tensor square(const Tensor& x) {
  check_defined("square", {&x});
  const long n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.ptr();
  for (long i = 0; i < n; ++i) out[i] = px[i] * px[i];
  Tensor res(x.shape(), std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, n]() mutable {
      const double* go = oc.grad().data();
      const double* px = xc.ptr();
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) gx[i] += go[i] * 2.0 * px[i];
    });
  }
  return res;
}

Tensor sqrt_op(const Tensor& x) {
  check_defined("sqrt", {&x});
  const long n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.ptr();
  for (long i = 0; i < n; ++i) {
    if (px[i] < 0.0) throw NumericError("sqrt: negative input");
    out[i] = std::sqrt(px[i]);
  }
  Tensor res(x.shape(), std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, n]() mutable {
      const double* go = oc.grad().data();
      const double* py = oc.ptr();
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) gx[i] += go[i] * 0.5 / std::max(py[i], 1e-150);
    });
  }
  return res;
}

Tensor max_scalar(const Tensor& x, double c) {
  check_defined("max_scalar", {&x});
  const long n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.ptr();
  for (long i = 0; i < n; ++i) out[i] = px[i] > c ? px[i] : c;
  Tensor res(x.shape(), std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, n, c]() mutable {
      const double* go = oc.grad().data();
      const double* px = xc.ptr();
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) {
        if (px[i] > c) gx[i] += go[i];
      }
    });
  }
  return res;
}

Tensor clip(const Tensor& x, double lo, double hi) {
  check_defined("clip", {&x});
  if (!(lo <= hi)) throw ShapeError("clip: lo must be <= hi");
  const long n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.ptr();
  for (long i = 0; i < n; ++i) out[i] = std::min(std::max(px[i], lo), hi);
  Tensor res(x.shape(), std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    // gradient passes only strictly inside (lo, hi)
    Graph::record([xc, oc, n, lo, hi]() mutable {
      const double* go = oc.grad().data();
      const double* px = xc.ptr();
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) {
        if (px[i] > lo && px[i] < hi) gx[i] += go[i];
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  check_defined("reshape", {&x});
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError(strfmt("reshape: cannot view %s as %s",
                            shape_str(x.shape()).c_str(), shape_str(shape).c_str()));
  }
  Tensor res(shape, x.data());  // fresh buffer, same values
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc]() mutable {
      const double* go = oc.grad().data();
      double* gx = xc.grad().data();
      const long n = xc.numel();
      for (long i = 0; i < n; ++i) gx[i] += go[i];
    });
  }
  return res;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  check_defined("permute", {&x});
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw ShapeError("permute: axes rank mismatch for shape " + shape_str(x.shape()));
  }
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int a = axes[static_cast<size_t>(i)];
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) {
      throw ShapeError("permute: invalid axes for shape " + shape_str(x.shape()));
    }
    seen[static_cast<size_t>(a)] = true;
    out_shape[static_cast<size_t>(i)] = x.dim(a);
  }
  // strides of the source, walked in permuted order
  std::vector<long> src_stride(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    src_stride[static_cast<size_t>(i)] = src_stride[static_cast<size_t>(i) + 1] * x.dim(i + 1);
  }
  std::vector<long> walk(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) walk[static_cast<size_t>(i)] = src_stride[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  const long n = x.numel();
  auto map = std::make_shared<std::vector<long>>(static_cast<size_t>(n));
  std::vector<long> idx(static_cast<size_t>(r), 0);
  long src = 0;
  for (long i = 0; i < n; ++i) {
    (*map)[static_cast<size_t>(i)] = src;
    for (int d2 = r - 1; d2 >= 0; --d2) {
      idx[static_cast<size_t>(d2)]++;
      src += walk[static_cast<size_t>(d2)];
      if (idx[static_cast<size_t>(d2)] < out_shape[static_cast<size_t>(d2)]) break;
      src -= walk[static_cast<size_t>(d2)] * out_shape[static_cast<size_t>(d2)];
      idx[static_cast<size_t>(d2)] = 0;
    }
  }
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.ptr();
  for (long i = 0; i < n; ++i) out[static_cast<size_t>(i)] = px[(*map)[static_cast<size_t>(i)]];
  Tensor res(out_shape, std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, map, n]() mutable {
      const double* go = oc.grad().data();
      double* gx = xc.grad().data();
      for (long i = 0; i < n; ++i) gx[(*map)[static_cast<size_t>(i)]] += go[i];
    });
  }
  return res;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const Shape& s0 = parts[0].shape();
  const int ax = axis < 0 ? axis + static_cast<int>(s0.size()) : axis;
  if (ax < 0 || ax >= static_cast<int>(s0.size())) {
    throw ShapeError(strfmt("concat: axis out of range for shape %s", shape_str(s0).c_str()));
  }
  long total_axis = 0;
  for (const Tensor& p : parts) {
    check_defined("concat", {&p});
    if (p.rank() != parts[0].rank()) {
      throw ShapeError(strfmt("concat: shape mismatch %s vs %s",
                              shape_str(s0).c_str(), shape_str(p.shape()).c_str()));
    }
    for (int i = 0; i < p.rank(); ++i) {
      if (i != ax && p.dim(i) != parts[0].dim(i)) {
        throw ShapeError(strfmt("concat: shape mismatch %s vs %s",
                                shape_str(s0).c_str(), shape_str(p.shape()).c_str()));
      }
    }
    total_axis += p.dim(ax);
  }
  const AxisView v0 = axis_view("concat", s0, ax);
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(ax)] = static_cast<int>(total_axis);
  std::vector<double> out(static_cast<size_t>(v0.outer * total_axis * v0.inner));
  long off = 0;
  for (const Tensor& p : parts) {
    const long len = p.dim(ax);
    const double* pp = p.ptr();
    for (long o = 0; o < v0.outer; ++o) {
      std::memcpy(out.data() + (o * total_axis + off) * v0.inner,
                  pp + o * len * v0.inner, static_cast<size_t>(len * v0.inner) * 8);
    }
    off += len;
  }
  Tensor res(out_shape, std::move(out));
  bool want = false;
  if (Graph::active()) {
    for (const Tensor& p : parts) want = want || p.requires_grad();
  }
  if (want) {
    res.set_requires_grad(true);
    std::vector<Tensor> pc = parts;
    Tensor oc = res;
    Graph::record([pc, oc, v0, total_axis, ax]() mutable {
      const double* go = oc.grad().data();
      long off = 0;
      for (Tensor& p : pc) {
        const long len = p.dim(ax);
        if (p.requires_grad()) {
          double* gp = p.grad().data();
          for (long o = 0; o < v0.outer; ++o) {
            const double* src = go + (o * total_axis + off) * v0.inner;
            double* dst = gp + o * len * v0.inner;
            for (long i = 0; i < len * v0.inner; ++i) dst[i] += src[i];
          }
        }
        off += len;
      }
    });
  }
  return res;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  check_defined("slice", {&x});
  const AxisView v = axis_view("slice", x.shape(), axis);
  const int ax = normalize_axis(x.shape(), axis);
  if (start < 0 || len <= 0 || start + len > v.len) {
    throw ShapeError(strfmt("slice: range [%d,%d) out of bounds for axis %d of %s",
                            start, start + len, ax, shape_str(x.shape()).c_str()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(ax)] = len;
  std::vector<double> out(static_cast<size_t>(v.outer * len * v.inner));
  const double* px = x.ptr();
  for (long o = 0; o < v.outer; ++o) {
    std::memcpy(out.data() + o * len * v.inner,
                px + (o * v.len + start) * v.inner, static_cast<size_t>(len * v.inner) * 8);
  }
  Tensor res(out_shape, std::move(out));
  if (grad_wanted({&x})) {
    res.set_requires_grad(true);
    Tensor xc = x, oc = res;
    Graph::record([xc, oc, v, start, len]() mutable {
      const double* go = oc.grad().data();
      double* gx = xc.grad().data();
      for (long o = 0; o < v.outer; ++o) {
        const double* src = go + o * len * v.inner;
        double* dst = gx + (o * v.len + start) * v.inner;
        for (long i = 0; i < static_cast<long>(len) * v.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// composites and capsule-specific ops
// ---------------------------------------------------------------------------

Tensor l2_norm(const Tensor& x, int axis) {
  return sqrt_op(add_scalar(sum(square(x), axis), 1e-12));
}

Tensor scale_vecs(const Tensor& v, const Tensor& s) {
  check_defined("scale_vecs", {&v, &s});
  if (v.rank() != s.rank() + 1) {
    throw ShapeError(strfmt("scale_vecs: shape mismatch %s vs %s",
                            shape_str(v.shape()).c_str(), shape_str(s.shape()).c_str()));
  }
  for (int i = 0; i < s.rank(); ++i) {
    if (v.dim(i) != s.dim(i)) {
      throw ShapeError(strfmt("scale_vecs: shape mismatch %s vs %s",
                              shape_str(v.shape()).c_str(), shape_str(s.shape()).c_str()));
    }
  }
  const long rows = s.numel();
  const long d = v.dim(v.rank() - 1);
  std::vector<double> out(static_cast<size_t>(v.numel()));
  const double* pv = v.ptr();
  const double* ps = s.ptr();
  for (long r = 0; r < rows; ++r) {
    for (long k = 0; k < d; ++k) out[r * d + k] = pv[r * d + k] * ps[r];
  }
  Tensor res(v.shape(), std::move(out));
  if (grad_wanted({&v, &s})) {
    res.set_requires_grad(true);
    Tensor vc = v, sc = s, oc = res;
    Graph::record([vc, sc, oc, rows, d]() mutable {
      const double* go = oc.grad().data();
      const double* pv = vc.ptr();
      const double* ps = sc.ptr();
      if (vc.requires_grad()) {
        double* gv = vc.grad().data();
        for (long r = 0; r < rows; ++r) {
          for (long k = 0; k < d; ++k) gv[r * d + k] += go[r * d + k] * ps[r];
        }
      }
      if (sc.requires_grad()) {
        double* gs = sc.grad().data();
        for (long r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (long k = 0; k < d; ++k) acc += go[r * d + k] * pv[r * d + k];
          gs[r] += acc;
        }
      }
    });
  }
  return res;
}

Tensor caps_transform(const Tensor& u, const Tensor& w) {
  check_defined("caps_transform", {&u, &w});
  if (u.rank() != 3 || w.rank() != 4 || u.dim(1) != w.dim(0) || u.dim(2) != w.dim(2)) {
    throw ShapeError(strfmt("caps_transform: shape mismatch %s vs %s",
                            shape_str(u.shape()).c_str(), shape_str(w.shape()).c_str()));
  }
  const int b = u.dim(0), ni = u.dim(1), a = u.dim(2), j = w.dim(1), d = w.dim(3);
  const int jd = j * d;
  Tensor res = Tensor::zeros({b, ni, j, d});
  std::vector<double> wi(static_cast<size_t>(a) * jd);  // [A, J*D] block for one i
  const double* pw = w.ptr();
  for (int i = 0; i < ni; ++i) {
    // pack w[i,:,:,:] ([J,A,D]) as [A, J*D]
    for (int jj = 0; jj < j; ++jj) {
      for (int aa = 0; aa < a; ++aa) {
        std::memcpy(wi.data() + (static_cast<long>(aa) * jd + jj * d),
                    pw + ((static_cast<long>(i) * j + jj) * a + aa) * d,
                    static_cast<size_t>(d) * 8);
      }
    }
    // u_hat[:, i, :, :] = u[:, i, :] x wi
    gemm(false, false, b, jd, a, 1.0, u.ptr() + static_cast<long>(i) * a,
         ni * a, wi.data(), jd, 0.0, res.ptr() + static_cast<long>(i) * jd, ni * jd);
  }
  if (grad_wanted({&u, &w})) {
    res.set_requires_grad(true);
    Tensor uc = u, wc = w, oc = res;
    Graph::record([uc, wc, oc, b, ni, a, j, d, jd]() mutable {
      const double* go = oc.grad().data();
      std::vector<double> wi(static_cast<size_t>(a) * jd);
      std::vector<double> dwi(static_cast<size_t>(a) * jd);
      const double* pw = wc.ptr();
      for (int i = 0; i < ni; ++i) {
        if (uc.requires_grad()) {
          for (int jj = 0; jj < j; ++jj) {
            for (int aa = 0; aa < a; ++aa) {
              std::memcpy(wi.data() + (static_cast<long>(aa) * jd + jj * d),
                          pw + ((static_cast<long>(i) * j + jj) * a + aa) * d,
                          static_cast<size_t>(d) * 8);
            }
          }
          // du[:, i, :] += go[:, i, :, :] x wi^T
          gemm(false, true, b, a, jd, 1.0, go + static_cast<long>(i) * jd, ni * jd,
               wi.data(), jd, 1.0, uc.grad().data() + static_cast<long>(i) * a, ni * a);
        }
        if (wc.requires_grad()) {
          // dwi[A, J*D] = u[:, i, :]^T x go[:, i, :, :]
          gemm(true, false, a, jd, b, 1.0, uc.ptr() + static_cast<long>(i) * a, ni * a,
               go + static_cast<long>(i) * jd, ni * jd, 0.0, dwi.data(), jd);
          double* gw = wc.grad().data();
          for (int jj = 0; jj < j; ++jj) {
            for (int aa = 0; aa < a; ++aa) {
              double* dst = gw + ((static_cast<long>(i) * j + jj) * a + aa) * d;
              const double* src = dwi.data() + static_cast<long>(aa) * jd + jj * d;
              for (int k = 0; k < d; ++k) dst[k] += src[k];
            }
          }
        }
      }
    });
  }
  return res;
}

Tensor coupling_weighted_sum(const Tensor& u_hat, const Tensor& c) {
  check_defined("coupling_weighted_sum", {&u_hat, &c});
  if (u_hat.rank() != 4 || c.rank() != 3 || u_hat.dim(0) != c.dim(0) ||
      u_hat.dim(1) != c.dim(1) || u_hat.dim(2) != c.dim(2)) {
    throw ShapeError(strfmt("coupling_weighted_sum: shape mismatch %s vs %s",
                            shape_str(u_hat.shape()).c_str(), shape_str(c.shape()).c_str()));
  }
  const int b = u_hat.dim(0), ni = u_hat.dim(1), j = u_hat.dim(2), d = u_hat.dim(3);
  Tensor res = Tensor::zeros({b, j, d});
  const double* pu = u_hat.ptr();
  const double* pc = c.ptr();
  double* ps = res.ptr();
  for (int bi = 0; bi < b; ++bi) {
    for (int i = 0; i < ni; ++i) {
      const double* urow = pu + ((static_cast<long>(bi) * ni + i) * j) * d;
      const double* crow = pc + (static_cast<long>(bi) * ni + i) * j;
      double* srow = ps + static_cast<long>(bi) * j * d;
      for (int jj = 0; jj < j; ++jj) {
        const double cv = crow[jj];
        for (int k = 0; k < d; ++k) srow[jj * d + k] += cv * urow[jj * d + k];
      }
    }
  }
  if (grad_wanted({&u_hat, &c})) {
    res.set_requires_grad(true);
    Tensor uc = u_hat, cc = c, oc = res;
    Graph::record([uc, cc, oc, b, ni, j, d]() mutable {
      const double* go = oc.grad().data();
      const double* pu = uc.ptr();
      const double* pc = cc.ptr();
      for (int bi = 0; bi < b; ++bi) {
        const double* grow = go + static_cast<long>(bi) * j * d;
        for (int i = 0; i < ni; ++i) {
          const long ubase = (static_cast<long>(bi) * ni + i) * j * d;
          const long cbase = (static_cast<long>(bi) * ni + i) * j;
          if (uc.requires_grad()) {
            double* gu = uc.grad().data();
            for (int jj = 0; jj < j; ++jj) {
              const double cv = pc[cbase + jj];
              for (int k = 0; k < d; ++k) gu[ubase + jj * d + k] += cv * grow[jj * d + k];
            }
          }
          if (cc.requires_grad()) {
            double* gc = cc.grad().data();
            for (int jj = 0; jj < j; ++jj) {
              double acc = 0.0;
              for (int k = 0; k < d; ++k) acc += pu[ubase + jj * d + k] * grow[jj * d + k];
              gc[cbase + jj] += acc;
            }
          }
        }
      }
    });
  }
  return res;
}

Tensor agreement(const Tensor& u_hat, const Tensor& v) {
  check_defined("agreement", {&u_hat, &v});
  if (u_hat.rank() != 4 || v.rank() != 3 || u_hat.dim(0) != v.dim(0) ||
      u_hat.dim(2) != v.dim(1) || u_hat.dim(3) != v.dim(2)) {
    throw ShapeError(strfmt("agreement: shape mismatch %s vs %s",
                            shape_str(u_hat.shape()).c_str(), shape_str(v.shape()).c_str()));
  }
  const int b = u_hat.dim(0), ni = u_hat.dim(1), j = u_hat.dim(2), d = u_hat.dim(3);
  Tensor res = Tensor::zeros({b, ni, j});
  const double* pu = u_hat.ptr();
  const double* pv = v.ptr();
  double* pa = res.ptr();
  for (int bi = 0; bi < b; ++bi) {
    const double* vrow = pv + static_cast<long>(bi) * j * d;
    for (int i = 0; i < ni; ++i) {
      const long ubase = (static_cast<long>(bi) * ni + i) * j * d;
      for (int jj = 0; jj < j; ++jj) {
        double acc = 0.0;
        for (int k = 0; k < d; ++k) acc += pu[ubase + jj * d + k] * vrow[jj * d + k];
        pa[(static_cast<long>(bi) * ni + i) * j + jj] = acc;
      }
    }
  }
  if (grad_wanted({&u_hat, &v})) {
    res.set_requires_grad(true);
    Tensor uc = u_hat, vc = v, oc = res;
    Graph::record([uc, vc, oc, b, ni, j, d]() mutable {
      const double* go = oc.grad().data();
      const double* pu = uc.ptr();
      const double* pv = vc.ptr();
      for (int bi = 0; bi < b; ++bi) {
        const double* vrow = pv + static_cast<long>(bi) * j * d;
        for (int i = 0; i < ni; ++i) {
          const long ubase = (static_cast<long>(bi) * ni + i) * j * d;
          const long abase = (static_cast<long>(bi) * ni + i) * j;
          if (uc.requires_grad()) {
            double* gu = uc.grad().data();
            for (int jj = 0; jj < j; ++jj) {
              const double g = go[abase + jj];
              for (int k = 0; k < d; ++k) gu[ubase + jj * d + k] += g * vrow[jj * d + k];
            }
          }
          if (vc.requires_grad()) {
            double* gv = vc.grad().data() + static_cast<long>(bi) * j * d;
            for (int jj = 0; jj < j; ++jj) {
              const double g = go[abase + jj];
              for (int k = 0; k < d; ++k) gv[jj * d + k] += g * pu[ubase + jj * d + k];
            }
          }
        }
      }
    });
  }
  return res;
}

Tensor mask_select(const Tensor& poses, const std::vector<int>& classes) {
  check_defined("mask_select", {&poses});
  if (poses.rank() != 3) {
    throw ShapeError("mask_select: poses must be [b,J,D], got " + shape_str(poses.shape()));
  }
  const int b = poses.dim(0), j = poses.dim(1), d = poses.dim(2);
  if (static_cast<int>(classes.size()) != b) {
    throw ShapeError(strfmt("mask_select: %zu class indices for batch %d", classes.size(), b));
  }
  for (int c : classes) {
    if (c < 0 || c >= j) {
      throw ShapeError(strfmt("mask_select: class index %d out of range [0,%d)", c, j));
    }
  }
  std::vector<double> out(static_cast<size_t>(b) * j * d, 0.0);
  const double* pp = poses.ptr();
  for (int bi = 0; bi < b; ++bi) {
    const long off = (static_cast<long>(bi) * j + classes[static_cast<size_t>(bi)]) * d;
    std::memcpy(out.data() + off, pp + off, static_cast<size_t>(d) * 8);
  }
  Tensor res({b, j * d}, std::move(out));
  if (grad_wanted({&poses})) {
    res.set_requires_grad(true);
    Tensor pc = poses, oc = res;
    auto cls = std::make_shared<std::vector<int>>(classes);
    Graph::record([pc, oc, cls, b, j, d]() mutable {
      const double* go = oc.grad().data();
      double* gp = pc.grad().data();
      for (int bi = 0; bi < b; ++bi) {
        const long off = (static_cast<long>(bi) * j + (*cls)[static_cast<size_t>(bi)]) * d;
        for (int k = 0; k < d; ++k) gp[off + k] += go[off + k];
      }
    });
  }
  return res;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_defined("softmax_cross_entropy", {&logits});
  if (logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy: logits must be [b,J], got " +
                     shape_str(logits.shape()));
  }
  const int b = logits.dim(0), j = logits.dim(1);
  if (static_cast<int>(labels.size()) != b) {
    throw ShapeError(strfmt("softmax_cross_entropy: %zu labels for batch %d",
                            labels.size(), b));
  }
  for (int y : labels) {
    if (y < 0 || y >= j) {
      throw ShapeError(strfmt("softmax_cross_entropy: label %d out of range [0,%d)", y, j));
    }
  }
  std::vector<double> out(static_cast<size_t>(b));
  const double* pz = logits.ptr();
  for (int bi = 0; bi < b; ++bi) {
    const double* row = pz + static_cast<long>(bi) * j;
    double mx = row[0];
    for (int k = 1; k < j; ++k) mx = std::max(mx, row[k]);
    double s = 0.0;
    for (int k = 0; k < j; ++k) s += std::exp(row[k] - mx);
    const double lse = mx + std::log(s);
    out[static_cast<size_t>(bi)] = lse - row[labels[static_cast<size_t>(bi)]];
  }
  Tensor res({b}, std::move(out));
  if (grad_wanted({&logits})) {
    res.set_requires_grad(true);
    Tensor zc = logits, oc = res;
    auto lab = std::make_shared<std::vector<int>>(labels);
    Graph::record([zc, oc, lab, b, j]() mutable {
      const double* go = oc.grad().data();
      const double* pz = zc.ptr();
      double* gz = zc.grad().data();
      for (int bi = 0; bi < b; ++bi) {
        const double* row = pz + static_cast<long>(bi) * j;
        double* grow = gz + static_cast<long>(bi) * j;
        double mx = row[0];
        for (int k = 1; k < j; ++k) mx = std::max(mx, row[k]);
        double s = 0.0;
        for (int k = 0; k < j; ++k) s += std::exp(row[k] - mx);
        const double g = go[bi];
        for (int k = 0; k < j; ++k) {
          const double p = std::exp(row[k] - mx) / s;
          grow[k] += g * (p - (k == (*lab)[static_cast<size_t>(bi)] ? 1.0 : 0.0));
        }
      }
    });
  }
  return res;
}

}  // namespace darccc
