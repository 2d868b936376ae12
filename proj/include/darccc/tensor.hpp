#pragma once

// Dense f64 tensors with reverse-mode autodiff on an explicit tape.
//
// Usage pattern:
//   Graph g;
//   {
//     Graph::Activation act(g);           // ops record while an activation is live
//     Tensor loss = ...;                  // built from leaves made with Tensor::leaf
//     g.backward(loss);                   // seeds d(loss)/d(loss)=1, runs tape in reverse
//   }
//   // leaf.grad() now holds accumulated gradients
//
// Tensors are cheap handles: copying shares the value and gradient buffers.
// Values are treated as immutable once an op has consumed them; optimizers
// mutate leaf buffers only between graphs.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace darccc {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct GraphError : std::runtime_error {
  explicit GraphError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

class Tensor {
 public:
  Tensor() = default;  // undefined tensor (no storage)
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  // Leaf with requires_grad set and a zeroed gradient buffer.
  static Tensor leaf(Shape shape, std::vector<double> values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const;
  long numel() const;

  const std::vector<double>& data() const { return *data_; }
  double* ptr() { return data_->data(); }
  const double* ptr() const { return data_->data(); }
  double item() const;                          // requires numel() == 1
  double at(const std::vector<int>& index) const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b);               // true allocates the grad buffer
  bool has_grad() const { return grad_ != nullptr; }
  std::vector<double>& grad();                  // allocates on first use
  const std::vector<double>& grad() const;      // throws if never allocated
  void zero_grad();

  Tensor clone() const;                         // deep copy of values, no grad
  bool all_finite() const;

 private:
  void ensure_grad();

  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  Shape shape_;
  bool requires_grad_ = false;

  friend class Graph;
};

// Tape of backward closures. One graph records one forward pass; backward()
// consumes it. A second backward() on the same graph throws GraphError.
class Graph {
 public:
  Graph() = default;
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // RAII scope that makes `g` the active (recording) graph on this thread.
  class Activation {
   public:
    explicit Activation(Graph& g);
    ~Activation();
    Activation(const Activation&) = delete;
    Activation& operator=(const Activation&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* active();
  static void record(std::function<void()> backward_fn);

  // loss must be a recorded scalar; runs the tape once in reverse order.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// --- elementwise arithmetic -------------------------------------------------
// Shapes must match exactly, except: (a) either side may be a one-element
// tensor, and (b) `add` accepts a rank-1 bias whose length equals the other
// operand's trailing dimension. Anything else throws ShapeError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // throws NumericError on zero divisor
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// --- linear algebra ---------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]

// x [b,ic,h,w], w [oc,ic,kh,kw], optional bias [oc]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad = 0);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad = 0);

Tensor maxpool2(const Tensor& x);  // 2x2/stride 2; h and w must be even

// --- nonlinearities ---------------------------------------------------------
Tensor relu(const Tensor& x);     // subgradient 0 at x == 0
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);  // max-subtracted; negative axis ok

// --- reductions -------------------------------------------------------------
Tensor sum(const Tensor& x);            // -> scalar
Tensor sum(const Tensor& x, int axis);  // drops the axis ([n] -> [1])
Tensor mean(const Tensor& x);           // -> scalar

// --- pointwise math ---------------------------------------------------------
Tensor square(const Tensor& x);
Tensor sqrt_op(const Tensor& x);              // throws NumericError if x < 0;
                                              // callers offset away from 0
Tensor max_scalar(const Tensor& x, double c); // max(x, c); subgradient 0 at x == c
Tensor clip(const Tensor& x, double lo, double hi);  // grad 1 only strictly inside

// --- shape ops --------------------------------------------------------------
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// --- composites and capsule ops ---------------------------------------------
// sqrt(sum(x^2, axis) + 1e-12)
Tensor l2_norm(const Tensor& x, int axis);

// v [..., D] scaled per-vector by s [...]
Tensor scale_vecs(const Tensor& v, const Tensor& s);

// u [b,I,A], w [I,J,A,D] -> u_hat [b,I,J,D]; u_hat[b,i,j,:] = u[b,i,:] * w[i,j]
Tensor caps_transform(const Tensor& u, const Tensor& w);

// u_hat [b,I,J,D], c [b,I,J] -> s [b,J,D]; s[b,j] = sum_i c[b,i,j] * u_hat[b,i,j]
Tensor coupling_weighted_sum(const Tensor& u_hat, const Tensor& c);

// u_hat [b,I,J,D], v [b,J,D] -> a [b,I,J]; a[b,i,j] = <u_hat[b,i,j], v[b,j]>
Tensor agreement(const Tensor& u_hat, const Tensor& v);

// poses [b,J,D], one class per row -> [b, J*D] with all but the selected
// capsule's block zeroed
Tensor mask_select(const Tensor& poses, const std::vector<int>& classes);

// logits [b,J] -> per-example loss [b]; fused, numerically stable
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace darccc
