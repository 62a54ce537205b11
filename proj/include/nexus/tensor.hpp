#pragma once
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace nexus {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major f64 tensor. Copying a Tensor copies the handle, not the
// data; ops allocate fresh outputs. Values are written once by the producing
// op; grad is the only field mutated afterwards (training updates go through
// data() between steps, never mid-graph).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return int64_t(impl_->shape.size()); }
  int64_t numel() const { return int64_t(impl_->values.size()); }
  int64_t dim(int64_t i) const { return impl_->shape[size_t(i)]; }

  const double* data() const { return impl_->values.data(); }
  double* data() { return impl_->values.data(); }
  const std::vector<double>& values() const { return impl_->values; }
  std::vector<double>& values() { return impl_->values; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // Allocates zeros on first touch.
  std::vector<double>& grad();
  const std::vector<double>& grad_const() const;
  void zero_grad() { if (impl_) impl_->grad.clear(); }

  bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
  };
  std::shared_ptr<Node> impl_;
};

// Records backward closures in execution order; backward() replays them in
// reverse, which is a valid topological order because ops are recorded as
// they run. One thread per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  static bool recording();

  void record(std::function<void()> backward_fn);
  // root must be scalar (numel == 1). Seeds d(root)/d(root) = 1 and replays.
  void backward(const Tensor& root);
  // A tape that has replayed refuses a second backward until reset.
  void reset();
  size_t size() const { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
  bool replayed_ = false;
};

// ---- primitive ops -------------------------------------------------------
// Broadcasting is restricted to two patterns: rhs a scalar (numel 1), or rhs
// a rank-1 "channel" vector (last dim for rank-2 lhs, dim 0 for rank-3,
// dim 1 for rank-4). Everything else is a shape error naming both shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);  // subgradient at 0 is 0
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank-2 only
Tensor sum(const Tensor& a);        // -> rank-0 scalar
Tensor mean(const Tensor& a);       // -> rank-0 scalar
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);  // rank-2, rows sum to 1
// Batch plumbing: pick sample i of a rank>=1 tensor / rebuild the batch.
Tensor select0(const Tensor& a, int64_t i);
Tensor stack0(const std::vector<Tensor>& parts);
Tensor concat_channels(const Tensor& a, const Tensor& b);  // rank-4, dim 1

// Seeds grad 1 at root and replays the active tape. Convenience wrapper.
void backward(const Tensor& root);

bool all_finite(const Tensor& t);

}  // namespace nexus
