#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace affmtl {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t tape_serial = 0;  // 0: never traced
  std::size_t tape_index = 0;
};

// Returns the gradient buffer, allocating zeros on first use.
std::vector<double>& grad_of(TensorData& t);

}  // namespace detail

// Position of a tensor on a tape.
struct TapeRef {
  std::uint64_t tape_serial;
  std::size_t index;
  bool operator==(const TapeRef&) const = default;
};

// Dense row-major double tensor. Copies are shallow handles onto the same
// storage (parameters are shared between a model and its optimizer this way);
// use clone() for a deep copy.
class Tensor {
 public:
  Tensor();  // scalar 0

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return data_->shape.at(axis); }
  std::size_t numel() const { return data_->value.size(); }

  std::span<const double> values() const { return data_->value; }
  // Untraced in-place access, for optimizers and initialisation.
  std::span<double> mutable_values() { return data_->value; }
  double item() const;
  double operator[](std::size_t i) const { return data_->value[i]; }

  bool requires_grad() const { return data_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !data_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return data_->grad; }
  void zero_grad();

  std::optional<TapeRef> tape_id() const;

  Tensor clone() const;   // deep copy, keeps requires_grad
  Tensor detach() const;  // deep copy of values only

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }
  const std::shared_ptr<detail::TensorData>& data() const { return data_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> data) : data_(std::move(data)) {}
  friend class Tape;

  std::shared_ptr<detail::TensorData> data_;
};

// Append-only record of traced operations for one worker thread. Operations
// record onto the tape activated by the innermost Tape::Scope on the calling
// thread; with no active tape nothing is recorded (evaluation mode).
class Tape {
 public:
  using BackwardFn = std::function<void(detail::TensorData& out)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t serial() const { return serial_; }

  // Reverse sweep from `loss` (which must be a traced scalar); consumes the tape.
  void backward(const Tensor& loss);
  void reset();

  // Builds an op result. Recorded when this tape is active and any input
  // requires a gradient; otherwise the closure is dropped.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::initializer_list<const Tensor*> inputs, BackwardFn fn);
  static Tensor make_result(Shape shape, std::vector<double> values,
                            const std::vector<Tensor>& inputs, BackwardFn fn);

 private:
  struct Node {
    std::shared_ptr<detail::TensorData> out;
    BackwardFn fn;  // empty for leaves
  };

  void register_leaf(const std::shared_ptr<detail::TensorData>& t);
  Tensor record(Shape shape, std::vector<double> values, BackwardFn fn);

  std::vector<Node> nodes_;
  std::uint64_t serial_;
};

// Suspends tracing on this thread for the lifetime of the guard.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape* previous_;
};

// Backward through the thread's active tape.
void backward(const Tensor& loss);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

// x[m,n] (+|*) row[n], broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor mul_row(const Tensor& x, const Tensor& row);

// Fills `shape` with the single value of scalar tensor `s`.
Tensor broadcast(const Tensor& s, Shape shape);

enum class UnaryKind { Sigmoid, Tanh, LeakyRelu, Log, Exp };

struct Unary {
  UnaryKind kind;
  double alpha = 0.01;  // leaky_relu slope
};

Tensor unary(const Tensor& x, Unary op);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double alpha = 0.01);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);

// Gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

enum class ReduceKind { Sum, Mean, VariancePopulation };

Tensor reduce(const Tensor& x, ReduceKind kind, std::optional<std::size_t> axis = std::nullopt);
Tensor sum(const Tensor& x, std::optional<std::size_t> axis = std::nullopt);
Tensor mean(const Tensor& x, std::optional<std::size_t> axis = std::nullopt);
Tensor variance_population(const Tensor& x, std::optional<std::size_t> axis = std::nullopt);

Tensor softmax(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
// Columns [begin, end) of a rank-2 tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
// Column j of x[m,n] as a rank-1 tensor of length m.
Tensor column(const Tensor& x, std::size_t j);
// Rows of the leading axis, in the given order (repeats allowed).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(const std::vector<Tensor>& parts);

// Inverted dropout: mask drawn from `rng`, kept values scaled by 1/(1-p).
// Identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// ---- gradient checking ----------------------------------------------------

// Worst relative error between backward() gradients and central differences,
// with denominator max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5);

// Same check over every element of `params`, perturbed in place and restored.
double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                         double eps = 1e-5);

}  // namespace affmtl
