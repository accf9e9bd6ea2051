#include "affmtl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "affmtl/errors.hpp"
#include "affmtl/kernels.hpp"
#include "affmtl/rng.hpp"

namespace affmtl {

using detail::grad_of;
using detail::TensorData;
using Data = std::shared_ptr<TensorData>;

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_serial{1};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(x.shape()));
}

// outer x extent x inner decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& detail::grad_of(TensorData& t) {
  if (t.grad.empty()) t.grad.assign(t.value.size(), 0.0);
  return t.grad;
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor() : data_(std::make_shared<TensorData>()) { data_->value.assign(1, 0.0); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto d = std::make_shared<TensorData>();
  d->value.assign(affmtl::numel(shape), value);
  d->shape = std::move(shape);
  return Tensor(std::move(d));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (affmtl::numel(shape) != values.size())
    throw DimensionError("Tensor::from: shape " + to_string(shape) + " needs " +
                         std::to_string(affmtl::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(values);
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return data_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  data_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() {
  std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

std::optional<TapeRef> Tensor::tape_id() const {
  if (data_->tape_serial == 0) return std::nullopt;
  return TapeRef{data_->tape_serial, data_->tape_index};
}

Tensor Tensor::clone() const {
  Tensor t = from(shape(), data_->value);
  t.data_->requires_grad = data_->requires_grad;
  return t;
}

Tensor Tensor::detach() const { return from(shape(), data_->value); }

// ---- Tape -------------------------------------------------------------------

Tape::Tape() : serial_(g_next_serial.fetch_add(1)) {}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

NoGrad::NoGrad() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGrad::~NoGrad() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::reset() {
  nodes_.clear();
  serial_ = g_next_serial.fetch_add(1);
}

void Tape::register_leaf(const Data& t) {
  if (t->tape_serial == serial_) return;
  t->tape_serial = serial_;
  t->tape_index = nodes_.size();
  nodes_.push_back(Node{t, {}});
}

Tensor Tape::record(Shape shape, std::vector<double> values, BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  out.data_->requires_grad = true;
  out.data_->tape_serial = serial_;
  out.data_->tape_index = nodes_.size();
  nodes_.push_back(Node{out.data_, std::move(fn)});
  return out;
}

Tensor Tape::make_result(Shape shape, std::vector<double> values,
                         std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  Tape* tape = g_active_tape;
  bool traced = false;
  if (tape)
    for (const Tensor* in : inputs) traced = traced || in->requires_grad();
  if (!traced) return Tensor::from(std::move(shape), std::move(values));
  for (const Tensor* in : inputs)
    if (in->requires_grad()) tape->register_leaf(in->data_);
  return tape->record(std::move(shape), std::move(values), std::move(fn));
}

Tensor Tape::make_result(Shape shape, std::vector<double> values,
                         const std::vector<Tensor>& inputs, BackwardFn fn) {
  Tape* tape = g_active_tape;
  bool traced = false;
  if (tape)
    for (const Tensor& in : inputs) traced = traced || in.requires_grad();
  if (!traced) return Tensor::from(std::move(shape), std::move(values));
  for (const Tensor& in : inputs)
    if (in.requires_grad()) tape->register_leaf(in.data_);
  return tape->record(std::move(shape), std::move(values), std::move(fn));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  const auto& ld = loss.data();
  if (!ld->requires_grad || ld->tape_serial != serial_ || ld->tape_index >= nodes_.size() ||
      nodes_[ld->tape_index].out != ld)
    throw ContractError("backward: loss is not traced on this tape");
  grad_of(*ld)[0] += 1.0;
  for (std::size_t i = ld->tape_index + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.fn && !node.out->grad.empty()) node.fn(*node.out);
  }
  reset();
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  kernels::matmul(a.values(), b.values(), out, m, k, n);
  return Tape::make_result({m, n}, std::move(out), {&a, &b},
                           [ad = a.data(), bd = b.data(), m, k, n](TensorData& o) {
                             if (ad->requires_grad)
                               kernels::matmul_a_bt(o.grad, bd->value, grad_of(*ad), m, n, k);
                             if (bd->requires_grad)
                               kernels::matmul_at_b(ad->value, o.grad, grad_of(*bd), m, k, n);
                           });
}

namespace {

template <typename F>
std::vector<double> zip(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return Tape::make_result(a.shape(), zip(a, b, [](double x, double y) { return x + y; }),
                           {&a, &b}, [ad = a.data(), bd = b.data()](TensorData& o) {
                             for (auto* d : {ad.get(), bd.get()}) {
                               if (!d->requires_grad) continue;
                               auto& g = grad_of(*d);
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             }
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return Tape::make_result(a.shape(), zip(a, b, [](double x, double y) { return x - y; }),
                           {&a, &b}, [ad = a.data(), bd = b.data()](TensorData& o) {
                             if (ad->requires_grad) {
                               auto& g = grad_of(*ad);
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             }
                             if (bd->requires_grad) {
                               auto& g = grad_of(*bd);
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                             }
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return Tape::make_result(a.shape(), zip(a, b, [](double x, double y) { return x * y; }),
                           {&a, &b}, [ad = a.data(), bd = b.data()](TensorData& o) {
                             if (ad->requires_grad) {
                               auto& g = grad_of(*ad);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += o.grad[i] * bd->value[i];
                             }
                             if (bd->requires_grad) {
                               auto& g = grad_of(*bd);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += o.grad[i] * ad->value[i];
                             }
                           });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  return Tape::make_result(a.shape(), zip(a, b, [](double x, double y) { return x / y; }),
                           {&a, &b}, [ad = a.data(), bd = b.data()](TensorData& o) {
                             if (ad->requires_grad) {
                               auto& g = grad_of(*ad);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += o.grad[i] / bd->value[i];
                             }
                             if (bd->requires_grad) {
                               auto& g = grad_of(*bd);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double q = bd->value[i];
                                 g[i] -= o.grad[i] * ad->value[i] / (q * q);
                               }
                             }
                           });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  return Tape::make_result(x.shape(), std::move(out), {&x}, [xd = x.data(), factor](TensorData& o) {
    auto& g = grad_of(*xd);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double offset) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v += offset;
  return Tape::make_result(x.shape(), std::move(out), {&x}, [xd = x.data()](TensorData& o) {
    auto& g = grad_of(*xd);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

namespace {

void require_row_broadcast(const Tensor& x, const Tensor& row, const char* op) {
  require_rank(x, 2, op);
  if (row.numel() != x.dim(1))
    throw DimensionError(std::string(op) + ": row of shape " + to_string(row.shape()) +
                         " does not match " + to_string(x.shape()));
}

}  // namespace

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_row_broadcast(x, row, "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.values().begin(), x.values().end());
  auto r = row.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
  return Tape::make_result(x.shape(), std::move(out), {&x, &row},
                           [xd = x.data(), rd = row.data(), m, n](TensorData& o) {
                             if (xd->requires_grad) {
                               auto& g = grad_of(*xd);
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             }
                             if (rd->requires_grad) {
                               auto& g = grad_of(*rd);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
                             }
                           });
}

Tensor mul_row(const Tensor& x, const Tensor& row) {
  require_row_broadcast(x, row, "mul_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.values().begin(), x.values().end());
  auto r = row.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= r[j];
  return Tape::make_result(x.shape(), std::move(out), {&x, &row},
                           [xd = x.data(), rd = row.data(), m, n](TensorData& o) {
                             if (xd->requires_grad) {
                               auto& g = grad_of(*xd);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] += o.grad[i * n + j] * rd->value[j];
                             }
                             if (rd->requires_grad) {
                               auto& g = grad_of(*rd);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[j] += o.grad[i * n + j] * xd->value[i * n + j];
                             }
                           });
}

Tensor broadcast(const Tensor& s, Shape shape) {
  if (s.numel() != 1) throw DimensionError("broadcast: source must hold one value");
  std::vector<double> out(numel(shape), s.values()[0]);
  return Tape::make_result(std::move(shape), std::move(out), {&s}, [sd = s.data()](TensorData& o) {
    double acc = 0.0;
    for (double g : o.grad) acc += g;
    grad_of(*sd)[0] += acc;
  });
}

Tensor unary(const Tensor& x, Unary op) {
  std::vector<double> out(x.numel());
  auto v = x.values();
  switch (op.kind) {
    case UnaryKind::Sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-v[i]));
      break;
    case UnaryKind::Tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(v[i]);
      break;
    case UnaryKind::LeakyRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : op.alpha * v[i];
      break;
    case UnaryKind::Log:
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(v[i] > 0.0))
          throw DomainError("log: non-positive input " + std::to_string(v[i]) + " at index " +
                            std::to_string(i));
        out[i] = std::log(v[i]);
      }
      break;
    case UnaryKind::Exp:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(v[i]);
      break;
  }
  return Tape::make_result(x.shape(), std::move(out), {&x}, [xd = x.data(), op](TensorData& o) {
    auto& g = grad_of(*xd);
    const auto& y = o.value;
    const auto& xv = xd->value;
    switch (op.kind) {
      case UnaryKind::Sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * y[i] * (1.0 - y[i]);
        break;
      case UnaryKind::Tanh:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (1.0 - y[i] * y[i]);
        break;
      case UnaryKind::LeakyRelu:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (xv[i] > 0.0 ? 1.0 : op.alpha);
        break;
      case UnaryKind::Log:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / xv[i];
        break;
      case UnaryKind::Exp:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * y[i];
        break;
    }
  });
}

Tensor sigmoid(const Tensor& x) { return unary(x, {UnaryKind::Sigmoid}); }
Tensor tanh(const Tensor& x) { return unary(x, {UnaryKind::Tanh}); }
Tensor leaky_relu(const Tensor& x, double alpha) { return unary(x, {UnaryKind::LeakyRelu, alpha}); }
Tensor log(const Tensor& x) { return unary(x, {UnaryKind::Log}); }
Tensor exp(const Tensor& x) { return unary(x, {UnaryKind::Exp}); }

Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = std::clamp(v, lo, hi);
  return Tape::make_result(x.shape(), std::move(out), {&x},
                           [xd = x.data(), lo, hi](TensorData& o) {
                             auto& g = grad_of(*xd);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const double v = xd->value[i];
                               if (v >= lo && v <= hi) g[i] += o.grad[i];
                             }
                           });
}

Tensor reduce(const Tensor& x, ReduceKind kind, std::optional<std::size_t> axis) {
  Shape out_shape;
  AxisSplit s;
  if (axis) {
    if (*axis >= x.rank())
      throw DimensionError("reduce: axis " + std::to_string(*axis) + " out of range for " +
                           to_string(x.shape()));
    s = split_axis(x.shape(), *axis);
    out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(*axis));
  } else {
    s.extent = x.numel();
  }
  if (s.extent == 0) throw DegenerateInputError("reduce: empty reduction extent");

  const auto v = x.values();
  const double n = static_cast<double>(s.extent);
  std::vector<double> out(s.outer * s.inner, 0.0);
  std::vector<double> means;
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double acc = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) acc += v[(o * s.extent + e) * s.inner + i];
      out[o * s.inner + i] = acc;
    }
  if (kind != ReduceKind::Sum)
    for (auto& y : out) y /= n;
  if (kind == ReduceKind::VariancePopulation) {
    means = out;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double mu = means[o * s.inner + i];
        double acc = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) {
          const double d = v[(o * s.extent + e) * s.inner + i] - mu;
          acc += d * d;
        }
        out[o * s.inner + i] = acc / n;
      }
  }
  return Tape::make_result(
      std::move(out_shape), std::move(out), {&x},
      [xd = x.data(), kind, s, n, means = std::move(means)](TensorData& o) {
        auto& g = grad_of(*xd);
        for (std::size_t oo = 0; oo < s.outer; ++oo)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const double dy = o.grad[oo * s.inner + i];
            for (std::size_t e = 0; e < s.extent; ++e) {
              const std::size_t at = (oo * s.extent + e) * s.inner + i;
              switch (kind) {
                case ReduceKind::Sum:
                  g[at] += dy;
                  break;
                case ReduceKind::Mean:
                  g[at] += dy / n;
                  break;
                case ReduceKind::VariancePopulation:
                  g[at] += dy * 2.0 * (xd->value[at] - means[oo * s.inner + i]) / n;
                  break;
              }
            }
          }
      });
}

Tensor sum(const Tensor& x, std::optional<std::size_t> axis) {
  return reduce(x, ReduceKind::Sum, axis);
}
Tensor mean(const Tensor& x, std::optional<std::size_t> axis) {
  return reduce(x, ReduceKind::Mean, axis);
}
Tensor variance_population(const Tensor& x, std::optional<std::size_t> axis) {
  return reduce(x, ReduceKind::VariancePopulation, axis);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         to_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  const auto v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t e) { return (o * s.extent + e) * s.inner + i; };
      double mx = v[at(0)];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, v[at(e)]);
      double z = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        out[at(e)] = std::exp(v[at(e)] - mx);
        z += out[at(e)];
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[at(e)] /= z;
    }
  return Tape::make_result(x.shape(), std::move(out), {&x}, [xd = x.data(), s](TensorData& o) {
    auto& g = grad_of(*xd);
    for (std::size_t oo = 0; oo < s.outer; ++oo)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t e) { return (oo * s.extent + e) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += o.grad[at(e)] * o.value[at(e)];
        for (std::size_t e = 0; e < s.extent; ++e)
          g[at(e)] += o.value[at(e)] * (o.grad[at(e)] - dot);
      }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tape::make_result(std::move(shape), std::move(out), {&x}, [xd = x.data()](TensorData& o) {
    auto& g = grad_of(*xd);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin > end || end > n)
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") out of bounds for " + to_string(x.shape()));
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  auto v = x.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = v[i * n + begin + j];
  return Tape::make_result({m, w}, std::move(out), {&x},
                           [xd = x.data(), m, n, w, begin](TensorData& o) {
                             auto& g = grad_of(*xd);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < w; ++j)
                                 g[i * n + begin + j] += o.grad[i * w + j];
                           });
}

Tensor column(const Tensor& x, std::size_t j) {
  return reshape(slice_cols(x, j, j + 1), {x.dim(0)});
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw DimensionError("gather_rows: scalar input");
  const std::size_t n_rows = x.dim(0);
  const std::size_t width = n_rows ? x.numel() / n_rows : 0;
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<double> out(rows.size() * width);
  auto v = x.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_rows)
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " out of range for " +
                           to_string(x.shape()));
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return Tape::make_result(std::move(shape), std::move(out), {&x},
                           [xd = x.data(), idx = std::move(idx), width](TensorData& o) {
                             auto& g = grad_of(*xd);
                             for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t j = 0; j < width; ++j)
                                 g[idx[r] * width + j] += o.grad[r * width + j];
                           });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DegenerateInputError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != tail.size() + 1 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1))
      throw DimensionError("concat_rows: incompatible part " + to_string(p.shape()));
    rows += p.dim(0);
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;
  std::vector<double> out;
  out.reserve(numel(shape));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Data> datas;
  datas.reserve(parts.size());
  for (const auto& p : parts) datas.push_back(p.data());
  return Tape::make_result(std::move(shape), std::move(out), parts,
                           [datas = std::move(datas)](TensorData& o) {
                             std::size_t offset = 0;
                             for (const auto& d : datas) {
                               const std::size_t n = d->value.size();
                               if (d->requires_grad) {
                                 auto& g = grad_of(*d);
                                 for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[offset + i];
                               }
                               offset += n;
                             }
                           });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw DomainError("dropout: rate must be < 1");
  std::vector<double> mask(x.numel());
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

// ---- gradient checking --------------------------------------------------------

namespace {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps) {
  Tensor xv = x.clone();
  xv.set_requires_grad(true);
  std::vector<Tensor> params{xv};
  return finite_diff_check([&] { return f(xv); }, params, eps);
}

double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f();
    if (y.requires_grad()) tape.backward(y);
  }
  double worst = 0.0;
  NoGrad no_grad;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    analytic.resize(p.numel(), 0.0);
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f().item();
      values[i] = saved - eps;
      const double down = f().item();
      values[i] = saved;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    p.zero_grad();
  }
  return worst;
}

}  // namespace affmtl
