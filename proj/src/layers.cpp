#include "affmtl/layers.hpp"

#include <cmath>

#include "affmtl/errors.hpp"

namespace affmtl {

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in_dim())
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  return add_row(matmul(x, weight), bias);
}

Tensor Encoder::forward(const Tensor& frames) const {
  return output.forward(leaky_relu(hidden.forward(frames), slope));
}

Tensor FusionModule::forward(const Tensor& f_other, const Tensor& f_current,
                             ForwardMode& mode) const {
  if (f_other.shape() != f_current.shape())
    throw DimensionError("fuse: frozen features " + to_string(f_other.shape()) +
                         " vs live features " + to_string(f_current.shape()));
  Tensor h = first.forward(add(f_other.detach(), f_current));
  if (activation == Activation::LeakyRelu) h = leaky_relu(h, slope);
  if (mode.training && dropout > 0.0) {
    if (!mode.dropout_rng) throw ContractError("fuse: training with dropout needs an rng");
    h = affmtl::dropout(h, dropout, *mode.dropout_rng, true);
  }
  return second.forward(h);
}

std::pair<Tensor, Tensor> LstmLayer::step(const Tensor& x, const Tensor& h, const Tensor& c) const {
  const std::size_t hd = hidden_dim();
  Tensor z = add(input.forward(x), matmul(h, recurrent));
  Tensor in_gate = sigmoid(slice_cols(z, 0, hd));
  Tensor forget_gate = sigmoid(slice_cols(z, hd, 2 * hd));
  Tensor candidate = tanh(slice_cols(z, 2 * hd, 3 * hd));
  Tensor out_gate = sigmoid(slice_cols(z, 3 * hd, 4 * hd));
  Tensor c_next = add(mul(forget_gate, c), mul(in_gate, candidate));
  Tensor h_next = mul(out_gate, tanh(c_next));
  return {std::move(h_next), std::move(c_next)};
}

Tensor TemporalConvergenceModule::forward(const Tensor& x) const {
  if (x.rank() != 3) throw DimensionError("temporal: expected [b, s, d], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (s == 0 || b == 0) throw DegenerateInputError("temporal: empty sequence");
  if (d != first.input.in_dim())
    throw DimensionError("temporal: feature dim " + std::to_string(d) + " does not match layer");
  const Tensor rows = reshape(x, {b * s, d});

  std::vector<std::size_t> idx(b);
  std::vector<Tensor> inputs;
  inputs.reserve(s);
  for (std::size_t t = 0; t < s; ++t) {
    for (std::size_t i = 0; i < b; ++i) idx[i] = i * s + t;
    inputs.push_back(gather_rows(rows, idx));
  }
  for (const LstmLayer* layer : {&first, &second}) {
    const std::size_t hd = layer->hidden_dim();
    Tensor h = Tensor::zeros({b, hd});
    Tensor c = Tensor::zeros({b, hd});
    for (auto& step_in : inputs) {
      std::tie(h, c) = layer->step(step_in, h, c);
      step_in = h;
    }
  }
  const std::size_t hd = second.hidden_dim();
  // time-major [s*b, hd] back to batch-major rows i*s+t
  Tensor stacked = leaky_relu(concat_rows(inputs), slope);
  std::vector<std::size_t> perm(b * s);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < s; ++t) perm[i * s + t] = t * b + i;
  return reshape(gather_rows(stacked, perm), {b, s, hd});
}

Tensor TaskHeads::au_forward(const Tensor& x) const { return sigmoid(au.forward(x)); }
Tensor TaskHeads::expr_forward(const Tensor& x) const { return softmax(expr.forward(x), 1); }
Tensor TaskHeads::va_forward(const Tensor& x) const { return tanh(va.forward(x)); }

Tensor head_forward(const TaskHeads& heads, const Tensor& x, HeadKind head) {
  switch (head) {
    case HeadKind::AU:
      return heads.au_forward(x);
    case HeadKind::EXPR:
      return heads.expr_forward(x);
    case HeadKind::VA:
      return heads.va_forward(x);
  }
  throw ContractError("head_forward: unknown head");
}

Tensor encode(const Encoder& enc, const Tensor& frames) {
  if (frames.rank() != 2 || frames.dim(1) != enc.input_dim())
    throw DimensionError("encode: frames " + to_string(frames.shape()) + " vs input dim " +
                         std::to_string(enc.input_dim()));
  return enc.forward(frames);
}

Tensor fuse(const FusionModule& fm, const Tensor& f_other, const Tensor& f_current,
            ForwardMode& mode) {
  return fm.forward(f_other, f_current, mode);
}

Tensor temporal_forward(const TemporalConvergenceModule& tcm, const Tensor& x) {
  return tcm.forward(x);
}

// ---- Model ----------------------------------------------------------------------

namespace {

Tensor init_weight(const std::string& name, std::size_t d_in, std::size_t d_out,
                   std::uint64_t seed) {
  Rng rng(derive_seed(seed, name));
  const double bound = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
  std::vector<double> w(d_in * d_out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  Tensor t = Tensor::from({d_in, d_out}, std::move(w));
  t.set_requires_grad(true);
  return t;
}

Tensor zero_bias(std::size_t n, double value = 0.0) {
  Tensor t = Tensor::full({n}, value);
  t.set_requires_grad(true);
  return t;
}

LinearLayer init_linear(const std::string& name, std::size_t d_in, std::size_t d_out,
                        std::uint64_t seed) {
  return {init_weight(name + ".weight", d_in, d_out, seed), zero_bias(d_out)};
}

LinearLayer identity_linear(std::size_t d) {
  std::vector<double> w(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
  return {Tensor::from({d, d}, std::move(w)), Tensor::zeros({d})};
}

LstmLayer init_lstm(const std::string& name, std::size_t d_in, std::size_t hidden,
                    std::uint64_t seed) {
  LstmLayer l;
  l.input = init_linear(name + ".input", d_in, 4 * hidden, seed);
  auto b = l.input.bias.mutable_values();
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;
  l.recurrent = init_weight(name + ".recurrent", hidden, 4 * hidden, seed);
  return l;
}

template <typename ModelT, typename Fn>
void visit_params(ModelT& m, Fn&& fn) {
  auto linear = [&](const std::string& name, auto& l, bool trainable) {
    fn(name + ".weight", l.weight, trainable);
    fn(name + ".bias", l.bias, trainable);
  };
  linear("encoder.hidden", m.encoder.hidden, true);
  linear("encoder.output", m.encoder.output, true);
  if (m.fusion) {
    const bool trainable = !m.spec().fusion_passthrough;
    linear("fusion.first", m.fusion->first, trainable);
    linear("fusion.second", m.fusion->second, trainable);
  }
  if (m.temporal) {
    linear("temporal.first.input", m.temporal->first.input, true);
    fn("temporal.first.recurrent", m.temporal->first.recurrent, true);
    linear("temporal.second.input", m.temporal->second.input, true);
    fn("temporal.second.recurrent", m.temporal->second.recurrent, true);
  }
  linear("heads.au", m.heads.au, true);
  linear("heads.expr", m.heads.expr, true);
  linear("heads.va", m.heads.va, true);
}

}  // namespace

Model Model::init(const ArchSpec& spec, std::uint64_t seed) {
  if (spec.input_dim == 0 || spec.feature_dim == 0 || spec.encoder_hidden == 0)
    throw ConfigError("architecture dimensions must be positive");
  Model m;
  m.spec_ = spec;
  const std::size_t d = spec.feature_dim;
  m.encoder.hidden = init_linear("encoder.hidden", spec.input_dim, spec.encoder_hidden, seed);
  m.encoder.output = init_linear("encoder.output", spec.encoder_hidden, d, seed);
  m.encoder.slope = spec.leaky_slope;
  if (spec.fusion) {
    FusionModule f;
    if (spec.fusion_passthrough) {
      f.first = identity_linear(d);
      f.second = identity_linear(d);
      f.activation = Activation::Identity;
      f.dropout = 0.0;
    } else {
      f.first = init_linear("fusion.first", d, d, seed);
      f.second = init_linear("fusion.second", d, d, seed);
      f.activation = Activation::LeakyRelu;
      f.dropout = spec.dropout;
    }
    f.slope = spec.leaky_slope;
    m.fusion = std::move(f);
  }
  if (spec.temporal) {
    TemporalConvergenceModule t;
    t.first = init_lstm("temporal.first", d, d, seed);
    t.second = init_lstm("temporal.second", d, d, seed);
    t.slope = spec.leaky_slope;
    m.temporal = std::move(t);
  }
  m.heads.au = init_linear("heads.au", d, kNumAus, seed);
  m.heads.expr = init_linear("heads.expr", d, kNumExpr, seed);
  m.heads.va = init_linear("heads.va", d, 2, seed);
  return m;
}

std::vector<NamedParam> Model::parameters() const {
  std::vector<NamedParam> out;
  visit_params(*this, [&](const std::string& name, const Tensor& t, bool trainable) {
    out.push_back({name, t, trainable});
  });
  return out;
}

Model Model::clone() const {
  Model m = *this;
  visit_params(m, [](const std::string&, Tensor& t, bool) { t = t.clone(); });
  return m;
}

std::size_t Model::copy_matching(const Model& other) {
  std::size_t copied = 0;
  const auto theirs = other.parameters();
  visit_params(*this, [&](const std::string& name, Tensor& t, bool trainable) {
    if (!trainable) return;
    for (const auto& p : theirs) {
      if (p.name != name || p.tensor.shape() != t.shape()) continue;
      auto dst = t.mutable_values();
      std::copy(p.tensor.values().begin(), p.tensor.values().end(), dst.begin());
      ++copied;
    }
  });
  return copied;
}

Predictions Model::forward(const Tensor& frames, const Tensor* f_other, std::size_t b,
                           std::size_t s, TaskSet tasks, ForwardMode& mode) const {
  if (b * s != frames.dim(0))
    throw DimensionError("model: " + std::to_string(frames.dim(0)) + " rows is not b*s = " +
                         std::to_string(b) + "*" + std::to_string(s));
  Tensor fused = encode(encoder, frames);
  if (fusion) {
    const Tensor other = f_other ? *f_other : Tensor::zeros(fused.shape());
    fused = fusion->forward(other, fused, mode);
  }

  auto routed = [&](Task t) { return temporal && spec_.temporal_heads.contains(t); };
  const bool va_temporal = routed(Task::V) || routed(Task::A);
  const bool need_temporal = (tasks.contains(Task::AU) && routed(Task::AU)) ||
                             (tasks.contains(Task::EXPR) && routed(Task::EXPR)) ||
                             (tasks.has_va() && va_temporal);
  std::optional<Tensor> seq;
  if (need_temporal) {
    const std::size_t d = fused.dim(1);
    seq = reshape(temporal->forward(reshape(fused, {b, s, d})), {b * s, d});
  }

  Predictions p;
  if (tasks.contains(Task::AU)) p.au = heads.au_forward(routed(Task::AU) ? *seq : fused);
  if (tasks.contains(Task::EXPR)) p.expr = heads.expr_forward(routed(Task::EXPR) ? *seq : fused);
  if (tasks.has_va()) p.va = heads.va_forward(va_temporal ? *seq : fused);
  return p;
}

}  // namespace affmtl
