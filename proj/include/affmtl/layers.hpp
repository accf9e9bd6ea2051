#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "affmtl/rng.hpp"
#include "affmtl/tasks.hpp"
#include "affmtl/tensor.hpp"

namespace affmtl {

struct ForwardMode {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
};

struct LinearLayer {
  Tensor weight;  // [d_in, d_out]
  Tensor bias;    // [d_out]

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  Tensor forward(const Tensor& x) const;
};

enum class Activation { LeakyRelu, Identity };

// Per-frame embedding network: input_dim -> hidden -> d with a leaky ReLU
// between the two layers. Stands in for a pretrained image backbone.
struct Encoder {
  LinearLayer hidden;
  LinearLayer output;
  double slope = 0.01;

  std::size_t input_dim() const { return hidden.in_dim(); }
  std::size_t feature_dim() const { return output.out_dim(); }
  Tensor forward(const Tensor& frames) const;
};

// F_m = F_f(F_other + F_current), F_f = linear -> activation -> dropout -> linear.
// The frozen operand never receives a gradient.
struct FusionModule {
  LinearLayer first;
  LinearLayer second;
  Activation activation = Activation::LeakyRelu;
  double slope = 0.01;
  double dropout = 0.1;

  Tensor forward(const Tensor& f_other, const Tensor& f_current, ForwardMode& mode) const;
};

// Gated recurrent layer, gates packed [input | forget | candidate | output]:
//   z_t = x_t W + h_{t-1} U + b
//   c_t = sigmoid(f) * c_{t-1} + sigmoid(i) * tanh(g)
//   h_t = sigmoid(o) * tanh(c_t)
struct LstmLayer {
  LinearLayer input;  // [d_in, 4h] with bias
  Tensor recurrent;   // [h, 4h]

  std::size_t hidden_dim() const { return recurrent.dim(0); }
  // One step for a batch of rows; returns (h_t, c_t).
  std::pair<Tensor, Tensor> step(const Tensor& x, const Tensor& h, const Tensor& c) const;
};

// Two stacked unidirectional recurrent layers followed by a leaky ReLU.
// Hidden and cell state start at zero for every sequence.
struct TemporalConvergenceModule {
  LstmLayer first;
  LstmLayer second;
  double slope = 0.01;

  // x: [b, s, d] -> [b, s, d]
  Tensor forward(const Tensor& x) const;
};

struct TaskHeads {
  LinearLayer au;    // d -> 12, sigmoid
  LinearLayer expr;  // d -> 8, softmax
  LinearLayer va;    // d -> 2, tanh

  Tensor au_forward(const Tensor& x) const;
  Tensor expr_forward(const Tensor& x) const;
  Tensor va_forward(const Tensor& x) const;
};

enum class HeadKind { AU, EXPR, VA };
Tensor head_forward(const TaskHeads& heads, const Tensor& x, HeadKind head);

Tensor encode(const Encoder& enc, const Tensor& frames);
Tensor fuse(const FusionModule& fm, const Tensor& f_other, const Tensor& f_current,
            ForwardMode& mode);
Tensor temporal_forward(const TemporalConvergenceModule& tcm, const Tensor& x);

struct ArchSpec {
  std::size_t input_dim = 32;
  std::size_t feature_dim = 16;
  std::size_t encoder_hidden = 32;
  double leaky_slope = 0.01;
  bool fusion = false;
  bool fusion_passthrough = false;  // identity fusion, frozen, no dropout
  double dropout = 0.1;
  bool temporal = false;
  // Heads that read the temporal module's output; the rest read fused features.
  TaskSet temporal_heads{Task::EXPR, Task::V, Task::A};

  bool operator==(const ArchSpec&) const = default;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

struct Predictions {
  std::optional<Tensor> au;    // [rows, 12]
  std::optional<Tensor> expr;  // [rows, 8]
  std::optional<Tensor> va;    // [rows, 2]
};

class Model {
 public:
  // Weights uniform in +-sqrt(6/(d_in+d_out)), biases zero, recurrent forget
  // gate bias one. Each parameter draws from its own stream derived from
  // (seed, parameter name), so adding optional blocks leaves the others
  // unchanged.
  static Model init(const ArchSpec& spec, std::uint64_t seed);

  const ArchSpec& spec() const { return spec_; }

  // Stable order: encoder, fusion, temporal, heads.
  std::vector<NamedParam> parameters() const;

  Tensor features(const Tensor& frames) const { return encode(encoder, frames); }

  // frames: [b*s, input_dim]; f_other: [b*s, d] or nullptr (treated as zeros).
  Predictions forward(const Tensor& frames, const Tensor* f_other, std::size_t b, std::size_t s,
                      TaskSet tasks, ForwardMode& mode) const;

  Model clone() const;
  // Copies every parameter whose name and shape match in `other`.
  std::size_t copy_matching(const Model& other);

  Encoder encoder;
  std::optional<FusionModule> fusion;
  std::optional<TemporalConvergenceModule> temporal;
  TaskHeads heads;

 private:
  ArchSpec spec_;
};

}  // namespace affmtl
