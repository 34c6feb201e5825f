#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dwmlab/kernels.hpp"
#include "dwmlab/matrix.hpp"
#include "dwmlab/rng.hpp"

namespace dwmlab {

enum class Activation { identity, relu, tanh, mish };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Layer sizes (input first, output last) plus activation tags.
struct MlpArch {
  std::vector<std::size_t> sizes;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;

  std::size_t input_dim() const { return sizes.front(); }
  std::size_t output_dim() const { return sizes.back(); }
  std::size_t layer_count() const { return sizes.size() - 1; }
  std::size_t param_count() const;

  bool operator==(const MlpArch&) const = default;
};

/// Activations recorded by a forward pass, consumed by backward.
struct MlpTape {
  std::vector<Matrix> inputs;  // inputs[l] is the input to layer l
  std::vector<Matrix> pre;     // pre-activation output of layer l
};

/// Multi-layer perceptron over an externally owned flat parameter vector.
///
/// Layout per layer: weights stored input-major (in x out), then biases.
/// The object itself is stateless apart from its architecture, so one
/// instance can serve live, target and EMA copies of the same network.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(MlpArch arch);

  const MlpArch& arch() const { return arch_; }
  std::size_t param_count() const { return param_count_; }
  std::size_t input_dim() const { return arch_.input_dim(); }
  std::size_t output_dim() const { return arch_.output_dim(); }

  void set_exec(kernels::Exec e) { exec_ = e; }
  kernels::Exec exec() const { return exec_; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void init_params(std::span<double> params, Rng& rng) const;
  std::vector<double> make_params(Rng& rng) const;

  Matrix forward(std::span<const double> params, const Matrix& x, MlpTape* tape = nullptr) const;

  /// Accumulates dLoss/dparams into grad. When dx is non-null it receives dLoss/dx.
  void backward(std::span<const double> params, const MlpTape& tape, const Matrix& dy,
                std::span<double> grad, Matrix* dx = nullptr) const;

 private:
  MlpArch arch_;
  std::size_t param_count_ = 0;
  std::vector<std::size_t> offsets_;
  kernels::Exec exec_ = kernels::Exec::parallel;
};

/// Architecture plus the parameters it owns.
struct Network {
  Mlp mlp;
  std::vector<double> params;

  Network() = default;
  Network(const MlpArch& arch, Rng& rng) : mlp(arch), params(mlp.make_params(rng)) {}

  Matrix forward(const Matrix& x, MlpTape* tape = nullptr) const { return mlp.forward(params, x, tape); }
};

double apply_activation(Activation a, double x);
/// Derivative expressed in terms of the pre-activation value.
double activation_derivative(Activation a, double pre);

}  // namespace dwmlab
