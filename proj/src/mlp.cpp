#include "dwmlab/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace dwmlab {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::mish: return "mish";
  }
  return "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "mish") return Activation::mish;
  throw std::invalid_argument("unknown activation: " + name);
}

namespace {

// tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2).
inline double tanh_softplus(double x) {
  if (x > 20.0) return 1.0;
  const double e = std::exp(x);
  const double n = e * (e + 2.0);
  return n / (n + 2.0);
}

}  // namespace

double apply_activation(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::tanh: return std::tanh(x);
    case Activation::mish: return x * tanh_softplus(x);
  }
  return x;
}

double activation_derivative(Activation a, double pre) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(pre);
      return 1.0 - t * t;
    }
    case Activation::mish: {
      if (pre > 20.0) return 1.0;
      const double e = std::exp(pre);
      const double n = e * (e + 2.0);
      const double t = n / (n + 2.0);
      return t + pre * (1.0 - t * t) * (e / (1.0 + e));
    }
  }
  return 1.0;
}

std::size_t MlpArch::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += sizes[l] * sizes[l + 1] + sizes[l + 1];
  return n;
}

Mlp::Mlp(MlpArch arch) : arch_(std::move(arch)) {
  if (arch_.sizes.size() < 2) throw std::invalid_argument("MlpArch needs at least input and output sizes");
  for (std::size_t s : arch_.sizes)
    if (s == 0) throw std::invalid_argument("MlpArch layer size must be positive");
  std::size_t off = 0;
  for (std::size_t l = 0; l < arch_.layer_count(); ++l) {
    offsets_.push_back(off);
    off += arch_.sizes[l] * arch_.sizes[l + 1] + arch_.sizes[l + 1];
  }
  param_count_ = off;
}

void Mlp::init_params(std::span<double> params, Rng& rng) const {
  if (params.size() != param_count_) throw std::invalid_argument("Mlp::init_params: size mismatch");
  for (std::size_t l = 0; l < arch_.layer_count(); ++l) {
    const std::size_t in = arch_.sizes[l], out = arch_.sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    double* p = params.data() + offsets_[l];
    for (std::size_t j = 0; j < in * out + out; ++j) p[j] = rng.uniform(-bound, bound);
  }
}

std::vector<double> Mlp::make_params(Rng& rng) const {
  std::vector<double> p(param_count_);
  init_params(p, rng);
  return p;
}

Matrix Mlp::forward(std::span<const double> params, const Matrix& x, MlpTape* tape) const {
  if (params.size() != param_count_) throw std::invalid_argument("Mlp::forward: parameter size mismatch");
  if (x.cols != input_dim()) throw std::invalid_argument("Mlp::forward: input dim mismatch");
  if (tape) {
    tape->inputs.assign(arch_.layer_count(), Matrix{});
    tape->pre.assign(arch_.layer_count(), Matrix{});
  }
  Matrix cur = x;
  for (std::size_t l = 0; l < arch_.layer_count(); ++l) {
    const std::size_t in = arch_.sizes[l], out = arch_.sizes[l + 1];
    const double* wt = params.data() + offsets_[l];
    const double* bias = wt + in * out;
    Matrix y(cur.rows, out);
    kernels::dense_forward(exec_, cur.data.data(), wt, bias, y.data.data(), cur.rows, in, out);
    const Activation act = (l + 1 == arch_.layer_count()) ? arch_.output : arch_.hidden;
    if (tape) {
      tape->inputs[l] = std::move(cur);
      tape->pre[l] = y;
    }
    if (act != Activation::identity)
      for (double& v : y.data) v = apply_activation(act, v);
    cur = std::move(y);
  }
  return cur;
}

void Mlp::backward(std::span<const double> params, const MlpTape& tape, const Matrix& dy,
                   std::span<double> grad, Matrix* dx) const {
  if (grad.size() != param_count_) throw std::invalid_argument("Mlp::backward: gradient size mismatch");
  if (tape.pre.size() != arch_.layer_count()) throw std::invalid_argument("Mlp::backward: empty tape");
  Matrix delta = dy;
  for (std::size_t l = arch_.layer_count(); l-- > 0;) {
    const std::size_t in = arch_.sizes[l], out = arch_.sizes[l + 1];
    const Activation act = (l + 1 == arch_.layer_count()) ? arch_.output : arch_.hidden;
    const Matrix& pre = tape.pre[l];
    if (act != Activation::identity)
      for (std::size_t j = 0; j < delta.data.size(); ++j) delta.data[j] *= activation_derivative(act, pre.data[j]);
    const double* wt = params.data() + offsets_[l];
    double* gw = grad.data() + offsets_[l];
    const Matrix& input = tape.inputs[l];
    kernels::dense_backward_params(exec_, input.data.data(), delta.data.data(), gw, gw + in * out,
                                   delta.rows, in, out);
    if (l > 0 || dx) {
      Matrix next(delta.rows, in);
      kernels::dense_backward_input(exec_, delta.data.data(), wt, next.data.data(), delta.rows, in, out);
      delta = std::move(next);
    }
  }
  if (dx) *dx = std::move(delta);
}

}  // namespace dwmlab
