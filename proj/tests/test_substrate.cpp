#include <doctest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/errors.hpp"
#include "dwmlab/kernels.hpp"
#include "dwmlab/mlp.hpp"
#include "dwmlab/optim.hpp"
#include "testing.hpp"

using namespace dwmlab;
using dwmlab::testing::grad_check;
using dwmlab::testing::random_vector;

TEST_CASE("serial and OpenMP dense kernels agree bit for bit") {
  Rng rng(7);
  const int saved = kernels::max_threads();
  kernels::set_max_threads(4);
  for (auto [batch, in, out] : {std::tuple{1, 1, 1}, {3, 5, 7}, {64, 37, 129}, {257, 64, 16}, {9, 300, 2}}) {
    const auto x = random_vector(batch * in, rng);
    const auto wt = random_vector(in * out, rng);
    const auto bias = random_vector(out, rng);
    const auto dy = random_vector(batch * out, rng);

    std::vector<double> y1(batch * out), y2(batch * out);
    kernels::dense_forward_serial(x.data(), wt.data(), bias.data(), y1.data(), batch, in, out);
    kernels::dense_forward_omp(x.data(), wt.data(), bias.data(), y2.data(), batch, in, out);
    CHECK(y1 == y2);

    std::vector<double> dx1(batch * in), dx2(batch * in);
    kernels::dense_backward_input_serial(dy.data(), wt.data(), dx1.data(), batch, in, out);
    kernels::dense_backward_input_omp(dy.data(), wt.data(), dx2.data(), batch, in, out);
    CHECK(dx1 == dx2);

    std::vector<double> dw1(in * out, 0.5), dw2(in * out, 0.5), db1(out, 0.25), db2(out, 0.25);
    kernels::dense_backward_params_serial(x.data(), dy.data(), dw1.data(), db1.data(), batch, in, out);
    kernels::dense_backward_params_omp(x.data(), dy.data(), dw2.data(), db2.data(), batch, in, out);
    CHECK(dw1 == dw2);
    CHECK(db1 == db2);

    // naive oracle for the forward pass
    double worst = 0.0;
    for (int b = 0; b < batch; ++b)
      for (int o = 0; o < out; ++o) {
        double s = bias[o];
        for (int i = 0; i < in; ++i) s += x[b * in + i] * wt[i * out + o];
        worst = std::max(worst, std::abs(s - y1[b * out + o]));
      }
    CHECK(worst < 1e-12);
  }
  kernels::set_max_threads(saved);
}

TEST_CASE("mlp parameter count follows the architecture") {
  MlpArch arch{{5, 7, 3, 2}, Activation::mish, Activation::tanh};
  CHECK(arch.param_count() == 5 * 7 + 7 + 7 * 3 + 3 + 3 * 2 + 2);
  Mlp net(arch);
  Rng rng(1);
  CHECK(net.make_params(rng).size() == net.param_count());
}

TEST_CASE("mlp forward is deterministic and exec-independent") {
  Rng rng(3);
  MlpArch arch{{6, 32, 32, 4}, Activation::mish, Activation::identity};
  Mlp serial(arch), parallel(arch);
  serial.set_exec(kernels::Exec::serial);
  parallel.set_exec(kernels::Exec::parallel);
  const auto params = serial.make_params(rng);
  Matrix x(50, 6);
  x.data = random_vector(x.data.size(), rng);
  MlpTape t1, t2;
  const Matrix y1 = serial.forward(params, x, &t1);
  const Matrix y2 = parallel.forward(params, x, &t2);
  CHECK(y1 == y2);
  CHECK(serial.forward(params, x) == y1);

  Matrix dy(50, 4);
  dy.data = random_vector(dy.data.size(), rng);
  std::vector<double> g1(params.size()), g2(params.size());
  Matrix dx1, dx2;
  serial.backward(params, t1, dy, g1, &dx1);
  parallel.backward(params, t2, dy, g2, &dx2);
  CHECK(g1 == g2);
  CHECK(dx1 == dx2);
}

TEST_CASE("mlp gradients match central differences") {
  for (Activation hidden : {Activation::relu, Activation::tanh, Activation::mish}) {
    for (Activation output : {Activation::identity, Activation::tanh}) {
      CAPTURE(to_string(hidden));
      CAPTURE(to_string(output));
      Rng rng(11);
      Mlp net(MlpArch{{4, 16, 16, 3}, hidden, output});
      for (int point = 0; point < 10; ++point) {
        const auto params = net.make_params(rng);
        Matrix x(8, 4), target(8, 3);
        x.data = random_vector(x.data.size(), rng);
        target.data = random_vector(target.data.size(), rng);
        auto loss = [&](std::span<const double> p, const Matrix& in) {
          const Matrix y = net.forward(p, in);
          double s = 0.0;
          for (std::size_t i = 0; i < y.data.size(); ++i) s += 0.5 * (y.data[i] - target.data[i]) * (y.data[i] - target.data[i]);
          return s;
        };
        MlpTape tape;
        const Matrix y = net.forward(params, x, &tape);
        Matrix dy(8, 3);
        for (std::size_t i = 0; i < y.data.size(); ++i) dy.data[i] = y.data[i] - target.data[i];
        std::vector<double> grad(params.size());
        Matrix dx;
        net.backward(params, tape, dy, grad, &dx);
        const double h = hidden == Activation::relu ? 1e-5 : 1e-3;
        CHECK(grad_check([&](std::span<const double> p) { return loss(p, x); }, params, grad, 60, rng, h) < 1e-4);
        CHECK(grad_check(
                  [&](std::span<const double> xv) {
                    Matrix in = x;
                    in.data.assign(xv.begin(), xv.end());
                    return loss(params, in);
                  },
                  x.data, dx.data, 32, rng, h) < 1e-4);
      }
    }
  }
}

TEST_CASE("activation derivatives match central differences") {
  for (Activation a : {Activation::identity, Activation::relu, Activation::tanh, Activation::mish}) {
    for (double x : {-3.0, -0.7, -0.1, 0.2, 1.3, 4.0}) {
      const double h = 1e-6;
      const double fd = (apply_activation(a, x + h) - apply_activation(a, x - h)) / (2 * h);
      CHECK(testing::rel_err(activation_derivative(a, x), fd) < 1e-6);
    }
  }
  CHECK(apply_activation(Activation::mish, 0.0) == 0.0);
  CHECK(apply_activation(Activation::mish, 1.0) == doctest::Approx(std::tanh(std::log1p(std::exp(1.0)))));
}

TEST_CASE("adam with zero gradient leaves params unchanged and decays moments") {
  std::vector<double> p = {1.0, -2.0};
  AdamState adam(2, {0.1, 0.9, 0.999, 1e-8});
  adam.step(p, std::vector<double>{1.0, 1.0});
  const auto m = adam.first_moment();
  std::vector<double> q = p;
  adam.step(q, std::vector<double>{0.0, 0.0});
  CHECK(adam.first_moment()[0] == doctest::Approx(0.9 * m[0]));
  // the bias-corrected first moment is still nonzero, so params move; check a fresh state instead
  AdamState fresh(2, {0.1, 0.9, 0.999, 1e-8});
  std::vector<double> r = {1.0, -2.0};
  fresh.step(r, std::vector<double>{0.0, 0.0});
  CHECK(r == std::vector<double>{1.0, -2.0});
  CHECK(fresh.first_moment() == std::vector<double>{0.0, 0.0});
  CHECK(fresh.steps() == 1);
}

TEST_CASE("adam first step moves each coordinate by about lr against the gradient sign") {
  std::vector<double> p = {0.5, 0.5, 0.5};
  AdamState adam(3, {0.01, 0.9, 0.999, 1e-8});
  adam.step(p, std::vector<double>{3.0, -0.2, 1e-3});
  CHECK(p[0] == doctest::Approx(0.49).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.51).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.49).epsilon(1e-4));
}

TEST_CASE("adam on p^2 matches a scalar oracle") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double p = 1.0, m = 0.0, v = 0.0;
  std::vector<double> param = {1.0};
  AdamState adam(1, {lr, b1, b2, eps});
  double prev = p;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2 * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t)), vhat = v / (1 - std::pow(b2, t));
    p -= lr * mhat / (std::sqrt(vhat) + eps);
    adam.step(param, std::vector<double>{2 * param[0]});
    CHECK(std::abs(param[0] - p) < 1e-14);
    CHECK(param[0] < prev);
    prev = param[0];
  }
  CHECK(adam.steps() == 3);
}

TEST_CASE("adam rejects mismatched lengths") {
  AdamState adam(3, {});
  std::vector<double> p(3);
  CHECK_THROWS_AS(adam.step(p, std::vector<double>(2)), std::invalid_argument);
}

TEST_CASE("ema mixing rules") {
  const std::vector<double> live = {1.0, -1.0};
  EmaTracker still(std::vector<double>{0.0, 0.0}, 0.0);
  still.update(live);
  CHECK(still.shadow() == std::vector<double>{0.0, 0.0});

  EmaTracker copy(std::vector<double>{0.0, 0.0}, 1.0);
  copy.update(live);
  CHECK(copy.shadow() == live);

  EmaTracker two(std::vector<double>{0.0}, 0.005);
  two.update(std::vector<double>{1.0});
  two.update(std::vector<double>{1.0});
  CHECK(std::abs(two.shadow()[0] - 0.009975) < 1e-15);

  CHECK_THROWS(EmaTracker(std::vector<double>{0.0}, 1.5));
  std::vector<double> t = {0.0};
  CHECK_THROWS(ema_mix(t, std::vector<double>{1.0}, -0.1));
}

TEST_CASE("ema matches the decay form on random instances") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const double w = rng.uniform();
    auto shadow = random_vector(16, rng);
    const auto live = random_vector(16, rng);
    auto mixed = shadow;
    ema_mix(mixed, live, w);
    EmaTracker tracker(shadow, w);
    tracker.update(live);
    for (std::size_t j = 0; j < 16; ++j) {
      const double oracle = (1 - w) * shadow[j] + w * live[j];
      CHECK(std::abs(mixed[j] - oracle) < 1e-10);
      CHECK(tracker.shadow()[j] == mixed[j]);
    }
  }
}

TEST_CASE("identical seeds give identical parameters after training") {
  auto train = [](std::uint64_t seed) {
    Rng rng(seed);
    Network net(MlpArch{{3, 16, 1}, Activation::mish, Activation::identity}, rng);
    AdamState adam(net.params.size(), {1e-2});
    for (int it = 0; it < 20; ++it) {
      Matrix x(8, 3);
      x.data = random_vector(24, rng);
      MlpTape tape;
      const Matrix y = net.forward(x, &tape);
      Matrix dy = y;
      for (std::size_t b = 0; b < 8; ++b) dy(b, 0) = y(b, 0) - x(b, 0) * x(b, 1);
      std::vector<double> g(net.params.size());
      net.mlp.backward(net.params, tape, dy, g);
      adam.step(net.params, g);
    }
    return net.params;
  };
  CHECK(train(4) == train(4));
  CHECK(train(4) != train(5));
}

namespace {

std::string slurp(const std::filesystem::path& p) { return io::read_file(p); }

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

FormatError::Kind load_kind(const std::filesystem::path& p) {
  try {
    load_checkpoint(p);
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("expected a FormatError");
  return FormatError::Kind::bad_magic;
}

}  // namespace

TEST_CASE("checkpoint round trip and fault injection") {
  const auto dir = testing::scratch_dir("ckpt");
  Rng rng(9);
  Checkpoint ck;
  ck.header["seed"] = 42;
  ck.header["arch"] = arch_to_json(MlpArch{{2, 4, 1}, Activation::relu, Activation::tanh});
  ck.add("a", random_vector(10, rng));
  ck.add("b", {std::nan(""), -0.0, 1e300});
  const auto path = dir / "x.ckpt";
  save_checkpoint(path, ck);

  const Checkpoint back = load_checkpoint(path);
  CHECK(back.block("a") == ck.block("a"));
  CHECK(std::isnan(back.block("b")[0]));
  CHECK(std::signbit(back.block("b")[1]));
  CHECK(back.header.at("seed") == 42);
  CHECK(arch_from_json(back.header.at("arch")) == MlpArch{{2, 4, 1}, Activation::relu, Activation::tanh});
  CHECK_THROWS_AS(back.block("missing"), FormatError);

  const std::string bytes = slurp(path);
  spit(dir / "magic.ckpt", "XXXXXXXX" + bytes.substr(8));
  CHECK(load_kind(dir / "magic.ckpt") == FormatError::Kind::bad_magic);
  spit(dir / "short.ckpt", bytes.substr(0, bytes.size() - 8));
  CHECK(load_kind(dir / "short.ckpt") == FormatError::Kind::truncated);
  spit(dir / "long.ckpt", bytes + std::string(8, '\0'));
  CHECK(load_kind(dir / "long.ckpt") == FormatError::Kind::count_mismatch);

  const auto header_len = io::read_u64(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  auto header = nlohmann::json::parse(bytes.substr(16, header_len));
  header["version"] = 99;
  const std::string text = header.dump();
  std::string rewritten = bytes.substr(0, 8);
  io::write_u64(rewritten, text.size());
  rewritten += text + bytes.substr(16 + header_len);
  spit(dir / "version.ckpt", rewritten);
  CHECK(load_kind(dir / "version.ckpt") == FormatError::Kind::version_mismatch);

  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), MissingArtifactError);
}
