#include <doctest.h>

#include <cmath>

#include "dwmlab/errors.hpp"
#include "dwmlab/value_targets.hpp"
#include "testing.hpp"

using namespace dwmlab;
using dwmlab::testing::random_vector;

namespace {

ImaginedSeq random_seq(std::size_t T, std::size_t ds, Rng& rng) {
  ImaginedSeq s;
  s.state_dim = ds;
  s.rewards = random_vector(T, rng, 0, 1);
  s.states = random_vector((T - 1) * ds, rng, -2, 2);
  return s;
}

double mve_oracle(const ImaginedSeq& s, std::size_t H, double gamma, double boot) {
  double y = 0.0;
  for (std::size_t h = 0; h < H; ++h) y += std::pow(gamma, static_cast<double>(h)) * s.rewards[h];
  return y + std::pow(gamma, static_cast<double>(H)) * boot;
}

// Explicit mixture of n-step returns: (1 - l) sum_{n<H} l^{n-1} G_n + l^{H-1} G_H.
double lambda_oracle(const ImaginedSeq& s, std::size_t H, double gamma, double lambda, const std::vector<double>& boot) {
  auto G = [&](std::size_t n) { return mve_oracle(s, n, gamma, boot[n - 1]); };
  double y = 0.0;
  for (std::size_t n = 1; n < H; ++n) y += (1 - lambda) * std::pow(lambda, static_cast<double>(n - 1)) * G(n);
  return y + std::pow(lambda, static_cast<double>(H - 1)) * G(H);
}

double pql_oracle(const std::vector<ImaginedSeq>& seqs, std::size_t t, double kappa) {
  double mean = 0.0, worst = 0.0;
  for (const auto& s : seqs) mean += s.rewards[t];
  mean /= seqs.size();
  for (const auto& a : seqs)
    for (const auto& b : seqs) {
      double d = (a.rewards[t] - b.rewards[t]) * (a.rewards[t] - b.rewards[t]);
      for (std::size_t k = 0; k < a.state_dim; ++k)
        d += (a.state(t + 1)[k] - b.state(t + 1)[k]) * (a.state(t + 1)[k] - b.state(t + 1)[k]);
      worst = std::max(worst, d);
    }
  return mean - kappa * worst;
}

}  // namespace

TEST_CASE("diff-mve examples") {
  ImaginedSeq s;
  s.state_dim = 1;
  s.rewards = {1.0, 0.5};
  s.states = {0.0};
  CHECK(diff_mve_target(s, 1, 0.99, 2.0) == doctest::Approx(2.98).epsilon(1e-15));
  CHECK(diff_mve_target(s, 1, 0.0, 2.0) == 1.0);
  CHECK_THROWS_AS(diff_mve_target(s, 2, 0.99, 2.0), ConfigError);
  CHECK_THROWS_AS(diff_mve_target(s, 0, 0.99, 2.0), ConfigError);
}

TEST_CASE("diff-mve and mve match the summation oracle") {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto s = random_seq(8, 3, rng);
    const std::size_t H = 1 + rng.index(7);
    const double gamma = rng.uniform(0.8, 0.999), boot = rng.uniform(-5, 50);
    CHECK(std::abs(diff_mve_target(s, H, gamma, boot) - mve_oracle(s, H, gamma, boot)) < 1e-12);
    CHECK(mve_target(s, H, gamma, boot) == diff_mve_target(s, H, gamma, boot));
  }
}

TEST_CASE("diff-mve bootstraps only at the horizon state and is linear in rewards") {
  Rng rng(2);
  auto s = random_seq(8, 2, rng);
  const std::size_t H = 5;
  std::vector<std::size_t> seen;
  BootFn boot = [&](std::span<const double> st) {
    for (std::size_t h = 1; h <= 7; ++h)
      if (st.data() == s.state(h).data()) seen.push_back(h);
    return st[0] * 3.0;
  };
  const double y = diff_mve_target(s, H, 0.9, boot);
  CHECK(seen == std::vector<std::size_t>{H});
  CHECK(y == doctest::Approx(mve_oracle(s, H, 0.9, s.state(H)[0] * 3.0)));

  const auto before = s.states;
  for (std::size_t h = 1; h < H; ++h) s.state(h)[0] += 10.0;
  CHECK(diff_mve_target(s, H, 0.9, boot) == y);
  s.states = before;

  for (std::size_t h = 0; h < H; ++h) {
    auto p = s;
    p.rewards[h] += 1.0;
    CHECK(diff_mve_target(p, H, 0.9, 1.0) - diff_mve_target(s, H, 0.9, 1.0) ==
          doctest::Approx(std::pow(0.9, static_cast<double>(h))).epsilon(1e-12));
  }
}

TEST_CASE("lambda return reductions") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto s = random_seq(8, 2, rng);
    const std::size_t H = 1 + rng.index(7);
    const double gamma = rng.uniform(0.8, 0.999);
    const auto boot = random_vector(H, rng, -1, 10);
    CHECK(std::abs(lambda_return_target(s, H, gamma, 1.0, boot) - diff_mve_target(s, H, gamma, boot[H - 1])) < 1e-12);
    CHECK(std::abs(lambda_return_target(s, H, gamma, 0.0, boot) - (s.rewards[0] + gamma * boot[0])) < 1e-12);
  }
}

TEST_CASE("lambda return matches the n-step mixture") {
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto s = random_seq(8, 2, rng);
    const std::size_t H = i < 10 ? 3 : 1 + rng.index(7);
    const double gamma = rng.uniform(0.8, 0.999), lambda = i < 10 ? 0.95 : rng.uniform();
    const auto boot = random_vector(H, rng, -1, 10);
    CHECK(std::abs(lambda_return_target(s, H, gamma, lambda, boot) - lambda_oracle(s, H, gamma, lambda, boot)) <
          1e-10);
  }
}

TEST_CASE("lambda return is monotone in bootstrap values") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto s = random_seq(8, 2, rng);
    const std::size_t H = 1 + rng.index(7);
    const double lambda = rng.uniform(0, 0.99);
    auto boot = random_vector(H, rng, -1, 10);
    const double y = lambda_return_target(s, H, 0.99, lambda, boot);
    boot[rng.index(H)] += rng.uniform(0, 3);
    CHECK(lambda_return_target(s, H, 0.99, lambda, boot) >= y);
  }
}

TEST_CASE("lambda return with a bootstrap function") {
  Rng rng(6);
  const auto s = random_seq(8, 2, rng);
  BootFn boot = [](std::span<const double> st) { return st[0] + 2 * st[1]; };
  std::vector<double> b;
  for (std::size_t h = 1; h <= 6; ++h) b.push_back(boot(s.state(h)));
  CHECK(lambda_return_target(s, 6, 0.99, 0.7, boot) == lambda_return_target(s, 6, 0.99, 0.7, b));
}

TEST_CASE("pql rewards examples") {
  ImaginedSeq a, b;
  a.state_dim = b.state_dim = 1;
  a.rewards = {1.0, 0.0};
  b.rewards = {3.0, 0.0};
  a.states = b.states = {0.5};
  const std::vector<ImaginedSeq> two{a, b};
  const auto r = pql_rewards(two, 0.1);
  REQUIRE(r.size() == 1);
  CHECK(r[0] == doctest::Approx(1.6).epsilon(1e-15));
  CHECK(pql_rewards(two, 0.0)[0] == 2.0);
  CHECK_THROWS_AS(pql_rewards(std::vector<ImaginedSeq>{a}, 0.1), ConfigError);
}

TEST_CASE("pql rewards match the pairwise oracle") {
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    std::vector<ImaginedSeq> seqs;
    const std::size_t m = 2 + rng.index(4);
    for (std::size_t j = 0; j < m; ++j) seqs.push_back(random_seq(8, 3, rng));
    const double kappa = rng.uniform(0, 1);
    const auto r = pql_rewards(seqs, kappa);
    REQUIRE(r.size() == 7);
    for (std::size_t t = 0; t < 7; ++t) {
      CHECK(std::abs(r[t] - pql_oracle(seqs, t, kappa)) < 1e-12);
      double mean = 0;
      for (const auto& s : seqs) mean += s.rewards[t];
      CHECK(r[t] <= mean / m + 1e-15);
      CHECK(pql_rewards(seqs, 0.0)[t] == doctest::Approx(mean / m).epsilon(1e-15));
    }
    const auto seq = pql_sequence(seqs, kappa);
    CHECK(seq.rewards == r);
    CHECK(seq.state(3)[1] == seqs[0].state(3)[1]);
    CHECK(seq.max_horizon() == 7);
  }
}

TEST_CASE("rtg relabeling") {
  const double gamma = 0.99;
  CHECK(rtg_relabel(0.0, 0.5, 2.0, 1.0, gamma) == doctest::Approx(0.5 + gamma * 2.0));
  CHECK(rtg_relabel(0.0, 0.5, 2.0, 100.0, gamma) == doctest::Approx(0.5 + gamma * 100.0));
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double r = rng.uniform(0, 1), g_next = rng.uniform(0, 50), v = rng.uniform(-10, 60);
    const double g = r + gamma * g_next;
    CHECK(rtg_relabel(g, r, g_next, v, gamma) >= g);
  }
}

TEST_CASE("expectile loss") {
  CHECK(expectile_loss(2.0, 0.7) == doctest::Approx(0.7 * 4));
  CHECK(expectile_loss(-2.0, 0.7) == doctest::Approx(0.3 * 4));
  CHECK(expectile_loss(1.5, 0.5) == doctest::Approx(0.5 * 2.25));
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const double u = rng.uniform(-3, 3), tau = rng.uniform();
    const double oracle = std::abs(tau - (u < 0 ? 1.0 : 0.0)) * u * u;
    CHECK(std::abs(expectile_loss(u, tau) - oracle) < 1e-12);
    const double h = 1e-6;
    CHECK(testing::rel_err(expectile_grad(u, tau), (expectile_loss(u + h, tau) - expectile_loss(u - h, tau)) / (2 * h)) <
          1e-6);
  }
}

TEST_CASE("target config validation") {
  TargetConfig c;
  c.H = 8;
  CHECK_THROWS_AS(c.validate(8), ConfigError);
  c.H = 7;
  CHECK_NOTHROW(c.validate(8));
  c.lambda = 1.2;
  CHECK_THROWS_AS(c.validate(8), ConfigError);
  c.lambda = 0.5;
  c.mode = TargetMode::pql;
  c.m = 1;
  CHECK_THROWS_AS(c.validate(8), ConfigError);
  c.m = 2;
  c.kappa = -1;
  CHECK_THROWS_AS(c.validate(8), ConfigError);
  CHECK(target_mode_from_string(to_string(TargetMode::lambda)) == TargetMode::lambda);
}
