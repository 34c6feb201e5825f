#include "dwmlab/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dwmlab::kernels {
namespace {

// Below this many multiply-adds a kernel stays on the calling thread.
constexpr std::size_t kParallelWork = 1u << 15;

// Rows are processed in blocks of up to kRows, columns in chunks of kCols
// held in a local accumulator. Every output element still sums its terms in
// ascending input order, so the blocking does not change results.
constexpr std::size_t kRows = 4;
constexpr std::size_t kCols = 32;

inline void forward_block(const double* x, const double* wt, const double* bias, double* y,
                          std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t o0 = 0; o0 < out; o0 += kCols) {
    const std::size_t n = std::min(kCols, out - o0);
    alignas(64) double acc[kRows][kCols];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < n; ++o) acc[r][o] = bias ? bias[o0 + o] : 0.0;
    if (rows == kRows && n == kCols) {
      for (std::size_t i = 0; i < in; ++i) {
        const double* w = wt + i * out + o0;
        for (std::size_t r = 0; r < kRows; ++r) {
          const double xr = x[r * in + i];
          for (std::size_t o = 0; o < kCols; ++o) acc[r][o] += xr * w[o];
        }
      }
    } else {
      for (std::size_t i = 0; i < in; ++i) {
        const double* w = wt + i * out + o0;
        for (std::size_t r = 0; r < rows; ++r) {
          const double xr = x[r * in + i];
          for (std::size_t o = 0; o < n; ++o) acc[r][o] += xr * w[o];
        }
      }
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < n; ++o) y[r * out + o0 + o] = acc[r][o];
  }
}

// W (out x in) from Wt (in x out), so the input gradient reuses forward_block.
std::vector<double> transpose(const double* wt, std::size_t in, std::size_t out) {
  std::vector<double> w(in * out);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t o = 0; o < out; ++o) w[o * in + i] = wt[i * out + o];
  return w;
}

// dWt rows [i, i + rows) accumulated over the batch in ascending order.
inline void backward_param_block(const double* x, const double* dy, double* dwt, std::size_t i,
                                 std::size_t rows, std::size_t batch, std::size_t in, std::size_t out) {
  for (std::size_t o0 = 0; o0 < out; o0 += kCols) {
    const std::size_t n = std::min(kCols, out - o0);
    alignas(64) double acc[kRows][kCols];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < n; ++o) acc[r][o] = dwt[(i + r) * out + o0 + o];
    if (rows == kRows && n == kCols) {
      for (std::size_t b = 0; b < batch; ++b) {
        const double* g = dy + b * out + o0;
        const double* xb = x + b * in + i;
        for (std::size_t r = 0; r < kRows; ++r) {
          const double xr = xb[r];
          for (std::size_t o = 0; o < kCols; ++o) acc[r][o] += xr * g[o];
        }
      }
    } else {
      for (std::size_t b = 0; b < batch; ++b) {
        const double* g = dy + b * out + o0;
        const double* xb = x + b * in + i;
        for (std::size_t r = 0; r < rows; ++r) {
          const double xr = xb[r];
          for (std::size_t o = 0; o < n; ++o) acc[r][o] += xr * g[o];
        }
      }
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < n; ++o) dwt[(i + r) * out + o0 + o] = acc[r][o];
  }
}

inline void backward_bias(const double* dy, double* dbias, std::size_t batch, std::size_t out) {
  for (std::size_t b = 0; b < batch; ++b) {
    const double* g = dy + b * out;
    for (std::size_t o = 0; o < out; ++o) dbias[o] += g[o];
  }
}

int g_max_threads = 0;  // 0: OpenMP default

int thread_count() {
#ifdef _OPENMP
  return g_max_threads > 0 ? g_max_threads : omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace

int max_threads() { return thread_count(); }
void set_max_threads(int n) { g_max_threads = n; }

void dense_forward_serial(const double* x, const double* wt, const double* bias, double* y,
                          std::size_t batch, std::size_t in, std::size_t out) {
  for (std::size_t b = 0; b < batch; b += kRows)
    forward_block(x + b * in, wt, bias, y + b * out, std::min(kRows, batch - b), in, out);
}

void dense_forward_omp(const double* x, const double* wt, const double* bias, double* y,
                       std::size_t batch, std::size_t in, std::size_t out) {
  const long blocks = static_cast<long>((batch + kRows - 1) / kRows);
  [[maybe_unused]] const bool big = batch * in * out >= kParallelWork;
  [[maybe_unused]] const int threads = thread_count();
#pragma omp parallel for schedule(static) if (big && threads > 1) num_threads(threads)
  for (long k = 0; k < blocks; ++k) {
    const std::size_t b = static_cast<std::size_t>(k) * kRows;
    forward_block(x + b * in, wt, bias, y + b * out, std::min(kRows, batch - b), in, out);
  }
}

void dense_backward_input_serial(const double* dy, const double* wt, double* dx,
                                 std::size_t batch, std::size_t in, std::size_t out) {
  const auto w = transpose(wt, in, out);
  for (std::size_t b = 0; b < batch; b += kRows)
    forward_block(dy + b * out, w.data(), nullptr, dx + b * in, std::min(kRows, batch - b), out, in);
}

void dense_backward_input_omp(const double* dy, const double* wt, double* dx, std::size_t batch,
                              std::size_t in, std::size_t out) {
  const auto w = transpose(wt, in, out);
  const long blocks = static_cast<long>((batch + kRows - 1) / kRows);
  [[maybe_unused]] const bool big = batch * in * out >= kParallelWork;
  [[maybe_unused]] const int threads = thread_count();
#pragma omp parallel for schedule(static) if (big && threads > 1) num_threads(threads)
  for (long k = 0; k < blocks; ++k) {
    const std::size_t b = static_cast<std::size_t>(k) * kRows;
    forward_block(dy + b * out, w.data(), nullptr, dx + b * in, std::min(kRows, batch - b), out, in);
  }
}

void dense_backward_params_serial(const double* x, const double* dy, double* dwt, double* dbias,
                                  std::size_t batch, std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < in; i += kRows)
    backward_param_block(x, dy, dwt, i, std::min(kRows, in - i), batch, in, out);
  backward_bias(dy, dbias, batch, out);
}

void dense_backward_params_omp(const double* x, const double* dy, double* dwt, double* dbias,
                               std::size_t batch, std::size_t in, std::size_t out) {
  const long blocks = static_cast<long>((in + kRows - 1) / kRows);
  [[maybe_unused]] const bool big = batch * in * out >= kParallelWork;
  [[maybe_unused]] const int threads = thread_count();
#pragma omp parallel for schedule(static) if (big && threads > 1) num_threads(threads)
  for (long k = 0; k < blocks; ++k) {
    const std::size_t i = static_cast<std::size_t>(k) * kRows;
    backward_param_block(x, dy, dwt, i, std::min(kRows, in - i), batch, in, out);
  }
  backward_bias(dy, dbias, batch, out);
}

}  // namespace dwmlab::kernels
