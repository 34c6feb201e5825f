#pragma once

// Dense-layer kernels. Every kernel exists twice: a serial reference and an
// OpenMP version. Both evaluate each output element with the same scalar
// operation sequence, so their results are bit-identical; only the
// distribution of independent rows across threads differs.

#include <cstddef>

namespace dwmlab::kernels {

enum class Exec { serial, parallel };

/// Y[b, :] = bias + sum_i X[b, i] * Wt[i, :]      (Wt is in x out, row-major)
void dense_forward_serial(const double* x, const double* wt, const double* bias, double* y,
                          std::size_t batch, std::size_t in, std::size_t out);
void dense_forward_omp(const double* x, const double* wt, const double* bias, double* y,
                       std::size_t batch, std::size_t in, std::size_t out);

/// dX[b, i] = sum_o dY[b, o] * Wt[i, o]   (summed in ascending o)
void dense_backward_input_serial(const double* dy, const double* wt, double* dx,
                                 std::size_t batch, std::size_t in, std::size_t out);
void dense_backward_input_omp(const double* dy, const double* wt, double* dx,
                              std::size_t batch, std::size_t in, std::size_t out);

/// dWt[i, :] += sum_b X[b, i] * dY[b, :];  dbias += sum_b dY[b, :]
void dense_backward_params_serial(const double* x, const double* dy, double* dwt, double* dbias,
                                  std::size_t batch, std::size_t in, std::size_t out);
void dense_backward_params_omp(const double* x, const double* dy, double* dwt, double* dbias,
                               std::size_t batch, std::size_t in, std::size_t out);

inline void dense_forward(Exec e, const double* x, const double* wt, const double* bias, double* y,
                          std::size_t batch, std::size_t in, std::size_t out) {
  if (e == Exec::parallel)
    dense_forward_omp(x, wt, bias, y, batch, in, out);
  else
    dense_forward_serial(x, wt, bias, y, batch, in, out);
}

inline void dense_backward_input(Exec e, const double* dy, const double* wt, double* dx,
                                 std::size_t batch, std::size_t in, std::size_t out) {
  if (e == Exec::parallel)
    dense_backward_input_omp(dy, wt, dx, batch, in, out);
  else
    dense_backward_input_serial(dy, wt, dx, batch, in, out);
}

inline void dense_backward_params(Exec e, const double* x, const double* dy, double* dwt,
                                  double* dbias, std::size_t batch, std::size_t in,
                                  std::size_t out) {
  if (e == Exec::parallel)
    dense_backward_params_omp(x, dy, dwt, dbias, batch, in, out);
  else
    dense_backward_params_serial(x, dy, dwt, dbias, batch, in, out);
}

/// Number of OpenMP threads kernels may use (1 when built without OpenMP).
int max_threads();
void set_max_threads(int n);

}  // namespace dwmlab::kernels
