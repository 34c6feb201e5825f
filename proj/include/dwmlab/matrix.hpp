#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace dwmlab {

/// Dense row-major matrix of doubles; rows are batch items throughout the library.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  void resize(std::size_t r, std::size_t c) {
    rows = r;
    cols = c;
    data.assign(r * c, 0.0);
  }

  bool operator==(const Matrix&) const = default;
};

/// Concatenate column blocks of equal row count: [a | b | ...].
inline Matrix hconcat(std::initializer_list<const Matrix*> blocks) {
  std::size_t rows = (*blocks.begin())->rows;
  std::size_t cols = 0;
  for (const Matrix* m : blocks) {
    assert(m->rows == rows);
    cols += m->cols;
  }
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double* dst = out.data.data() + r * cols;
    for (const Matrix* m : blocks) {
      const double* src = m->data.data() + r * m->cols;
      for (std::size_t c = 0; c < m->cols; ++c) *dst++ = src[c];
    }
  }
  return out;
}

/// Copy columns [first, first + count) into a new matrix.
inline Matrix column_slice(const Matrix& m, std::size_t first, std::size_t count) {
  Matrix out(m.rows, count);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, first + c);
  return out;
}

}  // namespace dwmlab
