#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace actcomp {

// Error taxonomy. Contract violations are caller bugs (bad shapes, bad
// arguments); numerical failures are data-dependent conditions that carry a
// residual the caller may want to inspect.
struct ContractViolation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalFailure : std::runtime_error {
  double residual = 0.0;
  explicit NumericalFailure(const std::string& msg, double res = 0.0)
      : std::runtime_error(msg), residual(res) {}
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major f64 matrix. The single numeric carrier: activations,
// weights, gradients, factors all live here. 64-bit throughout so algorithmic
// error is separable from rounding error.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Matrix() = default;

  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {
    if (r == 0 || c == 0) throw ContractViolation("Matrix: dimensions must be positive");
  }

  // Construction from user-provided data validates finiteness.
  Matrix(std::size_t r, std::size_t c, std::vector<double> data)
      : rows(r), cols(c), a(std::move(data)) {
    if (r == 0 || c == 0) throw ContractViolation("Matrix: dimensions must be positive");
    if (a.size() != rows * cols) throw ContractViolation("Matrix: data length != rows*cols");
    for (double x : a)
      if (!std::isfinite(x)) throw ContractViolation("Matrix: non-finite entry");
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rs) {
    std::size_t r = rs.size();
    if (r == 0) throw ContractViolation("Matrix::from_rows: empty");
    std::size_t c = rs.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rs) {
      if (row.size() != c) throw ContractViolation("Matrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  std::size_t numel() const { return rows * cols; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline bool all_finite(const Matrix& m) {
  for (double x : m.a)
    if (!std::isfinite(x)) return false;
  return true;
}

// C = A * B with a fixed i,k,j loop order: each output entry accumulates over
// k in increasing order, so results are bit-reproducible per build.
inline Matrix matmul(const Matrix& x, const Matrix& y) {
  if (x.cols != y.rows) throw ContractViolation("matmul: inner dimensions differ");
  Matrix z(x.rows, y.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xi = &x.a[i * x.cols];
    double* zi = &z.a[i * z.cols];
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double v = xi[k];
      const double* yk = &y.a[k * y.cols];
      for (std::size_t j = 0; j < y.cols; ++j) zi[j] += v * yk[j];
    }
  }
  return z;
}

// C = A * B^T, same fixed accumulation order over the contracted index.
inline Matrix matmul_nt(const Matrix& x, const Matrix& y) {
  if (x.cols != y.cols) throw ContractViolation("matmul_nt: inner dimensions differ");
  Matrix z(x.rows, y.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xi = &x.a[i * x.cols];
    for (std::size_t j = 0; j < y.rows; ++j) {
      const double* yj = &y.a[j * y.cols];
      double acc = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) acc += xi[k] * yj[k];
      z.at(i, j) = acc;
    }
  }
  return z;
}

// C = A^T * B.
inline Matrix matmul_tn(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows) throw ContractViolation("matmul_tn: inner dimensions differ");
  Matrix z(x.cols, y.cols);
  for (std::size_t k = 0; k < x.rows; ++k) {
    const double* xk = &x.a[k * x.cols];
    const double* yk = &y.a[k * y.cols];
    for (std::size_t i = 0; i < x.cols; ++i) {
      const double v = xk[i];
      double* zi = &z.a[i * z.cols];
      for (std::size_t j = 0; j < y.cols; ++j) zi[j] += v * yk[j];
    }
  }
  return z;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
  return t;
}

inline Matrix add(const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ContractViolation("add: shape mismatch");
  Matrix z = x;
  for (std::size_t i = 0; i < z.a.size(); ++i) z.a[i] += y.a[i];
  return z;
}

inline Matrix sub(const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ContractViolation("sub: shape mismatch");
  Matrix z = x;
  for (std::size_t i = 0; i < z.a.size(); ++i) z.a[i] -= y.a[i];
  return z;
}

inline Matrix scale(const Matrix& x, double s) {
  Matrix z = x;
  for (double& v : z.a) v *= s;
  return z;
}

inline Matrix hadamard(const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ContractViolation("hadamard: shape mismatch");
  Matrix z = x;
  for (std::size_t i = 0; i < z.a.size(); ++i) z.a[i] *= y.a[i];
  return z;
}

inline void add_inplace(Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ContractViolation("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < x.a.size(); ++i) x.a[i] += y.a[i];
}

// Column sums as a 1 x cols row vector (the bias-gradient reduction).
inline Matrix col_sums(const Matrix& m) {
  Matrix s(1, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) s.at(0, j) += m.at(i, j);
  return s;
}

inline double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double x : m.a) acc += x * x;
  return std::sqrt(acc);
}

inline double frobenius_dist(const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ContractViolation("frobenius_dist: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.a.size(); ++i) {
    double d = x.a[i] - y.a[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// ||x - ref||_F / ||ref||_F, guarding the zero-reference case.
inline double rel_fro_err(const Matrix& x, const Matrix& ref) {
  double denom = frobenius_norm(ref);
  double num = frobenius_dist(x, ref);
  if (denom == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / denom;
}

inline double max_abs_diff(const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) throw ContractViolation("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < x.a.size(); ++i) m = std::max(m, std::abs(x.a[i] - y.a[i]));
  return m;
}

inline bool bitwise_equal(const Matrix& x, const Matrix& y) {
  if (!x.same_shape(y)) return false;
  for (std::size_t i = 0; i < x.a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(x.a[i]) != std::bit_cast<std::uint64_t>(y.a[i])) return false;
  return true;
}

// ---- serialization ----
// Binary format: magic "ACMX", u32 rows, u32 cols, row-major f64 payload,
// all little-endian.

namespace detail {
inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64_le(std::ostream& os, double d) {
  std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}
}  // namespace detail

inline void write_acmx(const Matrix& m, std::ostream& os) {
  os.write("ACMX", 4);
  detail::put_u32_le(os, static_cast<std::uint32_t>(m.rows));
  detail::put_u32_le(os, static_cast<std::uint32_t>(m.cols));
  for (double x : m.a) detail::put_f64_le(os, x);
}

inline void write_acmx(const Matrix& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("write_acmx: cannot open " + path);
  write_acmx(m, os);
}

inline Matrix read_acmx(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "ACMX") throw ConfigError("read_acmx: bad magic");
  std::uint32_t r = detail::get_u32_le(is);
  std::uint32_t c = detail::get_u32_le(is);
  if (r == 0 || c == 0) throw ConfigError("read_acmx: zero dimension");
  std::vector<double> data(static_cast<std::size_t>(r) * c);
  for (double& x : data) x = detail::get_f64_le(is);
  if (!is) throw ConfigError("read_acmx: truncated payload");
  return Matrix(r, c, std::move(data));
}

inline Matrix read_acmx(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("read_acmx: cannot open " + path);
  return read_acmx(is);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// CSV debug emitter: one line per row, %.17g so values round-trip.
inline std::string to_csv(const Matrix& m) {
  std::string out;
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (j) out += ',';
      out += format_double(m.at(i, j));
    }
    out += '\n';
  }
  return out;
}

}  // namespace actcomp
