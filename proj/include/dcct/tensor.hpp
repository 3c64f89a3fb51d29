#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dcct {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major tensor of doubles. All model math runs in double precision.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D accessors.
  int rows() const;
  int cols() const;
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  const double& at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  std::span<double> row(int r);
  std::span<const double> row(int r) const;

  bool all_finite() const;
};

// Throws ShapeError with `what` as context when the shapes differ.
void require_shape(const Tensor& t, const Shape& expected, const char* what);

// Raw GEMM kernels on row-major buffers; all accumulate into C.
// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c);
// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c);
// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c);

}  // namespace dcct
