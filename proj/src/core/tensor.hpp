#pragma once

// Row-major double matrices and the few dense kernels the model needs.

#include <cstddef>
#include <cstring>
#include <vector>

#include "core/common.hpp"

namespace al {

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(size_t(r) * size_t(c), 0.0) {}

  double* operator[](int r) { return v.data() + size_t(r) * cols; }
  const double* operator[](int r) const { return v.data() + size_t(r) * cols; }
  double& at(int r, int c) { return v[size_t(r) * cols + c]; }
  double at(int r, int c) const { return v[size_t(r) * cols + c]; }
  size_t size() const { return v.size(); }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }
  void zero() { std::memset(v.data(), 0, v.size() * sizeof(double)); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

// C = A(n x k) * B(k x m). Accumulates into C when acc is true.
void matmul(const double* A, int n, int k, const double* B, int m, double* C, bool acc = false);

// C = A(n x k) * B^T where B is (m x k). Used where weights are stored transposed
// and in backward passes.
void matmul_nt(const double* A, int n, int k, const double* B, int m, double* C, bool acc = false);

// C(k x m) += A^T(n x k)^T... i.e. C += A^T * B with A (n x k), B (n x m).
void matmul_tn_acc(const double* A, int n, int k, const double* B, int m, double* C);

inline void matmul(const Mat& A, const Mat& B, Mat& C, bool acc = false) {
  check(A.cols == B.rows, "matmul: inner dims differ");
  if (!C.same_shape(Mat()) && (C.rows != A.rows || C.cols != B.cols)) C = Mat(A.rows, B.cols);
  if (C.rows != A.rows || C.cols != B.cols) C = Mat(A.rows, B.cols);
  matmul(A.data(), A.rows, A.cols, B.data(), B.cols, C.data(), acc);
}

// In-place softmax over a row of length n. Max-subtracted for stability.
void softmax_row(double* x, int n);

// log(sum(exp(x))) over n entries, max-subtracted.
double logsumexp(const double* x, int n);

double dot(const double* a, const double* b, int n);
void axpy(double alpha, const double* x, double* y, int n);  // y += alpha*x

double frobenius_norm(const double* x, size_t n);

}  // namespace al
