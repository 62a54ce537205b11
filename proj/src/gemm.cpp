#include "gemm.hpp"

#include <cstring>

namespace nexus::kern {

void axpy(int64_t n, double a, const double* x, double* y) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void gemm_nn(int64_t M, int64_t K, int64_t N, const double* A, const double* B,
             double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, size_t(M * N) * sizeof(double));
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      axpy(N, a[k], B + k * N, c);
    }
  }
}

void gemm_nt(int64_t M, int64_t K, int64_t N, const double* A, const double* B,
             double* C, bool accumulate) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      if (accumulate) c[j] += acc; else c[j] = acc;
    }
  }
}

void gemm_tn(int64_t M, int64_t K, int64_t N, const double* A, const double* B,
             double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, size_t(M * N) * sizeof(double));
  for (int64_t k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (int64_t i = 0; i < M; ++i) {
      axpy(N, a[i], b, C + i * N);
    }
  }
}

}  // namespace nexus::kern
