#pragma once
#include <cstdint>

namespace nexus::kern {

// Row-major f64 kernels. Accumulation over k runs in a fixed serial order per
// output element, so results are bit-stable run to run.

// C (+)= A[MxK] * B[KxN]
void gemm_nn(int64_t M, int64_t K, int64_t N, const double* A, const double* B,
             double* C, bool accumulate);
// C (+)= A[MxK] * B[NxK]^T
void gemm_nt(int64_t M, int64_t K, int64_t N, const double* A, const double* B,
             double* C, bool accumulate);
// C (+)= A[KxM]^T * B[KxN]
void gemm_tn(int64_t M, int64_t K, int64_t N, const double* A, const double* B,
             double* C, bool accumulate);

// y += a * x
void axpy(int64_t n, double a, const double* x, double* y);

}  // namespace nexus::kern
