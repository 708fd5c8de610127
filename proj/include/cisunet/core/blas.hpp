#pragma once

#include <cblas.h>

namespace cisunet {

/// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
/// op(A) is M x K, op(B) is K x N, C is M x N.
inline void gemm(bool trans_a, bool trans_b, long m, long n, long k,
                 float alpha, const float* a, long lda, const float* b,
                 long ldb, float beta, float* c, long ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k,
              alpha, a, (int)lda, b, (int)ldb, beta, c, (int)ldc);
}

inline void gemm(bool trans_a, bool trans_b, long m, long n, long k,
                 double alpha, const double* a, long lda, const double* b,
                 long ldb, double beta, double* c, long ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k,
              alpha, a, (int)lda, b, (int)ldb, beta, c, (int)ldc);
}

}  // namespace cisunet
