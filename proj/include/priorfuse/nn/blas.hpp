#pragma once

#include <cblas.h>

#include <type_traits>

namespace priorfuse::nn {

// Thread count changes the summation order inside GEMM; the trainer pins it
// to keep runs reproducible.
inline void set_blas_threads(int n) { openblas_set_num_threads(n); }

// Row-major C = alpha * op(A) * op(B) + beta * C.
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    static_assert(std::is_same_v<T, double>, "gemm supports float and double");
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace priorfuse::nn
