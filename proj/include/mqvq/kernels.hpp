#pragma once

// Dense matrix kernels. All three variants are written in axpy form so the
// inner loop is contiguous and vectorizes without reassociating sums, which
// keeps results bit-stable for a given build.

#include <cstddef>
#include <vector>

namespace mqvq::kernels {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a,
             const T* __restrict b, T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a,
             const T* __restrict b, T* __restrict c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
             T* c) {
  std::vector<T> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm_nn(m, n, k, a, bt.data(), c);
}

}  // namespace mqvq::kernels
