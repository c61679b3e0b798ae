#pragma once

#include <cstddef>

namespace fhvae::kern {

// Runtime-dispatched arithmetic kernels. The scalar reference versions in
// kern::ref are the ground truth; the AVX2 variants must agree with them up
// to floating-point reassociation (see tests/test_kernels.cpp). Dispatch is
// resolved once at startup: AVX2+FMA when the CPU supports it, otherwise
// scalar. FHVAE_FORCE_SCALAR=1 in the environment forces the scalar path.
enum class Backend { scalar, avx2 };

bool avx2_available();
Backend backend();
void select_backend(Backend b);  // throws ConfigError if unsupported

// ---- scalar reference kernels ----
namespace ref {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
inline T sumsq(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

template <class T>
inline T sqdist(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// C (m x n) += A (m x k) * B^T, B stored row-major (n x k)
template <class T>
inline void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
                      std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, b + j * k, k);
}

// C (m x k) += A (m x n) * B (n x k)
template <class T>
inline void matmul_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
                      std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) axpy(a[i * n + j], b + j * k, c + i * k, k);
}

// C (n x k) += A^T * B, with A (m x n) and B (m x k) row-major
template <class T>
inline void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
                      std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) axpy(a[i * n + j], b + i * k, c + j * k, k);
}

}  // namespace ref

// ---- dispatched float entry points (hot path of training) ----
float dot(const float* a, const float* b, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
float sumsq(const float* x, std::size_t n);
float sqdist(const float* a, const float* b, std::size_t n);
void matmul_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k);
void matmul_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k);
void matmul_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k);

// ---- double overloads: always the scalar reference path ----
// Double is the verification precision (gradient checks, oracles); it stays on
// one strictly-ordered code path.
inline double dot(const double* a, const double* b, std::size_t n) { return ref::dot(a, b, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { ref::axpy(alpha, x, y, n); }
inline double sumsq(const double* x, std::size_t n) { return ref::sumsq(x, n); }
inline double sqdist(const double* a, const double* b, std::size_t n) { return ref::sqdist(a, b, n); }
inline void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t n, std::size_t k) { ref::matmul_nt(a, b, c, m, n, k); }
inline void matmul_nn(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t n, std::size_t k) { ref::matmul_nn(a, b, c, m, n, k); }
inline void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t n, std::size_t k) { ref::matmul_tn(a, b, c, m, n, k); }

#if defined(FHVAE_WITH_AVX2)
namespace avx2 {
float dot(const float* a, const float* b, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
float sumsq(const float* x, std::size_t n);
float sqdist(const float* a, const float* b, std::size_t n);
void matmul_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k);
void matmul_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k);
void matmul_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k);
}  // namespace avx2
#endif

}  // namespace fhvae::kern
