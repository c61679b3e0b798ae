#include "fhvae/kernels.hpp"

#include <cstdlib>

#include "fhvae/error.hpp"

namespace fhvae::kern {

namespace {

Backend pick_default() {
  const char* force = std::getenv("FHVAE_FORCE_SCALAR");
  if (force != nullptr && force[0] != '\0' && force[0] != '0') return Backend::scalar;
  return avx2_available() ? Backend::avx2 : Backend::scalar;
}

Backend& current() {
  static Backend b = pick_default();
  return b;
}

}  // namespace

bool avx2_available() {
#if defined(FHVAE_WITH_AVX2)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend backend() { return current(); }

void select_backend(Backend b) {
  if (b == Backend::avx2 && !avx2_available())
    throw ConfigError("AVX2 backend requested but not available on this CPU/build");
  current() = b;
}

#if defined(FHVAE_WITH_AVX2)
#define FHVAE_DISPATCH(call) \
  do {                       \
    if (current() == Backend::avx2) return avx2::call; \
    return ref::call;        \
  } while (0)
#else
#define FHVAE_DISPATCH(call) return ref::call
#endif

float dot(const float* a, const float* b, std::size_t n) { FHVAE_DISPATCH(dot(a, b, n)); }
void axpy(float alpha, const float* x, float* y, std::size_t n) { FHVAE_DISPATCH(axpy(alpha, x, y, n)); }
float sumsq(const float* x, std::size_t n) { FHVAE_DISPATCH(sumsq(x, n)); }
float sqdist(const float* a, const float* b, std::size_t n) { FHVAE_DISPATCH(sqdist(a, b, n)); }
void matmul_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k) { FHVAE_DISPATCH(matmul_nt(a, b, c, m, n, k)); }
void matmul_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k) { FHVAE_DISPATCH(matmul_nn(a, b, c, m, n, k)); }
void matmul_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
               std::size_t k) { FHVAE_DISPATCH(matmul_tn(a, b, c, m, n, k)); }

#undef FHVAE_DISPATCH

}  // namespace fhvae::kern
