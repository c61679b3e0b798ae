#pragma once

#include <cmath>
#include <vector>

#include "fhvae/rng.hpp"
#include "fhvae/seqnet.hpp"

namespace fhvae::test {

inline void fill_uniform(float* p, std::size_t n, Rng& rng, double lo, double hi) {
  for (std::size_t i = 0; i < n; ++i)
    p[i] = static_cast<float>(lo + (hi - lo) * rng.uniform());
}

inline void fill_uniform(double* p, std::size_t n, Rng& rng, double lo, double hi) {
  for (std::size_t i = 0; i < n; ++i) p[i] = lo + (hi - lo) * rng.uniform();
}

inline void fill_normal(float* p, std::size_t n, Rng& rng) {
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<float>(rng.normal());
}

inline void fill_normal(double* p, std::size_t n, Rng& rng) {
  for (std::size_t i = 0; i < n; ++i) p[i] = rng.normal();
}

// Central finite differences of loss.value() against the analytic gradients.
// Returns the worst per-array relative error ||ga - gn|| / (||ga|| + ||gn|| + tiny).
template <class T>
double gradient_check(const net::DifferentiableLoss<T>& loss, net::ParamStore<T>& params,
                      T step = T(1e-5)) {
  net::ParamStore<T> analytic = net::compute_gradients(loss, params);
  double worst = 0;
  for (std::size_t a = 0; a < params.size(); ++a) {
    double num2 = 0, ana2 = 0, diff2 = 0;
    for (std::size_t j = 0; j < params[a].size(); ++j) {
      T saved = params[a].data()[j];
      params[a].data()[j] = saved + step;
      T up = loss.value(params);
      params[a].data()[j] = saved - step;
      T down = loss.value(params);
      params[a].data()[j] = saved;
      double g_num = static_cast<double>(up - down) / (2.0 * static_cast<double>(step));
      double g_ana = static_cast<double>(analytic[a].data()[j]);
      num2 += g_num * g_num;
      ana2 += g_ana * g_ana;
      double d = g_num - g_ana;
      diff2 += d * d;
    }
    double rel = std::sqrt(diff2) / (std::sqrt(num2) + std::sqrt(ana2) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace fhvae::test
