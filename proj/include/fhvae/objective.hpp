#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "fhvae/error.hpp"
#include "fhvae/mat.hpp"

namespace fhvae::obj {

inline constexpr double kLog2Pi = 1.8378770664093454836;

struct HyperConfig {
  double sigma2_z1 = 0.25;
  double sigma2_z2 = 0.25;
  double sigma2_mu1 = 1.0;
  double sigma2_mu2 = 1.0;
  double alpha_z1 = 0.0;
  double alpha_z2 = 100.0;
  int latent_dim = 32;
};

inline void validate(const HyperConfig& h) {
  if (h.sigma2_z1 <= 0 || h.sigma2_z2 <= 0 || h.sigma2_mu1 <= 0 || h.sigma2_mu2 <= 0)
    throw ConfigError("hyper: variances must be positive");
  if (h.alpha_z1 < 0 || h.alpha_z2 < 0) throw ConfigError("hyper: alphas must be non-negative");
  if (h.latent_dim < 1) throw ConfigError("hyper: latent_dim must be >= 1");
}

enum class Stage { one = 1, two = 2 };

// KL( N(mean, diag exp(logvar)) || N(p_mean, p_var I) ); p_mean empty means 0.
template <class T>
T kl_diag_gaussian(std::span<const T> mean, std::span<const T> logvar, std::span<const T> p_mean,
                   T p_var) {
  if (p_var <= T(0)) throw ConfigError("kl_diag_gaussian: prior variance must be positive");
  require_dim(mean.size() == logvar.size(), "kl_diag_gaussian: mean/logvar length");
  require_dim(p_mean.empty() || p_mean.size() == mean.size(), "kl_diag_gaussian: prior length");
  T log_pv = std::log(p_var);
  T acc = 0;
  for (std::size_t d = 0; d < mean.size(); ++d) {
    T delta = mean[d] - (p_mean.empty() ? T(0) : p_mean[d]);
    acc += T(0.5) * log_pv - T(0.5) * logvar[d] +
           (std::exp(logvar[d]) + delta * delta) / (T(2) * p_var) - T(0.5);
  }
  return acc;
}

// log N(mu; 0, sigma2 I)
template <class T>
T log_gaussian_prior(std::span<const T> mu, T sigma2) {
  if (sigma2 <= T(0)) throw ConfigError("log_gaussian_prior: variance must be positive");
  T d = static_cast<T>(mu.size());
  return -T(0.5) * d * (T(kLog2Pi) + std::log(sigma2)) -
         kern::sumsq(mu.data(), mu.size()) / (T(2) * sigma2);
}

// log softmax over `candidates` of logits -||z - table_j||^2 / (2 sigma2),
// evaluated at `row`. The z2 term uses all training sequences as candidates;
// the z1 term under hierarchical sampling uses the batch's label set.
template <class T>
T discriminative_log_prob(std::span<const T> z, const Mat<T>& table, int row, T sigma2,
                          std::span<const int> candidates) {
  if (candidates.empty()) throw DataError("discriminative_log_prob: empty candidate set");
  require_dim(z.size() == table.cols(), "discriminative_log_prob: latent width");
  T inv = T(1) / (T(2) * sigma2);
  T row_logit = 0;
  bool row_seen = false;
  T max_logit = -std::numeric_limits<T>::infinity();
  std::vector<T> logits(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    int cand = candidates[j];
    if (cand < 0 || cand >= static_cast<int>(table.rows()))
      throw DataError("discriminative_log_prob: candidate out of range");
    T logit = -kern::sqdist(z.data(), table.row(cand), z.size()) * inv;
    logits[j] = logit;
    max_logit = std::max(max_logit, logit);
    if (cand == row) {
      row_logit = logit;
      row_seen = true;
    }
  }
  if (!row_seen) throw DataError("discriminative_log_prob: row not in candidate set");
  T acc = 0;
  for (T logit : logits) acc += std::exp(logit - max_logit);
  return row_logit - max_logit - std::log(acc);
}

// Segment variational lower bound. Stage one uses the zero-mean z1 prior and
// has no mu1 term; klz1 must already be computed against the matching prior.
template <class T>
T segment_bound(T recon, T klz1, T klz2, std::span<const T> mu1_row, std::span<const T> mu2_row,
                int n_i, int s_l, const HyperConfig& h, Stage stage) {
  if (n_i < 1 || s_l < 1) throw DataError("segment_bound: counts must be >= 1");
  T bound = recon - klz1 - klz2 +
            log_gaussian_prior(mu2_row, static_cast<T>(h.sigma2_mu2)) / static_cast<T>(n_i);
  if (stage == Stage::two)
    bound += log_gaussian_prior(mu1_row, static_cast<T>(h.sigma2_mu1)) / static_cast<T>(s_l);
  return bound;
}

template <class T>
T discriminative_bound(T bound, T disc_z1, T disc_z2, const HyperConfig& h) {
  return bound + static_cast<T>(h.alpha_z1) * disc_z1 + static_cast<T>(h.alpha_z2) * disc_z2;
}

// Named components of the discriminative bound for one segment.
// log_p_mu1/log_p_mu2 hold the raw log priors; bound applies the 1/S, 1/N
// weights. Stage one reports zero for the mu1 and disc_z1 components.
struct LossBreakdown {
  double recon = 0, kl_z1 = 0, kl_z2 = 0;
  double log_p_mu1 = 0, log_p_mu2 = 0;
  double disc_z1 = 0, disc_z2 = 0;
  double bound = 0, total = 0;
};

inline LossBreakdown make_loss_breakdown(double recon, double klz1, double klz2,
                                         double log_p_mu1, double log_p_mu2, double disc_z1,
                                         double disc_z2, int n_i, int s_l, const HyperConfig& h,
                                         Stage stage) {
  LossBreakdown out;
  out.recon = recon;
  out.kl_z1 = klz1;
  out.kl_z2 = klz2;
  out.log_p_mu2 = log_p_mu2;
  out.disc_z2 = disc_z2;
  if (stage == Stage::two) {
    out.log_p_mu1 = log_p_mu1;
    out.disc_z1 = disc_z1;
  }
  out.bound = recon - klz1 - klz2 + out.log_p_mu2 / n_i + out.log_p_mu1 / s_l;
  out.total = out.bound + h.alpha_z1 * out.disc_z1 + h.alpha_z2 * out.disc_z2;
  return out;
}

}  // namespace fhvae::obj
