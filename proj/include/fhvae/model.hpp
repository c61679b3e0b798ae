#pragma once

#include <span>
#include <vector>

#include "fhvae/objective.hpp"
#include "fhvae/seqnet.hpp"

namespace fhvae::model {

using obj::Stage;

struct ArchSpec {
  int channels = 8;
  int seg_len = 32;
  int hidden = 128;
  int layers = 2;
  int latent = 32;
};

inline void validate(const ArchSpec& a) {
  if (a.channels < 1 || a.seg_len < 1 || a.hidden < 1 || a.layers < 1 || a.latent < 1)
    throw ConfigError("arch: all dimensions must be >= 1");
}

template <class T>
struct GaussianParams {
  std::vector<T> mean, logvar;
};

// Architecture handle: parameter indices only, valid for any store produced by
// build_fhvae with the same shape arguments (float and double stores share it).
struct Fhvae {
  ArchSpec arch;
  int n_sequences = 0, n_labels = 0;
  std::vector<net::LstmRef> enc_z2, enc_z1, dec;
  net::AffineRef z2_mean_head, z2_logvar_head;
  net::AffineRef z1_mean_head, z1_logvar_head;
  net::AffineRef dec_mean_head, dec_logvar_head;
  int mu2 = -1, mu1 = -1;
};

// Registers all trainable arrays. The z1 encoder consumes [frame; z2] per
// step; the decoder consumes [z1; z2] at every step. Encoder heads read the
// concatenated last-step states of all stack layers.
template <class T>
Fhvae build_fhvae(const ArchSpec& arch, int n_sequences, int n_labels,
                  net::ParamStore<T>& store) {
  validate(arch);
  if (n_sequences < 1 || n_labels < 1)
    throw ConfigError("model: need at least one sequence and one content label");
  Fhvae m;
  m.arch = arch;
  m.n_sequences = n_sequences;
  m.n_labels = n_labels;
  const int H = arch.hidden;
  const int L = arch.latent;
  for (int k = 0; k < arch.layers; ++k) {
    int in = k == 0 ? arch.channels : H;
    m.enc_z2.push_back(net::add_lstm(store, "enc_z2.l" + std::to_string(k), in, H));
  }
  for (int k = 0; k < arch.layers; ++k) {
    int in = k == 0 ? arch.channels + L : H;
    m.enc_z1.push_back(net::add_lstm(store, "enc_z1.l" + std::to_string(k), in, H));
  }
  for (int k = 0; k < arch.layers; ++k) {
    int in = k == 0 ? 2 * L : H;
    m.dec.push_back(net::add_lstm(store, "dec.l" + std::to_string(k), in, H));
  }
  const int concat = arch.layers * H;
  m.z2_mean_head = net::add_affine(store, "enc_z2.mean", concat, L);
  m.z2_logvar_head = net::add_affine(store, "enc_z2.logvar", concat, L);
  m.z1_mean_head = net::add_affine(store, "enc_z1.mean", concat, L);
  m.z1_logvar_head = net::add_affine(store, "enc_z1.logvar", concat, L);
  m.dec_mean_head = net::add_affine(store, "dec.mean", H, arch.channels);
  m.dec_logvar_head = net::add_affine(store, "dec.logvar", H, arch.channels);
  m.mu2 = store.add("mu2_table", n_sequences, L, net::ParamKind::table);
  m.mu1 = store.add("mu1_table", n_labels, L, net::ParamKind::table);
  return m;
}

template <class T>
GaussianParams<T> encode_z2(const Fhvae& m, const net::ParamStore<T>& p, const Mat<T>& x) {
  require_dim(static_cast<int>(x.cols()) == m.arch.channels, "encode_z2: channel count");
  auto out = net::stacked_forward(p, m.enc_z2, x);
  GaussianParams<T> g;
  g.mean = net::affine(p, m.z2_mean_head, std::span<const T>(out.last_concat));
  g.logvar = net::affine(p, m.z2_logvar_head, std::span<const T>(out.last_concat));
  return g;
}

template <class T>
GaussianParams<T> encode_z1(const Fhvae& m, const net::ParamStore<T>& p, const Mat<T>& x,
                            std::span<const T> z2) {
  require_dim(static_cast<int>(x.cols()) == m.arch.channels, "encode_z1: channel count");
  require_dim(static_cast<int>(z2.size()) == m.arch.latent, "encode_z1: z2 length");
  Mat<T> xz(x.rows(), x.cols() + z2.size());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    T* r = xz.row(t);
    for (std::size_t c = 0; c < x.cols(); ++c) r[c] = x.at(t, c);
    for (std::size_t d = 0; d < z2.size(); ++d) r[x.cols() + d] = z2[d];
  }
  auto out = net::stacked_forward(p, m.enc_z1, xz);
  GaussianParams<T> g;
  g.mean = net::affine(p, m.z1_mean_head, std::span<const T>(out.last_concat));
  g.logvar = net::affine(p, m.z1_logvar_head, std::span<const T>(out.last_concat));
  return g;
}

// mean + exp(logvar / 2) * eps
template <class T>
std::vector<T> sample_latent(const GaussianParams<T>& g, std::span<const T> eps) {
  require_dim(g.mean.size() == g.logvar.size() && eps.size() == g.mean.size(),
              "sample_latent: length mismatch");
  std::vector<T> z(g.mean.size());
  for (std::size_t d = 0; d < z.size(); ++d)
    z[d] = g.mean[d] + std::exp(g.logvar[d] / T(2)) * eps[d];
  return z;
}

template <class T>
std::vector<GaussianParams<T>> decode(const Fhvae& m, const net::ParamStore<T>& p,
                                      std::span<const T> z1, std::span<const T> z2, int steps) {
  const int L = m.arch.latent;
  require_dim(static_cast<int>(z1.size()) == L && static_cast<int>(z2.size()) == L,
              "decode: latent lengths");
  require_dim(steps >= 1, "decode: steps must be >= 1");
  Mat<T> in(steps, 2 * L);
  for (int t = 0; t < steps; ++t) {
    T* r = in.row(t);
    for (int d = 0; d < L; ++d) r[d] = z1[d];
    for (int d = 0; d < L; ++d) r[L + d] = z2[d];
  }
  auto out = net::stacked_forward(p, m.dec, in);
  std::vector<GaussianParams<T>> preds(steps);
  for (int t = 0; t < steps; ++t) {
    preds[t].mean = net::affine<T>(p, m.dec_mean_head, out.top.row_span(t));
    preds[t].logvar = net::affine<T>(p, m.dec_logvar_head, out.top.row_span(t));
  }
  return preds;
}

// Sum over frames and channels of the diagonal-Gaussian log density of x
// under the per-frame predictions.
template <class T>
T reconstruction_log_likelihood(const Mat<T>& x, const std::vector<GaussianParams<T>>& pred) {
  require_dim(x.rows() == pred.size(), "reconstruction_log_likelihood: frame count");
  T acc = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    require_dim(pred[t].mean.size() == x.cols() && pred[t].logvar.size() == x.cols(),
                "reconstruction_log_likelihood: channel count");
    for (std::size_t c = 0; c < x.cols(); ++c) {
      T lv = pred[t].logvar[c];
      T d = x.at(t, c) - pred[t].mean[c];
      acc += T(-0.5) * T(obj::kLog2Pi) - T(0.5) * lv - d * d / (T(2) * std::exp(lv));
    }
  }
  return acc;
}

// ---- batched training objective ----

// One minibatch of segments with everything the objective needs. eps1/eps2
// are explicit so the loss is a deterministic function of the parameters
// (finite differences and validation evaluation rely on that).
template <class T>
struct SegmentBatch {
  std::vector<Mat<T>> frames;     // seg_len entries, each B x C
  std::vector<int> seq_row;       // B, row into mu2 table
  std::vector<int> label_row;     // B, row into mu1 table
  std::vector<T> inv_n_train;     // B, 1 / N(i)
  std::vector<T> inv_s_label;     // B, 1 / S(l)
  Mat<T> eps1, eps2;              // B x latent
  std::vector<int> z1_candidates; // candidate mu1 rows (stage two)

  std::size_t batch() const { return seq_row.size(); }
};

// Batch means of the objective components, accumulated in double.
struct BatchStats {
  double recon = 0, kl_z1 = 0, kl_z2 = 0;
  double log_p_mu1 = 0, log_p_mu2 = 0;  // already weighted by 1/S, 1/N
  double disc_z1 = 0, disc_z2 = 0;
  double bound = 0, total = 0;

  void scale(double s) {
    recon *= s; kl_z1 *= s; kl_z2 *= s;
    log_p_mu1 *= s; log_p_mu2 *= s;
    disc_z1 *= s; disc_z2 *= s;
    bound *= s; total *= s;
  }
  void accumulate(const BatchStats& o, double w) {
    recon += o.recon * w; kl_z1 += o.kl_z1 * w; kl_z2 += o.kl_z2 * w;
    log_p_mu1 += o.log_p_mu1 * w; log_p_mu2 += o.log_p_mu2 * w;
    disc_z1 += o.disc_z1 * w; disc_z2 += o.disc_z2 * w;
    bound += o.bound * w; total += o.total * w;
  }
};

// Evaluates the mean discriminative segment bound over the batch; when grads
// is non-null also accumulates d(-mean total)/d theta, the quantity the
// trainer minimizes.
template <class T>
BatchStats batch_objective(const Fhvae& m, const net::ParamStore<T>& p,
                           const SegmentBatch<T>& batch, const obj::HyperConfig& h, Stage stage,
                           net::ParamStore<T>* grads);

// DifferentiableLoss adapter over one batch: value() is -mean(total).
template <class T>
struct BatchObjectiveLoss final : net::DifferentiableLoss<T> {
  const Fhvae* model;
  const SegmentBatch<T>* batch;
  const obj::HyperConfig* hyper;
  Stage stage;

  BatchObjectiveLoss(const Fhvae& m, const SegmentBatch<T>& b, const obj::HyperConfig& h,
                     Stage s)
      : model(&m), batch(&b), hyper(&h), stage(s) {}

  T value(const net::ParamStore<T>& params) const override {
    return static_cast<T>(-batch_objective<T>(*model, params, *batch, *hyper, stage, nullptr).total);
  }
  void add_gradients(const net::ParamStore<T>& params,
                     net::ParamStore<T>& grads) const override {
    batch_objective<T>(*model, params, *batch, *hyper, stage, &grads);
  }
};

// ---- implementation ----

namespace detail {

// d(-mean total)/d z contributions from one discriminative log-softmax term;
// returns the log prob. dz and the table gradient rows receive
// -weight * d(log softmax)/d(.).
template <class T>
T disc_backward(std::span<const T> z, const Mat<T>& table, int row, T sigma2,
                std::span<const int> candidates, T weight, T* dz, Mat<T>* dtable) {
  const std::size_t L = z.size();
  T inv = T(1) / (T(2) * sigma2);
  std::vector<T> logits(candidates.size());
  T max_logit = -std::numeric_limits<T>::infinity();
  std::size_t row_pos = candidates.size();
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    logits[j] = -kern::sqdist(z.data(), table.row(candidates[j]), L) * inv;
    max_logit = std::max(max_logit, logits[j]);
    if (candidates[j] == row) row_pos = j;
  }
  if (row_pos == candidates.size())
    throw DataError("discriminative term: segment label not in candidate set");
  T denom = 0;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    logits[j] = std::exp(logits[j] - max_logit);  // now softmax numerators
    denom += logits[j];
  }
  T log_prob = std::log(logits[row_pos] / denom);
  if (dz != nullptr) {
    // d logprob/d logit_j = delta_{j,row} - s_j;  d logit_j/dz = -(z - mu_j)/sigma2;
    // d logit_j/d mu_j = (z - mu_j)/sigma2.  Loss carries -weight * logprob.
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      T coeff = (j == row_pos ? T(1) : T(0)) - logits[j] / denom;
      const T* mu = table.row(candidates[j]);
      T gz = weight * coeff / sigma2;
      for (std::size_t d = 0; d < L; ++d) {
        T diff = z[d] - mu[d];
        dz[d] += gz * diff;
        if (dtable != nullptr) dtable->at(candidates[j], d) += -gz * diff;
      }
    }
  }
  return log_prob;
}

}  // namespace detail

template <class T>
BatchStats batch_objective(const Fhvae& m, const net::ParamStore<T>& p,
                           const SegmentBatch<T>& batch, const obj::HyperConfig& h, Stage stage,
                           net::ParamStore<T>* grads) {
  const std::size_t B = batch.batch();
  const int C = m.arch.channels;
  const int L = m.arch.latent;
  const std::size_t steps = batch.frames.size();
  require_dim(B >= 1, "batch_objective: empty batch");
  require_dim(static_cast<int>(steps) == m.arch.seg_len, "batch_objective: frame count");
  require_dim(batch.eps1.rows() == B && batch.eps1.cols() == static_cast<std::size_t>(L) &&
                  batch.eps2.rows() == B && batch.eps2.cols() == static_cast<std::size_t>(L),
              "batch_objective: eps shape");
  for (const auto& f : batch.frames)
    require_dim(f.rows() == B && f.cols() == static_cast<std::size_t>(C),
                "batch_objective: frame shape");
  const Mat<T>& mu2_table = p[m.mu2];
  const Mat<T>& mu1_table = p[m.mu1];
  const T s2_z1 = static_cast<T>(h.sigma2_z1);
  const T s2_z2 = static_cast<T>(h.sigma2_z2);

  // ---- forward: z2 encoder ----
  std::vector<const Mat<T>*> xs2(steps);
  for (std::size_t t = 0; t < steps; ++t) xs2[t] = &batch.frames[t];
  net::StackCache<T> cache_z2;
  net::stack_forward(p, m.enc_z2, std::span<const Mat<T>* const>(xs2), cache_z2);
  Mat<T> concat2 = net::last_step_concat(cache_z2);
  Mat<T> z2_mu, z2_lv;
  net::affine_forward(p, m.z2_mean_head, concat2, z2_mu);
  net::affine_forward(p, m.z2_logvar_head, concat2, z2_lv);
  Mat<T> z2(B, L);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (int d = 0; d < L; ++d)
      z2.at(bi, d) = z2_mu.at(bi, d) + std::exp(z2_lv.at(bi, d) / T(2)) * batch.eps2.at(bi, d);

  // ---- forward: z1 encoder over [frame; z2] ----
  std::vector<Mat<T>> xz(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    xz[t].resize(B, C + L);
    for (std::size_t bi = 0; bi < B; ++bi) {
      T* r = xz[t].row(bi);
      const T* f = batch.frames[t].row(bi);
      for (int c = 0; c < C; ++c) r[c] = f[c];
      const T* zr = z2.row(bi);
      for (int d = 0; d < L; ++d) r[C + d] = zr[d];
    }
  }
  std::vector<const Mat<T>*> xs1(steps);
  for (std::size_t t = 0; t < steps; ++t) xs1[t] = &xz[t];
  net::StackCache<T> cache_z1;
  net::stack_forward(p, m.enc_z1, std::span<const Mat<T>* const>(xs1), cache_z1);
  Mat<T> concat1 = net::last_step_concat(cache_z1);
  Mat<T> z1_mu, z1_lv;
  net::affine_forward(p, m.z1_mean_head, concat1, z1_mu);
  net::affine_forward(p, m.z1_logvar_head, concat1, z1_lv);
  Mat<T> z1(B, L);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (int d = 0; d < L; ++d)
      z1.at(bi, d) = z1_mu.at(bi, d) + std::exp(z1_lv.at(bi, d) / T(2)) * batch.eps1.at(bi, d);

  // ---- forward: decoder over [z1; z2] ----
  Mat<T> dec_in(B, 2 * L);
  for (std::size_t bi = 0; bi < B; ++bi) {
    T* r = dec_in.row(bi);
    for (int d = 0; d < L; ++d) r[d] = z1.at(bi, d);
    for (int d = 0; d < L; ++d) r[L + d] = z2.at(bi, d);
  }
  std::vector<const Mat<T>*> xsd(steps, &dec_in);
  net::StackCache<T> cache_dec;
  net::stack_forward(p, m.dec, std::span<const Mat<T>* const>(xsd), cache_dec);
  std::vector<Mat<T>> pred_mu(steps), pred_lv(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    net::affine_forward(p, m.dec_mean_head, cache_dec.hidden.back()[t], pred_mu[t]);
    net::affine_forward(p, m.dec_logvar_head, cache_dec.hidden.back()[t], pred_lv[t]);
  }

  // ---- per-segment scalar terms ----
  BatchStats stats;
  std::vector<T> recon_b(B, T(0)), klz1_b(B, T(0)), klz2_b(B, T(0));
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t bi = 0; bi < B; ++bi) {
      const T* xr = batch.frames[t].row(bi);
      const T* mr = pred_mu[t].row(bi);
      const T* lr = pred_lv[t].row(bi);
      T acc = 0;
      for (int c = 0; c < C; ++c) {
        T d = xr[c] - mr[c];
        acc += T(-0.5) * T(obj::kLog2Pi) - T(0.5) * lr[c] - d * d / (T(2) * std::exp(lr[c]));
      }
      recon_b[bi] += acc;
    }
  }
  const T log_s2_z1 = std::log(s2_z1);
  const T log_s2_z2 = std::log(s2_z2);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* qm2 = z2_mu.row(bi);
    const T* ql2 = z2_lv.row(bi);
    const T* pm2 = mu2_table.row(batch.seq_row[bi]);
    T acc2 = 0;
    for (int d = 0; d < L; ++d) {
      T delta = qm2[d] - pm2[d];
      acc2 += T(0.5) * log_s2_z2 - T(0.5) * ql2[d] +
              (std::exp(ql2[d]) + delta * delta) / (T(2) * s2_z2) - T(0.5);
    }
    klz2_b[bi] = acc2;
    const T* qm1 = z1_mu.row(bi);
    const T* ql1 = z1_lv.row(bi);
    const T* pm1 = stage == Stage::two ? mu1_table.row(batch.label_row[bi]) : nullptr;
    T acc1 = 0;
    for (int d = 0; d < L; ++d) {
      T delta = qm1[d] - (pm1 != nullptr ? pm1[d] : T(0));
      acc1 += T(0.5) * log_s2_z1 - T(0.5) * ql1[d] +
              (std::exp(ql1[d]) + delta * delta) / (T(2) * s2_z1) - T(0.5);
    }
    klz1_b[bi] = acc1;
  }

  const T scale = T(1) / static_cast<T>(B);  // gradient of the batch mean
  Mat<T> dz1(B, L), dz2(B, L);
  Mat<T>* dmu1 = grads != nullptr ? &(*grads)[m.mu1] : nullptr;
  Mat<T>* dmu2 = grads != nullptr ? &(*grads)[m.mu2] : nullptr;

  std::vector<int> all_sequences(mu2_table.rows());
  for (std::size_t j = 0; j < all_sequences.size(); ++j) all_sequences[j] = static_cast<int>(j);

  for (std::size_t bi = 0; bi < B; ++bi) {
    T disc2 = detail::disc_backward<T>(z2.row_span(bi), mu2_table, batch.seq_row[bi], s2_z2,
                                       all_sequences, static_cast<T>(h.alpha_z2) * scale,
                                       grads != nullptr ? dz2.row(bi) : nullptr, dmu2);
    T disc1 = 0;
    if (stage == Stage::two) {
      disc1 = detail::disc_backward<T>(z1.row_span(bi), mu1_table, batch.label_row[bi], s2_z1,
                                       std::span<const int>(batch.z1_candidates),
                                       static_cast<T>(h.alpha_z1) * scale,
                                       grads != nullptr ? dz1.row(bi) : nullptr, dmu1);
    }
    T lpm2 = obj::log_gaussian_prior(mu2_table.row_span(batch.seq_row[bi]),
                                     static_cast<T>(h.sigma2_mu2));
    T lpm1 = 0;
    if (stage == Stage::two)
      lpm1 = obj::log_gaussian_prior(mu1_table.row_span(batch.label_row[bi]),
                                     static_cast<T>(h.sigma2_mu1));
    T w_lpm2 = batch.inv_n_train[bi] * lpm2;
    T w_lpm1 = stage == Stage::two ? batch.inv_s_label[bi] * lpm1 : T(0);
    T bound = recon_b[bi] - klz1_b[bi] - klz2_b[bi] + w_lpm2 + w_lpm1;
    T total = bound + static_cast<T>(h.alpha_z2) * disc2 +
              (stage == Stage::two ? static_cast<T>(h.alpha_z1) * disc1 : T(0));
    stats.recon += recon_b[bi];
    stats.kl_z1 += klz1_b[bi];
    stats.kl_z2 += klz2_b[bi];
    stats.log_p_mu2 += w_lpm2;
    stats.log_p_mu1 += w_lpm1;
    stats.disc_z2 += disc2;
    stats.disc_z1 += disc1;
    stats.bound += bound;
    stats.total += total;
    if (grads != nullptr) {
      // prior terms: d(-total)/d mu = inv_count * mu / sigma2_mu, scaled by 1/B
      T* g2 = dmu2->row(batch.seq_row[bi]);
      const T* r2 = mu2_table.row(batch.seq_row[bi]);
      T c2 = scale * batch.inv_n_train[bi] / static_cast<T>(h.sigma2_mu2);
      for (int d = 0; d < L; ++d) g2[d] += c2 * r2[d];
      if (stage == Stage::two) {
        T* g1 = dmu1->row(batch.label_row[bi]);
        const T* r1 = mu1_table.row(batch.label_row[bi]);
        T c1 = scale * batch.inv_s_label[bi] / static_cast<T>(h.sigma2_mu1);
        for (int d = 0; d < L; ++d) g1[d] += c1 * r1[d];
      }
    }
  }
  stats.scale(1.0 / static_cast<double>(B));

  if (grads == nullptr) return stats;

  // ---- backward ----
  // Everything below accumulates d(-mean total)/d theta.

  // decoder heads and stack
  std::vector<Mat<T>> dtop_dec(steps);
  Mat<T> ddec_in(B, 2 * L);
  for (std::size_t t = 0; t < steps; ++t) {
    Mat<T> dmu_t(B, C), dlv_t(B, C);
    for (std::size_t bi = 0; bi < B; ++bi) {
      const T* xr = batch.frames[t].row(bi);
      const T* mr = pred_mu[t].row(bi);
      const T* lr = pred_lv[t].row(bi);
      T* gm = dmu_t.row(bi);
      T* gl = dlv_t.row(bi);
      for (int c = 0; c < C; ++c) {
        T inv_var = std::exp(-lr[c]);
        T d = xr[c] - mr[c];
        gm[c] = -scale * d * inv_var;
        gl[c] = -scale * (T(-0.5) + d * d * inv_var / T(2));
      }
    }
    dtop_dec[t].resize(B, m.arch.hidden);
    net::affine_backward(p, m.dec_mean_head, cache_dec.hidden.back()[t], dmu_t, *grads,
                         &dtop_dec[t]);
    net::affine_backward(p, m.dec_logvar_head, cache_dec.hidden.back()[t], dlv_t, *grads,
                         &dtop_dec[t]);
  }
  net::stack_backward<T>(p, m.dec, cache_dec, &dtop_dec, nullptr, *grads, &ddec_in);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* r = ddec_in.row(bi);
    for (int d = 0; d < L; ++d) dz1.at(bi, d) += r[d];
    for (int d = 0; d < L; ++d) dz2.at(bi, d) += r[L + d];
  }

  // z1 posterior: KL gradient on the posterior parameters, reparameterized
  // sample gradient, then heads and stack.
  Mat<T> dz1_mu(B, L), dz1_lv(B, L);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* qm1 = z1_mu.row(bi);
    const T* ql1 = z1_lv.row(bi);
    const T* pm1 = stage == Stage::two ? mu1_table.row(batch.label_row[bi]) : nullptr;
    T* gm = dz1_mu.row(bi);
    T* gl = dz1_lv.row(bi);
    const T* dzr = dz1.row(bi);
    for (int d = 0; d < L; ++d) {
      T delta = qm1[d] - (pm1 != nullptr ? pm1[d] : T(0));
      gm[d] = dzr[d] + scale * delta / s2_z1;
      gl[d] = dzr[d] * std::exp(ql1[d] / T(2)) * batch.eps1.at(bi, d) / T(2) +
              scale * (T(-0.5) + std::exp(ql1[d]) / (T(2) * s2_z1));
      if (pm1 != nullptr) dmu1->at(batch.label_row[bi], d) += -scale * delta / s2_z1;
    }
  }
  Mat<T> dconcat1(B, concat1.cols());
  net::affine_backward(p, m.z1_mean_head, concat1, dz1_mu, *grads, &dconcat1);
  net::affine_backward(p, m.z1_logvar_head, concat1, dz1_lv, *grads, &dconcat1);
  Mat<T> dxz(B, C + L);
  net::stack_backward<T>(p, m.enc_z1, cache_z1, nullptr, &dconcat1, *grads, &dxz);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* r = dxz.row(bi);
    for (int d = 0; d < L; ++d) dz2.at(bi, d) += r[C + d];
  }

  // z2 posterior
  Mat<T> dz2_mu(B, L), dz2_lv(B, L);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* qm2 = z2_mu.row(bi);
    const T* ql2 = z2_lv.row(bi);
    const T* pm2 = mu2_table.row(batch.seq_row[bi]);
    T* gm = dz2_mu.row(bi);
    T* gl = dz2_lv.row(bi);
    const T* dzr = dz2.row(bi);
    for (int d = 0; d < L; ++d) {
      T delta = qm2[d] - pm2[d];
      gm[d] = dzr[d] + scale * delta / s2_z2;
      gl[d] = dzr[d] * std::exp(ql2[d] / T(2)) * batch.eps2.at(bi, d) / T(2) +
              scale * (T(-0.5) + std::exp(ql2[d]) / (T(2) * s2_z2));
      dmu2->at(batch.seq_row[bi], d) += -scale * delta / s2_z2;
    }
  }
  Mat<T> dconcat2(B, concat2.cols());
  net::affine_backward(p, m.z2_mean_head, concat2, dz2_mu, *grads, &dconcat2);
  net::affine_backward(p, m.z2_logvar_head, concat2, dz2_lv, *grads, &dconcat2);
  net::stack_backward<T>(p, m.enc_z2, cache_z2, nullptr, &dconcat2, *grads, nullptr);

  return stats;
}

}  // namespace fhvae::model
