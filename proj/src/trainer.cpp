#include "fhvae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "fhvae/error.hpp"
#include "fhvae/io.hpp"

namespace fhvae::train {

void validate(const StageConfig& cfg) {
  if (cfg.stage != 1 && cfg.stage != 2) throw ConfigError("train: stage must be 1 or 2");
  if (cfg.stage == 1 && cfg.alpha_z1 != 0.0)
    throw ConfigError("train: stage 1 requires alpha_z1 = 0");
  if (cfg.labels_per_batch < 1) throw ConfigError("train: K must be >= 1");
  if (cfg.minibatch_size < 1) throw ConfigError("train: minibatch_size must be >= 1");
  if (cfg.max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (cfg.patience < 1 || cfg.patience > cfg.max_epochs)
    throw ConfigError("train: patience must be in [1, max_epochs]");
  if (!(cfg.learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
}

AdamState AdamState::like(const net::ParamStore<float>& params, const AdamConfig& cfg) {
  AdamState s;
  s.cfg = cfg;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params[i].rows(), params[i].cols());
    s.v.emplace_back(params[i].rows(), params[i].cols());
  }
  return s;
}

void adam_step(net::ParamStore<float>& params, const net::ParamStore<float>& grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: store size mismatch");
  if (!grads.all_finite()) throw NumericError("adam_step: non-finite gradient, step rejected");
  state.t += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* th = params[i].data();
    const float* g = grads[i].data();
    float* mm = state.m[i].data();
    float* vv = state.v[i].data();
    const std::size_t n = params[i].size();
    for (std::size_t j = 0; j < n; ++j) {
      double gj = g[j];
      double mj = b1 * mm[j] + (1.0 - b1) * gj;
      double vj = b2 * vv[j] + (1.0 - b2) * gj * gj;
      mm[j] = static_cast<float>(mj);
      vv[j] = static_cast<float>(vj);
      double m_hat = mj / corr1;
      double v_hat = vj / corr2;
      th[j] = static_cast<float>(th[j] - lr * m_hat / (std::sqrt(v_hat) + state.cfg.eps));
    }
  }
}

LabelBatch hierarchical_sample_batch(const corpus::Dataset& ds, int k, Rng& rng) {
  if (ds.train_labels.empty()) throw DataError("hierarchical_sample_batch: no training data");
  if (k < 1) throw ConfigError("hierarchical_sample_batch: K must be >= 1");
  const int n_labels = static_cast<int>(ds.train_labels.size());
  const int take = std::min(k, n_labels);
  // Partial Fisher-Yates over a scratch copy: first `take` entries are a
  // uniform draw without replacement.
  std::vector<int> pool = ds.train_labels;
  for (int i = 0; i < take; ++i) {
    int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_labels - i)));
    std::swap(pool[i], pool[j]);
  }
  LabelBatch out;
  out.labels.assign(pool.begin(), pool.begin() + take);
  std::sort(out.labels.begin(), out.labels.end());
  for (int label : out.labels)
    for (int seg : ds.train_segments_of_label[label]) out.segments.push_back(seg);
  return out;
}

model::SegmentBatch<float> make_segment_batch(const corpus::Dataset& ds,
                                              const std::vector<int>& segment_ids,
                                              int latent_dim) {
  model::SegmentBatch<float> batch;
  const std::size_t B = segment_ids.size();
  const int C = ds.segments.channels;
  const int T = ds.segments.seg_len;
  batch.frames.assign(T, Mat<float>(B, C));
  batch.seq_row.resize(B);
  batch.label_row.resize(B);
  batch.inv_n_train.resize(B);
  batch.inv_s_label.resize(B);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const int seg = segment_ids[bi];
    const float* src = ds.segments.seg(seg);
    for (int t = 0; t < T; ++t) {
      float* dst = batch.frames[t].row(bi);
      for (int c = 0; c < C; ++c) dst[c] = src[t * C + c];
    }
    const int seq = ds.segments.sequence_id[seg];
    const int label = ds.segments.label[seg];
    batch.seq_row[bi] = seq;
    batch.label_row[bi] = label;
    batch.inv_n_train[bi] = 1.0f / static_cast<float>(std::max(1, ds.train_count_per_sequence[seq]));
    batch.inv_s_label[bi] = 1.0f / static_cast<float>(std::max(1, ds.labels.occurrences[label]));
  }
  batch.eps1.resize(B, latent_dim);
  batch.eps2.resize(B, latent_dim);
  return batch;
}

namespace {

void fill_eps(Mat<float>& eps, Rng& rng) {
  for (std::size_t i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<float>(rng.normal());
}

// Per-segment eps keyed by segment id: evaluation draws are independent of
// chunking and identical across calls.
void fill_eval_eps(model::SegmentBatch<float>& batch, const std::vector<int>& segment_ids,
                   std::uint64_t eval_seed) {
  for (std::size_t bi = 0; bi < segment_ids.size(); ++bi) {
    Rng rng(eval_seed, stream::kEvalEps, static_cast<std::uint64_t>(segment_ids[bi]));
    for (std::size_t d = 0; d < batch.eps1.cols(); ++d)
      batch.eps1.at(bi, d) = static_cast<float>(rng.normal());
    for (std::size_t d = 0; d < batch.eps2.cols(); ++d)
      batch.eps2.at(bi, d) = static_cast<float>(rng.normal());
  }
}

constexpr int kEvalChunk = 256;

}  // namespace

namespace {

// Content labels outside the training split have no trained mu1 row. For
// stage-two evaluation their prior means are MAP-inferred from the z1
// posterior means of the evaluated segments, the same treatment this model
// family gives unseen sequences at test time: sum(qm) / (S + sigma2_z1 /
// sigma2_mu1). Deterministic given parameters.
void infer_unseen_mu1_rows(const model::Fhvae& m, net::ParamStore<float>& params,
                           const corpus::Dataset& ds, const std::vector<int>& segment_ids,
                           const obj::HyperConfig& hyper) {
  bool any_unseen = false;
  for (int seg : segment_ids)
    if (ds.train_segments_of_label[ds.segments.label[seg]].empty()) any_unseen = true;
  if (!any_unseen) return;

  std::vector<int> count(static_cast<std::size_t>(m.n_labels), 0);
  Mat<double> sum(static_cast<std::size_t>(m.n_labels), static_cast<std::size_t>(m.arch.latent));
  for (std::size_t begin = 0; begin < segment_ids.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(segment_ids.size(), begin + kEvalChunk);
    std::vector<int> chunk(segment_ids.begin() + begin, segment_ids.begin() + end);
    model::SegmentBatch<float> batch = make_segment_batch(ds, chunk, m.arch.latent);
    const std::size_t B = chunk.size();
    std::vector<const Mat<float>*> xs(batch.frames.size());
    for (std::size_t t = 0; t < batch.frames.size(); ++t) xs[t] = &batch.frames[t];
    net::StackCache<float> cache2;
    net::stack_forward(params, m.enc_z2, std::span<const Mat<float>* const>(xs), cache2);
    Mat<float> concat2 = net::last_step_concat(cache2);
    Mat<float> z2_mu;
    net::affine_forward(params, m.z2_mean_head, concat2, z2_mu);
    std::vector<Mat<float>> xz(batch.frames.size());
    for (std::size_t t = 0; t < batch.frames.size(); ++t) {
      xz[t].resize(B, m.arch.channels + m.arch.latent);
      for (std::size_t bi = 0; bi < B; ++bi) {
        float* r = xz[t].row(bi);
        const float* f = batch.frames[t].row(bi);
        for (int c = 0; c < m.arch.channels; ++c) r[c] = f[c];
        for (int d = 0; d < m.arch.latent; ++d) r[m.arch.channels + d] = z2_mu.at(bi, d);
      }
    }
    std::vector<const Mat<float>*> xs1(xz.size());
    for (std::size_t t = 0; t < xz.size(); ++t) xs1[t] = &xz[t];
    net::StackCache<float> cache1;
    net::stack_forward(params, m.enc_z1, std::span<const Mat<float>* const>(xs1), cache1);
    Mat<float> concat1 = net::last_step_concat(cache1);
    Mat<float> z1_mu;
    net::affine_forward(params, m.z1_mean_head, concat1, z1_mu);
    for (std::size_t bi = 0; bi < B; ++bi) {
      const int label = ds.segments.label[chunk[bi]];
      ++count[label];
      for (int d = 0; d < m.arch.latent; ++d) sum.at(label, d) += z1_mu.at(bi, d);
    }
  }
  const double shrink = hyper.sigma2_z1 / hyper.sigma2_mu1;
  Mat<float>& table = params[m.mu1];
  for (int l = 0; l < m.n_labels; ++l) {
    if (count[l] == 0 || !ds.train_segments_of_label[l].empty()) continue;
    for (int d = 0; d < m.arch.latent; ++d)
      table.at(l, d) = static_cast<float>(sum.at(l, d) / (count[l] + shrink));
  }
}

}  // namespace

double evaluate_bound(const model::Fhvae& m, const net::ParamStore<float>& params,
                      const corpus::Dataset& ds, const std::vector<int>& segment_ids,
                      const obj::HyperConfig& hyper, model::Stage stage, std::uint64_t eval_seed,
                      model::BatchStats* stats_out) {
  if (segment_ids.empty()) throw DataError("evaluate_bound: empty segment set");
  const net::ParamStore<float>* eval_params = &params;
  net::ParamStore<float> patched;
  if (stage == model::Stage::two) {
    patched = params;
    infer_unseen_mu1_rows(m, patched, ds, segment_ids, hyper);
    eval_params = &patched;
  }
  model::BatchStats acc;
  // Full candidate sets make the logged disc terms well defined for any
  // split; they stay out of the monitored bound either way.
  std::vector<int> all_labels(static_cast<std::size_t>(m.n_labels));
  for (int l = 0; l < m.n_labels; ++l) all_labels[static_cast<std::size_t>(l)] = l;
  double total_w = 0;
  for (std::size_t begin = 0; begin < segment_ids.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(segment_ids.size(), begin + kEvalChunk);
    std::vector<int> chunk(segment_ids.begin() + begin, segment_ids.begin() + end);
    model::SegmentBatch<float> batch = make_segment_batch(ds, chunk, m.arch.latent);
    fill_eval_eps(batch, chunk, eval_seed);
    if (stage == model::Stage::two) batch.z1_candidates = all_labels;
    model::BatchStats stats =
        model::batch_objective<float>(m, *eval_params, batch, hyper, stage, nullptr);
    const double w = static_cast<double>(chunk.size());
    acc.accumulate(stats, w);
    total_w += w;
  }
  acc.scale(1.0 / total_w);
  if (stats_out != nullptr) *stats_out = acc;
  return acc.bound;
}

double evaluate_validation_bound(const model::Fhvae& m, const net::ParamStore<float>& params,
                                 const corpus::Dataset& ds, const obj::HyperConfig& hyper,
                                 model::Stage stage, std::uint64_t eval_seed) {
  if (ds.val_segments.empty()) throw DataError("evaluate_validation_bound: empty validation set");
  return evaluate_bound(m, params, ds, ds.val_segments, hyper, stage, eval_seed, nullptr);
}

TrainResult train_stage(const model::Fhvae& m, net::ParamStore<float>& params,
                        const corpus::Dataset& ds, const StageConfig& cfg,
                        const obj::HyperConfig& hyper, std::ostream* progress) {
  validate(cfg);
  if (ds.train_segments.empty()) throw DataError("train_stage: empty training split");
  const model::Stage stage = cfg.stage == 1 ? model::Stage::one : model::Stage::two;
  obj::HyperConfig h = hyper;
  h.alpha_z1 = cfg.stage == 1 ? 0.0 : cfg.alpha_z1;
  h.alpha_z2 = cfg.alpha_z2;
  obj::validate(h);

  const std::uint64_t eval_seed = Rng(cfg.seed, stream::kEvalEps).next_u64();
  const int n_labels = static_cast<int>(ds.train_labels.size());
  const int super_batches =
      (n_labels + cfg.labels_per_batch - 1) / cfg.labels_per_batch;  // ceil

  AdamState adam = AdamState::like(params);
  net::ParamStore<float> grads = params.zeros_like();
  net::ParamStore<float> best = params;
  double best_bound = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int stale = 0;
  TrainResult result;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    model::BatchStats train_acc;
    double train_w = 0;
    for (int sb = 0; sb < super_batches; ++sb) {
      Rng rng(cfg.seed, stream::kBatch, static_cast<std::uint64_t>(cfg.stage),
              static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(sb));
      LabelBatch lb = hierarchical_sample_batch(ds, cfg.labels_per_batch, rng);
      rng.shuffle(lb.segments);
      for (std::size_t begin = 0, chunk_idx = 0; begin < lb.segments.size();
           begin += cfg.minibatch_size, ++chunk_idx) {
        const std::size_t end =
            std::min(lb.segments.size(), begin + static_cast<std::size_t>(cfg.minibatch_size));
        std::vector<int> ids(lb.segments.begin() + begin, lb.segments.begin() + end);
        model::SegmentBatch<float> batch = make_segment_batch(ds, ids, m.arch.latent);
        Rng eps_rng(cfg.seed, stream::kTrainEps, static_cast<std::uint64_t>(cfg.stage),
                    static_cast<std::uint64_t>(epoch),
                    (static_cast<std::uint64_t>(sb) << 20) | chunk_idx);
        fill_eps(batch.eps1, eps_rng);
        fill_eps(batch.eps2, eps_rng);
        if (stage == model::Stage::two) batch.z1_candidates = lb.labels;
        grads.zero_all();
        model::BatchStats stats = model::batch_objective(m, params, batch, h, stage, &grads);
        if (!std::isfinite(stats.total))
          throw NumericError("train_stage: non-finite training loss");
        adam_step(params, grads, adam, cfg.learning_rate);
        const double w = static_cast<double>(ids.size());
        train_acc.accumulate(stats, w);
        train_w += w;
      }
    }
    train_acc.scale(1.0 / train_w);

    model::BatchStats val_stats;
    double val_bound =
        evaluate_bound(m, params, ds, ds.val_segments, h, stage, eval_seed, &val_stats);
    result.log.push_back({epoch, "train", train_acc});
    result.log.push_back({epoch, "val", val_stats});
    if (progress != nullptr) {
      *progress << "stage " << cfg.stage << " epoch " << epoch << " train_total "
                << train_acc.total << " val_bound " << val_bound << '\n';
      progress->flush();
    }
    if (val_bound > best_bound) {
      best_bound = val_bound;
      best_epoch = epoch;
      best = params;
      stale = 0;
    } else {
      ++stale;
    }
    result.epochs_run = epoch;
    if (stale >= cfg.patience) break;
  }

  params = std::move(best);
  result.best_epoch = best_epoch;
  result.best_bound = best_bound;
  return result;
}

void write_train_log_csv(const std::vector<EpochRow>& rows, const std::string& path) {
  std::ostringstream out;
  out << "epoch,split,recon,kl_z1,kl_z2,disc_z1,disc_z2,bound,total\n";
  char buf[512];
  for (const EpochRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch,
                  r.split.c_str(), r.stats.recon, r.stats.kl_z1, r.stats.kl_z2, r.stats.disc_z1,
                  r.stats.disc_z2, r.stats.bound, r.stats.total);
    out << buf;
  }
  io::atomic_write_file(path, out.str());
}

}  // namespace fhvae::train
