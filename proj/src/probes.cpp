#include "fhvae/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "fhvae/error.hpp"
#include "fhvae/io.hpp"
#include "fhvae/rng.hpp"
#include "fhvae/trainer.hpp"

namespace fhvae::probe {

LatentTable infer_latents(const model::Fhvae& m, const net::ParamStore<float>& params,
                          const corpus::Dataset& ds) {
  LatentTable table;
  const std::size_t n = ds.segments.size();
  const int L = m.arch.latent;
  const int C = ds.segments.channels;
  const int T = ds.segments.seg_len;
  table.latent_dim = L;
  table.z1.resize(n, L);
  table.z2.resize(n, L);
  table.segment_id.resize(n);
  table.sequence_id.resize(n);
  table.subject_id.resize(n);
  table.content_label.resize(n);
  table.split.resize(n);

  constexpr std::size_t kChunk = 256;
  std::vector<int> ids;
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t end = std::min(n, begin + kChunk);
    ids.clear();
    for (std::size_t i = begin; i < end; ++i) ids.push_back(static_cast<int>(i));
    model::SegmentBatch<float> batch = train::make_segment_batch(ds, ids, L);
    const std::size_t B = ids.size();

    std::vector<const Mat<float>*> xs(T);
    for (int t = 0; t < T; ++t) xs[t] = &batch.frames[t];
    net::StackCache<float> cache2;
    net::stack_forward(params, m.enc_z2, std::span<const Mat<float>* const>(xs), cache2);
    Mat<float> concat2 = net::last_step_concat(cache2);
    Mat<float> z2_mu;
    net::affine_forward(params, m.z2_mean_head, concat2, z2_mu);

    std::vector<Mat<float>> xz(T);
    for (int t = 0; t < T; ++t) {
      xz[t].resize(B, C + L);
      for (std::size_t bi = 0; bi < B; ++bi) {
        float* r = xz[t].row(bi);
        const float* f = batch.frames[t].row(bi);
        for (int c = 0; c < C; ++c) r[c] = f[c];
        for (int d = 0; d < L; ++d) r[C + d] = z2_mu.at(bi, d);
      }
    }
    std::vector<const Mat<float>*> xs1(T);
    for (int t = 0; t < T; ++t) xs1[t] = &xz[t];
    net::StackCache<float> cache1;
    net::stack_forward(params, m.enc_z1, std::span<const Mat<float>* const>(xs1), cache1);
    Mat<float> concat1 = net::last_step_concat(cache1);
    Mat<float> z1_mu;
    net::affine_forward(params, m.z1_mean_head, concat1, z1_mu);

    for (std::size_t bi = 0; bi < B; ++bi) {
      const std::size_t i = begin + bi;
      table.segment_id[i] = static_cast<int>(i);
      table.sequence_id[i] = ds.segments.sequence_id[i];
      table.subject_id[i] = ds.segments.subject_id[i];
      table.content_label[i] = ds.segments.label[i];
      table.split[i] = ds.split[i];
      for (int d = 0; d < L; ++d) {
        table.z1.at(i, d) = z1_mu.at(bi, d);
        table.z2.at(i, d) = z2_mu.at(bi, d);
      }
    }
  }
  return table;
}

// ---- softmax probe ----

ProbeResult train_softmax_probe(const Mat<float>& features, const std::vector<int>& labels,
                                const std::vector<corpus::Split>& split, int n_classes,
                                const SubjectProbeConfig& cfg) {
  if (n_classes < 2) throw ConfigError("softmax probe: need at least two classes");
  const std::size_t n = features.rows();
  if (labels.size() != n || split.size() != n)
    throw DimensionError("softmax probe: row count mismatch");
  const int D = static_cast<int>(features.cols());

  std::vector<int> train_ids, val_ids, test_ids;
  for (std::size_t i = 0; i < n; ++i) {
    switch (split[i]) {
      case corpus::Split::train: train_ids.push_back(static_cast<int>(i)); break;
      case corpus::Split::val: val_ids.push_back(static_cast<int>(i)); break;
      case corpus::Split::test: test_ids.push_back(static_cast<int>(i)); break;
    }
  }
  if (train_ids.empty() || val_ids.empty() || test_ids.empty())
    throw DataError("softmax probe: every split must be non-empty");

  net::ParamStore<float> params;
  net::AffineRef head = net::add_affine(params, "probe", D, n_classes);
  net::ParamStore<float> grads = params.zeros_like();
  train::AdamState adam = train::AdamState::like(params);

  auto accuracy_on = [&](const std::vector<int>& ids) {
    std::size_t hits = 0;
    std::vector<float> logits(n_classes);
    for (int i : ids) {
      const float* x = features.row(i);
      int arg = 0;
      float best = -std::numeric_limits<float>::infinity();
      for (int k = 0; k < n_classes; ++k) {
        float v = kern::dot(params[head.w].row(k), x, D) + params[head.b].at(0, k);
        if (v > best) {
          best = v;
          arg = k;
        }
      }
      hits += arg == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(ids.size());
  };

  net::ParamStore<float> best_params = params;
  double best_val = -1;
  int stale = 0;
  Rng shuffle_rng(cfg.seed, stream::kProbe, 1);
  std::vector<int> order = train_ids;
  std::vector<float> probs(n_classes);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.minibatch)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.minibatch));
      const float scale = 1.0f / static_cast<float>(end - begin);
      grads.zero_all();
      for (std::size_t ii = begin; ii < end; ++ii) {
        const int i = order[ii];
        const float* x = features.row(i);
        float maxv = -std::numeric_limits<float>::infinity();
        for (int k = 0; k < n_classes; ++k) {
          probs[k] = kern::dot(params[head.w].row(k), x, D) + params[head.b].at(0, k);
          maxv = std::max(maxv, probs[k]);
        }
        float denom = 0;
        for (int k = 0; k < n_classes; ++k) {
          probs[k] = std::exp(probs[k] - maxv);
          denom += probs[k];
        }
        for (int k = 0; k < n_classes; ++k) {
          float g = (probs[k] / denom - (k == labels[i] ? 1.0f : 0.0f)) * scale;
          kern::axpy(g, x, grads[head.w].row(k), D);
          grads[head.b].at(0, k) += g;
        }
      }
      train::adam_step(params, grads, adam, cfg.learning_rate);
    }
    double val_acc = accuracy_on(val_ids);
    if (val_acc > best_val) {
      best_val = val_acc;
      best_params = params;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  params = best_params;

  ProbeResult result;
  result.n_classes = n_classes;
  result.chance = 1.0 / n_classes;
  result.accuracy = accuracy_on(test_ids);
  result.per_class.assign(n_classes, 0.0);
  std::vector<int> class_total(n_classes, 0), class_hit(n_classes, 0);
  for (int i : test_ids) {
    const float* x = features.row(i);
    int arg = 0;
    float best = -std::numeric_limits<float>::infinity();
    for (int k = 0; k < n_classes; ++k) {
      float v = kern::dot(params[head.w].row(k), x, D) + params[head.b].at(0, k);
      if (v > best) {
        best = v;
        arg = k;
      }
    }
    ++class_total[labels[i]];
    if (arg == labels[i]) ++class_hit[labels[i]];
  }
  for (int k = 0; k < n_classes; ++k)
    result.per_class[k] =
        class_total[k] > 0 ? static_cast<double>(class_hit[k]) / class_total[k] : 0.0;
  return result;
}

ProbeResult train_subject_probe(const LatentTable& latents, Space space,
                                const SubjectProbeConfig& cfg) {
  int n_subjects = 0;
  for (int s : latents.subject_id) n_subjects = std::max(n_subjects, s + 1);
  if (n_subjects < 2) throw ConfigError("subject probe: need at least two subjects");
  const Mat<float>& feats = space == Space::z1 ? latents.z1 : latents.z2;
  return train_softmax_probe(feats, latents.subject_id, latents.split, n_subjects, cfg);
}

// ---- linear SVM ----

LinearSvm train_linear_svm(const Mat<double>& x, const std::vector<int>& y,
                           const SvmConfig& cfg) {
  const std::size_t n = x.rows();
  if (y.size() != n) throw DimensionError("svm: label count mismatch");
  bool has_pos = false, has_neg = false;
  for (int v : y) {
    if (v > 0) has_pos = true;
    if (v < 0) has_neg = true;
  }
  if (!has_pos || !has_neg) throw ConfigError("svm: both classes must be present");
  const std::size_t d = x.cols();
  std::vector<double> w(d, 0.0), w_sum(d, 0.0), g(d, 0.0);
  double b = 0, b_sum = 0;
  int averaged = 0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    double gb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double yi = y[i];
      double margin = yi * (kern::dot(w.data(), x.row(i), d) + b);
      if (margin < 1.0) {
        kern::axpy(-cfg.c_reg * yi, x.row(i), g.data(), d);
        gb += -cfg.c_reg * yi;
      }
    }
    kern::axpy(1.0, w.data(), g.data(), d);  // regularizer subgradient
    const double step = 1.0 / static_cast<double>(it);
    kern::axpy(-step, g.data(), w.data(), d);
    b -= step * gb;
    if (it > cfg.iterations / 2) {  // tail average
      kern::axpy(1.0, w.data(), w_sum.data(), d);
      b_sum += b;
      ++averaged;
    }
  }
  LinearSvm svm;
  svm.w.resize(d);
  for (std::size_t j = 0; j < d; ++j) svm.w[j] = w_sum[j] / averaged;
  svm.b = b_sum / averaged;
  return svm;
}

double svm_hinge_objective(const LinearSvm& svm, const Mat<double>& x, const std::vector<int>& y,
                           double c_reg) {
  double obj = 0.5 * kern::sumsq(svm.w.data(), svm.w.size());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double margin = y[i] * (kern::dot(svm.w.data(), x.row(i), x.cols()) + svm.b);
    obj += c_reg * std::max(0.0, 1.0 - margin);
  }
  return obj;
}

// ---- binary content evaluation ----

namespace {

struct PairTask {
  int stimulus = 0;
  int label_lo = 0, label_hi = 0;
  std::vector<int> lo_segments, hi_segments;  // test-split segment ids
};

// Stratified 5-fold rotation: per class, a seeded shuffle then fold f tests
// on block f. Depends only on (seed, stimulus, label_lo) and segment order,
// never on features, so latent and raw runs share folds exactly. Both classes
// draw the same permutation; in a parallel corpus the class lists are in the
// same recording order, so a subject's two segments rotate together.
struct FoldPlan {
  std::vector<std::vector<int>> train_ids, test_ids;  // per fold
};

FoldPlan make_folds(const PairTask& task, std::uint64_t seed) {
  FoldPlan plan;
  plan.train_ids.resize(kContentFolds);
  plan.test_ids.resize(kContentFolds);
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<int> ids = cls == 0 ? task.lo_segments : task.hi_segments;
    Rng rng(seed, stream::kFolds, static_cast<std::uint64_t>(task.stimulus),
            static_cast<std::uint64_t>(task.label_lo));
    rng.shuffle(ids);
    const std::size_t n = ids.size();
    const std::size_t base = n / kContentFolds, extra = n % kContentFolds;
    std::size_t at = 0;
    for (int f = 0; f < kContentFolds; ++f) {
      const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
      for (std::size_t i = 0; i < n; ++i) {
        const bool in_test = i >= at && i < at + len;
        (in_test ? plan.test_ids[f] : plan.train_ids[f]).push_back(ids[i]);
      }
      at += len;
    }
  }
  return plan;
}

}  // namespace

ContentEvalResult content_eval_protocol(const corpus::Dataset& ds, const void* ctx,
                                        FeatureFn features, std::uint64_t seed,
                                        const SvmConfig& svm_cfg) {
  // Group test-split segments by label, then pair adjacent labels within one
  // stimulus timeline.
  std::map<int, std::vector<int>> by_label;
  for (int i : ds.test_segments) by_label[ds.segments.label[i]].push_back(i);

  std::vector<PairTask> tasks;
  int skipped = 0;
  std::map<std::pair<int, int>, int> label_of;  // (stimulus, offset) -> label
  for (int l = 0; l < ds.labels.n_labels(); ++l) label_of[ds.labels.key[l]] = l;
  for (const auto& [label, segs] : by_label) {
    auto [stim, off] = ds.labels.key[label];
    auto next = label_of.find({stim, off + 1});
    if (next == label_of.end()) continue;  // stimulus timeline ends here
    auto hi = by_label.find(next->second);
    if (hi == by_label.end()) continue;  // successor not in the test split
    PairTask task;
    task.stimulus = stim;
    task.label_lo = label;
    task.label_hi = next->second;
    task.lo_segments = segs;
    task.hi_segments = hi->second;
    if (static_cast<int>(task.lo_segments.size()) < kMinExamplesPerClass ||
        static_cast<int>(task.hi_segments.size()) < kMinExamplesPerClass) {
      ++skipped;
      continue;
    }
    tasks.push_back(std::move(task));
  }

  ContentEvalResult result;
  result.skipped_pairs = skipped;
  if (tasks.empty()) throw DataError("content eval: no evaluable label pairs");

  std::map<int, std::vector<std::vector<double>>> stim_fold_acc;  // stimulus -> [fold] -> accs
  double total = 0;
  for (const PairTask& task : tasks) {
    FoldPlan plan = make_folds(task, seed);
    double pair_acc = 0;
    for (int f = 0; f < kContentFolds; ++f) {
      const auto& train_ids = plan.train_ids[f];
      const auto& test_ids = plan.test_ids[f];
      std::vector<double> first = features(ctx, train_ids.front());
      Mat<double> x(train_ids.size(), first.size());
      std::vector<int> y(train_ids.size());
      for (std::size_t i = 0; i < train_ids.size(); ++i) {
        std::vector<double> fv = features(ctx, train_ids[i]);
        std::copy(fv.begin(), fv.end(), x.row(i));
        y[i] = ds.segments.label[train_ids[i]] == task.label_lo ? -1 : 1;
      }
      LinearSvm svm = train_linear_svm(x, y, svm_cfg);
      std::size_t hits = 0;
      for (int id : test_ids) {
        std::vector<double> fv = features(ctx, id);
        double score = kern::dot(svm.w.data(), fv.data(), fv.size()) + svm.b;
        int pred = score >= 0 ? 1 : -1;
        int truth = ds.segments.label[id] == task.label_lo ? -1 : 1;
        hits += pred == truth ? 1 : 0;
      }
      double fold_acc = static_cast<double>(hits) / static_cast<double>(test_ids.size());
      pair_acc += fold_acc;
      auto& cells = stim_fold_acc[task.stimulus];
      if (cells.empty()) cells.resize(kContentFolds);
      cells[f].push_back(fold_acc);
    }
    pair_acc /= kContentFolds;
    result.pairs.push_back({task.stimulus, task.label_lo, task.label_hi, pair_acc});
    total += pair_acc;
  }
  result.mean_accuracy = total / static_cast<double>(result.pairs.size());
  for (const auto& [stim, cells] : stim_fold_acc) {
    for (int f = 0; f < kContentFolds; ++f) {
      double acc = std::accumulate(cells[f].begin(), cells[f].end(), 0.0);
      result.per_stimulus_fold.push_back(acc / static_cast<double>(cells[f].size()));
    }
  }
  return result;
}

namespace {

struct LatentCtx {
  const LatentTable* table;
  Space space;
};

std::vector<double> latent_features(const void* ctx, int segment_id) {
  const auto* c = static_cast<const LatentCtx*>(ctx);
  const Mat<float>& z = c->space == Space::z1 ? c->table->z1 : c->table->z2;
  std::vector<double> out(z.cols());
  for (std::size_t d = 0; d < z.cols(); ++d) out[d] = z.at(segment_id, d);
  return out;
}

std::vector<double> raw_features(const void* ctx, int segment_id) {
  const auto* ds = static_cast<const corpus::Dataset*>(ctx);
  const float* seg = ds->segments.seg(segment_id);
  std::vector<double> out(ds->segments.seg_floats());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = seg[i];
  return out;
}

}  // namespace

ContentEvalResult binary_content_eval(const LatentTable& latents, Space space,
                                      const corpus::Dataset& ds, std::uint64_t seed,
                                      const SvmConfig& svm) {
  if (latents.size() != ds.segments.size())
    throw DataError("binary_content_eval: latent table does not match dataset");
  LatentCtx ctx{&latents, space};
  return content_eval_protocol(ds, &ctx, &latent_features, seed, svm);
}

ContentEvalResult raw_baseline(const corpus::Dataset& ds, std::uint64_t seed,
                               const SvmConfig& svm) {
  return content_eval_protocol(ds, &ds, &raw_features, seed, svm);
}

// ---- Wilcoxon signed-rank ----

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("wilcoxon: sample size mismatch");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    if (d != 0.0) diff.push_back(d);
  }
  if (diff.empty()) throw DataError("wilcoxon: all differences are zero; test undefined");
  const std::size_t n = diff.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return std::abs(diff[i]) < std::abs(diff[j]);
  });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(diff[order[j + 1]]) == std::abs(diff[order[i]])) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double w_pos = 0, w_neg = 0;
  for (std::size_t i = 0; i < n; ++i) (diff[i] > 0 ? w_pos : w_neg) += rank[i];
  WilcoxonResult r;
  r.n_nonzero = static_cast<int>(n);
  r.w_plus = w_pos;
  r.w_minus = w_neg;
  r.w_statistic = std::min(w_pos, w_neg);
  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  const double sd = std::sqrt(nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0);
  r.z = (r.w_statistic - mean) / sd;
  r.p_two_sided = std::min(1.0, std::erfc(std::abs(r.z) / std::sqrt(2.0)));
  return r;
}

void export_latents(const LatentTable& latents, const std::string& path) {
  if (latents.size() == 0) throw DataError("export_latents: empty table");
  std::ostringstream out;
  out << "segment_id,sequence_id,subject_id,content_label";
  for (int d = 0; d < latents.latent_dim; ++d) out << ",z1_" << d;
  for (int d = 0; d < latents.latent_dim; ++d) out << ",z2_" << d;
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < latents.size(); ++i) {
    out << latents.segment_id[i] << ',' << latents.sequence_id[i] << ','
        << latents.subject_id[i] << ',' << latents.content_label[i];
    for (int d = 0; d < latents.latent_dim; ++d) {
      std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(latents.z1.at(i, d)));
      out << buf;
    }
    for (int d = 0; d < latents.latent_dim; ++d) {
      std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(latents.z2.at(i, d)));
      out << buf;
    }
    out << '\n';
  }
  io::atomic_write_file(path, out.str());
}

}  // namespace fhvae::probe
