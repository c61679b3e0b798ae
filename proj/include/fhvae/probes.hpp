#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fhvae/corpus.hpp"
#include "fhvae/model.hpp"

namespace fhvae::probe {

// Posterior means per segment; z1 is conditioned on the z2 posterior mean.
struct LatentTable {
  int latent_dim = 0;
  std::vector<int> segment_id, sequence_id, subject_id, content_label;
  std::vector<corpus::Split> split;
  Mat<float> z1, z2;  // n x latent

  std::size_t size() const { return segment_id.size(); }
};

LatentTable infer_latents(const model::Fhvae& m, const net::ParamStore<float>& params,
                          const corpus::Dataset& ds);

enum class Space { z1, z2 };

struct ProbeResult {
  double accuracy = 0;
  std::vector<double> per_class;
  int n_classes = 0;
  double chance = 0;
};

struct SubjectProbeConfig {
  double learning_rate = 1e-3;
  int max_epochs = 200;
  int patience = 20;  // epochs without validation-accuracy improvement
  int minibatch = 256;
  std::uint64_t seed = 0;
};

// One affine layer + softmax over subjects, cross-entropy, Adam; trained on
// the training split, early-stopped on validation accuracy, scored on test.
ProbeResult train_subject_probe(const LatentTable& latents, Space space,
                                const SubjectProbeConfig& cfg = {});

// Same probe protocol on externally supplied features/labels/splits; the
// subject probe and tests share this harness.
ProbeResult train_softmax_probe(const Mat<float>& features, const std::vector<int>& labels,
                                const std::vector<corpus::Split>& split, int n_classes,
                                const SubjectProbeConfig& cfg);

struct LinearSvm {
  std::vector<double> w;
  double b = 0;
};

struct SvmConfig {
  double c_reg = 1.0;
  int iterations = 400;
};

// Primal hinge objective (1/2)||w||^2 + C sum max(0, 1 - y (w x + b)),
// full-batch subgradient descent with a 1/t step size, tail-averaged iterate.
LinearSvm train_linear_svm(const Mat<double>& x, const std::vector<int>& y,
                           const SvmConfig& cfg = {});

double svm_hinge_objective(const LinearSvm& svm, const Mat<double>& x, const std::vector<int>& y,
                           double c_reg);

struct PairResult {
  int stimulus = 0;
  int label_lo = 0, label_hi = 0;
  double accuracy = 0;  // mean over folds
};

struct ContentEvalResult {
  double mean_accuracy = 0;
  std::vector<PairResult> pairs;
  int skipped_pairs = 0;
  // Mean accuracy per (stimulus, fold) cell, stimulus-major: the paired
  // samples for the signed-rank comparisons.
  std::vector<double> per_stimulus_fold;
};

inline constexpr int kContentFolds = 5;
inline constexpr int kMinExamplesPerClass = 5;

// Binary classification of adjacent content labels within each stimulus on
// the test split: stratified 80/20 splits as the 5 rotations of the 20%
// block, one linear SVM per fold. Feature extraction is a callback so latent
// and raw runs share identical fold assignments for a given seed.
using FeatureFn = std::vector<double> (*)(const void* ctx, int segment_id);
ContentEvalResult content_eval_protocol(const corpus::Dataset& ds, const void* ctx,
                                        FeatureFn features, std::uint64_t seed,
                                        const SvmConfig& svm = {});

ContentEvalResult binary_content_eval(const LatentTable& latents, Space space,
                                      const corpus::Dataset& ds, std::uint64_t seed,
                                      const SvmConfig& svm = {});

// Identical protocol on flattened raw segments (seg_len * channels features).
ContentEvalResult raw_baseline(const corpus::Dataset& ds, std::uint64_t seed,
                               const SvmConfig& svm = {});

struct WilcoxonResult {
  double w_statistic = 0;  // min(W+, W-)
  double w_plus = 0, w_minus = 0;
  double z = 0;
  double p_two_sided = 1;
  int n_nonzero = 0;
};

// Paired signed-rank test with the normal approximation: zero differences
// dropped, average ranks for ties, z = (W - n(n+1)/4)/sqrt(n(n+1)(2n+1)/24).
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

void export_latents(const LatentTable& latents, const std::string& path);

}  // namespace fhvae::probe
