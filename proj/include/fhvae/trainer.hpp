#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fhvae/corpus.hpp"
#include "fhvae/model.hpp"

namespace fhvae::train {

struct StageConfig {
  int stage = 1;
  double alpha_z1 = 0.0;  // forced to 0 in stage 1
  double alpha_z2 = 100.0;
  int labels_per_batch = 64;  // K unique content labels per super-batch
  int minibatch_size = 256;
  double learning_rate = 1e-3;
  int max_epochs = 500;
  int patience = 50;
  std::uint64_t seed = 0;
};

void validate(const StageConfig& cfg);  // throws ConfigError

struct AdamConfig {
  double beta1 = 0.95;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Mat<float>> m, v;
  long long t = 0;
  AdamConfig cfg;

  static AdamState like(const net::ParamStore<float>& params, const AdamConfig& cfg = {});
};

// One Adam update; rejects the step (throws NumericError) on non-finite
// gradients so a diverged minibatch cannot poison the parameters.
void adam_step(net::ParamStore<float>& params, const net::ParamStore<float>& grads,
               AdamState& state, double lr);

// K distinct training labels drawn uniformly without replacement plus every
// training segment carrying one of them. The label set doubles as the
// disc_z1 candidate set.
struct LabelBatch {
  std::vector<int> segments;  // global segment ids
  std::vector<int> labels;    // sorted candidate label set
};

LabelBatch hierarchical_sample_batch(const corpus::Dataset& ds, int k, Rng& rng);

struct EpochRow {
  int epoch = 0;
  std::string split;
  model::BatchStats stats;
};

struct TrainResult {
  int best_epoch = 0;
  double best_bound = 0;
  int epochs_run = 0;
  std::vector<EpochRow> log;
};

// Trains one stage with early stopping on the validation bound; params holds
// the initial weights on entry and the best-validation weights on return.
TrainResult train_stage(const model::Fhvae& m, net::ParamStore<float>& params,
                        const corpus::Dataset& ds, const StageConfig& cfg,
                        const obj::HyperConfig& hyper, std::ostream* progress = nullptr);

// Mean per-segment bound over a segment subset, one reparameterization sample
// per segment keyed by (eval_seed, segment id): identical across calls.
double evaluate_bound(const model::Fhvae& m, const net::ParamStore<float>& params,
                      const corpus::Dataset& ds, const std::vector<int>& segment_ids,
                      const obj::HyperConfig& hyper, model::Stage stage, std::uint64_t eval_seed,
                      model::BatchStats* stats_out = nullptr);

double evaluate_validation_bound(const model::Fhvae& m, const net::ParamStore<float>& params,
                                 const corpus::Dataset& ds, const obj::HyperConfig& hyper,
                                 model::Stage stage, std::uint64_t eval_seed);

// Assembles a minibatch (frame gather plus objective metadata) from segment
// ids; eps left empty.
model::SegmentBatch<float> make_segment_batch(const corpus::Dataset& ds,
                                              const std::vector<int>& segment_ids,
                                              int latent_dim);

void write_train_log_csv(const std::vector<EpochRow>& rows, const std::string& path);

}  // namespace fhvae::train
