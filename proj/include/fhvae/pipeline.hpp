#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "fhvae/corpus.hpp"
#include "fhvae/model.hpp"
#include "fhvae/objective.hpp"
#include "fhvae/trainer.hpp"

namespace fhvae::pipeline {

// Merged run configuration: one global seed fans out to the corpus,
// initialization, batching, evaluation and probe streams.
struct RunConfig {
  std::uint64_t seed = 0;
  corpus::CorpusConfig corpus;
  model::ArchSpec arch;  // channels/seg_len are taken from the corpus at use
  obj::HyperConfig hyper;
  train::StageConfig stage1;
  train::StageConfig stage2;
};

RunConfig default_run_config();
RunConfig load_run_config(const std::string& path);

// Checkpoint sidecar (model.json): architecture, stage, table sizes.
struct ModelMeta {
  model::ArchSpec arch;
  int stage = 1;
  int n_sequences = 0;
  int n_labels = 0;
};

void save_model_meta(const ModelMeta& meta, const std::string& path);
ModelMeta load_model_meta(const std::string& path);

// Sub-command bodies shared by the CLI and the acceptance suite. All paths
// are written atomically; progress goes to `log` when non-null.
void cmd_generate(const RunConfig& cfg, const std::string& out_dir, std::ostream* log);
void cmd_train(const RunConfig& cfg, int stage, const std::string& corpus_dir,
               const std::string& init_checkpoint, const std::string& out_dir,
               std::ostream* log);
void cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& corpus_dir,
              const std::string& out_file, std::ostream* log);
void cmd_export_latents(const RunConfig& cfg, const std::string& checkpoint,
                        const std::string& corpus_dir, const std::string& out_file);

}  // namespace fhvae::pipeline
