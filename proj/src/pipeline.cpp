#include "fhvae/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "fhvae/error.hpp"
#include "fhvae/io.hpp"
#include "fhvae/probes.hpp"

namespace fhvae::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.stage1.stage = 1;
  cfg.stage1.alpha_z1 = 0.0;
  cfg.stage1.alpha_z2 = 100.0;
  cfg.stage2.stage = 2;
  cfg.stage2.alpha_z1 = 10000.0;
  cfg.stage2.alpha_z2 = 100.0;
  return cfg;
}

namespace {

template <class T>
void maybe(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void parse_stage(const json& j, train::StageConfig& cfg) {
  maybe(j, "alpha_z1", cfg.alpha_z1);
  maybe(j, "alpha_z2", cfg.alpha_z2);
  maybe(j, "K", cfg.labels_per_batch);
  maybe(j, "minibatch_size", cfg.minibatch_size);
  maybe(j, "learning_rate", cfg.learning_rate);
  maybe(j, "max_epochs", cfg.max_epochs);
  maybe(j, "patience", cfg.patience);
  maybe(j, "seed", cfg.seed);
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  RunConfig cfg = default_run_config();
  try {
    maybe(j, "seed", cfg.seed);
    if (j.contains("corpus")) {
      const json& c = j.at("corpus");
      maybe(c, "n_subjects", cfg.corpus.n_subjects);
      maybe(c, "n_stimuli", cfg.corpus.n_stimuli);
      maybe(c, "stimulus_duration_s", cfg.corpus.stimulus_duration_s);
      maybe(c, "sample_rate_hz", cfg.corpus.sample_rate_hz);
      maybe(c, "n_channels", cfg.corpus.n_channels);
      maybe(c, "subject_mix_strength", cfg.corpus.subject_mix_strength);
      maybe(c, "content_source_count", cfg.corpus.content_source_count);
      maybe(c, "noise_std", cfg.corpus.noise_std);
    }
    if (j.contains("arch")) {
      const json& a = j.at("arch");
      maybe(a, "hidden", cfg.arch.hidden);
      maybe(a, "layers", cfg.arch.layers);
      maybe(a, "latent", cfg.arch.latent);
    }
    if (j.contains("hyper")) {
      const json& h = j.at("hyper");
      maybe(h, "sigma2_z1", cfg.hyper.sigma2_z1);
      maybe(h, "sigma2_z2", cfg.hyper.sigma2_z2);
      maybe(h, "sigma2_mu1", cfg.hyper.sigma2_mu1);
      maybe(h, "sigma2_mu2", cfg.hyper.sigma2_mu2);
    }
    if (j.contains("train")) {
      parse_stage(j.at("train"), cfg.stage1);
      parse_stage(j.at("train"), cfg.stage2);
    }
    if (j.contains("train_stage1")) parse_stage(j.at("train_stage1"), cfg.stage1);
    if (j.contains("train_stage2")) parse_stage(j.at("train_stage2"), cfg.stage2);
  } catch (const json::exception& e) {
    throw ConfigError("config field error in " + path + ": " + e.what());
  }
  cfg.stage1.stage = 1;
  cfg.stage1.alpha_z1 = 0.0;
  cfg.stage2.stage = 2;
  // The corpus and the training streams share the global seed unless a
  // section pins its own.
  cfg.corpus.seed = j.contains("corpus") && j.at("corpus").contains("seed")
                        ? j.at("corpus").at("seed").get<std::uint64_t>()
                        : cfg.seed;
  if (!(j.contains("train") && j.at("train").contains("seed")) &&
      !(j.contains("train_stage1") && j.at("train_stage1").contains("seed")))
    cfg.stage1.seed = cfg.seed;
  if (!(j.contains("train") && j.at("train").contains("seed")) &&
      !(j.contains("train_stage2") && j.at("train_stage2").contains("seed")))
    cfg.stage2.seed = cfg.seed;
  cfg.hyper.latent_dim = cfg.arch.latent;
  return cfg;
}

void save_model_meta(const ModelMeta& meta, const std::string& path) {
  ordered_json j;
  j["format"] = "fhvae-model";
  j["arch"] = ordered_json{{"channels", meta.arch.channels},
                           {"seg_len", meta.arch.seg_len},
                           {"hidden", meta.arch.hidden},
                           {"layers", meta.arch.layers},
                           {"latent", meta.arch.latent}};
  j["stage"] = meta.stage;
  j["n_sequences"] = meta.n_sequences;
  j["n_labels"] = meta.n_labels;
  io::atomic_write_file(path, j.dump(2) + "\n");
}

ModelMeta load_model_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model metadata: " + path);
  json j = json::parse(in, nullptr, true, true);
  if (j.value("format", "") != "fhvae-model")
    throw DataError("not a model metadata file: " + path);
  ModelMeta meta;
  const json& a = j.at("arch");
  meta.arch.channels = a.at("channels").get<int>();
  meta.arch.seg_len = a.at("seg_len").get<int>();
  meta.arch.hidden = a.at("hidden").get<int>();
  meta.arch.layers = a.at("layers").get<int>();
  meta.arch.latent = a.at("latent").get<int>();
  meta.stage = j.at("stage").get<int>();
  meta.n_sequences = j.at("n_sequences").get<int>();
  meta.n_labels = j.at("n_labels").get<int>();
  return meta;
}

void cmd_generate(const RunConfig& cfg, const std::string& out_dir, std::ostream* log) {
  std::vector<corpus::Recording> recs = corpus::generate_corpus(cfg.corpus);
  corpus::save_corpus(recs, cfg.corpus, cfg.arch.seg_len, out_dir);
  if (log != nullptr)
    *log << "generated " << recs.size() << " recordings ("
         << recs.front().frames.rows() << "x" << recs.front().frames.cols() << ") in "
         << out_dir << '\n';
}

namespace {

struct LoadedModel {
  ModelMeta meta;
  model::Fhvae fhvae;
  net::ParamStore<float> params;
};

LoadedModel load_model(const std::string& checkpoint) {
  fs::path ckpt(checkpoint);
  fs::path meta_path = ckpt.parent_path() / "model.json";
  LoadedModel lm;
  lm.meta = load_model_meta(meta_path.string());
  lm.fhvae = model::build_fhvae(lm.meta.arch, lm.meta.n_sequences, lm.meta.n_labels, lm.params);
  io::load_checkpoint(ckpt, lm.params);
  return lm;
}

void check_dataset_matches(const ModelMeta& meta, const corpus::Dataset& ds) {
  if (meta.arch.channels != ds.segments.channels)
    throw DataError("model was trained on " + std::to_string(meta.arch.channels) +
                    " channels but the corpus has " + std::to_string(ds.segments.channels));
  if (meta.arch.seg_len != ds.segments.seg_len)
    throw DataError("model segment length does not match the corpus");
  if (meta.n_sequences != ds.n_sequences || meta.n_labels != ds.labels.n_labels())
    throw DataError("model tables do not match the corpus (sequence or label counts)");
}

ordered_json probe_result_json(const probe::ProbeResult& r) {
  return ordered_json{{"accuracy", r.accuracy},
                      {"chance", r.chance},
                      {"n_classes", r.n_classes},
                      {"per_class", r.per_class}};
}

ordered_json content_result_json(const probe::ContentEvalResult& r) {
  ordered_json pairs = ordered_json::array();
  for (const auto& p : r.pairs)
    pairs.push_back(ordered_json{{"stimulus", p.stimulus},
                                 {"label_lo", p.label_lo},
                                 {"label_hi", p.label_hi},
                                 {"accuracy", p.accuracy}});
  return ordered_json{{"mean_accuracy", r.mean_accuracy},
                      {"n_pairs", r.pairs.size()},
                      {"skipped_pairs", r.skipped_pairs},
                      {"per_pair", std::move(pairs)}};
}

ordered_json wilcoxon_json(const std::vector<double>& a, const std::vector<double>& b) {
  try {
    probe::WilcoxonResult w = probe::wilcoxon_signed_rank(a, b);
    return ordered_json{{"w", w.w_statistic},
                        {"z", w.z},
                        {"p_two_sided", w.p_two_sided},
                        {"n_nonzero", w.n_nonzero}};
  } catch (const DataError&) {
    return nullptr;  // all paired differences zero
  }
}

}  // namespace

void cmd_train(const RunConfig& cfg, int stage, const std::string& corpus_dir,
               const std::string& init_checkpoint, const std::string& out_dir,
               std::ostream* log) {
  if (stage != 1 && stage != 2) throw ConfigError("train: stage must be 1 or 2");
  if (stage == 2 && init_checkpoint.empty())
    throw ConfigError("train: stage 2 requires --init with the stage-1 checkpoint");
  corpus::Dataset ds = corpus::load_dataset(corpus_dir);

  model::ArchSpec arch = cfg.arch;
  arch.channels = ds.segments.channels;
  arch.seg_len = ds.segments.seg_len;
  net::ParamStore<float> params;
  model::Fhvae fhvae = model::build_fhvae(arch, ds.n_sequences, ds.labels.n_labels(), params);

  if (stage == 1) {
    net::xavier_init(params, Rng(cfg.seed, stream::kParamInit).next_u64());
  } else {
    ModelMeta init_meta =
        load_model_meta((fs::path(init_checkpoint).parent_path() / "model.json").string());
    if (init_meta.arch.channels != arch.channels || init_meta.arch.hidden != arch.hidden ||
        init_meta.arch.layers != arch.layers || init_meta.arch.latent != arch.latent ||
        init_meta.arch.seg_len != arch.seg_len)
      throw DataError("train: --init checkpoint architecture does not match the configuration");
    io::load_checkpoint(init_checkpoint, params);
  }

  const train::StageConfig& scfg = stage == 1 ? cfg.stage1 : cfg.stage2;
  train::TrainResult result = train::train_stage(fhvae, params, ds, scfg, cfg.hyper, log);

  fs::create_directories(out_dir);
  fs::path out(out_dir);
  io::save_checkpoint(params, out / "best.ckpt");
  ModelMeta meta{arch, stage, ds.n_sequences, ds.labels.n_labels()};
  save_model_meta(meta, (out / "model.json").string());
  train::write_train_log_csv(result.log, (out / "train_log.csv").string());
  ordered_json best{{"best_epoch", result.best_epoch},
                    {"best_bound", result.best_bound},
                    {"epochs_run", result.epochs_run},
                    {"stage", stage}};
  io::atomic_write_file(out / "best.json", best.dump(2) + "\n");
  if (log != nullptr)
    *log << "stage " << stage << " done: best epoch " << result.best_epoch << " bound "
         << result.best_bound << " (" << result.epochs_run << " epochs)\n";
}

void cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& corpus_dir,
              const std::string& out_file, std::ostream* log) {
  LoadedModel lm = load_model(checkpoint);
  corpus::Dataset ds = corpus::load_dataset(corpus_dir);
  check_dataset_matches(lm.meta, ds);

  probe::LatentTable latents = probe::infer_latents(lm.fhvae, lm.params, ds);
  probe::SubjectProbeConfig probe_cfg;
  probe_cfg.seed = cfg.seed;
  probe::ProbeResult subj_z1 = probe::train_subject_probe(latents, probe::Space::z1, probe_cfg);
  probe::ProbeResult subj_z2 = probe::train_subject_probe(latents, probe::Space::z2, probe_cfg);
  if (log != nullptr)
    *log << "subject probe: z1 " << subj_z1.accuracy << " z2 " << subj_z2.accuracy << '\n';

  probe::ContentEvalResult content_z1 =
      probe::binary_content_eval(latents, probe::Space::z1, ds, cfg.seed);
  probe::ContentEvalResult content_z2 =
      probe::binary_content_eval(latents, probe::Space::z2, ds, cfg.seed);
  probe::ContentEvalResult raw = probe::raw_baseline(ds, cfg.seed);
  if (log != nullptr)
    *log << "content binary: z1 " << content_z1.mean_accuracy << " z2 "
         << content_z2.mean_accuracy << " raw " << raw.mean_accuracy << '\n';

  ordered_json report;
  report["stage"] = lm.meta.stage;
  report["seed"] = cfg.seed;
  report["subject_probe"] =
      ordered_json{{"z1", probe_result_json(subj_z1)}, {"z2", probe_result_json(subj_z2)}};
  report["content_binary"] = ordered_json{{"z1", content_result_json(content_z1)},
                                          {"z2", content_result_json(content_z2)}};
  report["raw_baseline"] = content_result_json(raw);
  report["wilcoxon"] = ordered_json{
      {"z1_vs_z2", wilcoxon_json(content_z1.per_stimulus_fold, content_z2.per_stimulus_fold)},
      {"z1_vs_raw", wilcoxon_json(content_z1.per_stimulus_fold, raw.per_stimulus_fold)}};
  io::atomic_write_file(out_file, report.dump(2) + "\n");
}

void cmd_export_latents(const RunConfig& cfg, const std::string& checkpoint,
                        const std::string& corpus_dir, const std::string& out_file) {
  (void)cfg;
  LoadedModel lm = load_model(checkpoint);
  corpus::Dataset ds = corpus::load_dataset(corpus_dir);
  check_dataset_matches(lm.meta, ds);
  probe::LatentTable latents = probe::infer_latents(lm.fhvae, lm.params, ds);
  probe::export_latents(latents, out_file);
}

}  // namespace fhvae::pipeline
