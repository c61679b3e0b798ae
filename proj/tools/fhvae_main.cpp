// Command-line entry point: corpus generation, two-stage training,
// probe-based evaluation and latent export as reproducible runs.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fhvae/error.hpp"
#include "fhvae/pipeline.hpp"

namespace {

// 0 success, 1 usage, 2 config/data, 3 numeric failure
constexpr int kUsageError = 1;
constexpr int kDataError = 2;
constexpr int kNumericError = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Extended factorized hierarchical VAE for multichannel time-series windows"};
  app.require_subcommand(1);

  std::string config_path, out_path, corpus_dir, checkpoint, init_checkpoint;
  int stage = 1;

  CLI::App* generate = app.add_subcommand("generate", "generate a synthetic parallel corpus");
  generate->add_option("--config", config_path, "run configuration (JSON)")->required();
  generate->add_option("--out", out_path, "output corpus directory")->required();

  CLI::App* train = app.add_subcommand("train", "train one stage on a corpus");
  train->add_option("--stage", stage, "training stage (1 or 2)")->required();
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--init", init_checkpoint, "stage-1 checkpoint (required for stage 2)");
  train->add_option("--out", out_path, "output directory")->required();
  train->add_option("--config", config_path, "run configuration (JSON)");

  CLI::App* eval = app.add_subcommand("eval", "probe a checkpoint and write eval_report.json");
  eval->add_option("--ckpt", checkpoint, "checkpoint file")->required();
  eval->add_option("--corpus", corpus_dir, "corpus directory")->required();
  eval->add_option("--out", out_path, "report output file")->required();
  eval->add_option("--config", config_path, "run configuration (JSON)");

  CLI::App* export_latents =
      app.add_subcommand("export-latents", "write posterior means for all segments as CSV");
  export_latents->add_option("--ckpt", checkpoint, "checkpoint file")->required();
  export_latents->add_option("--corpus", corpus_dir, "corpus directory")->required();
  export_latents->add_option("--out", out_path, "CSV output file")->required();
  export_latents->add_option("--config", config_path, "run configuration (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kUsageError;
  }

  try {
    fhvae::pipeline::RunConfig cfg = config_path.empty()
                                         ? fhvae::pipeline::default_run_config()
                                         : fhvae::pipeline::load_run_config(config_path);
    if (generate->parsed()) {
      fhvae::pipeline::cmd_generate(cfg, out_path, &std::cerr);
    } else if (train->parsed()) {
      fhvae::pipeline::cmd_train(cfg, stage, corpus_dir, init_checkpoint, out_path, &std::cerr);
    } else if (eval->parsed()) {
      fhvae::pipeline::cmd_eval(cfg, checkpoint, corpus_dir, out_path, &std::cerr);
    } else if (export_latents->parsed()) {
      fhvae::pipeline::cmd_export_latents(cfg, checkpoint, corpus_dir, out_path);
    }
    return 0;
  } catch (const fhvae::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const fhvae::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kDataError;
  } catch (const fhvae::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const fhvae::DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
    return kDataError;
  } catch (const fhvae::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kNumericError;
  }
}
