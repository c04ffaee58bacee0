#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "qrng/errors.hpp"
#include "qrng/pipeline.hpp"

namespace fs = std::filesystem;
using qrng::cli::ExitStatus;
using qrng::cli::PipelineConfig;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> routine;
  std::optional<std::uint64_t> blocks;
};

// File, then environment, then command-line flags.
PipelineConfig resolve(const Overrides& o) {
  PipelineConfig cfg = o.config_path.empty() ? qrng::cli::config_from_env(qrng::cli::default_config())
                                             : qrng::cli::load_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.routine) cfg.routine = *o.routine;
  if (o.blocks) cfg.set_blocks(*o.blocks);
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--out", o.out_dir, "run directory");
  cmd->add_option("--routine", o.routine, "operating routine")->check(CLI::IsMember({1, 2, 3}));
  cmd->add_option("--blocks", o.blocks, "size the run to this many extractor blocks");
}

int status(ExitStatus s) { return static_cast<int>(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bias-free source-independent QRNG simulator and post-processor"};
  app.require_subcommand(1);

  Overrides o;
  auto* solve = app.add_subcommand("solve", "print (A, B, C) and the operating point of each routine");
  auto* simulate = app.add_subcommand("simulate", "synthesize and quantize a switched detector trace");
  auto* entropy = app.add_subcommand("entropy", "certify the min-entropy rate of a simulated trace");
  auto* extract = app.add_subcommand("extract", "Toeplitz-hash the X record into output bits");
  auto* analyze = app.add_subcommand("analyze", "battery, autocorrelation, spectra and CMRR");
  auto* pipeline = app.add_subcommand("pipeline", "run every stage and assemble the report");
  auto* report = app.add_subcommand("report", "aggregate a run directory into report.json");
  for (auto* cmd : {solve, simulate, entropy, extract, analyze, pipeline, report}) add_common(cmd, o);
  std::string run_dir;
  report->add_option("run_dir", run_dir, "run directory (defaults to --out)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      const fs::path dir = !run_dir.empty() ? fs::path(run_dir) : resolve(o).out_dir;
      const auto doc = qrng::cli::build_report(dir);
      const auto errors = qrng::cli::validate_report(doc);
      for (const auto& e : errors) std::cerr << "report: " << e << '\n';
      std::cout << "wrote " << (dir / "report.json").string() << '\n';
      return errors.empty() ? 0 : status(ExitStatus::error);
    }

    const PipelineConfig cfg = resolve(o);
    if (solve->parsed()) {
      std::cout << qrng::cli::solve_summary(cfg).dump(2) << '\n';
      return 0;
    }
    if (simulate->parsed()) {
      qrng::cli::stage_simulate(cfg, cfg.out_dir);
      std::cout << "simulated " << cfg.run.n_tot << " samples into " << cfg.out_dir.string() << '\n';
      return 0;
    }
    if (entropy->parsed()) {
      const auto r = qrng::cli::stage_entropy(cfg, cfg.out_dir);
      std::cout << "H=" << r.h_axi << " S=" << r.s_holevo << " r_dis_avg=" << r.r_dis_avg << " bits/sample\n";
      return 0;
    }
    if (extract->parsed()) {
      const auto m = qrng::cli::stage_extract(cfg, cfg.out_dir);
      std::cout << "extracted " << m.at("output_bits").get<std::size_t>() << " bits (k=" << m.at("k") << ", j=" << m.at("j")
                << ")\n";
      return 0;
    }
    if (analyze->parsed()) {
      const auto a = qrng::cli::stage_analyze(cfg, cfg.out_dir);
      std::cout << "battery " << (a.at("battery_passed").get<bool>() ? "passed" : "failed") << ", CMRR "
                << a.at("cmrr_db").get<double>() << " dB\n";
      return a.at("battery_passed").get<bool>() ? 0 : status(ExitStatus::battery_failed);
    }
    if (pipeline->parsed()) {
      const auto outcome = qrng::cli::run_pipeline(cfg);
      (outcome.status == ExitStatus::ok ? std::cout : std::cerr) << outcome.message << '\n';
      return status(outcome.status);
    }
  } catch (const qrng::cli::Uncertifiable& e) {
    std::cerr << "refused: " << e.what() << '\n';
    return status(ExitStatus::uncertifiable);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return status(ExitStatus::error);
  }
  return status(ExitStatus::error);
}
