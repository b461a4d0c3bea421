#include <ostream>

#include <CLI11.hpp>

#include "w2bench/harness.hpp"

namespace w2bench {

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Benchmark of W2 optimal transport solvers on pairs with known maps", "w2bench"};
  app.set_config("--config", "", "key=value file mirroring the flags (flags win)");

  RunConfig cfg;
  std::vector<std::string> pairs;
  std::vector<std::string> artifacts;
  std::string out_dir = ".";
  Index iterations = 0, batch = 0, pretrain = -1, log_every = -1, fit_iters = 0;
  double lr = 0.0;

  app.add_option("command", cfg.command, "generate | train | eval | scatter")
      ->required()
      ->check(CLI::IsMember({"generate", "train", "eval", "scatter"}));
  app.add_option("--dim", cfg.dims, "dimensions (generate)")->delimiter(',');
  app.add_option("--seed", cfg.seeds, "seeds")->delimiter(',');
  app.add_option("--solver", cfg.solvers, "LS, MM-B, QC, MM, MMv1, MMv2, W2, MM:R, MMv2:R, W2:R")->delimiter(',');
  app.add_option("--pair", pairs, ".w2pair files")->delimiter(',');
  app.add_option("--artifact", artifacts, ".w2run files (eval, scatter)")->delimiter(',');
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--iters-scale", cfg.iters_scale, "fraction of the full iteration counts")->check(CLI::PositiveNumber);
  app.add_flag("--paper-iters", cfg.paper_iters, "use the full iteration counts");
  app.add_option("--threads", cfg.threads, "concurrent jobs")->check(CLI::PositiveNumber);
  app.add_option("--iters", iterations, "exact training iteration count");
  app.add_option("--batch", batch, "training batch size");
  app.add_option("--lr", lr, "learning rate");
  app.add_option("--pretrain-iters", pretrain, "identity pretraining iterations");
  app.add_option("--log-every", log_every, "trace log period");
  app.add_option("--fit-iters", fit_iters, "W2 iterations per fitted part (generate)");
  app.add_option("--eval-seed", cfg.eval_seed, "evaluation sample seed");
  app.add_option("--eval-samples", cfg.eval_samples, "evaluation sample size");
  app.add_option("--points", cfg.scatter_points, "points per scatter cloud");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::FileError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  for (const std::string& p : pairs) cfg.pairs.emplace_back(p);
  for (const std::string& a : artifacts) cfg.artifacts.emplace_back(a);
  cfg.out = out_dir;
  if (iterations > 0) cfg.iterations = iterations;
  if (batch > 0) cfg.batch = batch;
  if (lr > 0.0) cfg.lr = lr;
  if (pretrain >= 0) cfg.pretrain_iters = pretrain;
  if (log_every >= 0) cfg.log_every = log_every;
  if (fit_iters > 0) cfg.fit_iterations = fit_iters;
  return run_command(cfg, out, err);
}

}  // namespace w2bench
