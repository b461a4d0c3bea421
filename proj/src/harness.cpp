#include "w2bench/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <Eigen/Eigenvalues>
#include <json.hpp>

namespace w2bench {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Names such as "MM:R" are not portable in file names.
std::string file_token(const std::string& solver) {
  std::string s = solver;
  std::replace(s.begin(), s.end(), ':', '_');
  return s;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

struct LoadedPair {
  fs::path path;
  BenchmarkPair pair;
  std::uint32_t crc = 0;
};

LoadedPair load_checked(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_bytes(path);
  } catch (const std::ios_base::failure& e) {
    throw IoError(e.what());
  }
  try {
    return {path, deserialize_pair(bytes), crc32_of(bytes.data(), bytes.size())};
  } catch (const FormatError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<LoadedPair> load_pairs(const RunConfig& cfg) {
  if (cfg.pairs.empty()) throw ConfigError("no --pair given");
  std::vector<LoadedPair> pairs;
  for (const fs::path& p : cfg.pairs) pairs.push_back(load_checked(p));
  return pairs;
}

TrainedRun load_run(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_bytes(path);
  } catch (const std::ios_base::failure& e) {
    throw IoError(e.what());
  }
  try {
    return deserialize_run(bytes);
  } catch (const FormatError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string format_cell(double v, bool flagged) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%8.2f%c", v, flagged ? '*' : ' ');
  return buf;
}

}  // namespace

SolverConfig RunConfig::solver_config(const std::string& solver, std::uint64_t seed) const {
  SolverKind kind;
  try {
    kind = parse_solver_kind(solver);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  SolverConfig c = default_config(kind, effective_scale());
  if (iterations) c.iterations = *iterations;
  if (batch) c.batch = *batch;
  if (lr) c.lr = *lr;
  if (pretrain_iters) c.pretrain_iters = *pretrain_iters;
  if (log_every) c.log_every = *log_every;
  c.seed = seed;
  if (c.batch < 1 || c.iterations < 0 || !(c.lr > 0.0)) throw ConfigError("batch, iterations and lr must be positive");
  return c;
}

// --- artifacts -------------------------------------------------------------------

SolverConfig config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    SolverConfig c;
    c.kind = parse_solver_kind(j.at("kind").get<std::string>());
    c.batch = j.at("batch").get<Index>();
    c.iterations = j.at("iterations").get<Index>();
    c.lr = j.at("lr").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.epsilon = j.at("epsilon").get<double>();
    c.inner_steps = j.at("inner_steps").get<Index>();
    c.inner_max_iters = j.at("inner_max_iters").get<Index>();
    c.inner_lr = j.at("inner_lr").get<double>();
    c.inner_stop = j.at("inner_stop").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.qc_steps = j.at("qc_steps").get<Index>();
    c.qc_gamma = j.at("qc_gamma").get<double>();
    c.pretrain_iters = j.at("pretrain_iters").get<Index>();
    c.pretrain_batch = j.at("pretrain_batch").get<Index>();
    c.pretrain_stop = j.at("pretrain_stop").get<double>();
    c.log_every = j.at("log_every").get<Index>();
    c.blowup = j.at("blowup").get<double>();
    c.train_potential = j.at("train_potential").get<bool>();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed solver config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
}

std::vector<std::uint8_t> serialize_run(const TrainedRun& run) {
  const SolverOutput& o = run.output;
  std::vector<NamedMatrix> sections;
  append_icnn_sections(sections, "psi/", o.psi);
  if (o.phi) append_icnn_sections(sections, "phi/", *o.phi);
  // Wall-clock seconds are left out so artifacts stay reproducible.
  Matrix trace(static_cast<Index>(o.trace.size()), 3);
  for (std::size_t i = 0; i < o.trace.size(); ++i) {
    trace.row(static_cast<Index>(i)) << static_cast<double>(o.trace[i].iteration), o.trace[i].loss, o.trace[i].aux;
  }
  sections.push_back({"trace", trace});

  json header;
  header["format"] = "w2run";
  header["version"] = 1;
  header["kind"] = to_string(o.kind);
  header["dim"] = o.dim;
  header["config"] = json::parse(config_json(run.config));
  header["diverged"] = o.diverged;
  header["iterations_done"] = o.iterations_done;
  header["skipped_samples"] = o.skipped_samples;
  header["failed_solves"] = o.failed_solves;
  header["pair_crc32"] = run.pair_crc;
  header["psi"] = icnn_header(o.psi);
  header["phi"] = o.phi ? icnn_header(*o.phi) : json(nullptr);
  return pack_container(kRunMagic, std::move(header), sections);
}

TrainedRun deserialize_run(const std::vector<std::uint8_t>& bytes) {
  const Container c = unpack_container(kRunMagic, bytes);
  const json& h = c.header;
  try {
    if (h.at("format") != "w2run" || h.at("version").get<int>() != 1) throw FormatError("unsupported run file");
    TrainedRun run;
    run.config = config_from_json(h.at("config").dump());
    SolverOutput& o = run.output;
    o.kind = parse_solver_kind(h.at("kind").get<std::string>());
    o.dim = h.at("dim").get<Index>();
    o.diverged = h.at("diverged").get<bool>();
    o.iterations_done = h.at("iterations_done").get<Index>();
    o.skipped_samples = h.at("skipped_samples").get<Index>();
    o.failed_solves = h.at("failed_solves").get<Index>();
    run.pair_crc = h.at("pair_crc32").get<std::uint32_t>();
    o.psi = read_icnn(c, h.at("psi"), "psi/");
    if (!h.at("phi").is_null()) o.phi = read_icnn(c, h.at("phi"), "phi/");
    const Matrix& trace = c.section("trace");
    if (trace.cols() != 3) throw FormatError("trace section must have 3 columns");
    for (Index i = 0; i < trace.rows(); ++i)
      o.trace.push_back({static_cast<Index>(trace(i, 0)), trace(i, 1), trace(i, 2), 0.0});
    if (o.psi.dim() != o.dim) throw FormatError("network dimension does not match run dimension");
    return run;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed run header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
}

// --- projection ------------------------------------------------------------------

Projection principal_axes(const Matrix& samples) {
  if (samples.rows() < 2) throw std::invalid_argument("projection needs at least 2 samples");
  const Index d = samples.cols();
  Projection p;
  p.center = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - p.center.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(samples.rows() - 1);
  const Index k = std::min<Index>(2, d);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const Vector values = eig.eigenvalues().reverse();
  const Matrix vectors = eig.eigenvectors().rowwise().reverse();
  const bool rank_deficient = d < 2 || !(values(1) > 1e-12 * std::max(1.0, values(0)));
  if (rank_deficient) {
    p.fallback = true;
    p.axes = Matrix::Identity(d, k);
    p.variances = (centered * p.axes).colwise().squaredNorm().transpose() / static_cast<double>(samples.rows() - 1);
    return p;
  }
  p.axes = vectors.leftCols(2);
  p.variances = values.head(2);
  for (Index j = 0; j < 2; ++j) {
    Index arg = 0;
    p.axes.col(j).cwiseAbs().maxCoeff(&arg);
    if (p.axes(arg, j) < 0.0) p.axes.col(j) *= -1.0;
  }
  return p;
}

Matrix project(const Projection& p, const Matrix& x) {
  const Matrix centered = x.rowwise() - p.center.transpose();
  Matrix out = Matrix::Zero(x.rows(), 2);
  out.leftCols(p.axes.cols()) = centered * p.axes;
  return out;
}

void write_points(const fs::path& path, const Matrix& points) {
  std::string text;
  char buf[64];
  for (Index i = 0; i < points.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g\n", points(i, 0), points(i, 1));
    text += buf;
  }
  write_text(path, text);
}

// --- report table ------------------------------------------------------------------

std::string render_matrix(const std::vector<EvalReport>& rows) {
  std::vector<std::string> solvers;
  std::set<Index> dims;
  struct Acc {
    double uvp = 0.0;
    double cos = 0.0;
    int n = 0;
    int n_cos = 0;
    bool diverged = false;
  };
  std::map<std::pair<std::string, Index>, Acc> cells;
  for (const EvalReport& r : rows) {
    if (std::find(solvers.begin(), solvers.end(), r.solver) == solvers.end()) solvers.push_back(r.solver);
    dims.insert(r.dim);
    Acc& a = cells[{r.solver, r.dim}];
    a.uvp += r.uvp_pct;
    ++a.n;
    if (r.cos) {
      a.cos += *r.cos;
      ++a.n_cos;
    }
    a.diverged = a.diverged || r.diverged;
  }

  std::ostringstream os;
  auto block = [&](const std::string& title, bool uvp) {
    os << title << '\n' << "solver   ";
    for (Index d : dims) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%8s ", ("D=" + std::to_string(d)).c_str());
      os << buf;
    }
    os << '\n';
    for (const std::string& s : solvers) {
      char name[16];
      std::snprintf(name, sizeof name, "%-9s", s.c_str());
      os << name;
      for (Index d : dims) {
        auto it = cells.find({s, d});
        if (it == cells.end() || (!uvp && it->second.n_cos == 0)) {
          os << "       - ";
          continue;
        }
        const Acc& a = it->second;
        const double v = uvp ? a.uvp / a.n : a.cos / a.n_cos;
        os << format_cell(v, uvp ? v > 10.0 : v < 0.95);
      }
      bool any_diverged = false;
      for (Index d : dims) {
        auto it = cells.find({s, d});
        any_diverged = any_diverged || (it != cells.end() && it->second.diverged);
      }
      if (any_diverged) os << " (diverged)";
      os << '\n';
    }
  };
  block("L2-UVP (%), * marks > 10", true);
  os << '\n';
  block("cos, * marks < 0.95", false);
  return os.str();
}

// --- jobs ------------------------------------------------------------------------

void run_jobs(std::size_t count, int threads, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(count);
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            job(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

// --- commands --------------------------------------------------------------------

int cmd_generate(const RunConfig& cfg, std::ostream& log) {
  if (cfg.dims.empty()) throw ConfigError("generate needs at least one --dim");
  for (Index d : cfg.dims)
    if (d < 1) throw ConfigError("dimensions must be positive");
  ensure_dir(cfg.out);

  struct Job {
    Index dim;
    std::uint64_t seed;
    json entry;
  };
  std::vector<Job> jobs;
  for (Index d : cfg.dims)
    for (std::uint64_t s : cfg.seeds) jobs.push_back({d, s, {}});

  run_jobs(jobs.size(), cfg.threads, [&](std::size_t i) {
    Job& j = jobs[i];
    const std::string stem = "pair_D" + std::to_string(j.dim) + "_s" + std::to_string(j.seed);
    std::ofstream trace(cfg.out / (stem + ".log"));
    HdPairOptions o;
    o.seed = j.seed;
    o.iters_scale = cfg.effective_scale();
    if (cfg.fit_iterations) o.fit_iterations = *cfg.fit_iterations;
    o.log = trace ? &trace : nullptr;
    j.entry = {{"dim", j.dim}, {"seed", j.seed}, {"file", stem + ".w2pair"}};
    try {
      const std::vector<std::uint8_t> bytes = serialize_pair(build_hd_pair(j.dim, o));
      write_bytes(cfg.out / (stem + ".w2pair"), bytes);
      j.entry["status"] = "ok";
      j.entry["bytes"] = bytes.size();
      j.entry["crc32"] = crc32_of(bytes.data(), bytes.size());
    } catch (const ConstructionError& e) {
      j.entry["status"] = "failed";
      j.entry["error"] = e.what();
    } catch (const std::ios_base::failure& e) {
      throw IoError(e.what());
    }
  });

  json manifest = {{"format", "w2bench-manifest"}, {"pairs", json::array()}};
  int code = kExitOk;
  for (const Job& j : jobs) {
    manifest["pairs"].push_back(j.entry);
    if (j.entry["status"] == "ok") {
      log << "generated " << j.entry["file"].get<std::string>() << '\n';
    } else {
      log << "failed D=" << j.dim << " seed=" << j.seed << ": " << j.entry["error"].get<std::string>() << '\n';
      code = kExitDiverged;
    }
  }
  write_text(cfg.out / "manifest.json", manifest.dump(1) + "\n");
  return code;
}

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  if (cfg.solvers.empty()) throw ConfigError("train needs at least one --solver");
  for (const std::string& s : cfg.solvers) (void)cfg.solver_config(s, 0);
  const std::vector<LoadedPair> pairs = load_pairs(cfg);
  ensure_dir(cfg.out);

  struct Job {
    std::size_t pair;
    std::string solver;
    std::uint64_t seed;
    std::string message;
    bool diverged = false;
  };
  std::vector<Job> jobs;
  for (std::size_t p = 0; p < pairs.size(); ++p)
    for (const std::string& s : cfg.solvers)
      for (std::uint64_t seed : cfg.seeds) jobs.push_back({p, s, seed, {}, false});

  run_jobs(jobs.size(), cfg.threads, [&](std::size_t i) {
    Job& j = jobs[i];
    const LoadedPair& lp = pairs[j.pair];
    const SolverConfig sc = cfg.solver_config(j.solver, j.seed);
    const std::string stem =
        lp.path.stem().string() + "." + file_token(to_string(sc.kind)) + ".s" + std::to_string(j.seed);
    std::ofstream trace(cfg.out / (stem + ".trace.log"), std::ios::trunc);
    if (!trace) throw IoError("cannot open trace log in " + cfg.out.string());
    TrainedRun run;
    run.output = train(lp.pair.samplers(), sc, &trace);
    run.config = sc;
    run.pair_crc = lp.crc;
    try {
      write_bytes(cfg.out / (stem + ".w2run"), serialize_run(run));
    } catch (const std::ios_base::failure& e) {
      throw IoError(e.what());
    }
    j.diverged = run.output.diverged;
    std::ostringstream msg;
    msg << "trained " << stem << ".w2run: " << run.output.iterations_done << " iterations";
    if (run.output.diverged) msg << ", diverged (last finite checkpoint kept)";
    if (run.output.skipped_samples) msg << ", " << run.output.skipped_samples << " inner solves skipped";
    if (run.output.failed_solves) msg << ", " << run.output.failed_solves << " discrete solves failed";
    if (forward_kind(sc.kind) == SolverKind::kQC && sc.batch != 64)
      msg << "\nwarning: QC batch " << sc.batch << " differs from 64";
    j.message = msg.str();
  });

  int code = kExitOk;
  for (const Job& j : jobs) {
    log << j.message << '\n';
    if (j.diverged) code = kExitDiverged;
  }
  return code;
}

int cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const std::vector<LoadedPair> pairs = load_pairs(cfg);
  std::vector<TrainedRun> runs;
  for (const fs::path& a : cfg.artifacts) runs.push_back(load_run(a));

  // Each run goes to the pair it was trained on, else to the only pair of its dimension.
  std::vector<std::vector<std::size_t>> assigned(pairs.size());
  for (std::size_t r = 0; r < runs.size(); ++r) {
    std::optional<std::size_t> target;
    for (std::size_t p = 0; p < pairs.size(); ++p)
      if (runs[r].pair_crc != 0 && pairs[p].crc == runs[r].pair_crc) target = p;
    if (!target) {
      std::vector<std::size_t> same_dim;
      for (std::size_t p = 0; p < pairs.size(); ++p)
        if (pairs[p].pair.dim() == runs[r].output.dim) same_dim.push_back(p);
      if (same_dim.empty()) {
        throw ConfigError("dimension mismatch: " + cfg.artifacts[r].string() + " has D=" +
                          std::to_string(runs[r].output.dim) + " and no given pair matches");
      }
      if (same_dim.size() > 1) throw ConfigError("ambiguous pair for " + cfg.artifacts[r].string());
      target = same_dim.front();
    }
    assigned[*target].push_back(r);
  }

  struct Job {
    std::size_t pair;
    std::optional<Baseline> baseline;
    std::size_t run = 0;
    EvalReport report;
  };
  std::vector<Job> jobs;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    for (Baseline b : {Baseline::kIdentity, Baseline::kConstant, Baseline::kLinear}) jobs.push_back({p, b, 0, {}});
    for (std::size_t r : assigned[p]) jobs.push_back({p, std::nullopt, r, {}});
  }
  const EvalOptions opts{cfg.eval_samples, cfg.eval_seed};
  run_jobs(jobs.size(), cfg.threads, [&](std::size_t i) {
    Job& j = jobs[i];
    const BenchmarkPair& pair = pairs[j.pair].pair;
    if (j.baseline) {
      j.report = evaluate_baseline(*j.baseline, pair, opts);
    } else {
      j.report = evaluate(runs[j.run].output, runs[j.run].config, pair, opts);
    }
  });

  std::vector<EvalReport> reports;
  for (const Job& j : jobs) reports.push_back(j.report);
  ensure_dir(cfg.out);
  std::ostringstream csv;
  write_csv(csv, reports);
  write_text(cfg.out / "report.csv", csv.str());
  const std::string table = render_matrix(reports);
  write_text(cfg.out / "report.txt", table);
  log << table;
  return kExitOk;
}

int cmd_scatter(const RunConfig& cfg, std::ostream& log) {
  if (cfg.pairs.size() != 1) throw ConfigError("scatter takes exactly one --pair");
  if (cfg.artifacts.size() > 1) throw ConfigError("scatter takes at most one --artifact");
  if (cfg.scatter_points < 2) throw ConfigError("scatter needs at least 2 points");
  const LoadedPair lp = load_checked(cfg.pairs.front());
  const Rng rng = Rng(cfg.eval_seed).fork(streams::kEvaluation).fork(7);
  const Matrix x = lp.pair.source_sampler(rng.fork(1))->sample(cfg.scatter_points);
  const Matrix y = lp.pair.target_sampler(rng.fork(2))->sample(cfg.scatter_points);
  const Projection proj = principal_axes(y);
  ensure_dir(cfg.out);
  write_points(cfg.out / "scatter_source.txt", project(proj, x));
  write_points(cfg.out / "scatter_target.txt", project(proj, y));
  write_points(cfg.out / "scatter_truth.txt", project(proj, lp.pair.ground_truth(x)));
  if (!cfg.artifacts.empty()) {
    const TrainedRun run = load_run(cfg.artifacts.front());
    if (run.output.dim != lp.pair.dim()) throw ConfigError("dimension mismatch between artifact and pair");
    write_points(cfg.out / "scatter_mapped.txt", project(proj, extract_map(run.output)->apply(x)));
  }
  log << "wrote " << cfg.scatter_points << " points per cloud to " << cfg.out.string()
      << (proj.fallback ? " (coordinate axes)" : "") << '\n';
  return kExitOk;
}

int run_command(const RunConfig& cfg, std::ostream& log, std::ostream& err) {
  try {
    if (cfg.threads < 1) throw ConfigError("--threads must be at least 1");
    if (cfg.command == "generate") return cmd_generate(cfg, log);
    if (cfg.command == "train") return cmd_train(cfg, log);
    if (cfg.command == "eval") return cmd_eval(cfg, log);
    if (cfg.command == "scatter") return cmd_scatter(cfg, log);
    throw ConfigError("unknown command: " + cfg.command);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MetricError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::ios_base::failure& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  }
}

}  // namespace w2bench
