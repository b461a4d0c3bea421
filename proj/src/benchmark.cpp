#include "w2bench/benchmark.hpp"

#include <cmath>

namespace w2bench {

using nlohmann::json;

namespace {

std::uint64_t construction_seed(std::uint64_t seed, std::uint64_t what) {
  Rng rng = Rng(seed).fork(streams::kConstruction).fork(what);
  return rng();
}

GaussianMixture single_gaussian(Vector mean, Matrix cov) {
  GaussianMixture g;
  g.weights = Vector::Ones(1);
  g.means.push_back(std::move(mean));
  g.covariances.push_back(std::move(cov));
  return g;
}

Matrix random_covariance(Index dim, Rng& rng) {
  Matrix a(dim, dim);
  for (Index i = 0; i < dim; ++i)
    for (Index j = 0; j < dim; ++j) a(i, j) = rng.normal();
  Matrix cov = a * a.transpose() / static_cast<double>(dim);
  cov.diagonal().array() += 0.1;
  return cov;
}

Vector random_vector(Index dim, Rng& rng) {
  Vector v(dim);
  for (Index i = 0; i < dim; ++i) v(i) = rng.normal();
  return v;
}

std::string part_prefix(std::size_t k) { return "part" + std::to_string(k) + "."; }

}  // namespace

// --- BenchmarkPair -----------------------------------------------------------

std::shared_ptr<TransportMap> BenchmarkPair::ground_truth_map() const {
  return std::make_shared<CompositionGradientMap>(potential);
}

std::unique_ptr<Sampler> BenchmarkPair::source_sampler(Rng rng) const {
  return std::make_unique<MixtureSampler>(source, rng);
}

std::unique_ptr<Sampler> BenchmarkPair::target_sampler(Rng rng) const {
  return std::make_unique<PushforwardSampler>(source_sampler(rng), ground_truth_map());
}

SamplerPair BenchmarkPair::samplers() const {
  auto self = std::make_shared<const BenchmarkPair>(*this);
  return {dim(), [self](Rng rng) { return self->source_sampler(rng); },
          [self](Rng rng) { return self->target_sampler(rng); }};
}

// --- construction ------------------------------------------------------------

BenchmarkPair build_hd_pair(Index dim, const HdPairOptions& options) {
  if (dim < 1) throw ConstructionError("dimension must be positive");
  const GaussianMixture p = normalize_mixture(random_mixture(dim, 3, construction_seed(options.seed, 0)));

  SolverConfig cfg = default_config(SolverKind::kW2, options.iters_scale);
  if (options.fit_iterations > 0) cfg.iterations = options.fit_iterations;
  if (options.fit_lr > 0.0) cfg.lr = options.fit_lr;

  std::vector<WeightedPart> parts;
  const double weights[2] = {options.weight_first, options.weight_second};
  for (int k = 0; k < 2; ++k) {
    const GaussianMixture q =
        normalize_mixture(random_mixture(dim, 10, construction_seed(options.seed, 1 + k)));
    const SamplerPair problem{dim, [p](Rng rng) { return std::make_unique<MixtureSampler>(p, rng); },
                              [q](Rng rng) { return std::make_unique<MixtureSampler>(q, rng); }};
    cfg.seed = construction_seed(options.seed, 10 + k);
    if (options.log) *options.log << "# fitting part " << k << " (D=" << dim << ")\n";
    const SolverOutput out = train(problem, cfg, options.log);
    if (out.diverged) {
      throw ConstructionError("W2 fit of part " + std::to_string(k) + " diverged at iteration " +
                              std::to_string(out.iterations_done) + " (D=" + std::to_string(dim) + ")");
    }
    parts.push_back({out.psi.renamed("psi" + std::to_string(k + 1) + "."), weights[k]});
  }

  BenchmarkPair pair;
  pair.source = p;
  pair.potential = compose_potentials(std::move(parts), CompositionMode::kSum);
  pair.family = "hd";
  pair.seed = options.seed;
  pair.fit_iterations = cfg.iterations;
  return pair;
}

BenchmarkPair make_gaussian_pair(Index dim, std::uint64_t seed) {
  Rng rng = Rng(seed).fork(streams::kConstruction);
  Vector mean_p = random_vector(dim, rng);
  Matrix cov_p = random_covariance(dim, rng);
  const Vector mean_q = random_vector(dim, rng);
  const Matrix cov_q = random_covariance(dim, rng);
  const AffineMap t = gaussian_ot_map(mean_p, cov_p, mean_q, cov_q);

  BenchmarkPair pair;
  pair.source = single_gaussian(std::move(mean_p), std::move(cov_p));
  pair.potential = compose_potentials({{QuadraticPotential{t.matrix(), t.shift()}, 1.0}}, CompositionMode::kSum);
  pair.family = "gaussian";
  pair.seed = seed;
  return pair;
}

BenchmarkPair make_identity_pair(const GaussianMixture& source, std::uint64_t seed) {
  const Index d = source.dim();
  BenchmarkPair pair;
  pair.source = source;
  pair.potential = compose_potentials({{QuadraticPotential{Matrix::Identity(d, d), Vector::Zero(d)}, 1.0}},
                                      CompositionMode::kSum);
  pair.family = "identity";
  pair.seed = seed;
  return pair;
}

// --- container -----------------------------------------------------------------

std::vector<std::uint8_t> serialize_pair(const BenchmarkPair& pair) {
  std::vector<NamedMatrix> sections;
  const GaussianMixture& src = pair.source;
  sections.push_back({"source.weights", src.weights});
  for (Index m = 0; m < src.size(); ++m) {
    sections.push_back({"source.mean" + std::to_string(m), src.means[static_cast<std::size_t>(m)]});
    sections.push_back({"source.cov" + std::to_string(m), src.covariances[static_cast<std::size_t>(m)]});
  }

  json parts = json::array();
  const auto& pp = pair.potential.parts();
  for (std::size_t k = 0; k < pp.size(); ++k) {
    json entry;
    if (const auto* icnn = std::get_if<IcnnPotential>(&pp[k].part)) {
      entry = icnn_header(*icnn);
      entry["type"] = "icnn";
      append_icnn_sections(sections, part_prefix(k), *icnn);
    } else {
      const auto& q = std::get<QuadraticPotential>(pp[k].part);
      entry["type"] = "quadratic";
      sections.push_back({part_prefix(k) + "a", q.a});
      sections.push_back({part_prefix(k) + "b", q.b});
    }
    entry["weight"] = pp[k].weight;
    parts.push_back(std::move(entry));
  }

  json header;
  header["format"] = "w2pair";
  header["version"] = kPairFormatVersion;
  header["dim"] = pair.dim();
  header["family"] = pair.family;
  header["seed"] = pair.seed;
  header["fit_iterations"] = pair.fit_iterations;
  header["source_components"] = src.size();
  header["composition"] = {{"mode", to_string(pair.potential.mode())}, {"parts", parts}};
  return pack_container(kPairMagic, std::move(header), sections);
}

BenchmarkPair deserialize_pair(const std::vector<std::uint8_t>& bytes) {
  const Container c = unpack_container(kPairMagic, bytes);
  const json& header = c.header;
  try {
    if (header.at("format") != "w2pair") throw FormatError("not a w2pair file");
    if (header.at("version").get<int>() != kPairFormatVersion) {
      throw FormatError("version mismatch: file has " + header.at("version").dump() + ", expected " +
                        std::to_string(kPairFormatVersion));
    }
    BenchmarkPair pair;
    const auto dim = header.at("dim").get<Index>();
    pair.family = header.at("family").get<std::string>();
    pair.seed = header.at("seed").get<std::uint64_t>();
    pair.fit_iterations = header.at("fit_iterations").get<Index>();

    const auto m = header.at("source_components").get<Index>();
    pair.source.weights = c.section("source.weights");
    for (Index i = 0; i < m; ++i) {
      pair.source.means.push_back(c.section("source.mean" + std::to_string(i)));
      pair.source.covariances.push_back(c.section("source.cov" + std::to_string(i)));
    }

    std::vector<WeightedPart> parts;
    const json& comp = header.at("composition");
    std::size_t k = 0;
    for (const json& entry : comp.at("parts")) {
      const auto weight = entry.at("weight").get<double>();
      const auto type = entry.at("type").get<std::string>();
      if (type == "icnn") {
        parts.push_back({read_icnn(c, entry, part_prefix(k)), weight});
      } else if (type == "quadratic") {
        parts.push_back({QuadraticPotential{c.section(part_prefix(k) + "a"), c.section(part_prefix(k) + "b")}, weight});
      } else {
        throw FormatError("unknown part type: " + type);
      }
      ++k;
    }
    pair.potential = compose_potentials(std::move(parts), parse_composition_mode(comp.at("mode").get<std::string>()));
    if (pair.dim() != dim || pair.potential.dim() != dim) throw FormatError("dimension mismatch in pair file");
    return pair;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  } catch (const CompositionError& e) {
    throw FormatError(std::string("invalid composition: ") + e.what());
  }
}

void save_pair(const BenchmarkPair& pair, const std::filesystem::path& path) {
  write_bytes(path, serialize_pair(pair));
}

BenchmarkPair load_pair(const std::filesystem::path& path) { return deserialize_pair(read_bytes(path)); }

}  // namespace w2bench
