#include "raregen/experiments.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "raregen/config.hpp"
#include "raregen/errors.hpp"
#include "raregen/hash.hpp"
#include "raregen/logging.hpp"

namespace raregen::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using numerics::Tensor;

// --- config ---------------------------------------------------------------------

json default_experiment_config() {
  return json{
      {"world", {{"preset", "default"}}},
      {"counts",
       {{"n_flow_train", 4000},
        {"n_real_manifold", 2000},
        {"n_real_eval", 1000},
        {"n_fake", 5000}}},
      {"flow",
       {{"blocks", 2}, {"flows_per_block", 8}, {"groups", 2}, {"hidden", 64}}},
      {"training",
       {{"iterations", 1500},
        {"batch", 64},
        {"lr", 1e-3},
        {"step", 600},
        {"gamma", 0.3},
        {"val_fraction", 0.3},
        {"eval_every", 25}}},
      {"knn", {{"k", 3}, {"k_prime", 100}}},
      {"optimizer",
       {{"lambda1", 30.0},
        {"lambda2", 0.002},
        {"sigma", 0.1},
        {"n_starts", 10},
        {"max_epochs", 200},
        {"lr", 0.02},
        {"step", 50},
        {"gamma", 0.9},
        {"metric", "euclidean"}}},
      {"metrics", {{"n_pairs", 10000}}},
      {"refs", 50},
      {"heatmap",
       {{"center", "midpoint"}, {"axes", "canonical"}, {"extent", 0.75}, {"resolution", 41}}},
  };
}

json merge_config(const json& overrides) {
  json base = default_experiment_config();
  base.merge_patch(overrides);
  return base;
}

rareopt::OptimizerConfig optimizer_config_from_json(const json& section) {
  rareopt::OptimizerConfig c;
  c.lambda1 = section.value("lambda1", c.lambda1);
  c.lambda2 = section.value("lambda2", c.lambda2);
  c.sigma = section.value("sigma", c.sigma);
  c.n_starts = section.value("n_starts", c.n_starts);
  c.max_epochs = section.value("max_epochs", c.max_epochs);
  c.base_lr = section.value("lr", c.base_lr);
  c.lr_step_size = section.value("step", c.lr_step_size);
  c.lr_gamma = section.value("gamma", c.lr_gamma);
  c.metric = rareopt::metric_from_string(section.value("metric", "euclidean"));
  return c;
}

rareopt::OptimizerConfig apply_variant(rareopt::OptimizerConfig config,
                                       const std::string& variant) {
  if (variant == "rare") {
    config.lambda1 = 0.0;
    config.lambda2 = 0.0;
  } else if (variant == "rare+sim") {
    config.lambda2 = 0.0;
  } else if (variant != "full") {
    throw ContractViolation("unknown objective variant: " + variant);
  }
  return config;
}

// --- small file helpers -------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << is.rdbuf();
  return buffer.str();
}

json manifest_shell(const std::string& stage, const json& config) {
  json m;
  m["stage"] = stage;
  m["config"] = config;
  m["inputs"] = json::object();
  m["outputs"] = json::object();
  return m;
}

void manifest_add_files(json& manifest, const std::string& key, const fs::path& dir,
                        std::initializer_list<std::string> names) {
  for (const std::string& name : names) {
    manifest[key][name] = hash_file(dir / name);
  }
}

void write_manifest(const fs::path& dir, const std::string& stage, const json& manifest) {
  write_text(dir / ("manifest_" + stage + ".json"), manifest.dump(2) + "\n");
}

// Consuming stages check the producing stage's recorded hash before trusting
// an artifact.
void verify_artifact(const fs::path& dir, const std::string& producer_stage,
                     const std::string& filename) {
  const fs::path manifest_path = dir / ("manifest_" + producer_stage + ".json");
  if (!fs::exists(manifest_path)) {
    throw IoError("missing " + manifest_path.string() + "; run the " + producer_stage +
                  " stage first");
  }
  const json manifest = json::parse(read_text(manifest_path));
  if (!manifest.contains("outputs") || !manifest["outputs"].contains(filename)) {
    throw IoError(manifest_path.string() + " does not record " + filename);
  }
  const std::string expected = manifest["outputs"][filename].get<std::string>();
  const std::string actual = hash_file(dir / filename);
  if (expected != actual) {
    throw IoError(filename + " does not hash-match its manifest (expected " + expected +
                  ", found " + actual + ")");
  }
}

toy::ToyWorld load_world_checked(const fs::path& dir) {
  verify_artifact(dir, "make-world", "world.json");
  return toy::world_from_json(read_text(dir / "world.json"));
}

flow::FlowConfig flow_config_from_json(const json& section, std::size_t input_dim) {
  flow::FlowConfig c;
  c.input_dim = section.value("input_dim", input_dim);
  c.n_blocks = section.value("blocks", c.n_blocks);
  c.flows_per_block = section.value("flows_per_block", c.flows_per_block);
  c.groups_per_block = section.value("groups", c.groups_per_block);
  c.hidden_width = section.value("hidden", c.hidden_width);
  return c;
}

}  // namespace

// --- core operations -----------------------------------------------------------------

CorrelationData run_correlation(const flow::FlowModel& model,
                                const knn::KnnManifold& real_manifold,
                                const knn::FeatureSet& real_eval, const knn::FeatureSet& fakes) {
  CorrelationData data;
  for (std::size_t i = 0; i < real_eval.size(); ++i) {
    const Tensor x = real_eval.point_tensor(i);
    data.knnd_real.push_back(knn::knnd(x.data(), real_manifold.centers(), real_manifold.k()));
    data.neglogp_real.push_back(-model.forward_logprob(x).logp);
  }
  data.total_fake = fakes.size();
  for (std::size_t i = 0; i < fakes.size(); ++i) {
    const Tensor x = fakes.point_tensor(i);
    const auto score = real_manifold.rarity_score(x.data());
    if (!score) {
      ++data.undefined_fake;
      continue;
    }
    data.rarity_fake.push_back(*score);
    data.neglogp_fake.push_back(-model.forward_logprob(x).logp);
  }
  if (data.knnd_real.size() < 3 || data.rarity_fake.size() < 3) {
    throw ContractViolation("run_correlation: fewer than 3 defined pairs");
  }
  data.r_real = pearson(data.knnd_real, data.neglogp_real);
  data.r_fake = pearson(data.rarity_fake, data.neglogp_fake);
  return data;
}

HeatmapGrid heatmap_slice(const flow::FlowModel& model, const knn::KnnManifold& manifold,
                          const Tensor& center, const Tensor& a1, const Tensor& a2,
                          double extent, std::size_t resolution) {
  if (resolution < 2) throw ContractViolation("heatmap_slice: resolution must be >= 2");
  if (extent <= 0.0) throw ContractViolation("heatmap_slice: extent must be positive");
  const std::size_t dim = center.size();
  if (a1.size() != dim || a2.size() != dim) {
    throw ContractViolation("heatmap_slice: axis dimension mismatch");
  }
  const double n1 = numerics::dot(a1, a1);
  const double n2 = numerics::dot(a2, a2);
  const double cross = numerics::dot(a1, a2);
  if (std::abs(n1 - 1.0) > 1e-8 || std::abs(n2 - 1.0) > 1e-8 || std::abs(cross) > 1e-8) {
    throw ContractViolation("heatmap_slice: axes must be orthonormal within 1e-8");
  }
  HeatmapGrid grid;
  grid.resolution = resolution;
  const std::size_t cells = resolution * resolution;
  grid.s.reserve(cells);
  grid.t.reserve(cells);
  grid.logp.reserve(cells);
  grid.in_manifold.reserve(cells);
  for (std::size_t i = 0; i < resolution; ++i) {
    const double s =
        -extent + 2.0 * extent * static_cast<double>(i) / static_cast<double>(resolution - 1);
    for (std::size_t j = 0; j < resolution; ++j) {
      const double t =
          -extent + 2.0 * extent * static_cast<double>(j) / static_cast<double>(resolution - 1);
      Tensor x = center;
      for (std::size_t d = 0; d < dim; ++d) x[d] += s * a1[d] + t * a2[d];
      grid.s.push_back(s);
      grid.t.push_back(t);
      grid.logp.push_back(model.forward_logprob(x).logp);
      grid.in_manifold.push_back(manifold.contains(x.data()) ? 1 : 0);
    }
  }
  return grid;
}

MetricsReport compute_metrics(const std::string& name, const knn::FeatureSet& evaluated,
                              const knn::KnnManifold& real_manifold,
                              const knn::FeatureSet& real_eval, std::size_t n_pairs,
                              std::uint64_t seed, const std::string& real_hash) {
  MetricsReport r;
  r.set_name = name;
  r.n_evaluated = evaluated.size();
  r.n_real = real_eval.size();
  r.k = real_manifold.k();
  r.real_hash = real_hash;

  double rarity_sum = 0.0;
  for (std::size_t i = 0; i < evaluated.size(); ++i) {
    const auto score = real_manifold.rarity_score(evaluated.point(i));
    if (score) {
      rarity_sum += *score;
      ++r.defined_count;
    }
  }
  r.undefined_fraction = evaluated.size() == 0
                             ? 0.0
                             : 1.0 - static_cast<double>(r.defined_count) /
                                         static_cast<double>(evaluated.size());
  r.mean_rarity_defined =
      r.defined_count == 0 ? 0.0 : rarity_sum / static_cast<double>(r.defined_count);
  r.precision = knn::precision(evaluated, real_manifold);
  const knn::KnnManifold evaluated_manifold =
      knn::build_manifold(evaluated, real_manifold.k());
  r.recall = knn::recall(real_eval, evaluated_manifold);
  r.mean_pairwise = mean_pairwise_distance(evaluated, n_pairs, seed);
  r.frechet = frechet_distance(evaluated, real_eval);
  return r;
}

json metrics_to_json(const MetricsReport& r) {
  return json{{"set", r.set_name},
              {"n_evaluated", r.n_evaluated},
              {"n_real", r.n_real},
              {"rarity", {{"mean_defined", r.mean_rarity_defined},
                          {"undefined_fraction", r.undefined_fraction},
                          {"defined_count", r.defined_count}}},
              {"precision", r.precision},
              {"recall", r.recall},
              {"mean_pairwise_distance", r.mean_pairwise},
              {"frechet_distance", r.frechet},
              {"manifold", {{"k", r.k}, {"real_hash", r.real_hash}}}};
}

// --- optimization batch ----------------------------------------------------------------

std::vector<ReferenceOutcome> run_optimization_batch(
    const toy::ToyWorld& world, const flow::FlowModel& model,
    const knn::KnnManifold& real_manifold, const knn::FeatureSet& fakes,
    const knn::FeatureSet& baseline_z, std::span<const std::size_t> reference_indices,
    const rareopt::OptimizerConfig& config, std::uint64_t master_seed, std::size_t workers) {
  std::vector<ReferenceOutcome> outcomes(reference_indices.size());
  std::vector<std::string> errors(reference_indices.size());
  std::atomic<std::size_t> next{0};

  auto work = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= reference_indices.size()) break;
      ReferenceOutcome& out = outcomes[i];
      out.baseline_index = reference_indices[i];
      out.seed = numerics::derive_seed(master_seed, "reference", out.baseline_index);
      try {
        rareopt::ReferenceContext ctx = rareopt::make_reference_context(
            baseline_z.point_tensor(out.baseline_index), world.generator, world.extractor, fakes,
            config.k_prime, real_manifold);
        out.z_star = ctx.z_star;
        out.x_star = ctx.x_star;
        out.d_star = ctx.d_star;
        out.result = rareopt::optimize_reference(ctx, config, world.generator, world.extractor,
                                                 model, out.seed);
      } catch (const DegenerateBoundaryError& e) {
        out.skip_reason = e.what();
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };

  const std::size_t n_workers =
      std::min<std::size_t>(std::max<std::size_t>(workers, 1), reference_indices.size());
  if (n_workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) {
      throw NumericError("reference " + std::to_string(reference_indices[i]) +
                         " failed: " + errors[i]);
    }
  }
  return outcomes;
}

// --- results file -------------------------------------------------------------------------

namespace {

json vector_to_json(std::span<const double> v) {
  json arr = json::array();
  for (double x : v) arr.push_back(x);
  return arr;
}

std::vector<StartRecord> records_from_outcomes(const std::vector<ReferenceOutcome>& outcomes,
                                               const knn::KnnManifold& real_manifold) {
  std::vector<StartRecord> records;
  for (std::size_t r = 0; r < outcomes.size(); ++r) {
    const ReferenceOutcome& out = outcomes[r];
    if (!out.result) continue;
    for (std::size_t s = 0; s < out.result->starts.size(); ++s) {
      const rareopt::StartResult& sr = out.result->starts[s];
      StartRecord rec;
      rec.reference = r;
      rec.baseline_index = out.baseline_index;
      rec.ref_seed = out.seed;
      rec.start = s;
      rec.feasible = sr.feasible;
      rec.initially_feasible = sr.initially_feasible;
      rec.best_epoch = sr.best_epoch;
      rec.x_star.assign(out.x_star.data().begin(), out.x_star.data().end());
      rec.d_star = out.d_star;
      if (sr.feasible) {
        rec.best_z.assign(sr.best_z.data().begin(), sr.best_z.data().end());
        rec.best_x.assign(sr.best_x.data().begin(), sr.best_x.data().end());
        rec.loss = sr.best_loss;
        rec.rarity = real_manifold.rarity_score(rec.best_x);
      }
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace

void save_results_jsonl(const std::vector<StartRecord>& records, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const StartRecord& rec : records) {
    json j;
    j["reference"] = rec.reference;
    j["baseline_index"] = rec.baseline_index;
    j["ref_seed"] = rec.ref_seed;
    j["start"] = rec.start;
    j["feasible"] = rec.feasible;
    j["initially_feasible"] = rec.initially_feasible;
    j["best_epoch"] = rec.best_epoch;
    j["x_star"] = vector_to_json(rec.x_star);
    j["d_star"] = rec.d_star;
    if (rec.feasible) {
      j["best_z"] = vector_to_json(rec.best_z);
      j["best_x"] = vector_to_json(rec.best_x);
      j["loss"] = {{"rare", rec.loss.l_rare},
                   {"sim", rec.loss.l_sim},
                   {"div", rec.loss.l_div},
                   {"total", rec.loss.total}};
    }
    if (rec.rarity) {
      j["rarity"] = *rec.rarity;
    } else {
      j["rarity"] = "undefined";
    }
    os << j.dump() << "\n";
  }
  if (!os) throw IoError("write failed: " + path.string());
}

std::vector<StartRecord> load_results_jsonl(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<StartRecord> records;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    StartRecord rec;
    rec.reference = j.at("reference").get<std::size_t>();
    rec.baseline_index = j.at("baseline_index").get<std::size_t>();
    rec.ref_seed = j.at("ref_seed").get<std::uint64_t>();
    rec.start = j.at("start").get<std::size_t>();
    rec.feasible = j.at("feasible").get<bool>();
    rec.initially_feasible = j.at("initially_feasible").get<bool>();
    rec.best_epoch = j.at("best_epoch").get<long>();
    rec.x_star = j.at("x_star").get<std::vector<double>>();
    rec.d_star = j.at("d_star").get<double>();
    if (rec.feasible) {
      rec.best_z = j.at("best_z").get<std::vector<double>>();
      rec.best_x = j.at("best_x").get<std::vector<double>>();
      const json& loss = j.at("loss");
      rec.loss.l_rare = loss.at("rare").get<double>();
      rec.loss.l_sim = loss.at("sim").get<double>();
      rec.loss.l_div = loss.at("div").get<double>();
      rec.loss.total = loss.at("total").get<double>();
    }
    if (j.at("rarity").is_number()) rec.rarity = j.at("rarity").get<double>();
    records.push_back(std::move(rec));
  }
  return records;
}

// --- stages -----------------------------------------------------------------------------

void stage_make_world(const json& config_in, const fs::path& out) {
  const json config = merge_config(config_in);
  fs::create_directories(out);
  toy::ToyWorld world = [&]() {
    const json& wj = config.at("world");
    if (wj.contains("path")) return toy::load_world(fs::path(wj.at("path").get<std::string>()));
    return toy::world_from_json(wj.dump());
  }();
  world.mixture.validate();
  if (world.mixture.components[world.mixture.rare_index()].weight > 0.1) {
    RAREGEN_LOG_WARN("world has no component with weight <= 0.1; rare-mode analyses will be weak");
  }
  write_text(out / "world.json", world_to_json(world) + "\n");
  json manifest = manifest_shell("make-world", config);
  manifest_add_files(manifest, "outputs", out, {"world.json"});
  write_manifest(out, "make-world", manifest);
}

void stage_train_flow(const json& config_in, std::uint64_t seed, const fs::path& out) {
  const json config = merge_config(config_in);
  const toy::ToyWorld world = load_world_checked(out);

  const std::size_t n_train = config.at("counts").at("n_flow_train").get<std::size_t>();
  const toy::MixtureSample sample =
      toy::sample_real(world.mixture, n_train, numerics::derive_seed(seed, "flow-data"));
  const knn::FeatureSet features = world.extract_set(sample.points);

  const json& tj = config.at("training");
  flow::FlowTrainOptions options;
  options.iterations = tj.at("iterations").get<long>();
  options.batch_size = tj.at("batch").get<std::size_t>();
  options.base_lr = tj.at("lr").get<double>();
  options.lr_step_size = tj.at("step").get<long>();
  options.lr_gamma = tj.at("gamma").get<double>();
  options.val_fraction = tj.at("val_fraction").get<double>();
  options.eval_every = tj.at("eval_every").get<long>();

  const flow::FlowConfig flow_config =
      flow_config_from_json(config.at("flow"), world.feature_dim());
  flow::FlowTrainResult trained =
      flow::train_flow(features, flow_config, numerics::derive_seed(seed, "flow-train"), options);
  trained.model.save(out / "flow.gflw");

  std::ostringstream trace;
  trace << "iteration,kind,nll\n";
  for (std::size_t i = 0; i < trained.train_nll.size(); ++i) {
    trace << i << ",train," << fmt_double(trained.train_nll[i]) << "\n";
  }
  for (const auto& [iter, nll] : trained.val_nll) {
    trace << iter << ",val," << fmt_double(nll) << "\n";
  }
  write_text(out / "flow_trace.csv", trace.str());

  json manifest = manifest_shell("train-flow", config);
  manifest["seed"] = seed;
  manifest["best_iteration"] = trained.best_iteration;
  manifest["best_val_nll"] = trained.best_val_nll;
  manifest_add_files(manifest, "inputs", out, {"world.json"});
  manifest_add_files(manifest, "outputs", out, {"flow.gflw", "flow_trace.csv"});
  write_manifest(out, "train-flow", manifest);
}

void stage_build_manifold(const json& config_in, std::uint64_t seed, const fs::path& out) {
  const json config = merge_config(config_in);
  const toy::ToyWorld world = load_world_checked(out);
  const json& counts = config.at("counts");

  const toy::MixtureSample manifold_sample =
      toy::sample_real(world.mixture, counts.at("n_real_manifold").get<std::size_t>(),
                       numerics::derive_seed(seed, "real-manifold"));
  knn::FeatureSet real_features = world.extract_set(manifold_sample.points);
  real_features.set_label(knn::SetLabel::kReal);

  const toy::MixtureSample eval_sample =
      toy::sample_real(world.mixture, counts.at("n_real_eval").get<std::size_t>(),
                       numerics::derive_seed(seed, "real-eval"));
  knn::FeatureSet eval_features = world.extract_set(eval_sample.points);
  eval_features.set_label(knn::SetLabel::kReal);

  const knn::FeatureSet baseline_z = world.sample_latents(
      counts.at("n_fake").get<std::size_t>(), numerics::derive_seed(seed, "baseline"));
  knn::FeatureSet fake_features = world.extract_set(world.generate_set(baseline_z));
  fake_features.set_label(knn::SetLabel::kFake);

  knn::save_fset(real_features, out / "real.fset");
  knn::save_fset(eval_features, out / "real_eval.fset");
  knn::save_fset(fake_features, out / "fake.fset");
  knn::save_fset(baseline_z, out / "baseline_z.fset");

  const json knn_doc = {{"k", config.at("knn").at("k").get<std::size_t>()},
                        {"k_prime", config.at("knn").at("k_prime").get<std::size_t>()},
                        {"counts", counts}};
  write_text(out / "knn.json", knn_doc.dump(2) + "\n");

  json manifest = manifest_shell("build-manifold", config);
  manifest["seed"] = seed;
  manifest_add_files(manifest, "inputs", out, {"world.json"});
  manifest_add_files(manifest, "outputs", out,
                     {"real.fset", "real_eval.fset", "fake.fset", "baseline_z.fset", "knn.json"});
  write_manifest(out, "build-manifold", manifest);
}

namespace {

struct LoadedRun {
  toy::ToyWorld world;
  flow::FlowModel model;
  knn::FeatureSet real_features, real_eval, fake_features, baseline_z;
  std::size_t k = 0;
};

LoadedRun load_run_inputs(const fs::path& out, bool need_flow) {
  LoadedRun run;
  run.world = load_world_checked(out);
  verify_artifact(out, "build-manifold", "real.fset");
  verify_artifact(out, "build-manifold", "real_eval.fset");
  verify_artifact(out, "build-manifold", "fake.fset");
  verify_artifact(out, "build-manifold", "baseline_z.fset");
  verify_artifact(out, "build-manifold", "knn.json");
  run.real_features = knn::load_fset(out / "real.fset");
  run.real_eval = knn::load_fset(out / "real_eval.fset");
  run.fake_features = knn::load_fset(out / "fake.fset");
  run.baseline_z = knn::load_fset(out / "baseline_z.fset");
  run.k = json::parse(read_text(out / "knn.json")).at("k").get<std::size_t>();
  if (need_flow) {
    verify_artifact(out, "train-flow", "flow.gflw");
    run.model = flow::FlowModel::load(out / "flow.gflw");
  }
  return run;
}

std::vector<std::size_t> choose_references(std::size_t n_fake, std::size_t refs,
                                           std::uint64_t seed) {
  if (refs > n_fake) throw ContractViolation("more references requested than baseline samples");
  numerics::RngStream rng(numerics::derive_seed(seed, "ref-choice"));
  std::vector<std::size_t> perm = rng.permutation(n_fake);
  perm.resize(refs);
  return perm;
}

json optimize_summary(const std::vector<ReferenceOutcome>& outcomes, std::size_t n_starts) {
  std::size_t started = 0, initially_infeasible = 0, feasible = 0, total_starts = 0, skipped = 0;
  for (const ReferenceOutcome& out : outcomes) {
    if (!out.result) {
      ++skipped;
      continue;
    }
    ++started;
    for (const rareopt::StartResult& sr : out.result->starts) {
      ++total_starts;
      if (!sr.initially_feasible) ++initially_infeasible;
      if (sr.feasible) ++feasible;
    }
  }
  const double init_infeasible_fraction =
      total_starts == 0 ? 0.0
                        : static_cast<double>(initially_infeasible) /
                              static_cast<double>(total_starts);
  if (init_infeasible_fraction > 0.30) {
    RAREGEN_LOG_WARN("initial perturbed starts outside the real manifold: "
                     << init_infeasible_fraction * 100.0
                     << "% (> 30%); consider a smaller sigma");
  }
  return json{{"references_run", started},
              {"references_skipped", skipped},
              {"n_starts", n_starts},
              {"initially_infeasible_fraction", init_infeasible_fraction},
              {"feasible_fraction",
               total_starts == 0 ? 0.0
                                 : static_cast<double>(feasible) /
                                       static_cast<double>(total_starts)}};
}

}  // namespace

void stage_optimize(const json& config_in, std::uint64_t seed, const fs::path& out,
                    const OptimizeOverrides& overrides) {
  const json config = merge_config(config_in);
  LoadedRun run = load_run_inputs(out, /*need_flow=*/true);
  const knn::KnnManifold manifold = knn::build_manifold(run.real_features, run.k);

  rareopt::OptimizerConfig opt_config = optimizer_config_from_json(config.at("optimizer"));
  opt_config.k_prime = config.at("knn").at("k_prime").get<std::size_t>();
  opt_config = apply_variant(opt_config, overrides.variant);

  const std::size_t refs = overrides.refs.value_or(config.at("refs").get<std::size_t>());
  const std::vector<std::size_t> indices =
      choose_references(run.fake_features.size(), refs, seed);

  const std::vector<ReferenceOutcome> outcomes =
      run_optimization_batch(run.world, run.model, manifold, run.fake_features, run.baseline_z,
                             indices, opt_config, seed, overrides.workers);
  const std::vector<StartRecord> records = records_from_outcomes(outcomes, manifold);
  save_results_jsonl(records, out / "results.jsonl");

  json manifest = manifest_shell("optimize", config);
  manifest["seed"] = seed;
  manifest["variant"] = overrides.variant;
  manifest["reference_indices"] = indices;
  manifest["summary"] = optimize_summary(outcomes, opt_config.n_starts);
  manifest_add_files(manifest, "inputs", out,
                     {"world.json", "flow.gflw", "real.fset", "fake.fset", "baseline_z.fset",
                      "knn.json"});
  manifest_add_files(manifest, "outputs", out, {"results.jsonl"});
  write_manifest(out, "optimize", manifest);
}

void stage_eval(const json& config_in, std::uint64_t seed, const fs::path& out) {
  const json config = merge_config(config_in);
  LoadedRun run = load_run_inputs(out, /*need_flow=*/false);
  verify_artifact(out, "optimize", "results.jsonl");
  const std::vector<StartRecord> records = load_results_jsonl(out / "results.jsonl");

  const knn::KnnManifold manifold = knn::build_manifold(run.real_features, run.k);
  const std::string real_hash = hash_file(out / "real.fset");
  const std::size_t n_pairs = config.at("metrics").at("n_pairs").get<std::size_t>();

  knn::FeatureSet method_features(run.fake_features.dim(), knn::SetLabel::kFake);
  for (const StartRecord& rec : records) {
    if (rec.feasible) method_features.push(rec.best_x);
  }
  if (method_features.size() < 2) {
    throw ContractViolation("stage_eval: fewer than 2 feasible optimized samples");
  }

  const MetricsReport baseline =
      compute_metrics("baseline", run.fake_features, manifold, run.real_eval, n_pairs,
                      numerics::derive_seed(seed, "pairs-baseline"), real_hash);
  const MetricsReport method =
      compute_metrics("method", method_features, manifold, run.real_eval, n_pairs,
                      numerics::derive_seed(seed, "pairs-method"), real_hash);
  if (baseline.real_hash != method.real_hash || baseline.k != method.k) {
    throw NumericError("stage_eval: baseline and method used different manifolds");
  }

  const json report = {{"baseline", metrics_to_json(baseline)},
                       {"method", metrics_to_json(method)},
                       {"manifold", {{"k", run.k}, {"real_hash", real_hash}}}};
  write_text(out / "metrics.json", report.dump(2) + "\n");

  std::ostringstream csv;
  csv << "set,n_evaluated,mean_rarity_defined,undefined_fraction,precision,recall,"
         "mean_pairwise_distance,frechet_distance\n";
  for (const MetricsReport* r : {&baseline, &method}) {
    csv << r->set_name << "," << r->n_evaluated << "," << fmt_double(r->mean_rarity_defined)
        << "," << fmt_double(r->undefined_fraction) << "," << fmt_double(r->precision) << ","
        << fmt_double(r->recall) << "," << fmt_double(r->mean_pairwise) << ","
        << fmt_double(r->frechet) << "\n";
  }
  write_text(out / "metrics.csv", csv.str());

  json manifest = manifest_shell("eval", config);
  manifest["seed"] = seed;
  manifest_add_files(manifest, "inputs", out,
                     {"real.fset", "real_eval.fset", "fake.fset", "results.jsonl"});
  manifest_add_files(manifest, "outputs", out, {"metrics.json", "metrics.csv"});
  write_manifest(out, "eval", manifest);
}

void stage_ablate(const json& config_in, std::uint64_t seed, const fs::path& out,
                  const OptimizeOverrides& overrides) {
  const json config = merge_config(config_in);
  LoadedRun run = load_run_inputs(out, /*need_flow=*/true);
  const knn::KnnManifold manifold = knn::build_manifold(run.real_features, run.k);

  rareopt::OptimizerConfig base_config = optimizer_config_from_json(config.at("optimizer"));
  base_config.k_prime = config.at("knn").at("k_prime").get<std::size_t>();

  const std::size_t refs = overrides.refs.value_or(config.at("refs").get<std::size_t>());
  const std::vector<std::size_t> indices =
      choose_references(run.fake_features.size(), refs, seed);
  const std::string refs_hash = hash_string(json(indices).dump());
  const std::size_t n_pairs = config.at("metrics").at("n_pairs").get<std::size_t>();

  const std::vector<std::string> variants = {"rare", "rare+sim", "full"};
  json table = json::array();
  std::ostringstream csv;
  csv << "variant,n_best,mean_rarity_defined,undefined_fraction,mean_pairwise_distance,"
         "feasible_fraction,refs_hash\n";
  for (const std::string& variant : variants) {
    const rareopt::OptimizerConfig variant_config = apply_variant(base_config, variant);
    const std::vector<ReferenceOutcome> outcomes =
        run_optimization_batch(run.world, run.model, manifold, run.fake_features, run.baseline_z,
                               indices, variant_config, seed, overrides.workers);
    const std::vector<StartRecord> records = records_from_outcomes(outcomes, manifold);
    const std::string variant_file =
        "results_" + std::string(variant == "rare+sim" ? "rare_sim" : variant) + ".jsonl";
    save_results_jsonl(records, out / variant_file);

    knn::FeatureSet best(run.fake_features.dim(), knn::SetLabel::kFake);
    double rarity_sum = 0.0;
    std::size_t defined = 0, feasible = 0;
    for (const StartRecord& rec : records) {
      if (!rec.feasible) continue;
      ++feasible;
      best.push(rec.best_x);
      if (rec.rarity) {
        rarity_sum += *rec.rarity;
        ++defined;
      }
    }
    const double mean_rarity = defined == 0 ? 0.0 : rarity_sum / static_cast<double>(defined);
    const double undefined_fraction =
        best.size() == 0
            ? 0.0
            : 1.0 - static_cast<double>(defined) / static_cast<double>(best.size());
    const double diversity =
        best.size() < 2 ? 0.0
                        : mean_pairwise_distance(best, n_pairs,
                                                 numerics::derive_seed(seed, "pairs-ablate"));
    const double feasible_fraction =
        records.empty() ? 0.0
                        : static_cast<double>(feasible) / static_cast<double>(records.size());
    table.push_back({{"variant", variant},
                     {"n_best", best.size()},
                     {"mean_rarity_defined", mean_rarity},
                     {"undefined_fraction", undefined_fraction},
                     {"mean_pairwise_distance", diversity},
                     {"feasible_fraction", feasible_fraction},
                     {"refs_hash", refs_hash},
                     {"results_file", variant_file}});
    csv << variant << "," << best.size() << "," << fmt_double(mean_rarity) << ","
        << fmt_double(undefined_fraction) << "," << fmt_double(diversity) << ","
        << fmt_double(feasible_fraction) << "," << refs_hash << "\n";
  }
  write_text(out / "ablation.json", json{{"rows", table}}.dump(2) + "\n");
  write_text(out / "ablation.csv", csv.str());

  json manifest = manifest_shell("ablate", config);
  manifest["seed"] = seed;
  manifest["reference_indices"] = indices;
  manifest_add_files(manifest, "inputs", out,
                     {"world.json", "flow.gflw", "real.fset", "fake.fset", "baseline_z.fset"});
  manifest_add_files(manifest, "outputs", out,
                     {"ablation.json", "ablation.csv", "results_rare.jsonl",
                      "results_rare_sim.jsonl", "results_full.jsonl"});
  write_manifest(out, "ablate", manifest);
}

void stage_correlate(const json& config_in, std::uint64_t seed, const fs::path& out) {
  const json config = merge_config(config_in);
  (void)seed;  // correlation itself is deterministic; the seed is recorded for provenance
  LoadedRun run = load_run_inputs(out, /*need_flow=*/true);
  const knn::KnnManifold manifold = knn::build_manifold(run.real_features, run.k);
  const CorrelationData data = run_correlation(run.model, manifold, run.real_eval,
                                               run.fake_features);

  std::ostringstream real_csv;
  real_csv << "knnd,neg_logp\n";
  for (std::size_t i = 0; i < data.knnd_real.size(); ++i) {
    real_csv << fmt_double(data.knnd_real[i]) << "," << fmt_double(data.neglogp_real[i]) << "\n";
  }
  write_text(out / "real_scatter.csv", real_csv.str());

  std::ostringstream fake_csv;
  fake_csv << "rarity,neg_logp\n";
  for (std::size_t i = 0; i < data.rarity_fake.size(); ++i) {
    fake_csv << fmt_double(data.rarity_fake[i]) << "," << fmt_double(data.neglogp_fake[i]) << "\n";
  }
  write_text(out / "fake_scatter.csv", fake_csv.str());

  const json report = {{"r_real", data.r_real},
                       {"r_fake", data.r_fake},
                       {"n_real", data.knnd_real.size()},
                       {"n_fake_defined", data.rarity_fake.size()},
                       {"n_fake_total", data.total_fake},
                       {"undefined_fake_fraction",
                        data.total_fake == 0
                            ? 0.0
                            : static_cast<double>(data.undefined_fake) /
                                  static_cast<double>(data.total_fake)}};
  write_text(out / "correlation.json", report.dump(2) + "\n");

  json manifest = manifest_shell("correlate", config);
  manifest["seed"] = seed;
  manifest_add_files(manifest, "inputs", out,
                     {"world.json", "flow.gflw", "real.fset", "real_eval.fset", "fake.fset"});
  manifest_add_files(manifest, "outputs", out,
                     {"correlation.json", "real_scatter.csv", "fake_scatter.csv"});
  write_manifest(out, "correlate", manifest);
}

void stage_heatmap(const json& config_in, const fs::path& out) {
  const json config = merge_config(config_in);
  LoadedRun run = load_run_inputs(out, /*need_flow=*/true);
  const knn::KnnManifold manifold = knn::build_manifold(run.real_features, run.k);
  const json& hj = config.at("heatmap");
  const std::size_t dim = run.model.config().input_dim;

  Tensor center({dim});
  const json& cj = hj.at("center");
  if (cj.is_array()) {
    if (cj.size() != dim) throw ContractViolation("heatmap center dimension mismatch");
    for (std::size_t d = 0; d < dim; ++d) center[d] = cj.at(d).get<double>();
  } else if (cj.get<std::string>() == "midpoint") {
    center = run.model.scaler().midpoint();
  } else if (cj.get<std::string>() == "rare-mode") {
    center = run.world.extractor.extract(
        run.world.mixture.components[run.world.mixture.rare_index()].mean);
  } else {
    throw ContractViolation("heatmap center must be 'midpoint', 'rare-mode', or coordinates");
  }

  Tensor a1({dim}), a2({dim});
  const json& aj = hj.at("axes");
  if (aj.is_array()) {
    for (std::size_t d = 0; d < dim; ++d) {
      a1[d] = aj.at(0).at(d).get<double>();
      a2[d] = aj.at(1).at(d).get<double>();
    }
  } else {
    a1[0] = 1.0;
    a2[1] = 1.0;
  }

  const HeatmapGrid grid =
      heatmap_slice(run.model, manifold, center, a1, a2, hj.at("extent").get<double>(),
                    hj.at("resolution").get<std::size_t>());
  std::ostringstream csv;
  csv << "s,t,logp,in_manifold\n";
  for (std::size_t i = 0; i < grid.s.size(); ++i) {
    csv << fmt_double(grid.s[i]) << "," << fmt_double(grid.t[i]) << ","
        << fmt_double(grid.logp[i]) << "," << static_cast<int>(grid.in_manifold[i]) << "\n";
  }
  write_text(out / "heatmap.csv", csv.str());

  json manifest = manifest_shell("heatmap", config);
  manifest_add_files(manifest, "inputs", out, {"world.json", "flow.gflw", "real.fset"});
  manifest_add_files(manifest, "outputs", out, {"heatmap.csv"});
  write_manifest(out, "heatmap", manifest);
}

}  // namespace raregen::harness
