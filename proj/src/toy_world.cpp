#include "raregen/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <json.hpp>

#include "raregen/config.hpp"
#include "raregen/errors.hpp"
#include "raregen/linalg.hpp"

namespace raregen::toy {

using numerics::NodeId;
using numerics::Tape;
using numerics::Tensor;

// --- mixture ------------------------------------------------------------------

void MixtureSpec::validate() const {
  if (data_dim == 0 || components.empty()) {
    throw ContractViolation("mixture: empty spec");
  }
  double total = 0.0;
  for (const MixtureComponent& c : components) {
    if (c.weight <= 0.0) throw ContractViolation("mixture: weights must be positive");
    total += c.weight;
    if (c.mean.size() != data_dim) throw ContractViolation("mixture: mean dimension mismatch");
    if (c.cov.rank() != 2 || c.cov.rows() != data_dim || c.cov.cols() != data_dim) {
      throw ContractViolation("mixture: covariance shape mismatch");
    }
    numerics::cholesky(c.cov);  // PSD check; throws if not positive definite
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw ContractViolation("mixture: weights sum to " + std::to_string(total));
  }
}

std::size_t MixtureSpec::rare_index() const {
  std::size_t best = 0;
  for (std::size_t k = 1; k < components.size(); ++k) {
    if (components[k].weight < components[best].weight) best = k;
  }
  return best;
}

MixtureSample sample_real(const MixtureSpec& spec, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ContractViolation("sample_real: count must be positive");
  spec.validate();
  std::vector<Tensor> chol;
  chol.reserve(spec.components.size());
  for (const MixtureComponent& c : spec.components) chol.push_back(numerics::cholesky(c.cov));

  numerics::RngStream rng(seed);
  MixtureSample out;
  out.points = knn::FeatureSet(spec.data_dim, knn::SetLabel::kReal);
  out.component.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double u = rng.u01();
    std::size_t k = 0;
    double cumulative = 0.0;
    for (; k + 1 < spec.components.size(); ++k) {
      cumulative += spec.components[k].weight;
      if (u < cumulative) break;
    }
    Tensor eps = rng.normal_tensor({spec.data_dim});
    Tensor point = numerics::add(spec.components[k].mean, numerics::matvec(chol[k], eps));
    out.points.push(point);
    out.component.push_back(k);
  }
  return out;
}

double oracle_logpdf(const MixtureSpec& spec, std::span<const double> point) {
  if (point.size() != spec.data_dim) throw ContractViolation("oracle_logpdf: dimension mismatch");
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  std::vector<double> terms;
  terms.reserve(spec.components.size());
  for (const MixtureComponent& c : spec.components) {
    Tensor l;
    try {
      l = numerics::cholesky(c.cov);
    } catch (const SingularMatrixError&) {
      throw ContractViolation("oracle_logpdf: singular covariance");
    }
    Tensor diff({spec.data_dim});
    for (std::size_t d = 0; d < spec.data_dim; ++d) diff[d] = point[d] - c.mean[d];
    // Forward substitution L y = diff; the quadratic form is |y|^2 and
    // log det Sigma = 2 sum log L_rr.
    Tensor y({spec.data_dim});
    double quad = 0.0;
    double logdet = 0.0;
    for (std::size_t r = 0; r < spec.data_dim; ++r) {
      double s = diff[r];
      for (std::size_t cidx = 0; cidx < r; ++cidx) s -= l.at(r, cidx) * y[cidx];
      y[r] = s / l.at(r, r);
      quad += y[r] * y[r];
      logdet += std::log(l.at(r, r));
    }
    terms.push_back(std::log(c.weight) - 0.5 * quad - logdet -
                    half_log_2pi * static_cast<double>(spec.data_dim));
  }
  const double m = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - m);
  return m + std::log(acc);
}

// --- generator -----------------------------------------------------------------

ToyGenerator::ToyGenerator(std::size_t latent_dim, std::size_t gating_dim, double alpha,
                           Tensor gate_directions, std::vector<Tensor> offsets,
                           std::vector<Tensor> maps)
    : latent_dim_(latent_dim),
      gating_dim_(gating_dim),
      alpha_(alpha),
      gate_directions_(std::move(gate_directions)),
      offsets_(std::move(offsets)),
      maps_(std::move(maps)) {
  if (gating_dim_ == 0 || gating_dim_ > latent_dim_) {
    throw ContractViolation("generator: gating_dim must be in [1, latent_dim]");
  }
  if (alpha_ <= 0.0) throw ContractViolation("generator: alpha must be positive");
  const std::size_t k = offsets_.size();
  if (k == 0 || maps_.size() != k || gate_directions_.rank() != 2 ||
      gate_directions_.rows() != k || gate_directions_.cols() != gating_dim_) {
    throw ContractViolation("generator: component shapes disagree");
  }
  const std::size_t tail = latent_dim_ - gating_dim_;
  for (std::size_t i = 0; i < k; ++i) {
    if (offsets_[i].size() != offsets_[0].size() || maps_[i].rank() != 2 ||
        maps_[i].rows() != offsets_[0].size() || maps_[i].cols() != tail) {
      throw ContractViolation("generator: map shapes disagree");
    }
  }
}

Tensor ToyGenerator::generate(const Tensor& z) const {
  if (z.size() != latent_dim_) throw ContractViolation("generate: latent dimension mismatch");
  Tensor head({gating_dim_});
  for (std::size_t i = 0; i < gating_dim_; ++i) head[i] = z[i];
  Tensor tail({latent_dim_ - gating_dim_});
  for (std::size_t i = 0; i < tail.size(); ++i) tail[i] = z[gating_dim_ + i];

  Tensor logits = numerics::scale(numerics::matvec(gate_directions_, head), alpha_);
  double mx = logits[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  double zsum = 0.0;
  Tensor w = logits;
  for (auto& v : w.data()) {
    v = std::exp(v - mx);
    zsum += v;
  }
  for (auto& v : w.data()) v /= zsum;

  Tensor out({data_dim()});
  for (std::size_t k = 0; k < component_count(); ++k) {
    Tensor term = numerics::add(offsets_[k], numerics::matvec(maps_[k], tail));
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += w[k] * term[d];
  }
  return out;
}

NodeId ToyGenerator::generate_on_tape(Tape& tape, NodeId z) const {
  if (tape.value(z).size() != latent_dim_) {
    throw ContractViolation("generate_on_tape: latent dimension mismatch");
  }
  const NodeId head = tape.slice(z, 0, gating_dim_);
  const NodeId tail = tape.slice(z, gating_dim_, latent_dim_ - gating_dim_);
  const NodeId logits =
      tape.scale(tape.matvec(tape.constant(gate_directions_), head), alpha_);
  const NodeId w = tape.softmax(logits);
  NodeId out = -1;
  for (std::size_t k = 0; k < component_count(); ++k) {
    const NodeId term =
        tape.add(tape.constant(offsets_[k]), tape.matvec(tape.constant(maps_[k]), tail));
    const NodeId weighted = tape.scalar_mul(term, tape.slice(w, k, 1));
    out = (k == 0) ? weighted : tape.add(out, weighted);
  }
  return out;
}

// --- extractor -------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(Tensor weight, Tensor bias, Squash squash)
    : weight_(std::move(weight)), bias_(std::move(bias)), squash_(squash) {
  if (weight_.rank() != 2 || weight_.rows() != bias_.size()) {
    throw ContractViolation("extractor: weight/bias shape mismatch");
  }
}

Tensor FeatureExtractor::extract(const Tensor& point) const {
  if (point.size() != data_dim()) throw ContractViolation("extract: dimension mismatch");
  Tensor out = numerics::add(numerics::matvec(weight_, point), bias_);
  if (squash_ == Squash::kTanh) {
    for (auto& v : out.data()) v = std::tanh(v);
  }
  return out;
}

NodeId FeatureExtractor::extract_on_tape(Tape& tape, NodeId point) const {
  if (tape.value(point).size() != data_dim()) {
    throw ContractViolation("extract_on_tape: dimension mismatch");
  }
  const NodeId affine =
      tape.add(tape.matvec(tape.constant(weight_), point), tape.constant(bias_));
  return squash_ == Squash::kTanh ? tape.tanh(affine) : affine;
}

// --- world ------------------------------------------------------------------------

knn::FeatureSet ToyWorld::sample_latents(std::size_t count, std::uint64_t seed) const {
  numerics::RngStream rng(seed);
  knn::FeatureSet out(latent_dim());
  for (std::size_t i = 0; i < count; ++i) {
    out.push(rng.normal_tensor({latent_dim()}));
  }
  return out;
}

knn::FeatureSet ToyWorld::generate_set(const knn::FeatureSet& latents) const {
  knn::FeatureSet out(generator.data_dim(), knn::SetLabel::kFake);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    out.push(generator.generate(latents.point_tensor(i)));
  }
  return out;
}

knn::FeatureSet ToyWorld::extract_set(const knn::FeatureSet& data_points) const {
  knn::FeatureSet out(extractor.feature_dim(), data_points.label());
  for (std::size_t i = 0; i < data_points.size(); ++i) {
    out.push(extractor.extract(data_points.point_tensor(i)));
  }
  return out;
}

Tensor ToyWorld::feature_of_latent(const Tensor& z) const {
  return extractor.extract(generator.generate(z));
}

ToyWorld ToyWorld::shipped_default() {
  const std::size_t data_dim = 8, latent_dim = 8, gating_dim = 2, feature_dim = 8;
  MixtureSpec mix;
  mix.data_dim = data_dim;
  const std::vector<std::vector<double>> means = {
      {2.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0},
      {-2.0, 1.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0},
      {0.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.5},
  };
  const std::vector<double> weights = {0.85, 0.10, 0.05};
  for (std::size_t k = 0; k < 3; ++k) {
    MixtureComponent c;
    c.weight = weights[k];
    c.mean = Tensor({data_dim}, std::vector<double>(means[k].begin(), means[k].end()));
    c.cov = numerics::scale(Tensor::identity(data_dim), 0.3 * 0.3);
    mix.components.push_back(std::move(c));
  }
  mix.validate();

  // Gate geometry: the rare direction sits between the two common ones with a
  // shorter norm, so the sharp gate selects it well below its true weight.
  Tensor gates({3, gating_dim}, {1.0, 0.0, 0.0, 1.0, 0.5515, 0.5515});
  const std::size_t tail = latent_dim - gating_dim;
  numerics::RngStream rng(numerics::derive_seed(42, "world-maps"));
  std::vector<Tensor> offsets, maps;
  for (std::size_t k = 0; k < 3; ++k) {
    offsets.push_back(mix.components[k].mean);
    // Within-mode map: 0.3-scaled random columns, orthonormalized.
    Tensor m({data_dim, tail});
    Tensor g = rng.normal_tensor({data_dim, tail});
    for (std::size_t c = 0; c < tail; ++c) {
      for (std::size_t r = 0; r < data_dim; ++r) m.at(r, c) = g.at(r, c);
      for (std::size_t prev = 0; prev < c; ++prev) {
        double proj = 0.0;
        for (std::size_t r = 0; r < data_dim; ++r) proj += m.at(r, c) * m.at(r, prev);
        for (std::size_t r = 0; r < data_dim; ++r) m.at(r, c) -= proj * m.at(r, prev);
      }
      double norm = 0.0;
      for (std::size_t r = 0; r < data_dim; ++r) norm += m.at(r, c) * m.at(r, c);
      norm = std::sqrt(norm);
      for (std::size_t r = 0; r < data_dim; ++r) m.at(r, c) /= norm;
    }
    maps.push_back(numerics::scale(m, 0.3));
  }
  ToyGenerator gen(latent_dim, gating_dim, 8.0, std::move(gates), std::move(offsets),
                   std::move(maps));

  numerics::RngStream ext_rng(numerics::derive_seed(42, "world-extractor"));
  Tensor w = ext_rng.normal_tensor({feature_dim, data_dim});
  // Orthonormal rows keep the map well conditioned; 0.35 keeps tanh gentle.
  for (std::size_t r = 0; r < feature_dim; ++r) {
    for (std::size_t prev = 0; prev < r; ++prev) {
      double proj = 0.0;
      for (std::size_t c = 0; c < data_dim; ++c) proj += w.at(r, c) * w.at(prev, c);
      for (std::size_t c = 0; c < data_dim; ++c) w.at(r, c) -= proj * w.at(prev, c);
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < data_dim; ++c) norm += w.at(r, c) * w.at(r, c);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < data_dim; ++c) w.at(r, c) = 0.35 * w.at(r, c) / norm;
  }
  Tensor b = numerics::scale(ext_rng.normal_tensor({feature_dim}), 0.05);
  FeatureExtractor ext(std::move(w), std::move(b), Squash::kTanh);

  return ToyWorld{std::move(mix), std::move(gen), std::move(ext)};
}

// --- serialization -----------------------------------------------------------------

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
  if (t.rank() <= 1) {
    nlohmann::json arr = nlohmann::json::array();
    for (double v : t.data()) arr.push_back(v);
    return arr;
  }
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t.at(r, c));
    arr.push_back(row);
  }
  return arr;
}

Tensor vector_from_json(const nlohmann::json& j) {
  std::vector<double> v;
  for (const auto& x : j) v.push_back(x.get<double>());
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor matrix_from_json(const nlohmann::json& j) {
  const std::size_t rows = j.size();
  const std::size_t cols = j.at(0).size();
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = j.at(r).at(c).get<double>();
  }
  return t;
}

}  // namespace

std::string world_to_json(const ToyWorld& world) {
  nlohmann::json j;
  j["format"] = "raregen-world";
  j["version"] = 1;
  j["data_dim"] = world.mixture.data_dim;
  j["latent_dim"] = world.generator.latent_dim();
  j["gating_dim"] = world.generator.gating_dim();
  j["feature_dim"] = world.extractor.feature_dim();
  j["alpha"] = world.generator.alpha();
  nlohmann::json comps = nlohmann::json::array();
  for (const MixtureComponent& c : world.mixture.components) {
    comps.push_back({{"weight", c.weight},
                     {"mean", tensor_to_json(c.mean)},
                     {"cov", tensor_to_json(c.cov)}});
  }
  j["components"] = comps;
  nlohmann::json gen;
  gen["gate_directions"] = tensor_to_json(world.generator.gate_directions());
  nlohmann::json offsets = nlohmann::json::array();
  nlohmann::json maps = nlohmann::json::array();
  for (std::size_t k = 0; k < world.generator.component_count(); ++k) {
    offsets.push_back(tensor_to_json(world.generator.offsets()[k]));
    maps.push_back(tensor_to_json(world.generator.maps()[k]));
  }
  gen["offsets"] = offsets;
  gen["maps"] = maps;
  j["generator"] = gen;
  j["extractor"] = {{"weight", tensor_to_json(world.extractor.weight())},
                    {"bias", tensor_to_json(world.extractor.bias())},
                    {"squash", world.extractor.squash() == Squash::kTanh ? "tanh" : "identity"}};
  return j.dump(2);
}

namespace {

ToyWorld world_from_resolved(const nlohmann::json& j) {
  MixtureSpec mix;
  mix.data_dim = j.at("data_dim").get<std::size_t>();
  for (const auto& cj : j.at("components")) {
    MixtureComponent c;
    c.weight = cj.at("weight").get<double>();
    c.mean = vector_from_json(cj.at("mean"));
    if (cj.contains("cov")) {
      c.cov = matrix_from_json(cj.at("cov"));
    } else {
      const double s = cj.at("cov_scale").get<double>();
      c.cov = numerics::scale(Tensor::identity(mix.data_dim), s * s);
    }
    mix.components.push_back(std::move(c));
  }
  mix.validate();

  const auto& gj = j.at("generator");
  std::vector<Tensor> offsets, maps;
  for (const auto& oj : gj.at("offsets")) offsets.push_back(vector_from_json(oj));
  for (const auto& mj : gj.at("maps")) maps.push_back(matrix_from_json(mj));
  ToyGenerator gen(j.at("latent_dim").get<std::size_t>(), j.at("gating_dim").get<std::size_t>(),
                   j.at("alpha").get<double>(), matrix_from_json(gj.at("gate_directions")),
                   std::move(offsets), std::move(maps));

  const auto& ej = j.at("extractor");
  const std::string squash = ej.value("squash", "tanh");
  FeatureExtractor ext(matrix_from_json(ej.at("weight")), vector_from_json(ej.at("bias")),
                       squash == "identity" ? Squash::kIdentity : Squash::kTanh);
  return ToyWorld{std::move(mix), std::move(gen), std::move(ext)};
}

}  // namespace

ToyWorld world_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  if (j.contains("world")) j = j.at("world");
  if (j.value("format", "") == "raregen-world" || j.contains("generator")) {
    return world_from_resolved(j);
  }
  if (j.empty() || j.value("preset", "") == "default") {
    return ToyWorld::shipped_default();
  }
  throw IoError("world file: unrecognized schema (expected resolved world or preset)");
}

ToyWorld load_world(const std::filesystem::path& path) {
  return world_from_json(load_structured(path).dump());
}

}  // namespace raregen::toy
