#include "raregen/rare_optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "raregen/errors.hpp"
#include "raregen/optim.hpp"

namespace raregen::rareopt {

using numerics::NodeId;
using numerics::Tape;
using numerics::Tensor;

Metric metric_from_string(const std::string& name) {
  if (name == "euclidean" || name == "l2") return Metric::kEuclidean;
  if (name == "l1") return Metric::kL1;
  if (name == "cosine") return Metric::kCosine;
  throw ContractViolation("unknown distance metric: " + name);
}

std::string metric_to_string(Metric metric) {
  switch (metric) {
    case Metric::kEuclidean: return "euclidean";
    case Metric::kL1: return "l1";
    case Metric::kCosine: return "cosine";
  }
  return "?";
}

double metric_distance(std::span<const double> a, std::span<const double> b, Metric metric) {
  if (a.size() != b.size()) throw ContractViolation("metric_distance: dimension mismatch");
  switch (metric) {
    case Metric::kEuclidean:
      return numerics::euclidean_distance(a, b);
    case Metric::kL1: {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
      return s;
    }
    case Metric::kCosine: {
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
    }
  }
  return 0.0;
}

double penalizing_boundary(std::span<const double> x_star, const knn::FeatureSet& fakes,
                           std::size_t k_prime) {
  if (fakes.dim() != x_star.size()) {
    throw ContractViolation("penalizing_boundary: dimension mismatch");
  }
  std::optional<std::size_t> self;
  for (std::size_t i = 0; i < fakes.size(); ++i) {
    auto p = fakes.point(i);
    if (std::equal(p.begin(), p.end(), x_star.begin(), x_star.end())) {
      self = i;  // exclude exactly one instance
      break;
    }
  }
  return knn::knnd(x_star, fakes, k_prime, self);
}

double loss_sim(std::span<const double> x, std::span<const double> x_star, double d_star,
                Metric metric) {
  if (d_star <= 0.0) throw ContractViolation("loss_sim: d* must be positive");
  const double d = metric_distance(x, x_star, metric);
  const double over = std::max(d, d_star) - d_star;
  return over * over;
}

double loss_div(std::size_t index, const std::vector<Tensor>& features, Metric metric) {
  if (features.empty()) throw ContractViolation("loss_div: empty iterate set");
  if (index >= features.size()) throw ContractViolation("loss_div: index out of range");
  double s = 0.0;
  for (std::size_t j = 0; j < features.size(); ++j) {
    if (j == index) continue;
    const double d = metric_distance(features[index].data(), features[j].data(), metric);
    s -= d * d;
  }
  return s;
}

std::vector<Tensor> init_starts(const Tensor& z_star, std::size_t n, double sigma,
                                std::uint64_t seed) {
  if (n == 0) throw ContractViolation("init_starts: need at least one start");
  if (sigma <= 0.0) throw ContractViolation("init_starts: sigma must be positive");
  numerics::RngStream rng(seed);
  std::vector<Tensor> starts;
  starts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor z = z_star;
    for (auto& v : z.data()) v += sigma * rng.normal();
    starts.push_back(std::move(z));
  }
  return starts;
}

ReferenceContext make_reference_context(Tensor z_star, const toy::ToyGenerator& G,
                                        const toy::FeatureExtractor& f,
                                        const knn::FeatureSet& fakes, std::size_t k_prime,
                                        const knn::KnnManifold& real_manifold) {
  ReferenceContext ctx;
  ctx.x_star = f.extract(G.generate(z_star));
  ctx.z_star = std::move(z_star);
  ctx.d_star = penalizing_boundary(ctx.x_star.data(), fakes, k_prime);
  if (ctx.d_star <= 1e-9) {
    throw DegenerateBoundaryError("reference has a degenerate penalizing boundary (d* = " +
                                  std::to_string(ctx.d_star) + ")");
  }
  ctx.real_manifold = &real_manifold;
  return ctx;
}

namespace {

// Metric distance between two feature nodes.
NodeId distance_on_tape(Tape& tape, NodeId a, NodeId b, Metric metric) {
  switch (metric) {
    case Metric::kEuclidean: {
      const NodeId diff = tape.sub(a, b);
      return tape.sqrt(tape.sum(tape.mul(diff, diff)));
    }
    case Metric::kL1:
      return tape.sum(tape.abs(tape.sub(a, b)));
    case Metric::kCosine: {
      const NodeId num = tape.dot(a, b);
      const NodeId den = tape.mul(tape.sqrt(tape.dot(a, a)), tape.sqrt(tape.dot(b, b)));
      return tape.offset(tape.neg(tape.div(num, den)), 1.0);
    }
  }
  throw ContractViolation("distance_on_tape: bad metric");
}

NodeId squared_distance_on_tape(Tape& tape, NodeId a, NodeId b, Metric metric) {
  if (metric == Metric::kEuclidean) {
    const NodeId diff = tape.sub(a, b);
    return tape.sum(tape.mul(diff, diff));
  }
  const NodeId d = distance_on_tape(tape, a, b, metric);
  return tape.mul(d, d);
}

}  // namespace

OptimizationResult optimize_reference(const ReferenceContext& ctx, const OptimizerConfig& config,
                                      const toy::ToyGenerator& G, const toy::FeatureExtractor& f,
                                      const flow::FlowModel& flow_model, std::uint64_t seed) {
  if (ctx.real_manifold == nullptr) throw ContractViolation("optimize_reference: missing manifold");
  if (ctx.d_star <= 0.0) throw ContractViolation("optimize_reference: d* must be positive");
  const std::size_t n = config.n_starts;
  const std::size_t m = ctx.z_star.size();

  std::vector<Tensor> starts =
      init_starts(ctx.z_star, n, config.sigma, numerics::derive_seed(seed, "starts"));
  // One stacked parameter so the coupled objective steps all starts together.
  std::vector<Tensor> params{Tensor({n * m})};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < m; ++d) params[0][i * m + d] = starts[i][d];
  }
  numerics::AdamState adam = numerics::AdamState::for_shapes(params);
  const numerics::StepLrSchedule schedule{config.base_lr, config.lr_step_size, config.lr_gamma};

  OptimizationResult result;
  result.starts.assign(n, StartResult{});
  result.epochs_run = config.max_epochs;

  for (long epoch = 0; epoch <= config.max_epochs; ++epoch) {
    Tape tape;
    const NodeId zs = tape.leaf(params[0]);
    const NodeId x_star = tape.constant(ctx.x_star);
    const flow::FlowModel::Bindings flow_bind = flow_model.bind_on_tape(tape, /*trainable=*/false);

    std::vector<NodeId> x_nodes(n), d_ref(n), l_rare(n), l_sim(n);
    for (std::size_t i = 0; i < n; ++i) {
      const NodeId z_i = tape.slice(zs, i * m, m);
      x_nodes[i] = f.extract_on_tape(tape, G.generate_on_tape(tape, z_i));
      l_rare[i] = flow_model.logprob_on_tape(tape, flow_bind, x_nodes[i]).logp;
      d_ref[i] = distance_on_tape(tape, x_nodes[i], x_star, config.metric);
      const NodeId over = tape.relu(tape.offset(d_ref[i], -ctx.d_star));
      l_sim[i] = tape.mul(over, over);
    }
    // Pairwise squared distances are shared between the coupled diversity terms.
    std::vector<std::vector<NodeId>> pair_sq(n, std::vector<NodeId>(n, -1));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        pair_sq[i][j] = squared_distance_on_tape(tape, x_nodes[i], x_nodes[j], config.metric);
        pair_sq[j][i] = pair_sq[i][j];
      }
    }

    NodeId total = tape.constant_scalar(0.0);
    std::vector<LossBreakdown> losses(n);
    std::vector<bool> feasible_now(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      NodeId div_sum = tape.constant_scalar(0.0);
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) div_sum = tape.add(div_sum, pair_sq[i][j]);
      }
      const NodeId l_div = tape.neg(div_sum);
      const NodeId total_i = tape.add(
          l_rare[i],
          tape.add(tape.scale(l_sim[i], config.lambda1), tape.scale(l_div, config.lambda2)));
      total = tape.add(total, total_i);

      LossBreakdown lb;
      lb.l_rare = tape.value(l_rare[i])[0];
      lb.l_sim = tape.value(l_sim[i])[0];
      lb.l_div = tape.value(l_div)[0];
      lb.total = tape.value(total_i)[0];
      losses[i] = lb;

      const Tensor& x_val = tape.value(x_nodes[i]);
      const bool in_manifold = ctx.real_manifold->contains(x_val.data());
      const bool in_boundary = tape.value(d_ref[i])[0] <= ctx.d_star;
      feasible_now[i] = in_manifold && in_boundary;
      if (feasible_now[i]) {
        StartResult& sr = result.starts[i];
        if (epoch == 0) sr.initially_feasible = true;
        if (!sr.feasible || lb.total < sr.best_loss.total) {
          sr.feasible = true;
          sr.best_epoch = epoch;
          sr.best_loss = lb;
          sr.best_x = x_val;
          sr.best_z = Tensor({m});
          for (std::size_t d = 0; d < m; ++d) sr.best_z[d] = params[0][i * m + d];
        }
      }
    }
    if (config.record_trace) {
      result.trace.push_back({epoch, losses, feasible_now});
    }

    if (epoch < config.max_epochs) {
      try {
        numerics::GradientMap grads = tape.backward(total);
        std::vector<Tensor> grad_tensors{grads.at(zs)};
        adam_step(params, grad_tensors, adam, numerics::steplr(schedule, epoch));
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " [reference optimization epoch " +
                           std::to_string(epoch) + "]");
      }
    }
  }
  return result;
}

}  // namespace raregen::rareopt
