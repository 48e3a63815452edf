#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include "raregen/binio.hpp"
#include "raregen/errors.hpp"
#include "raregen/flow.hpp"
#include "raregen/linalg.hpp"

namespace raregen::flow {

using numerics::NodeId;
using numerics::Tape;
using numerics::Tensor;

namespace {

constexpr double kCouplingShift = 2.0;
const double kLogisticOfShift = 1.0 / (1.0 + std::exp(-kCouplingShift));
const double kLogLogisticOfShift = std::log(kLogisticOfShift);
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * log(2*pi)
constexpr std::uint8_t kCheckpointVersion = 1;

void check_finite(const Tensor& t, const std::string& where) {
  if (!t.all_finite()) throw NumericError("non-finite intermediate at " + where);
}

}  // namespace

std::vector<BlockLayout> block_layouts(const FlowConfig& config) {
  if (config.input_dim < 2 || config.n_blocks < 1 || config.flows_per_block < 1 ||
      config.groups_per_block < 1 || config.hidden_width < 1) {
    throw ContractViolation("flow config: all sizes must be positive (input_dim >= 2)");
  }
  std::vector<BlockLayout> layouts;
  std::size_t c = 1, d = config.input_dim;
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    if (d % config.groups_per_block != 0) {
      throw ContractViolation("flow config: width " + std::to_string(d) + " at block " +
                              std::to_string(b) + " is not divisible by " +
                              std::to_string(config.groups_per_block) + " groups");
    }
    BlockLayout layout;
    layout.c_in = c;
    layout.d_in = d;
    layout.c_flow = c * config.groups_per_block;
    layout.d_flow = d / config.groups_per_block;
    if (layout.c_flow % 2 != 0) {
      throw ContractViolation("flow config: block " + std::to_string(b) + " has " +
                              std::to_string(layout.c_flow) +
                              " channels; coupling needs an even channel count");
    }
    const bool last = (b + 1 == config.n_blocks);
    layout.collect = last ? layout.c_flow : layout.c_flow / 2;
    layouts.push_back(layout);
    c = layout.c_flow / 2;
    d = layout.d_flow;
  }
  return layouts;
}

// --- MinMaxScaler ------------------------------------------------------------

MinMaxScaler MinMaxScaler::fit(const knn::FeatureSet& data, double eps) {
  if (data.size() == 0) throw ContractViolation("scaler fit: empty data");
  const std::size_t n = data.dim();
  Tensor lo({n}), hi({n});
  for (std::size_t d = 0; d < n; ++d) {
    lo[d] = data.point(0)[d];
    hi[d] = data.point(0)[d];
  }
  for (std::size_t i = 1; i < data.size(); ++i) {
    auto p = data.point(i);
    for (std::size_t d = 0; d < n; ++d) {
      lo[d] = std::min(lo[d], p[d]);
      hi[d] = std::max(hi[d], p[d]);
    }
  }
  return from_bounds(std::move(lo), std::move(hi), eps);
}

MinMaxScaler MinMaxScaler::from_bounds(Tensor min, Tensor max, double eps) {
  if (!min.same_shape(max)) throw ContractViolation("scaler: min/max shape mismatch");
  MinMaxScaler s;
  s.eps_ = eps;
  s.range_ = Tensor(min.shape());
  for (std::size_t d = 0; d < min.size(); ++d) {
    if (max[d] < min[d]) throw ContractViolation("scaler: max < min");
    s.range_[d] = max[d] - min[d] + eps;
  }
  s.min_ = std::move(min);
  return s;
}

MinMaxScaler MinMaxScaler::from_min_range(Tensor min, Tensor range, double eps) {
  if (!min.same_shape(range)) throw ContractViolation("scaler: min/range shape mismatch");
  for (std::size_t d = 0; d < range.size(); ++d) {
    if (range[d] <= 0.0) throw ContractViolation("scaler: nonpositive range");
  }
  MinMaxScaler s;
  s.eps_ = eps;
  s.min_ = std::move(min);
  s.range_ = std::move(range);
  return s;
}

Tensor MinMaxScaler::scale(const Tensor& x) const {
  if (x.size() != dim()) throw ContractViolation("scaler: dimension mismatch");
  Tensor out = x;
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = (out[d] - min_[d]) / range_[d];
  return out;
}

Tensor MinMaxScaler::unscale(const Tensor& z) const {
  if (z.size() != dim()) throw ContractViolation("scaler: dimension mismatch");
  Tensor out = z;
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = out[d] * range_[d] + min_[d];
  return out;
}

Tensor MinMaxScaler::midpoint() const {
  Tensor out = min_;
  for (std::size_t d = 0; d < out.size(); ++d) out[d] += 0.5 * (range_[d] - eps_);
  return out;
}

double MinMaxScaler::logdet_constant() const {
  double s = 0.0;
  for (std::size_t d = 0; d < range_.size(); ++d) s -= std::log(range_[d]);
  return s;
}

// --- layers ------------------------------------------------------------------

InvertibleLinear InvertibleLinear::identity(std::size_t n) {
  InvertibleLinear lin;
  lin.size = n;
  lin.row_src.resize(n);
  for (std::size_t i = 0; i < n; ++i) lin.row_src[i] = i;
  lin.diag_sign.assign(n, 1.0);
  lin.lower = Tensor({n, n});
  lin.upper = Tensor({n, n});
  lin.log_diag = Tensor({n});
  return lin;
}

InvertibleLinear InvertibleLinear::from_rotation(std::size_t n, numerics::RngStream& rng) {
  // Gram-Schmidt on a seeded Gaussian matrix gives the initial rotation.
  Tensor w({n, n});
  while (true) {
    Tensor g = rng.normal_tensor({n, n});
    bool ok = true;
    for (std::size_t c = 0; c < n && ok; ++c) {
      for (std::size_t r = 0; r < n; ++r) w.at(r, c) = g.at(r, c);
      for (std::size_t prev = 0; prev < c; ++prev) {
        double proj = 0.0;
        for (std::size_t r = 0; r < n; ++r) proj += w.at(r, c) * w.at(r, prev);
        for (std::size_t r = 0; r < n; ++r) w.at(r, c) -= proj * w.at(r, prev);
      }
      double norm = 0.0;
      for (std::size_t r = 0; r < n; ++r) norm += w.at(r, c) * w.at(r, c);
      norm = std::sqrt(norm);
      if (norm < 1e-8) {
        ok = false;
        break;
      }
      for (std::size_t r = 0; r < n; ++r) w.at(r, c) /= norm;
    }
    if (ok) break;
  }

  numerics::LuFactors lu = numerics::lu_factor(w);
  InvertibleLinear lin;
  lin.size = n;
  lin.row_src.resize(n);
  for (std::size_t j = 0; j < n; ++j) lin.row_src[lu.perm[j]] = j;
  lin.lower = Tensor({n, n});
  lin.upper = Tensor({n, n});
  lin.log_diag = Tensor({n});
  lin.diag_sign.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < r; ++c) lin.lower.at(r, c) = lu.lower.at(r, c);
    for (std::size_t c = r + 1; c < n; ++c) lin.upper.at(r, c) = lu.upper.at(r, c);
    const double diag = lu.upper.at(r, r);
    lin.diag_sign[r] = diag >= 0.0 ? 1.0 : -1.0;
    lin.log_diag[r] = std::log(std::abs(diag));
  }
  return lin;
}

Tensor InvertibleLinear::materialize() const {
  const std::size_t n = size;
  Tensor l = Tensor::identity(n);
  Tensor u({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < r; ++c) l.at(r, c) = lower.at(r, c);
    for (std::size_t c = r + 1; c < n; ++c) u.at(r, c) = upper.at(r, c);
    u.at(r, r) = diag_sign[r] * std::exp(log_diag[r]);
  }
  Tensor lu = numerics::matmul(l, u);
  Tensor w({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) w.at(r, c) = lu.at(row_src[r], c);
  }
  return w;
}

double InvertibleLinear::logdet_per_column() const { return numerics::sum(log_diag); }

ActNorm ActNorm::neutral(std::size_t channels) {
  return ActNorm{Tensor({channels}), Tensor({channels})};
}

Coupling Coupling::zero_init(std::size_t in_flat, std::size_t out_flat, std::size_t hidden) {
  Coupling c;
  c.in_flat = in_flat;
  c.out_flat = out_flat;
  c.hidden = hidden;
  c.w1 = Tensor({hidden, in_flat});
  c.b1 = Tensor({hidden});
  c.w2 = Tensor({2 * out_flat, hidden});
  c.b2 = Tensor({2 * out_flat});
  return c;
}

Coupling Coupling::seeded_init(std::size_t in_flat, std::size_t out_flat, std::size_t hidden,
                               numerics::RngStream& rng) {
  Coupling c = zero_init(in_flat, out_flat, hidden);
  const double std1 = 1.0 / std::sqrt(static_cast<double>(in_flat));
  for (auto& v : c.w1.data()) v = std1 * rng.normal();
  return c;
}

// --- model construction --------------------------------------------------------

FlowModel FlowModel::build(const FlowConfig& config, MinMaxScaler scaler) {
  if (scaler.dim() != config.input_dim) {
    throw ContractViolation("flow: scaler dimension does not match input_dim");
  }
  FlowModel m;
  m.config_ = config;
  m.scaler_ = std::move(scaler);
  m.layouts_ = block_layouts(config);
  for (const BlockLayout& layout : m.layouts_) {
    FlowBlock block;
    block.pre = InvertibleLinear::identity(layout.c_in);
    const std::size_t half_flat = (layout.c_flow / 2) * layout.d_flow;
    for (std::size_t f = 0; f < config.flows_per_block; ++f) {
      FlowStep step;
      step.act = ActNorm::neutral(layout.c_flow);
      step.conv = InvertibleLinear::identity(layout.c_flow);
      step.coup = Coupling::zero_init(half_flat, half_flat, config.hidden_width);
      block.steps.push_back(std::move(step));
    }
    m.blocks_.push_back(std::move(block));
  }
  return m;
}

FlowModel FlowModel::identity(const FlowConfig& config, MinMaxScaler scaler) {
  return build(config, std::move(scaler));
}

FlowModel FlowModel::random_init(const FlowConfig& config, MinMaxScaler scaler,
                                 numerics::RngStream& rng) {
  FlowModel m = build(config, std::move(scaler));
  for (std::size_t b = 0; b < m.blocks_.size(); ++b) {
    const BlockLayout& layout = m.layouts_[b];
    FlowBlock& block = m.blocks_[b];
    block.pre = InvertibleLinear::from_rotation(layout.c_in, rng);
    const std::size_t half_flat = (layout.c_flow / 2) * layout.d_flow;
    for (FlowStep& step : block.steps) {
      step.conv = InvertibleLinear::from_rotation(layout.c_flow, rng);
      step.coup = Coupling::seeded_init(half_flat, half_flat, config.hidden_width, rng);
    }
  }
  return m;
}

// --- plain forward / inverse ---------------------------------------------------

namespace {

Tensor apply_linear(const InvertibleLinear& lin, const Tensor& state) {
  return numerics::matmul(lin.materialize(), state);
}

Tensor apply_linear_inverse(const InvertibleLinear& lin, const Tensor& state) {
  const std::size_t n = lin.size;
  Tensor l = Tensor::identity(n);
  Tensor u({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < r; ++c) l.at(r, c) = lin.lower.at(r, c);
    for (std::size_t c = r + 1; c < n; ++c) u.at(r, c) = lin.upper.at(r, c);
    u.at(r, r) = lin.diag_sign[r] * std::exp(lin.log_diag[r]);
  }
  Tensor out({state.rows(), state.cols()});
  Tensor col({n});
  for (std::size_t d = 0; d < state.cols(); ++d) {
    // y = W x with W rows drawn from LU via row_src, so (LU x)[row_src[i]] = y[i].
    for (std::size_t i = 0; i < n; ++i) col[lin.row_src[i]] = state.at(i, d);
    Tensor x = numerics::solve_upper(u, numerics::solve_lower_unit(l, col));
    for (std::size_t i = 0; i < n; ++i) out.at(i, d) = x[i];
  }
  return out;
}

struct CouplingOut {
  Tensor state;
  double logdet;
};

CouplingOut apply_coupling(const Coupling& coup, const Tensor& state) {
  const std::size_t c = state.rows(), d = state.cols();
  const std::size_t half = coup.in_flat;  // == (c/2) * d
  Tensor xa({half});
  Tensor xb({half});
  for (std::size_t i = 0; i < half; ++i) {
    xa[i] = state[i];
    xb[i] = state[half + i];
  }
  Tensor h = numerics::matvec(coup.w1, xa);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::tanh(h[i] + coup.b1[i]);
  Tensor o = numerics::matvec(coup.w2, h);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += coup.b2[i];
  double logdet = 0.0;
  Tensor out({c, d});
  for (std::size_t i = 0; i < half; ++i) out[i] = xa[i];
  for (std::size_t i = 0; i < half; ++i) {
    const double t = o[i];
    const double raw = o[half + i];
    // Scale in log space keeps the zero-initialized coupling an exact identity.
    const double log_scale =
        std::log(1.0 / (1.0 + std::exp(-(raw + kCouplingShift)))) - kLogLogisticOfShift;
    out[half + i] = xb[i] * std::exp(log_scale) + t;
    logdet += log_scale;
  }
  return {std::move(out), logdet};
}

Tensor invert_coupling(const Coupling& coup, const Tensor& state) {
  const std::size_t c = state.rows(), d = state.cols();
  const std::size_t half = coup.in_flat;
  Tensor xa({half});
  for (std::size_t i = 0; i < half; ++i) xa[i] = state[i];
  Tensor h = numerics::matvec(coup.w1, xa);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::tanh(h[i] + coup.b1[i]);
  Tensor o = numerics::matvec(coup.w2, h);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += coup.b2[i];
  Tensor out({c, d});
  for (std::size_t i = 0; i < half; ++i) out[i] = xa[i];
  for (std::size_t i = 0; i < half; ++i) {
    const double t = o[i];
    const double raw = o[half + i];
    const double log_scale =
        std::log(1.0 / (1.0 + std::exp(-(raw + kCouplingShift)))) - kLogLogisticOfShift;
    out[half + i] = (state[half + i] - t) / std::exp(log_scale);
  }
  return out;
}

std::string layer_name(std::size_t b, std::size_t f, const char* kind) {
  return "block " + std::to_string(b) + " flow " + std::to_string(f) + " " + kind;
}

}  // namespace

LogProbResult FlowModel::forward_logprob(const Tensor& x) const {
  if (x.size() != config_.input_dim) throw ContractViolation("forward_logprob: dimension mismatch");
  if (!x.all_finite()) throw ContractViolation("forward_logprob: non-finite input");
  Tensor state = scaler_.scale(x).reshaped({1, config_.input_dim});
  double logdet = 0.0;
  std::vector<double> latents;
  latents.reserve(config_.input_dim);
  double gauss = 0.0;
  auto collect = [&](const Tensor& part) {
    double ss = 0.0;
    for (double z : part.data()) {
      latents.push_back(z);
      ss += z * z;
    }
    gauss += -0.5 * ss - kHalfLog2Pi * static_cast<double>(part.size());
  };

  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const BlockLayout& layout = layouts_[b];
    const FlowBlock& block = blocks_[b];
    state = apply_linear(block.pre, state);
    logdet += static_cast<double>(layout.d_in) * block.pre.logdet_per_column();
    check_finite(state, "block " + std::to_string(b) + " pre-mix");
    state = state.reshaped({layout.c_flow, layout.d_flow});
    for (std::size_t f = 0; f < block.steps.size(); ++f) {
      const FlowStep& step = block.steps[f];
      for (std::size_t c = 0; c < layout.c_flow; ++c) {
        const double s = std::exp(step.act.log_scale[c]);
        for (std::size_t d = 0; d < layout.d_flow; ++d) {
          state.at(c, d) = s * state.at(c, d) + step.act.bias[c];
        }
      }
      logdet += static_cast<double>(layout.d_flow) * numerics::sum(step.act.log_scale);
      check_finite(state, layer_name(b, f, "actnorm"));

      state = apply_linear(step.conv, state);
      logdet += static_cast<double>(layout.d_flow) * step.conv.logdet_per_column();
      check_finite(state, layer_name(b, f, "mix"));

      CouplingOut co = apply_coupling(step.coup, state);
      state = std::move(co.state);
      logdet += co.logdet;
      check_finite(state, layer_name(b, f, "coupling"));
    }
    const std::size_t keep = layout.c_flow / 2;
    const std::size_t half_flat = keep * layout.d_flow;
    if (b + 1 < blocks_.size()) {
      Tensor out_part({half_flat});
      Tensor next({keep, layout.d_flow});
      for (std::size_t i = 0; i < half_flat; ++i) {
        next[i] = state[i];
        out_part[i] = state[half_flat + i];
      }
      collect(out_part);
      state = std::move(next);
    } else {
      collect(state.reshaped({state.size()}));
    }
  }
  LogProbResult result;
  const std::size_t latent_count = latents.size();
  result.latents = Tensor({latent_count}, std::move(latents));
  result.layer_logdet = logdet;
  result.logp = gauss + logdet;
  if (!std::isfinite(result.logp)) throw NumericError("non-finite log-likelihood");
  return result;
}

Tensor FlowModel::inverse(const Tensor& latents) const {
  if (latents.size() != config_.input_dim) throw ContractViolation("inverse: dimension mismatch");
  // Unpack the collection-order parts.
  std::vector<Tensor> parts;
  std::size_t at = 0;
  for (std::size_t b = 0; b < layouts_.size(); ++b) {
    const std::size_t len = layouts_[b].collect * layouts_[b].d_flow;
    Tensor part({len});
    for (std::size_t i = 0; i < len; ++i) part[i] = latents[at + i];
    at += len;
    parts.push_back(std::move(part));
  }

  Tensor state;
  for (std::size_t bi = blocks_.size(); bi-- > 0;) {
    const BlockLayout& layout = layouts_[bi];
    const FlowBlock& block = blocks_[bi];
    if (bi + 1 == blocks_.size()) {
      state = parts[bi].reshaped({layout.c_flow, layout.d_flow});
    } else {
      // Rebuild the pre-split state: kept half on top, collected half below.
      const std::size_t keep = layout.c_flow / 2;
      const std::size_t half_flat = keep * layout.d_flow;
      Tensor merged({layout.c_flow, layout.d_flow});
      for (std::size_t i = 0; i < half_flat; ++i) {
        merged[i] = state[i];
        merged[half_flat + i] = parts[bi][i];
      }
      state = std::move(merged);
    }
    for (std::size_t fi = block.steps.size(); fi-- > 0;) {
      const FlowStep& step = block.steps[fi];
      state = invert_coupling(step.coup, state);
      state = apply_linear_inverse(step.conv, state);
      for (std::size_t c = 0; c < layout.c_flow; ++c) {
        const double s = std::exp(step.act.log_scale[c]);
        for (std::size_t d = 0; d < layout.d_flow; ++d) {
          state.at(c, d) = (state.at(c, d) - step.act.bias[c]) / s;
        }
      }
      check_finite(state, layer_name(bi, fi, "inverse"));
    }
    state = state.reshaped({layout.c_in, layout.d_in});
    state = apply_linear_inverse(block.pre, state);
  }
  return scaler_.unscale(state.reshaped({config_.input_dim}));
}

// --- actnorm data-dependent init -------------------------------------------------

void FlowModel::data_init_actnorm(const knn::FeatureSet& batch) {
  if (batch.size() < 2) throw ContractViolation("actnorm init: need at least 2 rows");
  std::vector<Tensor> states;
  states.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    states.push_back(scaler_.scale(batch.point_tensor(i)).reshaped({1, config_.input_dim}));
  }
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const BlockLayout& layout = layouts_[b];
    FlowBlock& block = blocks_[b];
    for (Tensor& s : states) {
      s = apply_linear(block.pre, s).reshaped({layout.c_flow, layout.d_flow});
    }
    for (FlowStep& step : block.steps) {
      // Choose scale and bias so this layer's outputs are standardized per channel.
      for (std::size_t c = 0; c < layout.c_flow; ++c) {
        double mean = 0.0, sq = 0.0;
        const double count = static_cast<double>(states.size() * layout.d_flow);
        for (const Tensor& s : states) {
          for (std::size_t d = 0; d < layout.d_flow; ++d) {
            mean += s.at(c, d);
            sq += s.at(c, d) * s.at(c, d);
          }
        }
        mean /= count;
        const double var = std::max(sq / count - mean * mean, 0.0);
        const double stddev = std::max(std::sqrt(var), 1e-6);
        step.act.log_scale[c] = -std::log(stddev);
        step.act.bias[c] = -mean / stddev;
      }
      for (Tensor& s : states) {
        for (std::size_t c = 0; c < layout.c_flow; ++c) {
          const double sc = std::exp(step.act.log_scale[c]);
          for (std::size_t d = 0; d < layout.d_flow; ++d) {
            s.at(c, d) = sc * s.at(c, d) + step.act.bias[c];
          }
        }
        s = apply_linear(step.conv, s);
        s = apply_coupling(step.coup, s).state;
      }
    }
    if (b + 1 < blocks_.size()) {
      const std::size_t keep = layout.c_flow / 2;
      for (Tensor& s : states) {
        Tensor next({keep, layout.d_flow});
        for (std::size_t i = 0; i < next.size(); ++i) next[i] = s[i];
        s = std::move(next);
      }
    }
  }
}

// --- tape paths ------------------------------------------------------------------

namespace {

FlowModel::BoundLinear bind_linear(Tape& tape, const InvertibleLinear& lin, std::size_t width,
                                   bool trainable, std::vector<NodeId>* leaves) {
  const std::size_t n = lin.size;
  if (!trainable) {
    FlowModel::BoundLinear out;
    out.w = tape.constant(lin.materialize());
    out.logdet =
        tape.constant_scalar(static_cast<double>(width) * lin.logdet_per_column());
    return out;
  }
  const NodeId lower = tape.leaf(lin.lower);
  const NodeId upper = tape.leaf(lin.upper);
  const NodeId log_diag = tape.leaf(lin.log_diag);
  leaves->insert(leaves->end(), {lower, upper, log_diag});

  Tensor lower_mask({n, n}), upper_mask({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      lower_mask.at(r, c) = (r > c) ? 1.0 : 0.0;
      upper_mask.at(r, c) = (r < c) ? 1.0 : 0.0;
    }
  }
  const NodeId l = tape.add(tape.mul(lower, tape.constant(std::move(lower_mask))),
                            tape.constant(Tensor::identity(n)));
  const NodeId diag_vec = tape.mul(
      tape.exp(log_diag), tape.constant(Tensor({n}, {lin.diag_sign.begin(), lin.diag_sign.end()})));
  const NodeId u = tape.add(tape.mul(upper, tape.constant(std::move(upper_mask))),
                            tape.diag(diag_vec));
  FlowModel::BoundLinear out;
  out.w = tape.permute_rows(tape.matmul(l, u), {lin.row_src.begin(), lin.row_src.end()});
  out.logdet = tape.scale(tape.sum(log_diag), static_cast<double>(width));
  return out;
}

FlowModel::BoundActnorm bind_actnorm(Tape& tape, const ActNorm& act, std::size_t width,
                                     bool trainable, std::vector<NodeId>* leaves) {
  NodeId log_scale, bias;
  if (trainable) {
    log_scale = tape.leaf(act.log_scale);
    bias = tape.leaf(act.bias);
    leaves->insert(leaves->end(), {log_scale, bias});
  } else {
    log_scale = tape.constant(act.log_scale);
    bias = tape.constant(act.bias);
  }
  FlowModel::BoundActnorm out;
  out.scale_rows = tape.expand_rows(tape.exp(log_scale), width);
  out.bias_rows = tape.expand_rows(bias, width);
  out.logdet = tape.scale(tape.sum(log_scale), static_cast<double>(width));
  return out;
}

FlowModel::BoundCoupling bind_coupling(Tape& tape, const Coupling& coup, bool trainable,
                                       std::vector<NodeId>* leaves) {
  FlowModel::BoundCoupling out;
  if (trainable) {
    out.w1 = tape.leaf(coup.w1);
    out.b1 = tape.leaf(coup.b1);
    out.w2 = tape.leaf(coup.w2);
    out.b2 = tape.leaf(coup.b2);
    leaves->insert(leaves->end(), {out.w1, out.b1, out.w2, out.b2});
  } else {
    out.w1 = tape.constant(coup.w1);
    out.b1 = tape.constant(coup.b1);
    out.w2 = tape.constant(coup.w2);
    out.b2 = tape.constant(coup.b2);
  }
  return out;
}

}  // namespace

FlowModel::Bindings FlowModel::bind_on_tape(Tape& tape, bool trainable) const {
  Bindings b;
  b.scaler_min = tape.constant(scaler_.min());
  b.scaler_range = tape.constant(scaler_.range());
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    const BlockLayout& layout = layouts_[bi];
    BoundBlock bound;
    bound.pre = bind_linear(tape, blocks_[bi].pre, layout.d_in, trainable, &b.leaves);
    for (const FlowStep& step : blocks_[bi].steps) {
      BoundStep bs;
      bs.act = bind_actnorm(tape, step.act, layout.d_flow, trainable, &b.leaves);
      bs.conv = bind_linear(tape, step.conv, layout.d_flow, trainable, &b.leaves);
      bs.coup = bind_coupling(tape, step.coup, trainable, &b.leaves);
      bound.steps.push_back(bs);
    }
    b.blocks.push_back(std::move(bound));
  }
  return b;
}

FlowModel::TapeResult FlowModel::logprob_on_tape(Tape& tape, const Bindings& b,
                                                 NodeId x_raw) const {
  if (tape.value(x_raw).size() != config_.input_dim) {
    throw ContractViolation("logprob_on_tape: dimension mismatch");
  }
  NodeId state = tape.reshape(tape.div(tape.sub(x_raw, b.scaler_min), b.scaler_range),
                              {std::size_t{1}, config_.input_dim});
  NodeId logdet = tape.constant_scalar(0.0);
  NodeId gauss = tape.constant_scalar(0.0);
  TapeResult result;

  auto collect = [&](NodeId part_flat) {
    result.latent_parts.push_back(part_flat);
    const double n = static_cast<double>(tape.value(part_flat).size());
    NodeId part = tape.offset(tape.scale(tape.sum(tape.mul(part_flat, part_flat)), -0.5),
                              -kHalfLog2Pi * n);
    gauss = tape.add(gauss, part);
  };

  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    const BlockLayout& layout = layouts_[bi];
    const BoundBlock& block = b.blocks[bi];
    state = tape.matmul(block.pre.w, state);
    logdet = tape.add(logdet, block.pre.logdet);
    state = tape.reshape(state, {layout.c_flow, layout.d_flow});
    const std::size_t half_flat = (layout.c_flow / 2) * layout.d_flow;
    for (const BoundStep& step : block.steps) {
      state = tape.add(tape.mul(state, step.act.scale_rows), step.act.bias_rows);
      logdet = tape.add(logdet, step.act.logdet);

      state = tape.matmul(step.conv.w, state);
      logdet = tape.add(logdet, step.conv.logdet);

      const NodeId xa = tape.slice(state, 0, half_flat);
      const NodeId xb = tape.slice(state, half_flat, half_flat);
      const NodeId h = tape.tanh(tape.add(tape.matvec(step.coup.w1, xa), step.coup.b1));
      const NodeId o = tape.add(tape.matvec(step.coup.w2, h), step.coup.b2);
      const NodeId t = tape.slice(o, 0, half_flat);
      const NodeId raw = tape.slice(o, half_flat, half_flat);
      const NodeId log_scale = tape.offset(
          tape.log(tape.logistic(tape.offset(raw, kCouplingShift))), -kLogLogisticOfShift);
      const NodeId yb = tape.add(tape.mul(xb, tape.exp(log_scale)), t);
      logdet = tape.add(logdet, tape.sum(log_scale));
      const std::array<NodeId, 2> halves{xa, yb};
      state = tape.reshape(tape.concat(halves), {layout.c_flow, layout.d_flow});
    }
    if (bi + 1 < blocks_.size()) {
      collect(tape.slice(state, half_flat, half_flat));
      state = tape.reshape(tape.slice(state, 0, half_flat),
                           {layout.c_flow / 2, layout.d_flow});
    } else {
      collect(tape.reshape(state, {tape.value(state).size()}));
    }
  }
  result.logp = tape.add(gauss, logdet);
  return result;
}

Tensor FlowModel::grad_logprob(const Tensor& x) const {
  Tape tape;
  const NodeId x_node = tape.leaf(x);
  Bindings b = bind_on_tape(tape, /*trainable=*/false);
  TapeResult r = logprob_on_tape(tape, b, x_node);
  return tape.backward(r.logp).at(x_node);
}

// --- parameter traversal / serialization ----------------------------------------

namespace {
template <typename Model, typename Fn>
void visit_params_impl(Model& model, Fn&& fn) {
  for (auto& block : model) {
    fn(block.pre.lower);
    fn(block.pre.upper);
    fn(block.pre.log_diag);
    for (auto& step : block.steps) {
      fn(step.act.log_scale);
      fn(step.act.bias);
      fn(step.conv.lower);
      fn(step.conv.upper);
      fn(step.conv.log_diag);
      fn(step.coup.w1);
      fn(step.coup.b1);
      fn(step.coup.w2);
      fn(step.coup.b2);
    }
  }
}
}  // namespace

void FlowModel::visit_params(const std::function<void(Tensor&)>& fn) {
  visit_params_impl(blocks_, fn);
}

void FlowModel::visit_params(const std::function<void(const Tensor&)>& fn) const {
  visit_params_impl(blocks_, fn);
}

std::vector<Tensor> FlowModel::param_snapshot() const {
  std::vector<Tensor> out;
  visit_params([&](const Tensor& t) { out.push_back(t); });
  return out;
}

void FlowModel::restore_params(const std::vector<Tensor>& snapshot) {
  std::size_t i = 0;
  visit_params([&](Tensor& t) {
    if (i >= snapshot.size() || !t.same_shape(snapshot[i])) {
      throw ContractViolation("restore_params: snapshot does not match model");
    }
    t = snapshot[i++];
  });
  if (i != snapshot.size()) throw ContractViolation("restore_params: extra tensors in snapshot");
}

namespace {

void write_linear(std::ostream& os, const InvertibleLinear& lin) {
  for (std::size_t i : lin.row_src) detail::write_u32(os, static_cast<std::uint32_t>(i));
  for (double s : lin.diag_sign) detail::write_u8(os, s >= 0.0 ? 0 : 1);
  for (double v : lin.lower.data()) detail::write_f64(os, v);
  for (double v : lin.upper.data()) detail::write_f64(os, v);
  for (double v : lin.log_diag.data()) detail::write_f64(os, v);
}

void read_linear(std::istream& is, InvertibleLinear& lin) {
  for (auto& i : lin.row_src) i = detail::read_u32(is);
  for (auto& s : lin.diag_sign) s = detail::read_u8(is) == 0 ? 1.0 : -1.0;
  for (auto& v : lin.lower.data()) v = detail::read_f64(is);
  for (auto& v : lin.upper.data()) v = detail::read_f64(is);
  for (auto& v : lin.log_diag.data()) v = detail::read_f64(is);
}

void write_tensor_values(std::ostream& os, const Tensor& t) {
  for (double v : t.data()) detail::write_f64(os, v);
}

void read_tensor_values(std::istream& is, Tensor& t) {
  for (auto& v : t.data()) v = detail::read_f64(is);
}

}  // namespace

void FlowModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  detail::write_magic(os, "GFLW");
  detail::write_u8(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(config_.input_dim));
  detail::write_u32(os, static_cast<std::uint32_t>(config_.n_blocks));
  detail::write_u32(os, static_cast<std::uint32_t>(config_.flows_per_block));
  detail::write_u32(os, static_cast<std::uint32_t>(config_.groups_per_block));
  detail::write_u32(os, static_cast<std::uint32_t>(config_.hidden_width));
  detail::write_f64(os, scaler_.eps());
  write_tensor_values(os, scaler_.min());
  write_tensor_values(os, scaler_.range());
  for (const FlowBlock& block : blocks_) {
    write_linear(os, block.pre);
    for (const FlowStep& step : block.steps) {
      write_tensor_values(os, step.act.log_scale);
      write_tensor_values(os, step.act.bias);
      write_linear(os, step.conv);
      write_tensor_values(os, step.coup.w1);
      write_tensor_values(os, step.coup.b1);
      write_tensor_values(os, step.coup.w2);
      write_tensor_values(os, step.coup.b2);
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

FlowModel FlowModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  detail::expect_magic(is, "GFLW", path.string());
  const std::uint8_t version = detail::read_u8(is);
  if (version != kCheckpointVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  FlowConfig config;
  config.input_dim = detail::read_u32(is);
  config.n_blocks = detail::read_u32(is);
  config.flows_per_block = detail::read_u32(is);
  config.groups_per_block = detail::read_u32(is);
  config.hidden_width = detail::read_u32(is);
  const double eps = detail::read_f64(is);
  Tensor mn({config.input_dim}), range({config.input_dim});
  read_tensor_values(is, mn);
  read_tensor_values(is, range);
  FlowModel m = build(config, MinMaxScaler::from_min_range(std::move(mn), std::move(range), eps));
  for (FlowBlock& block : m.blocks_) {
    read_linear(is, block.pre);
    for (FlowStep& step : block.steps) {
      read_tensor_values(is, step.act.log_scale);
      read_tensor_values(is, step.act.bias);
      read_linear(is, step.conv);
      read_tensor_values(is, step.coup.w1);
      read_tensor_values(is, step.coup.b1);
      read_tensor_values(is, step.coup.w2);
      read_tensor_values(is, step.coup.b2);
    }
  }
  if (!is) throw IoError("truncated checkpoint: " + path.string());
  return m;
}

// --- public grouping op -----------------------------------------------------------

Tensor group(const Tensor& x, std::size_t groups) {
  if (groups == 0) throw ContractViolation("group: groups must be positive");
  const std::size_t c = x.rank() == 2 ? x.rows() : 1;
  const std::size_t d = x.rank() == 2 ? x.cols() : x.size();
  if (d % groups != 0) {
    throw ContractViolation("group: width " + std::to_string(d) + " not divisible by " +
                            std::to_string(groups));
  }
  return x.reshaped({c * groups, d / groups});
}

Tensor ungroup(const Tensor& x) { return x.reshaped({x.size()}); }

}  // namespace raregen::flow
