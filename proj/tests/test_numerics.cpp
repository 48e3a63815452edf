#include <cmath>

#include <doctest.h>

#include "raregen/autodiff.hpp"
#include "raregen/errors.hpp"
#include "raregen/linalg.hpp"
#include "raregen/optim.hpp"
#include "raregen/rng.hpp"
#include "raregen/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace raregen;
using numerics::Tape;
using numerics::Tensor;

TEST_CASE("tensor shape and value invariants") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ContractViolation);
  CHECK_THROWS_AS(t.reshaped({5}), ContractViolation);
  CHECK(Tensor::identity(3).at(2, 2) == 1.0);
}

TEST_CASE("backward: square at 3 gives 6") {
  Tape tape;
  const auto x = tape.leaf(Tensor::scalar(3.0));
  const auto y = tape.mul(x, x);
  const auto g = tape.backward(y);
  CHECK(g.at(x)[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward: sum gradient is all ones") {
  Tape tape;
  const auto x = tape.leaf(Tensor({3, 4}, std::vector<double>(12, 2.5)));
  const auto y = tape.sum(x);
  const auto g = tape.backward(y);
  for (std::size_t i = 0; i < 12; ++i) CHECK(g.at(x)[i] == 1.0);
}

TEST_CASE("backward: logistic at 0 gives 0.25 and matches finite differences") {
  Tape tape;
  const auto x = tape.leaf(Tensor::scalar(0.0));
  const auto y = tape.sum(tape.logistic(x));
  const auto g = tape.backward(y);
  CHECK(g.at(x)[0] == doctest::Approx(0.25).epsilon(1e-12));

  const auto f = [](const Tensor& v) {
    Tape t2;
    return t2.value(t2.logistic(t2.leaf(v)))[0];
  };
  const Tensor fd = testsupport::central_diff(f, Tensor::scalar(0.0), 1e-5);
  CHECK(std::abs(fd[0] - g.at(x)[0]) < 1e-6);
}

TEST_CASE("backward rejects non-scalar outputs") {
  Tape tape;
  const auto x = tape.leaf(Tensor::vec({1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), ContractViolation);
}

TEST_CASE("non-finite values and gradients name the offending node") {
  Tape tape;
  const auto x = tape.leaf(Tensor::scalar(-1.0));
  CHECK_THROWS_WITH_AS(tape.sqrt(x), doctest::Contains("sqrt"), NumericError);

  Tape tape2;
  const auto z = tape2.leaf(Tensor::scalar(0.0));
  const auto r = tape2.sum(tape2.sqrt(z));
  CHECK_THROWS_WITH_AS(tape2.backward(r), doctest::Contains("node"), NumericError);
}

TEST_CASE("zero cotangent does not poison sqrt of zero") {
  // relu keeps the clamped branch's gradient at exactly zero even when the
  // sqrt sits at the origin.
  Tape tape;
  const auto x = tape.leaf(Tensor::vec({1.0, 1.0}));
  const auto y = tape.constant(Tensor::vec({1.0, 1.0}));
  const auto diff = tape.sub(x, y);
  const auto dist = tape.sqrt(tape.sum(tape.mul(diff, diff)));
  const auto loss = tape.relu(tape.offset(dist, -2.0));
  const auto out = tape.mul(loss, loss);
  const auto g = tape.backward(out);
  CHECK(g.at(x)[0] == 0.0);
  CHECK(g.at(x)[1] == 0.0);
}

namespace {

// A deliberately tangled smooth function touching most tape operations.
double tangled(Tape& tape, numerics::NodeId x, const Tensor& w_val) {
  const auto w = tape.constant(w_val);
  const auto lin = tape.matvec(w, x);
  const auto act = tape.tanh(lin);
  const auto gate = tape.softmax(act);
  const auto mixed = tape.mul(gate, tape.logistic(x));
  const auto quad = tape.dot(x, mixed);
  const auto safe = tape.log(tape.offset(tape.mul(x, x), 1.0));
  const auto root = tape.sqrt(tape.offset(tape.sum(safe), 2.0));
  const auto s = tape.add(tape.sum(mixed), tape.add(quad, root));
  return tape.value(s)[0];
}

}  // namespace

TEST_CASE("gradient check: composed smooth ops vs central differences on 100 seeded points") {
  numerics::RngStream rng(1234);
  const Tensor w = rng.normal_tensor({4, 4});
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x0 = rng.normal_tensor({4});
    Tape tape;
    const auto x = tape.leaf(x0);
    const auto w_node = tape.constant(w);
    const auto lin = tape.matvec(w_node, x);
    const auto act = tape.tanh(lin);
    const auto gate = tape.softmax(act);
    const auto mixed = tape.mul(gate, tape.logistic(x));
    const auto quad = tape.dot(x, mixed);
    const auto safe = tape.log(tape.offset(tape.mul(x, x), 1.0));
    const auto root = tape.sqrt(tape.offset(tape.sum(safe), 2.0));
    const auto out = tape.add(tape.sum(mixed), tape.add(quad, root));
    const auto grad = tape.backward(out).at(x);

    const auto f = [&](const Tensor& v) {
      Tape t2;
      const auto xv = t2.leaf(v);
      return tangled(t2, xv, w);
    };
    const Tensor fd = testsupport::central_diff(f, x0, 1e-5);
    CHECK(testsupport::relative_error(grad, fd) < 1e-4);
  }
}

TEST_CASE("gradient check: relu and abs away from their kinks") {
  numerics::RngStream rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x0 = rng.normal_tensor({6});
    for (auto& v : x0.data()) {
      if (std::abs(v) < 0.2) v += (v >= 0 ? 0.3 : -0.3);
    }
    Tape tape;
    const auto x = tape.leaf(x0);
    const auto out = tape.add(tape.sum(tape.relu(x)), tape.sum(tape.abs(x)));
    const auto grad = tape.backward(out).at(x);
    const auto f = [](const Tensor& v) {
      Tape t2;
      const auto xv = t2.leaf(v);
      return t2.value(t2.add(t2.sum(t2.relu(xv)), t2.sum(t2.abs(xv))))[0];
    };
    CHECK(testsupport::relative_error(grad, testsupport::central_diff(f, x0)) < 1e-4);
  }
}

TEST_CASE("tape evaluation is bitwise deterministic") {
  auto run = [](){
    numerics::RngStream rng(99);
    Tape tape;
    const auto x = tape.leaf(rng.normal_tensor({8}));
    const auto w = tape.constant(rng.normal_tensor({8, 8}));
    const auto out = tape.sum(tape.tanh(tape.matvec(w, x)));
    const auto g = tape.backward(out).at(x);
    return std::make_pair(tape.value(out)[0], g);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

// --- Adam and StepLR ------------------------------------------------------------

TEST_CASE("adam: zero gradient leaves fresh parameters unchanged") {
  std::vector<Tensor> params{Tensor::vec({1.0, -2.0, 3.0})};
  auto state = numerics::AdamState::for_shapes(params);
  adam_step(params, {Tensor({3})}, state, 0.1);
  CHECK(params[0] == Tensor::vec({1.0, -2.0, 3.0}));
  CHECK(state.step_count == 1);
}

TEST_CASE("adam: hand-evaluated single step") {
  // param 0, grad 1, defaults, lr 0.1: bias correction makes the step -lr.
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  auto state = numerics::AdamState::for_shapes(params);
  adam_step(params, {Tensor::scalar(1.0)}, state, 0.1);
  CHECK(params[0][0] == doctest::Approx(-0.1).epsilon(1e-7));
}

TEST_CASE("adam: two identical steps reduce a convex quadratic") {
  // f(p) = (p - 3)^2, gradient 2(p - 3)
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  auto state = numerics::AdamState::for_shapes(params);
  auto value = [&]() { return (params[0][0] - 3.0) * (params[0][0] - 3.0); };
  const double before = value();
  for (int i = 0; i < 2; ++i) {
    adam_step(params, {Tensor::scalar(2.0 * (params[0][0] - 3.0))}, state, 0.1);
  }
  CHECK(value() < before);
}

TEST_CASE("adam: shape mismatch is a contract violation") {
  std::vector<Tensor> params{Tensor({3})};
  auto state = numerics::AdamState::for_shapes(params);
  CHECK_THROWS_AS(adam_step(params, {Tensor({4})}, state, 0.1), ContractViolation);
}

TEST_CASE("steplr closed forms") {
  const numerics::StepLrSchedule a{0.02, 50, 0.9};
  CHECK(steplr(a, 0) == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(steplr(a, 125) == doctest::Approx(0.0162).epsilon(1e-12));
  const numerics::StepLrSchedule b{1e-4, 500, 0.1};
  CHECK(steplr(b, 1000) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK_THROWS_AS(steplr(a, -1), ContractViolation);
}

TEST_CASE("steplr is nonincreasing for gamma <= 1") {
  const numerics::StepLrSchedule s{0.5, 7, 0.85};
  double prev = steplr(s, 0);
  for (long e = 1; e < 300; ++e) {
    const double cur = steplr(s, e);
    CHECK(cur <= prev + 1e-18);
    prev = cur;
  }
}

// --- linear algebra ----------------------------------------------------------------

namespace {
double cofactor_det(const Tensor& m) {
  const std::size_t n = m.rows();
  if (n == 1) return m.at(0, 0);
  double det = 0.0;
  double sign = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    Tensor minor({n - 1, n - 1});
    for (std::size_t r = 1; r < n; ++r) {
      std::size_t mc = 0;
      for (std::size_t cc = 0; cc < n; ++cc) {
        if (cc == c) continue;
        minor.at(r - 1, mc++) = m.at(r, cc);
      }
    }
    det += sign * m.at(0, c) * cofactor_det(minor);
    sign = -sign;
  }
  return det;
}
}  // namespace

TEST_CASE("lu_logdet basics") {
  const auto id = numerics::lu_logdet(Tensor::identity(4));
  CHECK(id.sign == 1);
  CHECK(id.log_abs == doctest::Approx(0.0).epsilon(1e-15));

  Tensor d({2, 2});
  d.at(0, 0) = 2.0;
  d.at(1, 1) = 3.0;
  const auto r = numerics::lu_logdet(d);
  CHECK(r.sign == 1);
  CHECK(r.log_abs == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  CHECK_THROWS_AS(numerics::lu_logdet(Tensor({3, 3})), SingularMatrixError);
}

TEST_CASE("lu_logdet matches cofactor expansion on a seeded 5x5") {
  numerics::RngStream rng(7);
  const Tensor m = rng.uniform_tensor({5, 5}, -1.0, 1.0);
  const double det = cofactor_det(m);
  const auto r = numerics::lu_logdet(m);
  CHECK(r.sign == (det >= 0 ? 1 : -1));
  CHECK(r.log_abs == doctest::Approx(std::log(std::abs(det))).epsilon(1e-8));
}

TEST_CASE("psd_sqrt basics and self-consistency") {
  CHECK(numerics::psd_sqrt(Tensor::identity(3)) == Tensor::identity(3));

  Tensor d({2, 2});
  d.at(0, 0) = 4.0;
  d.at(1, 1) = 9.0;
  const Tensor s = numerics::psd_sqrt(d);
  CHECK(s.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(s.at(1, 1) == doctest::Approx(3.0).epsilon(1e-12));

  numerics::RngStream rng(11);
  const Tensor b = rng.normal_tensor({3, 3});
  const Tensor a = numerics::matmul(numerics::transpose(b), b);
  const Tensor root = numerics::psd_sqrt(a);
  const Tensor back = numerics::matmul(root, root);
  double frob = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) frob += (back[i] - a[i]) * (back[i] - a[i]);
  CHECK(std::sqrt(frob) < 1e-6);

  Tensor asym = Tensor::identity(2);
  asym.at(0, 1) = 0.5;
  CHECK_THROWS_AS(numerics::psd_sqrt(asym), ContractViolation);
}

TEST_CASE("cholesky reproduces the factor") {
  numerics::RngStream rng(5);
  const Tensor b = rng.normal_tensor({4, 4});
  Tensor a = numerics::matmul(numerics::transpose(b), b);
  for (std::size_t i = 0; i < 4; ++i) a.at(i, i) += 0.5;
  const Tensor l = numerics::cholesky(a);
  const Tensor back = numerics::matmul(l, numerics::transpose(l));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(back[i] == doctest::Approx(a[i]).epsilon(1e-9));
}

// --- rng -----------------------------------------------------------------------------

TEST_CASE("rng streams are reproducible and tag-separated") {
  numerics::RngStream a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  CHECK(numerics::derive_seed(1, "x") != numerics::derive_seed(1, "y"));
  CHECK(numerics::derive_seed(1, "x", 0) != numerics::derive_seed(1, "x", 1));
}

TEST_CASE("rng normal moments are sane") {
  numerics::RngStream rng(2024);
  double mean = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    mean += v;
    sq += v * v;
  }
  mean /= n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}
