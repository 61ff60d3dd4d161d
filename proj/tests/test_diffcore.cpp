#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "snapdyn/math_util.hpp"
#include "snapdyn/rng.hpp"
#include "snapdyn/tape.hpp"
#include "snapdyn/tensor.hpp"

using namespace snapdyn;

TEST_CASE("fexp matches std::exp to a few ulp") {
  Rng rng(7);
  double max_rel = 0.0;
  for (int i = 0; i < 200000; ++i) {
    const double x = (rng.uniform() - 0.5) * 1400.0;
    const double a = fexp(x);
    const double b = std::exp(x);
    if (b > 0.0 && std::isfinite(b))
      max_rel = std::max(max_rel, std::fabs(a - b) / b);
  }
  // focus region used by log-domain transport updates
  for (int i = 0; i < 200000; ++i) {
    const double x = -50.0 * rng.uniform();
    max_rel = std::max(max_rel, std::fabs(fexp(x) - std::exp(x)) / std::exp(x));
  }
  CHECK(max_rel < 5e-15);
  CHECK(fexp(0.0) == 1.0);
}

TEST_CASE("d(x^2)/dx = 2x") {
  Tape tape;
  Var x = tape.param(Tensor::vector({3.0}));
  Var y = tape.sum(x * x);
  Gradients g = tape.backward(y);
  CHECK(g.at(x)[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("grad of sum(exp(x)) at zero is all ones") {
  Tape tape;
  Var x = tape.param(Tensor::vector({0.0, 0.0, 0.0}));
  Var y = tape.sum(tape.exp(x));
  Gradients g = tape.backward(y);
  for (int i = 0; i < 3; ++i)
    CHECK(g.at(x)[i] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("gradient of logsumexp is the softmax") {
  Tape tape;
  Var x = tape.param(Tensor::matrix(1, 3, {1.0, 2.0, 3.0}));
  Var y = tape.sum(tape.logsumexp(x, 1));
  Gradients g = tape.backward(y);

  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i)
    CHECK(g.at(x)[i] ==
          doctest::Approx(std::exp(1.0 + i) / denom).epsilon(1e-12));

  auto build = [](Tape& t, const std::vector<Var>& v) {
    return t.sum(t.logsumexp(v[0], 1));
  };
  auto report =
      grad_check(build, {Tensor::matrix(1, 3, {1.0, 2.0, 3.0})}, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("backward of a constant tree yields zero leaf gradients") {
  Tape tape;
  Var x = tape.param(Tensor::vector({1.0, 2.0}));
  Var c = tape.constant(Tensor::scalar(5.0));
  Var y = c * c;
  Gradients g = tape.backward(y);
  CHECK(g.at(x)[0] == 0.0);
  CHECK(g.at(x)[1] == 0.0);
}

TEST_CASE("grad of sum(A*B) w.r.t. A is B^T pattern") {
  // d/dA_ij sum(A B) = sum_k B_jk
  Tape tape;
  Tensor A = Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 4.0});
  Tensor B = Tensor::matrix(2, 2, {5.0, 6.0, 7.0, 8.0});
  Var a = tape.param(A);
  Var b = tape.constant(B);
  Var y = tape.sum(tape.matmul(a, b));
  Gradients g = tape.backward(y);
  CHECK(g.at(a).at(0, 0) == doctest::Approx(11.0));  // B row 0 sum
  CHECK(g.at(a).at(0, 1) == doctest::Approx(15.0));  // B row 1 sum
  CHECK(g.at(a).at(1, 0) == doctest::Approx(11.0));
  CHECK(g.at(a).at(1, 1) == doctest::Approx(15.0));
}

TEST_CASE("grad_check on x^2 at 1") {
  auto build = [](Tape& t, const std::vector<Var>& v) {
    return t.sum(v[0] * v[0]);
  };
  auto report = grad_check(build, {Tensor::vector({1.0})}, 1e-5, 1e-8);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("shape mismatches are rejected with both shapes") {
  Tape tape;
  Var a = tape.param(Tensor::vector({1.0, 2.0}));
  Var b = tape.param(Tensor::vector({1.0, 2.0, 3.0}));
  CHECK_THROWS_AS((void)tape.add(a, b), std::invalid_argument);
  CHECK_THROWS_WITH_AS((void)tape.add(a, b),
                       doctest::Contains("[2] vs [3]"), std::invalid_argument);
  Var m = tape.param(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
  CHECK_THROWS_AS((void)tape.matmul(m, m), std::invalid_argument);
}

TEST_CASE("non-finite forward values are rejected naming the primitive") {
  Tape tape;
  Var x = tape.param(Tensor::vector({0.0}));
  CHECK_THROWS_WITH_AS((void)tape.log(x), doctest::Contains("log"),
                       std::runtime_error);
  Var z = tape.param(Tensor::vector({0.0}));
  Var one = tape.constant(Tensor::vector({1.0}));
  CHECK_THROWS_WITH_AS((void)tape.div(one, z), doctest::Contains("div"),
                       std::runtime_error);
}

TEST_CASE("backward contract: scalar output, single consumption") {
  Tape tape;
  Var x = tape.param(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS((void)tape.backward(x), std::invalid_argument);

  Tape tape2;
  Var y = tape2.param(Tensor::vector({1.0}));
  Var out = tape2.sum(y * y);
  (void)tape2.backward(out);
  CHECK_THROWS_AS((void)tape2.backward(out), std::runtime_error);
}

namespace {

// One random scalar-valued function per primitive, with inputs kept inside
// the primitive's smooth domain.
struct PrimitiveCase {
  const char* name;
  TapeBuilder build;
  std::vector<Tensor> leaves;
};

std::vector<PrimitiveCase> primitive_cases(Rng& rng) {
  auto vec = [&](std::size_t n, double lo, double hi) {
    Tensor t({n});
    for (std::size_t i = 0; i < n; ++i)
      t[i] = lo + (hi - lo) * rng.uniform();
    return t;
  };
  auto mat = [&](std::size_t r, std::size_t c, double lo, double hi) {
    Tensor t({r, c});
    for (std::size_t i = 0; i < t.numel(); ++i)
      t[i] = lo + (hi - lo) * rng.uniform();
    return t;
  };

  std::vector<PrimitiveCase> cases;
  auto sum_of = [](auto f) {
    return [f](Tape& t, const std::vector<Var>& v) { return t.sum(f(t, v)); };
  };

  cases.push_back({"add", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.add(v[0], v[1]);
                   }),
                   {vec(4, -2, 2), vec(4, -2, 2)}});
  cases.push_back({"sub", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.sub(v[0], v[1]);
                   }),
                   {vec(4, -2, 2), vec(4, -2, 2)}});
  cases.push_back({"mul", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.mul(v[0], v[1]);
                   }),
                   {vec(4, -2, 2), vec(4, -2, 2)}});
  cases.push_back({"div", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.div(v[0], v[1]);
                   }),
                   {vec(4, -2, 2), vec(4, 0.5, 2.0)}});
  cases.push_back({"matmul", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.matmul(v[0], v[1]);
                   }),
                   {mat(3, 2, -1, 1), mat(2, 4, -1, 1)}});
  cases.push_back({"exp", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.exp(v[0]);
                   }),
                   {vec(4, -2, 2)}});
  cases.push_back({"log", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.log(v[0]);
                   }),
                   {vec(4, 0.5, 3.0)}});
  cases.push_back({"neg", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.neg(v[0]);
                   }),
                   {vec(4, -2, 2)}});
  cases.push_back({"sqrt", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.sqrt(v[0]);
                   }),
                   {vec(4, 0.5, 3.0)}});
  cases.push_back({"sin", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.sin(v[0]);
                   }),
                   {vec(4, -3, 3)}});
  {
    Tensor x = vec(6, -2, 2);
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (std::fabs(x[i]) < 1e-2) x[i] = 0.5;  // keep away from the kink
    cases.push_back({"relu", sum_of([](Tape& t, const std::vector<Var>& v) {
                       return t.relu(v[0]);
                     }),
                     {x}});
  }
  cases.push_back({"add_scalar", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.add_scalar(v[0], 1.7);
                   }),
                   {vec(4, -2, 2)}});
  cases.push_back({"mul_scalar", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.mul_scalar(v[0], -0.6);
                   }),
                   {vec(4, -2, 2)}});
  cases.push_back({"mean", [](Tape& t, const std::vector<Var>& v) {
                     return t.mean(v[0]);
                   },
                   {vec(5, -2, 2)}});
  cases.push_back({"max", [](Tape& t, const std::vector<Var>& v) {
                     return t.max_all(v[0]);
                   },
                   {vec(5, -2, 2)}});
  cases.push_back({"sum_axis0", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.sum_axis(v[0], 0);
                   }),
                   {mat(3, 4, -2, 2)}});
  cases.push_back({"sum_axis1", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.sum_axis(v[0], 1);
                   }),
                   {mat(3, 4, -2, 2)}});
  cases.push_back({"logsumexp0", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.logsumexp(v[0], 0);
                   }),
                   {mat(3, 4, -2, 2)}});
  cases.push_back({"logsumexp1", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.logsumexp(v[0], 1);
                   }),
                   {mat(3, 4, -2, 2)}});
  cases.push_back({"broadcast_row",
                   sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.mul(t.broadcast_to(v[0], {3, 4}),
                                  t.broadcast_to(v[1], {3, 4}));
                   }),
                   {vec(4, -2, 2), mat(3, 1, -2, 2)}});
  cases.push_back({"transpose", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.mul(t.transpose(v[0]), t.transpose(v[0]));
                   }),
                   {mat(3, 4, -2, 2)}});
  cases.push_back({"reshape", sum_of([](Tape& t, const std::vector<Var>& v) {
                     Var r = t.reshape(v[0], {4, 3});
                     return t.mul(r, r);
                   }),
                   {mat(3, 4, -2, 2)}});
  cases.push_back({"take_rows", sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.take_rows(v[0], {2, 0, 2});
                   }),
                   {mat(3, 4, -2, 2)}});
  cases.push_back({"take_per_row",
                   sum_of([](Tape& t, const std::vector<Var>& v) {
                     return t.take_per_row(v[0], {1, 3, 0});
                   }),
                   {mat(3, 4, -2, 2)}});
  {
    Tensor logw({4});
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      logw[i] = rng.uniform() + 0.2;
      s += logw[i];
    }
    for (std::size_t i = 0; i < 4; ++i) logw[i] = std::log(logw[i] / s);
    cases.push_back({"transport_lse",
                     [](Tape& t, const std::vector<Var>& v) {
                       Var a = t.transport_lse(v[0], v[1], v[2], 0.3, false);
                       Var b = t.transport_lse(v[0], v[1], v[2], 0.3, true);
                       return t.add(t.sum(a), t.sum(b));
                     },
                     {mat(4, 4, 0, 3), vec(4, -1, 1), logw}});
  }
  return cases;
}

}  // namespace

TEST_CASE("every primitive matches central finite differences (100 seeds)") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng = Rng::derive(31337, seed);
    for (auto& pc : primitive_cases(rng)) {
      auto report = grad_check(pc.build, pc.leaves, 1e-5, 1e-5);
      INFO("primitive ", pc.name, " seed ", seed, " err ",
           report.max_rel_error);
      CHECK(report.pass);
    }
  }
}

TEST_CASE("backward is linear in the output") {
  const double a = 1.7, b = -2.3;
  Tensor x0 = Tensor::vector({0.4, -1.2, 2.0});

  auto grads_of = [&](auto make_out) {
    Tape t;
    Var x = t.param(x0);
    Var out = make_out(t, x);
    return t.backward(out).at(x);
  };

  auto f = [](Tape& t, Var x) { return t.sum(t.mul(x, x)); };
  auto g = [](Tape& t, Var x) { return t.sum(t.exp(x)); };
  auto combo = [&](Tape& t, Var x) {
    return t.add(t.mul_scalar(f(t, x), a), t.mul_scalar(g(t, x), b));
  };

  Tensor gf = grads_of(f);
  Tensor gg = grads_of(g);
  Tensor gc = grads_of(combo);
  for (std::size_t i = 0; i < x0.numel(); ++i)
    CHECK(std::fabs(gc[i] - (a * gf[i] + b * gg[i])) < 1e-12);
}

TEST_CASE("forward and backward are deterministic for fixed inputs") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tape t;
    Var x = t.param(Tensor::randn({4, 3}, rng));
    Var w = t.param(Tensor::randn({3, 2}, rng));
    Var out = t.sum(t.exp(t.mul_scalar(t.matmul(x, w), 0.1)));
    double v = t.value(out).value();
    Gradients g = t.backward(out);
    return std::pair<double, Tensor>(v, g.at(w));
  };
  auto [v1, g1] = run(99);
  auto [v2, g2] = run(99);
  CHECK(v1 == v2);
  for (std::size_t i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("unreachable leaves receive zero gradients of matching shape") {
  Tape t;
  Var used = t.param(Tensor::vector({2.0}));
  Var unused = t.param(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var out = t.sum(t.mul(used, used));
  Gradients g = t.backward(out);
  CHECK(g.at(unused).same_shape(t.value(unused)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(g.at(unused)[i] == 0.0);
}
