#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "affmtl/errors.hpp"
#include "affmtl/kernels.hpp"
#include "affmtl/rng.hpp"
#include "affmtl/tensor.hpp"

using namespace affmtl;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -3.0, double hi = 3.0) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("matmul: identity and 1x1 products") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(vec(matmul(eye, m)) == std::vector<double>{1, 2, 3, 4});
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0);
}

TEST_CASE("matmul: mismatched inner dimension names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2,3] x [2,3]") != std::string::npos);
  }
}

TEST_CASE("matmul: gradient of sum(AB) wrt A is ones * B^T") {
  const Tensor a = random_tensor({3, 4}, 1);
  const Tensor b = random_tensor({4, 5}, 2);
  Tensor av = a.clone();
  av.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(matmul(av, b)));
  }
  // (ones[3,5] * B^T)[i,p] = sum_j B[p,j]
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 5; ++j) expect += b[p * 5 + j];
      CHECK(av.grad()[i * 4 + p] == doctest::Approx(expect).epsilon(1e-12));
    }
  CHECK(finite_diff_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a) < 1e-4);
}

TEST_CASE("kernels: serial and parallel agree bitwise and match a naive product") {
  for (auto [m, k, n] : {std::array<std::size_t, 3>{3, 5, 7}, {64, 33, 48}, {300, 40, 260}}) {
    const auto a = vec(random_tensor({m, k}, m));
    const auto b = vec(random_tensor({k, n}, n));
    std::vector<double> cs(m * n, 0.0), cp(m * n, 0.0);
    kernels::serial::matmul(a, b, cs, m, k, n);
    kernels::parallel::matmul(a, b, cp, m, k, n);
    CHECK(cs == cp);
    const auto ref = naive_matmul(a, b, m, k, n);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(cs[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    // A^T B with A [m,k], B [m,n]
    const auto b2 = vec(random_tensor({m, n}, 7));
    std::vector<double> ts(k * n, 0.0), tp(k * n, 0.0);
    kernels::serial::matmul_at_b(a, b2, ts, m, k, n);
    kernels::parallel::matmul_at_b(a, b2, tp, m, k, n);
    CHECK(ts == tp);
    // A B^T with A [m,k], B [n,k]
    const auto b3 = vec(random_tensor({n, k}, 8));
    std::vector<double> us(m * n, 0.0), up(m * n, 0.0);
    kernels::serial::matmul_a_bt(a, b3, us, m, k, n);
    kernels::parallel::matmul_a_bt(a, b3, up, m, k, n);
    CHECK(us == up);
  }
}

TEST_CASE("unary: reference values and domain errors") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(leaky_relu(Tensor::scalar(-1.0), 0.01).item() == doctest::Approx(-0.01).epsilon(1e-15));
  CHECK(exp(Tensor::scalar(0.0)).item() == 1.0);
  CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(log(Tensor::scalar(-2.0)), DomainError);

  Tensor x = Tensor::scalar(0.0);
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(tanh(x));
  }
  CHECK(x.grad()[0] == 1.0);
  CHECK(finite_diff_check([](const Tensor& t) { return tanh(t); }, Tensor::scalar(0.0)) < 1e-8);
}

TEST_CASE("reduce: sum, mean, population variance") {
  CHECK(mean(Tensor::from({3}, {1, 2, 3})).item() == 2.0);
  CHECK(variance_population(Tensor::from({3}, {1, 2, 3})).item() == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(sum(Tensor::full({3, 4}, 1.0)).item() == 12.0);
  const Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(vec(sum(m, 0)) == std::vector<double>{5, 7, 9});
  CHECK(vec(mean(m, 1)) == std::vector<double>{2, 5});
  CHECK_THROWS_AS(mean(Tensor::zeros({0})), DegenerateInputError);
  CHECK_THROWS_AS(sum(Tensor::zeros({3, 0}), 1), DegenerateInputError);
}

TEST_CASE("softmax: uniform, overflow-safe, normalised") {
  for (double v : vec(softmax(Tensor::zeros({1, 4}), 1))) CHECK(v == 0.25);
  const auto big = vec(softmax(Tensor::from({1, 2}, {1000.0, 0.0}), 1));
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
  const Tensor s = softmax(random_tensor({3, 8}, 4), 1);
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(s[r * 8 + c] > 0.0);
      total += s[r * 8 + c];
    }
    CHECK(std::fabs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("backward: contract and known derivatives") {
  Tensor x = random_tensor({2, 3}, 5);
  x.set_requires_grad(true);
  {
    Tape tape;
    Tape::Scope scope(tape);
    CHECK_THROWS_AS(tape.backward(mul(x, x)), ContractError);
  }
  x.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) CHECK(g == 1.0);
  x.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x[i]);
  x.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(add(sum(x), sum(x)));
  }
  for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("tensor invariants: element count, tape ids, gradient shape") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  Tensor x = random_tensor({2, 2}, 6);
  x.set_requires_grad(true);
  CHECK_FALSE(x.tape_id().has_value());
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor y = sum(mul(x, x));
  CHECK(x.tape_id().has_value());
  tape.backward(y);
  CHECK(x.grad().size() == x.numel());
}

TEST_CASE("finite_diff_check: linear function is exact, composite MLP within tolerance") {
  CHECK(finite_diff_check([](const Tensor& t) { return sum(t); }, random_tensor({4, 3}, 9)) < 1e-10);

  Tensor w1 = random_tensor({5, 6}, 10, -1, 1);
  Tensor b1 = random_tensor({6}, 11, -1, 1);
  Tensor w2 = random_tensor({6, 1}, 12, -1, 1);
  const Tensor x = random_tensor({4, 5}, 13);
  std::vector<Tensor> params{w1, b1, w2};
  const double err = finite_diff_check(
      [&] { return mean(tanh(matmul(leaky_relu(add_row(matmul(x, w1), b1)), w2))); }, params);
  CHECK(err < 1e-4);
}

TEST_CASE("every traced operation passes the finite-difference oracle, seeds 0..9") {
  using Fn = std::function<Tensor(const Tensor&)>;
  const Tensor row = random_tensor({4}, 99);
  const std::vector<std::size_t> picks{2, 0, 2, 1};
  const std::vector<std::pair<const char*, Fn>> ops = {
      {"matmul", [](const Tensor& x) { return sum(matmul(x, reshape(x, {4, 3}))); }},
      {"add", [](const Tensor& x) { return sum(mul(add(x, x), x)); }},
      {"sub", [](const Tensor& x) { return sum(mul(sub(x, scale(x, 0.3)), x)); }},
      {"mul", [](const Tensor& x) { return sum(mul(x, x)); }},
      {"div", [](const Tensor& x) { return sum(div(x, add_scalar(mul(x, x), 1.0))); }},
      {"add_row", [&](const Tensor& x) { return sum(mul(add_row(x, row), x)); }},
      {"mul_row", [&](const Tensor& x) { return sum(mul(mul_row(x, row), x)); }},
      {"broadcast", [](const Tensor& x) { return sum(mul(broadcast(mean(x), {3, 4}), x)); }},
      {"sigmoid", [](const Tensor& x) { return sum(sigmoid(x)); }},
      {"tanh", [](const Tensor& x) { return sum(tanh(x)); }},
      {"leaky_relu", [](const Tensor& x) { return sum(mul(leaky_relu(x, 0.01), x)); }},
      {"log", [](const Tensor& x) { return sum(log(add_scalar(mul(x, x), 0.5))); }},
      {"exp", [](const Tensor& x) { return sum(exp(scale(x, 0.5))); }},
      {"clamp", [](const Tensor& x) { return sum(mul(clamp(x, -10.0, 10.0), x)); }},
      {"sum_axis", [](const Tensor& x) { return sum(mul(sum(x, 0), sum(x, 0))); }},
      {"mean_axis", [](const Tensor& x) { return sum(mul(mean(x, 1), mean(x, 1))); }},
      {"variance", [](const Tensor& x) { return variance_population(x); }},
      {"variance_axis", [](const Tensor& x) { return sum(variance_population(x, 1)); }},
      {"softmax", [](const Tensor& x) { return sum(mul(softmax(x, 1), x)); }},
      {"slice_cols", [](const Tensor& x) { return sum(mul(slice_cols(x, 1, 3), slice_cols(x, 1, 3))); }},
      {"column", [](const Tensor& x) { return sum(mul(column(x, 2), column(x, 1))); }},
      {"gather_rows", [&](const Tensor& x) { return sum(mul(gather_rows(x, picks), gather_rows(x, picks))); }},
      {"concat_rows", [](const Tensor& x) { return sum(mul(concat_rows({x, scale(x, 2.0)}), concat_rows({x, x}))); }},
  };
  for (const auto& [name, f] : ops) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed)
      worst = std::max(worst, finite_diff_check(f, random_tensor({3, 4}, seed)));
    INFO(name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("clamp passes gradient only inside the interval") {
  Tensor x = Tensor::from({3}, {-2.0, 0.5, 2.0});
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(clamp(x, -1.0, 1.0)));
  }
  CHECK(vec(clamp(x, -1.0, 1.0)) == std::vector<double>{-1.0, 0.5, 1.0});
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("dropout: identity in evaluation, inverted scaling in training") {
  Rng rng(3);
  const Tensor x = Tensor::full({100, 10}, 1.0);
  CHECK(vec(dropout(x, 0.5, rng, false)) == vec(x));
  const auto y = vec(dropout(x, 0.5, rng, true));
  std::size_t kept = 0;
  for (double v : y) {
    CHECK((v == 0.0 || v == 2.0));
    kept += v != 0.0;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
}

TEST_CASE("re-running a traced computation is bitwise reproducible") {
  auto run = [] {
    Tensor w = random_tensor({4, 4}, 21);
    w.set_requires_grad(true);
    const Tensor x = random_tensor({3, 4}, 22);
    Tape tape;
    Tape::Scope scope(tape);
    Rng rng(5);
    const Tensor y = sum(dropout(tanh(matmul(x, w)), 0.2, rng, true));
    const double value = y.item();
    tape.backward(y);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(value);
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no tape, no recording") {
  Tensor w = random_tensor({2, 2}, 1);
  w.set_requires_grad(true);
  const Tensor y = sum(matmul(w, w));
  CHECK_FALSE(y.tape_id().has_value());
  CHECK_THROWS_AS(backward(y), ContractError);
}
