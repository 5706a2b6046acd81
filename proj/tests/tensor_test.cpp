#include <doctest.h>

#include <cmath>
#include <vector>

#include "gnnpipe/tensor.hpp"

using namespace gnnpipe;

namespace {

// Independent reference: plain scalar triple loop in ijk order.
template <typename T>
DenseMatrix<T> matmul_reference(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
  DenseMatrix<T> c(a.rows(), b.cols());
  for (size_t i = 0; i < a.rows(); ++i)
    for (size_t j = 0; j < b.cols(); ++j) {
      T acc = T(0);
      for (size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  return c;
}

template <typename T>
double max_rel_err(const DenseMatrix<T>& got, const DenseMatrix<T>& want) {
  REQUIRE(got.rows() == want.rows());
  REQUIRE(got.cols() == want.cols());
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double g = got.data()[i], w = want.data()[i];
    const double denom = std::max(std::abs(w), 1e-12);
    worst = std::max(worst, std::abs(g - w) / denom);
  }
  return worst;
}

template <typename T>
double frob_rel_err(const DenseMatrix<T>& got, const DenseMatrix<T>& want) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double d = static_cast<double>(got.data()[i]) - static_cast<double>(want.data()[i]);
    num += d * d;
    den += static_cast<double>(want.data()[i]) * static_cast<double>(want.data()[i]);
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

template <typename T>
DenseMatrix<T> random_matrix(size_t r, size_t c, Rng& rng, double scale = 1.0) {
  DenseMatrix<T> m(r, c);
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.next_uniform(-scale, scale));
  return m;
}

}  // namespace

TEST_CASE("matmul identity and fixed products") {
  MatrixF a(2, 2, {1, 2, 3, 4});
  CHECK(matmul(a, MatrixF::identity(2)) == a);

  MatrixF b(2, 1, {5, 6});
  MatrixF c = matmul(a, b);
  CHECK(c(0, 0) == doctest::Approx(17));
  CHECK(c(1, 0) == doctest::Approx(39));

  MatrixF zero(2, 2);
  MatrixF d(2, 2, {7, 8, 9, 10});
  MatrixF z = matmul(zero, d);
  for (size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0f);

  CHECK_THROWS_AS(matmul(a, MatrixF(3, 2)), ShapeError);
}

TEST_CASE("matmul agrees with scalar reference on random inputs") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_matrix<double>(5, 7, rng);
    auto b = random_matrix<double>(7, 3, rng);
    CHECK(max_rel_err(matmul(a, b), matmul_reference(a, b)) < 1e-12);
  }
}

TEST_CASE("matmul associativity within precision bounds") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto af = random_matrix<float>(6, 5, rng);
    auto bf = random_matrix<float>(5, 4, rng);
    auto cf = random_matrix<float>(4, 3, rng);
    CHECK(frob_rel_err(matmul(matmul(af, bf), cf), matmul(af, matmul(bf, cf))) < 1e-4);

    auto ad = random_matrix<double>(6, 5, rng);
    auto bd = random_matrix<double>(5, 4, rng);
    auto cd = random_matrix<double>(4, 3, rng);
    CHECK(frob_rel_err(matmul(matmul(ad, bd), cd), matmul(ad, matmul(bd, cd))) < 1e-10);
  }
}

TEST_CASE("relu and relu_backward") {
  MatrixF a(1, 3, {-1, 0, 2});
  MatrixF r = relu(a);
  CHECK(r(0, 0) == 0.0f);
  CHECK(r(0, 1) == 0.0f);
  CHECK(r(0, 2) == 2.0f);

  MatrixF up(1, 3, {5, 5, 5});
  MatrixF g = relu_backward(a, up);
  CHECK(g(0, 0) == 0.0f);
  CHECK(g(0, 1) == 0.0f);  // sigma'(0) = 0
  CHECK(g(0, 2) == 5.0f);

  Rng rng(3);
  auto m = random_matrix<float>(4, 4, rng);
  CHECK(relu(relu(m)) == relu(m));

  CHECK_THROWS_AS(relu_backward(a, MatrixF(2, 2)), ShapeError);
}

TEST_CASE("softmax cross entropy fixed cases") {
  // Two rows, both masked: row of equal logits gives ln 2 per row.
  MatrixF logits(2, 2, {0, 0, 0, 0});
  MatrixF labels(2, 2, {1, 0, 1, 0});
  auto res = softmax_cross_entropy(logits, labels, {0, 1});
  CHECK(res.loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(res.grad(0, 0) == doctest::Approx(-0.25));
  CHECK(res.grad(0, 1) == doctest::Approx(0.25));

  // Saturated logits need a stable log-sum-exp.
  MatrixF sat(2, 2, {1000, 0, 1000, 0});
  auto sres = softmax_cross_entropy(sat, labels, {0, 1});
  CHECK(sres.loss == doctest::Approx(0.0));
  CHECK(sres.grad(0, 0) == doctest::Approx(0.0));
  CHECK(sres.grad(0, 1) == doctest::Approx(0.0));

  CHECK_THROWS_AS(softmax_cross_entropy(logits, labels, {}), std::invalid_argument);
  MatrixF bad(2, 2, {1, 1, 1, 0});
  CHECK_THROWS_AS(softmax_cross_entropy(logits, bad, {0, 1}), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  auto logits = random_matrix<float>(6, 9, rng, 4.0);
  auto p = softmax_rows(logits);
  for (size_t i = 0; i < p.rows(); ++i) {
    double sum = 0.0;
    for (size_t j = 0; j < p.cols(); ++j) sum += p(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("loss gradient matches central finite differences") {
  Rng rng(17);
  auto logits = random_matrix<double>(5, 3, rng, 2.0);
  MatrixD labels(5, 3);
  for (size_t i = 0; i < 5; ++i) labels(i, i % 3) = 1.0;
  std::vector<uint32_t> mask = {0, 1, 2, 3, 4};

  auto res = softmax_cross_entropy(logits, labels, mask);
  const double h = 1e-5;
  for (size_t i = 0; i < logits.size(); ++i) {
    MatrixD plus = logits, minus = logits;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    const double fd = (softmax_cross_entropy(plus, labels, mask).loss -
                       softmax_cross_entropy(minus, labels, mask).loss) /
                      (2 * h);
    const double denom = std::max(std::abs(fd), 1e-8);
    CHECK(std::abs(res.grad.data()[i] - fd) / denom < 1e-6);
  }
}

TEST_CASE("xavier and he initialization") {
  // 3x3 forces bound sqrt(6/6) = 1.
  auto w = xavier_init<float>(3, 3, 42);
  for (size_t i = 0; i < w.size(); ++i) {
    CHECK(w.data()[i] <= 1.0f);
    CHECK(w.data()[i] >= -1.0f);
  }
  CHECK(xavier_init<float>(3, 3, 42) == w);  // bitwise determinism
  CHECK_FALSE(xavier_init<float>(3, 3, 43) == w);

  auto big = xavier_init<double>(100, 100, 9);
  double mean = 0.0;
  for (size_t i = 0; i < big.size(); ++i) mean += big.data()[i];
  mean /= static_cast<double>(big.size());
  CHECK(std::abs(mean) < 0.05);

  auto h = he_init<double>(200, 50, 4);
  CHECK(he_init<double>(200, 50, 4) == h);
  double var = 0.0;
  for (size_t i = 0; i < h.size(); ++i) var += h.data()[i] * h.data()[i];
  var /= static_cast<double>(h.size());
  CHECK(var == doctest::Approx(2.0 / 200.0).epsilon(0.1));

  CHECK_THROWS_AS(xavier_init<float>(0, 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(he_init<float>(3, 0, 1), std::invalid_argument);
}

TEST_CASE("optimizer steps") {
  OptimizerState<float> sgd;
  sgd.kind = OptimizerKind::vanilla_sgd;
  sgd.learning_rate = 0.1;
  MatrixF p(1, 1, {1.0f});
  MatrixF g(1, 1, {0.5f});
  auto p2 = optimizer_step(sgd, p, g);
  CHECK(p2(0, 0) == doctest::Approx(0.95));
  CHECK(sgd.step_count == 1);

  MatrixF zero(1, 1);
  auto p3 = optimizer_step(sgd, p, zero);
  CHECK(p3(0, 0) == 1.0f);
  CHECK(sgd.step_count == 2);

  OptimizerState<float> adam;
  adam.kind = OptimizerKind::adam;
  adam.learning_rate = 0.01;
  MatrixF params(2, 2, {0.3f, -0.2f, 0.1f, 0.0f});
  MatrixF grads(2, 2, {1, 1, 1, 1});
  auto updated = optimizer_step(adam, params, grads);
  for (size_t i = 0; i < updated.size(); ++i)
    CHECK(updated.data()[i] == doctest::Approx(params.data()[i] - 0.01).epsilon(1e-5));

  CHECK_THROWS_AS(optimizer_step(adam, params, MatrixF(1, 2)), ShapeError);
}
