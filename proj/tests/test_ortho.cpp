#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "opro/errors.hpp"
#include "opro/ortho.hpp"

using namespace opro;

namespace {

Mat gaussian(Index rows, Index cols, double std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

SkewMatrix random_skew(Index d, double std, std::uint64_t seed) {
  const Mat m = gaussian(d, d, std, seed);
  return SkewMatrix::from(m - m.transpose());
}

double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

// Loss ⟨G, exp(A)⟩ evaluated from scratch.
double pairing(const Mat& g, const Mat& a) { return (g.array() * matrix_exp(SkewMatrix::from(a)).data().array()).sum(); }

double pairing(const Mat& g, const LowRankGenerator& gen) { return (g.array() * operator_from(gen).data().array()).sum(); }

}  // namespace

TEST_CASE("generator assembly examples") {
  LowRankGenerator z{Mat::Zero(5, 2), gaussian(5, 2, 1.0, 1)};
  CHECK(max_abs(assemble_generator(z).data()) == 0.0);

  LowRankGenerator e{Mat(2, 1), Mat(2, 1)};
  e.left << 1, 0;
  e.right << 0, 1;
  Mat expect(2, 2);
  expect << 0, 1, -1, 0;
  CHECK(assemble_generator(e).data() == expect);

  LowRankGenerator r{gaussian(8, 3, 1.0, 2), gaussian(8, 3, 1.0, 3)};
  const Mat a = assemble_generator(r).data();
  CHECK(a.transpose() == -a);
}

TEST_CASE("generator assembly rejects inconsistent factors") {
  CHECK_THROWS_AS(assemble_generator({Mat::Zero(4, 2), Mat::Zero(4, 3)}), ShapeError);
  CHECK_THROWS_AS(assemble_generator({Mat::Zero(3, 2), Mat::Zero(4, 2)}), ShapeError);
  CHECK_THROWS_AS(assemble_generator({Mat::Zero(2, 3), Mat::Zero(2, 3)}), ShapeError);
}

TEST_CASE("skew construction is checked") {
  Mat m(2, 2);
  m << 0, 1, 0.5, 0;
  CHECK_THROWS_AS(SkewMatrix::from(m), InvariantError);
  m << 0, std::numeric_limits<double>::quiet_NaN(), 0, 0;
  CHECK_THROWS_AS(SkewMatrix::from(m), NumericError);
  CHECK_THROWS_AS(SkewMatrix::from(Mat::Zero(2, 3)), ShapeError);
}

TEST_CASE("matrix exponential closed forms") {
  CHECK(matrix_exp(SkewMatrix::zero(7)).data() == Mat::Identity(7, 7));

  Mat a(2, 2);
  a << 0, -M_PI / 2, M_PI / 2, 0;
  Mat expect(2, 2);
  expect << 0, -1, 1, 0;
  CHECK(max_abs(matrix_exp(SkewMatrix::from(a)).data() - expect) < 1e-14);

  // Planar rotation for a range of angles, including several full turns.
  for (double th : {0.3, 2.0, 7.5, -40.0}) {
    a << 0, -th, th, 0;
    expect << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    CHECK(max_abs(matrix_exp(SkewMatrix::from(a)).data() - expect) < 1e-12);
  }
}

TEST_CASE("matrix exponential is orthogonal, isometric and invertible") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const Index d = 2 + trial % 15;
    const double scale = trial % 3 == 0 ? 5.0 : 0.3;
    const SkewMatrix a = random_skew(d, scale, 100 + trial);
    const OrthogonalOperator u = matrix_exp(a);
    CHECK(u.orthogonality_defect() <= 1e-9);
    CHECK(std::abs(u.data().determinant() - 1.0) <= 1e-8);
    const Vec v = gaussian(d, 1, 1.0, 200 + trial);
    CHECK(std::abs((u.data() * v).norm() - v.norm()) <= 1e-9 * v.norm());
    const OrthogonalOperator inv = matrix_exp(SkewMatrix::from(-a.data()));
    CHECK(max_abs(inv.data() * u.data() - Mat::Identity(d, d)) <= 1e-8);
  }
  const OrthogonalOperator u16 = matrix_exp(random_skew(16, 1.0, 5));
  CHECK(u16.orthogonality_defect() <= 1e-9);
}

TEST_CASE("matrix exponential agrees with an eigen-decomposition oracle") {
  // exp of a skew matrix via the Hermitian matrix iA.
  const SkewMatrix a = random_skew(6, 0.8, 17);
  const Eigen::MatrixXcd h = std::complex<double>(0, 1) * a.data().cast<std::complex<double>>();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(h);
  const Eigen::VectorXcd phases = (-std::complex<double>(0, 1) * es.eigenvalues().cast<std::complex<double>>()).array().exp();
  const Eigen::MatrixXcd u = es.eigenvectors() * phases.asDiagonal() * es.eigenvectors().adjoint();
  CHECK(max_abs((u.real() - matrix_exp(a).data())) < 1e-12);
  CHECK(u.imag().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("orthogonal operator construction is checked") {
  Mat reflect = Mat::Identity(3, 3);
  reflect(0, 0) = -1;
  CHECK_THROWS_AS(OrthogonalOperator::from(reflect), InvariantError);
  CHECK_THROWS_AS(OrthogonalOperator::from(2.0 * Mat::Identity(3, 3)), InvariantError);
  CHECK_NOTHROW(OrthogonalOperator::from(Mat::Identity(3, 3)));
}

TEST_CASE("exp backward at zero is the identity map") {
  const Mat g = gaussian(5, 5, 1.0, 3);
  CHECK(max_abs(exp_backward(SkewMatrix::zero(5), g) - g) < 1e-15);
  CHECK(max_abs(exp_backward(SkewMatrix::zero(4), Mat::Identity(4, 4)) - Mat::Identity(4, 4)) < 1e-15);
  CHECK_THROWS_AS(exp_backward(SkewMatrix::zero(4), Mat::Zero(3, 4)), ShapeError);
}

TEST_CASE("exp backward matches central differences over every basis direction") {
  for (Index d : {2, 3, 4, 6}) {
    for (double scale : {0.03, 0.8}) {
      const SkewMatrix a = random_skew(d, scale, 40 + d);
      const Mat g = gaussian(d, d, 1.0, 50 + d);
      const Mat analytic = exp_backward(a, g);
      const double eps = 1e-6;
      double worst = 0.0;
      for (Index i = 0; i < d; ++i) {
        for (Index j = 0; j < d; ++j) {
          // Differentiate through the unconstrained entry: ⟨G, exp(A + εE_ij)⟩.
          Mat ap = a.data(), am = a.data();
          ap(i, j) += eps;
          am(i, j) -= eps;
          auto loss = [&](const Mat& x) {
            // Series oracle, valid for any square matrix (not only skew).
            Mat term = Mat::Identity(d, d), sum = Mat::Identity(d, d);
            const int s = std::max(0, static_cast<int>(std::ceil(std::log2(x.norm() + 1.0))) + 2);
            const Mat y = x / std::ldexp(1.0, s);
            for (int k = 1; k < 30; ++k) {
              term = term * y / k;
              sum += term;
            }
            for (int k = 0; k < s; ++k) sum = sum * sum;
            return (g.array() * sum.array()).sum();
          };
          const double numeric = (loss(ap) - loss(am)) / (2 * eps);
          const double err = std::abs(numeric - analytic(i, j)) / std::max(1.0, std::abs(numeric));
          worst = std::max(worst, err);
        }
      }
      CAPTURE(d);
      CAPTURE(scale);
      CHECK(worst <= 1e-5);
    }
  }
}

TEST_CASE("generator backward examples") {
  LowRankGenerator z{Mat::Zero(5, 2), gaussian(5, 2, 1.0, 8)};
  const Mat gt = gaussian(5, 5, 1.0, 9);
  const GradientBundle b = generator_backward(z, gt);
  CHECK(b.grad_right == Mat::Zero(5, 2));
  CHECK(max_abs(b.grad_left - (gt - gt.transpose()) * z.right) < 1e-15);
  CHECK(b.grad_left.cwiseAbs().maxCoeff() > 0.0);

  LowRankGenerator r{gaussian(5, 2, 1.0, 10), gaussian(5, 2, 1.0, 11)};
  const Mat sym = gt + gt.transpose();
  const GradientBundle s = generator_backward(r, sym);
  CHECK(s.grad_left.cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.grad_right.cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(generator_backward(r, Mat::Zero(4, 4)), ShapeError);
}

TEST_CASE("composed backward matches finite differences on every factor entry") {
  for (auto [d, rho] : {std::pair<Index, Index>{6, 2}, {4, 1}, {5, 2}, {3, 1}}) {
    LowRankGenerator gen{gaussian(d, rho, 0.5, 20 + d), gaussian(d, rho, 0.5, 30 + d)};
    const Mat g = gaussian(d, d, 1.0, 40 + d);
    const GradientBundle b = operator_backward(gen, g);
    const double eps = 1e-6;
    double worst = 0.0;
    for (int side = 0; side < 2; ++side) {
      for (Index i = 0; i < d; ++i) {
        for (Index j = 0; j < rho; ++j) {
          LowRankGenerator p = gen, m = gen;
          (side ? p.right : p.left)(i, j) += eps;
          (side ? m.right : m.left)(i, j) -= eps;
          const double numeric = (pairing(g, p) - pairing(g, m)) / (2 * eps);
          const double analytic = (side ? b.grad_right : b.grad_left)(i, j);
          worst = std::max(worst, std::abs(numeric - analytic) / std::max(1e-3, std::abs(numeric)));
        }
      }
    }
    CAPTURE(d);
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("zero-interference initialisation") {
  for (auto [d, rho] : {std::pair<Index, Index>{16, 4}, {64, 8}, {2, 1}}) {
    const LowRankGenerator gen = init_zero_interference(d, rho, 0.02, 99);
    CHECK(gen.left == Mat::Zero(d, rho));
    CHECK(operator_from(gen).data() == Mat::Identity(d, d));
    CHECK(gen.right.cwiseAbs().maxCoeff() > 0.0);

    const GradientBundle b = operator_backward(gen, gaussian(d, d, 1.0, 5));
    CHECK(b.grad_right == Mat::Zero(d, rho));
    CHECK(b.grad_left.cwiseAbs().maxCoeff() > 0.0);
  }
  CHECK(init_zero_interference(8, 2, 0.02, 4).right == init_zero_interference(8, 2, 0.02, 4).right);
  CHECK(init_zero_interference(8, 2, 0.02, 4).right != init_zero_interference(8, 2, 0.02, 5).right);
  CHECK(init_zero_interference(8, 2, 0.0, 4).right == Mat::Zero(8, 2));
  CHECK_THROWS_AS(init_zero_interference(8, 2, -0.1, 4), ParameterError);
  CHECK_THROWS_AS(init_zero_interference(8, 2, std::nan(""), 4), ParameterError);
  CHECK_THROWS_AS(init_zero_interference(4, 5, 0.02, 4), ParameterError);
}

TEST_CASE("sample standard deviation of the right factor tracks sigma") {
  const LowRankGenerator gen = init_zero_interference(200, 50, 0.02, 1);
  const double mean = gen.right.mean();
  const double var = (gen.right.array() - mean).square().sum() / (gen.right.size() - 1);
  CHECK(std::abs(std::sqrt(var) - 0.02) < 0.001);
}
