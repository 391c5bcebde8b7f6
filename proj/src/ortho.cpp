#include "opro/ortho.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "opro/errors.hpp"

namespace opro {

namespace {

constexpr int kTaylorDegree = 13;
constexpr double kScaledNormBound = 0.5;

bool all_finite(const Mat& m) { return m.allFinite(); }

// Number of halvings s so that ‖A‖₁ / 2^s ≤ kScaledNormBound.
int squaring_count(const Mat& a) {
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  if (!(norm1 > kScaledNormBound)) return 0;
  return static_cast<int>(std::ceil(std::log2(norm1 / kScaledNormBound)));
}

// Forward intermediates of exp(A).
//   B = A / 2^s
//   H_d = I + B/d,  H_j = I + (B/j) H_{j+1}  (j = d-1 .. 1),  T = H_1
//   X_0 = T,  X_{t+1} = X_t X_t,  exp(A) = X_s
struct ExpTape {
  int squarings = 0;
  Mat scaled;
  std::vector<Mat> horner;   // horner[j] = H_j, j = 1..d (index 0 unused)
  std::vector<Mat> squares;  // squares[t] = X_t, t = 0..s
};

ExpTape record_exp(const Mat& a) {
  ExpTape tape;
  const Index n = a.rows();
  tape.squarings = squaring_count(a);
  tape.scaled = a / std::ldexp(1.0, tape.squarings);
  const Mat id = Mat::Identity(n, n);

  tape.horner.assign(kTaylorDegree + 1, Mat());
  tape.horner[kTaylorDegree] = id + tape.scaled / static_cast<double>(kTaylorDegree);
  for (int j = kTaylorDegree - 1; j >= 1; --j) {
    tape.horner[j] = id + (tape.scaled * tape.horner[j + 1]) / static_cast<double>(j);
  }

  tape.squares.reserve(tape.squarings + 1);
  tape.squares.push_back(tape.horner[1]);
  for (int t = 0; t < tape.squarings; ++t) {
    tape.squares.push_back(tape.squares.back() * tape.squares.back());
  }
  return tape;
}

}  // namespace

void LowRankGenerator::validate() const {
  if (left.rows() != right.rows() || left.cols() != right.cols()) {
    throw ShapeError("generator factors differ in shape: left " + std::to_string(left.rows()) + "x" +
                     std::to_string(left.cols()) + ", right " + std::to_string(right.rows()) + "x" +
                     std::to_string(right.cols()));
  }
  if (left.cols() > left.rows()) {
    throw ShapeError("generator rank " + std::to_string(left.cols()) + " exceeds dim " +
                     std::to_string(left.rows()));
  }
}

SkewMatrix SkewMatrix::from(Mat data) {
  if (data.rows() != data.cols()) throw ShapeError("skew matrix must be square");
  if (!all_finite(data)) throw NumericError("skew matrix has non-finite entries");
  const double defect = (data + data.transpose()).cwiseAbs().maxCoeff();
  if (data.size() > 0 && defect > kTolerance) {
    throw InvariantError("matrix is not skew-symmetric (max |A + Aᵀ| = " + std::to_string(defect) + ")");
  }
  return SkewMatrix(std::move(data));
}

OrthogonalOperator OrthogonalOperator::from(Mat data) {
  if (data.rows() != data.cols()) throw ShapeError("orthogonal operator must be square");
  OrthogonalOperator op(std::move(data));
  if (!op.data_.allFinite()) throw InvariantError("orthogonal operator has non-finite entries");
  if (op.orthogonality_defect() > kOrthoTolerance) {
    throw InvariantError("operator is not orthogonal (defect " + std::to_string(op.orthogonality_defect()) + ")");
  }
  if (op.dim() > 0 && std::abs(op.data_.determinant() - 1.0) > kDetTolerance) {
    throw InvariantError("operator determinant is not +1");
  }
  return op;
}

double OrthogonalOperator::orthogonality_defect() const {
  if (data_.size() == 0) return 0.0;
  return (data_.transpose() * data_ - Mat::Identity(dim(), dim())).cwiseAbs().maxCoeff();
}

SkewMatrix assemble_generator(const LowRankGenerator& gen) {
  gen.validate();
  const Mat m = gen.left * gen.right.transpose();
  return SkewMatrix(m - m.transpose());
}

OrthogonalOperator matrix_exp(const SkewMatrix& a) {
  if (!all_finite(a.data())) throw NumericError("matrix_exp: non-finite generator");
  if (a.dim() == 0) return OrthogonalOperator(Mat());
  ExpTape tape = record_exp(a.data());
  OrthogonalOperator u(std::move(tape.squares.back()));
  if (!u.data_.allFinite() || u.orthogonality_defect() > OrthogonalOperator::kOrthoTolerance) {
    throw NumericError("matrix_exp: result drifted from SO(d) (defect " + std::to_string(u.orthogonality_defect()) +
                       ")");
  }
  return u;
}

Mat exp_backward(const SkewMatrix& a, const Mat& upstream) {
  if (upstream.rows() != a.dim() || upstream.cols() != a.dim()) {
    throw ShapeError("exp_backward: upstream is " + std::to_string(upstream.rows()) + "x" +
                     std::to_string(upstream.cols()) + ", generator dim " + std::to_string(a.dim()));
  }
  if (!all_finite(a.data()) || !upstream.allFinite()) throw NumericError("exp_backward: non-finite input");
  if (a.dim() == 0) return Mat();

  const ExpTape tape = record_exp(a.data());

  // Squarings: X_{t+1} = X_t X_t  →  dX_t = dX_{t+1} X_tᵀ + X_tᵀ dX_{t+1}.
  Mat d_x = upstream;
  for (int t = tape.squarings - 1; t >= 0; --t) {
    const Mat& x = tape.squares[t];
    d_x = d_x * x.transpose() + x.transpose() * d_x;
  }

  // Horner chain: H_j = I + (B/j) H_{j+1}.
  Mat d_b = Mat::Zero(a.dim(), a.dim());
  Mat d_h = d_x;
  for (int j = 1; j < kTaylorDegree; ++j) {
    const double inv_j = 1.0 / static_cast<double>(j);
    d_b.noalias() += inv_j * (d_h * tape.horner[j + 1].transpose());
    d_h = inv_j * (tape.scaled.transpose() * d_h);
  }
  d_b += d_h / static_cast<double>(kTaylorDegree);

  return d_b / std::ldexp(1.0, tape.squarings);
}

GradientBundle generator_backward(const LowRankGenerator& gen, const Mat& g_tilde) {
  gen.validate();
  if (g_tilde.rows() != gen.dim() || g_tilde.cols() != gen.dim()) {
    throw ShapeError("generator_backward: G̃ must be " + std::to_string(gen.dim()) + "x" + std::to_string(gen.dim()));
  }
  const Mat anti = g_tilde - g_tilde.transpose();
  GradientBundle out;
  out.grad_left = anti * gen.right;
  out.grad_right = -anti * gen.left;
  return out;
}

LowRankGenerator init_zero_interference(Index dim, Index rank, double sigma, std::uint64_t seed) {
  if (dim <= 0 || rank < 0 || rank > dim) {
    throw ParameterError("init_zero_interference: need 0 <= rank <= dim and dim > 0");
  }
  if (!std::isfinite(sigma) || sigma < 0.0) throw ParameterError("init_zero_interference: sigma must be >= 0");
  LowRankGenerator gen{Mat::Zero(dim, rank), Mat::Zero(dim, rank)};
  if (sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, sigma);
    for (Index c = 0; c < rank; ++c) {
      for (Index r = 0; r < dim; ++r) gen.right(r, c) = normal(rng);
    }
  }
  return gen;
}

GradientBundle operator_backward(const LowRankGenerator& gen, const Mat& upstream) {
  return generator_backward(gen, exp_backward(assemble_generator(gen), upstream));
}

}  // namespace opro
