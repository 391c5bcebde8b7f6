#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace opro {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

/// Learnable factor pair (L, R) of a rank-limited skew generator
/// A = L Rᵀ - R Lᵀ. Both factors are dim x rank.
struct LowRankGenerator {
  Mat left;
  Mat right;

  Index dim() const { return left.rows(); }
  Index rank() const { return left.cols(); }

  /// Throws ShapeError when the factors disagree or rank exceeds dim.
  void validate() const;
};

/// A square matrix with A + Aᵀ = 0 (elementwise within 1e-12).
class SkewMatrix {
 public:
  static constexpr double kTolerance = 1e-12;

  /// Checked construction: NumericError on non-finite entries,
  /// InvariantError when the matrix is not skew.
  static SkewMatrix from(Mat data);
  static SkewMatrix zero(Index dim) { return SkewMatrix(Mat::Zero(dim, dim)); }

  const Mat& data() const { return data_; }
  Index dim() const { return data_.rows(); }

 private:
  explicit SkewMatrix(Mat data) : data_(std::move(data)) {}
  friend SkewMatrix assemble_generator(const LowRankGenerator& gen);
  Mat data_;
};

/// A member of SO(dim): ‖UᵀU - I‖_∞ ≤ 1e-9 and det U = +1.
class OrthogonalOperator {
 public:
  static constexpr double kOrthoTolerance = 1e-9;
  static constexpr double kDetTolerance = 1e-8;

  /// Checked construction; InvariantError if either invariant fails.
  static OrthogonalOperator from(Mat data);
  static OrthogonalOperator identity(Index dim) { return OrthogonalOperator(Mat::Identity(dim, dim)); }

  const Mat& data() const { return data_; }
  Index dim() const { return data_.rows(); }

  /// Max-abs entry of UᵀU - I.
  double orthogonality_defect() const;

 private:
  explicit OrthogonalOperator(Mat data) : data_(std::move(data)) {}
  friend OrthogonalOperator matrix_exp(const SkewMatrix& a);
  Mat data_;
};

struct GradientBundle {
  Mat grad_left;
  Mat grad_right;
};

/// A = L Rᵀ - R Lᵀ, evaluated as M - Mᵀ with M = L Rᵀ so that the result is
/// skew to the last bit.
SkewMatrix assemble_generator(const LowRankGenerator& gen);

/// exp(A) by scaling and squaring around a degree-13 Taylor core.
OrthogonalOperator matrix_exp(const SkewMatrix& a);

/// Adjoint of the differential of exp at A applied to `upstream`, i.e. the
/// gradient with respect to A of ⟨upstream, exp(A)⟩_F. Computed by reverse
/// accumulation through the same scaling-and-squaring graph as matrix_exp.
Mat exp_backward(const SkewMatrix& a, const Mat& upstream);

/// grad_left = (G̃ - G̃ᵀ) R, grad_right = (G̃ᵀ - G̃) L.
GradientBundle generator_backward(const LowRankGenerator& gen, const Mat& g_tilde);

/// L = 0, R ~ N(0, sigma²) from a seeded stream. sigma = 0 is accepted and
/// yields R = 0; negative or non-finite sigma throws ParameterError.
LowRankGenerator init_zero_interference(Index dim, Index rank, double sigma, std::uint64_t seed);

/// Convenience composition used by the banks: exp(assemble_generator(gen)).
inline OrthogonalOperator operator_from(const LowRankGenerator& gen) {
  return matrix_exp(assemble_generator(gen));
}

/// Full chain ⟨G, exp(A(L,R))⟩ → (∇L, ∇R).
GradientBundle operator_backward(const LowRankGenerator& gen, const Mat& upstream);

}  // namespace opro
