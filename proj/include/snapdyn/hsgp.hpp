#pragma once

#include <cstddef>
#include <vector>

#include "snapdyn/tensor.hpp"

namespace snapdyn {

// Affine map taking observed times to zero mean and unit max-abs scale.
struct TimeScaler {
  double shift = 0.0;
  double scale = 1.0;

  static TimeScaler fit(const std::vector<double>& times);
  double transform(double t) const { return (t - shift) / scale; }
  double inverse(double s) const { return s * scale + shift; }
};

// Laplacian eigenpairs of the interval [-J, J] under Dirichlet boundary
// conditions: lambda_m = (pi m / 2J)^2, phi_m(t) = sin(sqrt(lambda_m)(t+J))/sqrt(J).
class HilbertBasis {
 public:
  // J = boundary_factor * max|t|; the inputs must stay strictly inside the
  // domain, so boundary_factor must exceed 1.
  static HilbertBasis from_times(std::size_t m, const std::vector<double>& times,
                                 double boundary_factor);
  // Direct construction with a given half-width.
  static HilbertBasis with_domain(std::size_t m, double half_width);

  std::size_t size() const { return eigenvalues_.size(); }
  double half_width() const { return half_width_; }
  double boundary_factor() const { return boundary_factor_; }
  const std::vector<double>& eigenvalues() const { return eigenvalues_; }

  bool contains(double t) const {
    return t >= -half_width_ && t <= half_width_;
  }

  // [phi_1(t), ..., phi_M(t)]; total function, defined for all t.
  std::vector<double> eval(double t) const;

  // Rows are eval(times[i]).
  Tensor eval_matrix(const std::vector<double>& times) const;

 private:
  HilbertBasis(std::size_t m, double half_width, double boundary_factor);

  double half_width_ = 1.0;
  double boundary_factor_ = 1.0;
  std::vector<double> eigenvalues_;
};

struct SEKernelHyper {
  double lengthscale = 1.0;
  double signal_sd = 1.0;

  SEKernelHyper(double lengthscale, double signal_sd);
};

// Spectral density of the squared-exponential kernel,
// s(w) = sd^2 sqrt(2 pi) l exp(-l^2 w^2 / 2).
double se_spectral_density(const SEKernelHyper& hyper, double omega);

// Exact SE kernel value (test oracle and reference).
double se_kernel(const SEKernelHyper& hyper, double t, double t2);

// Truncated expansion sum_m s(sqrt(lambda_m)) phi_m(t) phi_m(t2).
double approx_kernel(const HilbertBasis& basis, const SEKernelHyper& hyper,
                     double t, double t2);

// Spectral decomposition of a small symmetric PSD kernel matrix.
// Rows of `basis` index categories: K = U diag(d) U^T with u(c) = U.row(c).
struct CategoricalBasis {
  std::size_t count = 0;
  std::vector<double> eigenvalues;  // sorted descending, clamped at zero
  Tensor basis;                     // C x C, orthonormal columns
};

CategoricalBasis categorical_decompose(const Tensor& kernel);

// Joint features of the product kernel: element m*C + j is phi_m(t) * U(c, j).
std::vector<double> kron_features(const HilbertBasis& basis,
                                  const CategoricalBasis& cat, double t,
                                  std::size_t category);

// Cyclic Jacobi eigendecomposition of a symmetric matrix; eigenvectors are
// the columns of the returned basis. Exposed for reuse as a dense oracle.
struct SymmetricEig {
  std::vector<double> values;
  Tensor vectors;
};
SymmetricEig jacobi_eigendecompose(const Tensor& sym, double tol = 1e-12,
                                   int max_sweeps = 100);

}  // namespace snapdyn
