/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/approximations.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/SparseCholesky>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stgp {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void maybe_precompute_lags(GneitingKernel& kernel, const SpaceTimeDataset& data) {
  double tmin = data.points[0].t, tmax = data.points[0].t;
  for (const auto& pt : data.points) {
    const double r = std::nearbyint(pt.t);
    if (std::abs(pt.t - r) >= 1e-9) return;
    tmin = std::min(tmin, pt.t);
    tmax = std::max(tmax, pt.t);
  }
  const double range = tmax - tmin;
  if (range >= 0.0 && range <= 200000.0) {
    kernel.precompute_time_lags(static_cast<int>(range) + 1);
  }
}

/// Covariance over a conditioning block under one of the two diagonal
/// policies; `whitened` (when non-null) subtracts the low-rank component.
struct BlockCov {
  const std::vector<SpaceTimePoint>* pts;
  const GneitingKernel* kernel;
  double nugget;                 // added on exact index matches
  const den_mat_t* whitened = nullptr;  // m x n, optional

  double operator()(int a, int b) const {
    double v = (*kernel)((*pts)[static_cast<std::size_t>(a)],
                         (*pts)[static_cast<std::size_t>(b)]);
    if (whitened != nullptr && whitened->rows() > 0) {
      v -= whitened->col(a).dot(whitened->col(b));
    }
    if (a == b) v += nugget;
    return v;
  }
};

struct RowFactors {
  vec_t A;        // coefficients over N(i)
  double D;       // conditional variance
  Eigen::LLT<den_mat_t> llt;  // factor of the (jittered) conditioning block
  den_mat_t C_N;  // conditioning block actually factored
  vec_t c_iN;     // cross-covariances
};

/// Solves one conditioning system with the jitter ladder (1e-10 sigma1_2,
/// one retry at 10x).
RowFactors solve_row(const BlockCov& cov, const std::vector<int>& N, int i,
                     double sigma1_2) {
  RowFactors out;
  const int k = static_cast<int>(N.size());
  out.c_iN.resize(k);
  out.C_N.resize(k, k);
  for (int a = 0; a < k; ++a) {
    out.c_iN[a] = cov(i, N[static_cast<std::size_t>(a)]);
    for (int b = 0; b <= a; ++b) {
      const double v = cov(N[static_cast<std::size_t>(a)], N[static_cast<std::size_t>(b)]);
      out.C_N(a, b) = v;
      out.C_N(b, a) = v;
    }
  }
  const double d_ii = cov(i, i);
  if (k == 0) {
    out.D = d_ii;
    if (!(out.D > 0.0)) {
      throw NumericError("vecchia row: non-positive marginal variance");
    }
    return out;
  }
  out.llt.compute(out.C_N);
  if (out.llt.info() != Eigen::Success) {
    double jitter = 1e-10 * sigma1_2;
    for (int attempt = 0; attempt < 2; ++attempt) {
      out.C_N.diagonal().array() += jitter;
      out.llt.compute(out.C_N);
      if (out.llt.info() == Eigen::Success) break;
      jitter *= 9.0;  // second pass lands at 10x the base jitter
    }
    if (out.llt.info() != Eigen::Success) {
      throw NumericError("vecchia row: conditioning block is not positive definite");
    }
  }
  out.A = out.llt.solve(out.c_iN);
  out.D = d_ii - out.A.dot(out.c_iN);
  if (!(out.D > 0.0)) {
    throw NumericError(
        "vecchia row: non-positive conditional variance (near-duplicate points)");
  }
  return out;
}

void assemble_b_and_d(const SpaceTimeDataset& data, const BlockCov& cov,
                      const NeighborSets& neighbors, double sigma1_2,
                      sp_mat_rm_t& B, vec_t& D) {
  const int n = data.n();
  if (neighbors.n() != n) {
    throw ConfigError("build: neighbor sets inconsistent with the dataset");
  }
  D.resize(n);
  std::vector<vec_t> rows(static_cast<std::size_t>(n));
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 32)
  for (int i = 0; i < n; ++i) {
    try {
      RowFactors rf = solve_row(cov, neighbors.sets[static_cast<std::size_t>(i)], i,
                                sigma1_2);
      D[i] = rf.D;
      rows[static_cast<std::size_t>(i)] = std::move(rf.A);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<Eigen::Triplet<double>> trips;
  std::size_t nnz = static_cast<std::size_t>(n);
  for (const auto& row : rows) nnz += static_cast<std::size_t>(row.size());
  trips.reserve(nnz);
  for (int i = 0; i < n; ++i) {
    const auto& N = neighbors.sets[static_cast<std::size_t>(i)];
    const vec_t& A = rows[static_cast<std::size_t>(i)];
    for (std::size_t a = 0; a < N.size(); ++a) {
      trips.emplace_back(i, N[a], -A[static_cast<Eigen::Index>(a)]);
    }
    trips.emplace_back(i, i, 1.0);
  }
  B.resize(n, n);
  B.setFromTriplets(trips.begin(), trips.end());
  B.makeCompressed();
}

vec_t sparse_q_apply(const sp_mat_rm_t& B, const vec_t& D, const vec_t& v) {
  vec_t u = B * v;
  u.array() /= D.array();
  return B.transpose() * u;
}

den_mat_t sparse_q_apply(const sp_mat_rm_t& B, const vec_t& D, const den_mat_t& V) {
  den_mat_t U = B * V;
  U.array().colwise() /= D.array();
  return B.transpose() * U;
}

/// Sigma_s v = B^{-1} (D (B^{-T} v)) for the unit-triangular factor.
vec_t sparse_sigma_apply(const sp_mat_rm_t& B, const vec_t& D, const vec_t& v) {
  vec_t x = v;
  B.transpose().triangularView<Eigen::UnitUpper>().solveInPlace(x);
  x.array() *= D.array();
  B.triangularView<Eigen::UnitLower>().solveInPlace(x);
  return x;
}

vec_t residual_vector(const vec_t& y, const den_mat_t& X, const vec_t& beta) {
  if (X.cols() == 0 || beta.size() == 0) return y;
  if (beta.size() != X.cols()) throw ConfigError("beta length does not match X");
  return y - X * beta;
}

sp_mat_t form_precision(const sp_mat_rm_t& B, const vec_t& D) {
  sp_mat_t Bc = B;  // column-major copy
  sp_mat_t Dinv(B.rows(), B.cols());
  Dinv.reserve(Eigen::VectorXi::Constant(static_cast<int>(B.cols()), 1));
  for (int i = 0; i < static_cast<int>(B.rows()); ++i) {
    Dinv.insert(i, i) = 1.0 / D[i];
  }
  Dinv.makeCompressed();
  return sp_mat_t(Bc.transpose() * Dinv * Bc);
}

}  // namespace

// ---------------------------------------------------------------------------
// structure builders
// ---------------------------------------------------------------------------

VecchiaStructure build_vecchia(const SpaceTimeDataset& data,
                               const CovarianceParams& theta,
                               const NeighborSets& neighbors,
                               DiagonalPolicy policy) {
  theta.validate();
  VecchiaStructure s;
  s.data = &data;
  s.kernel = GneitingKernel(theta);
  maybe_precompute_lags(s.kernel, data);
  s.neighbors = neighbors;
  s.policy = policy;
  const double nugget = policy == DiagonalPolicy::kObservation ? theta.sigma2 : 0.0;
  const BlockCov cov{&data.points, &s.kernel, nugget, nullptr};
  assemble_b_and_d(data, cov, s.neighbors, theta.sigma1_2, s.B, s.D);
  return s;
}

namespace {

InducingStructure build_inducing_structure(const SpaceTimeDataset& data,
                                           const GneitingKernel& kernel,
                                           const InducingSet& set) {
  InducingStructure out;
  out.set = set;
  out.basis = InducingBasis(set, kernel);
  const int m = out.basis.m();
  const int n = data.n();
  out.cross_cov.resize(m, n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      out.cross_cov(j, i) = kernel(out.basis.points()[static_cast<std::size_t>(j)],
                                   data.points[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

}  // namespace

FitcStructure build_fitc(const SpaceTimeDataset& data,
                         const CovarianceParams& theta,
                         const InducingSet& inducing) {
  theta.validate();
  if (inducing.size() < 1) throw ConfigError("build_fitc: need at least one inducing point");
  FitcStructure s;
  s.data = &data;
  s.kernel = GneitingKernel(theta);
  maybe_precompute_lags(s.kernel, data);
  s.inducing = build_inducing_structure(data, s.kernel, inducing);

  const int n = data.n();
  const den_mat_t& U = s.inducing.cross_cov;
  den_mat_t W = s.inducing.basis.llt().matrixL().solve(U);
  s.fitc_diag.resize(n);
  const double clamp_tol = 1e-10 * std::max(1.0, theta.sigma1_2);
  for (int i = 0; i < n; ++i) {
    double d = theta.sigma1_2 - W.col(i).squaredNorm();
    if (d < 0.0) {
      if (d < -clamp_tol) {
        throw NumericError("build_fitc: diagonal correction went negative");
      }
      d = 0.0;
    }
    s.fitc_diag[i] = d;
  }
  s.lambda = s.fitc_diag.array() + theta.sigma2;
  if ((s.lambda.array() <= 0.0).any()) {
    throw NumericError("build_fitc: zero observation diagonal; a positive nugget is required");
  }
  den_mat_t M = s.inducing.basis.cov();
  M.noalias() += U * s.lambda.cwiseInverse().asDiagonal() * U.transpose();
  s.M_llt.compute(M);
  if (s.M_llt.info() != Eigen::Success) {
    throw NumericError("build_fitc: Woodbury core factorization failed");
  }
  return s;
}

VifStructure build_vif(const SpaceTimeDataset& data, const CovarianceParams& theta,
                       const InducingSet& inducing,
                       const NeighborSets& residual_neighbors,
                       DiagonalPolicy policy) {
  theta.validate();
  VifStructure s;
  s.data = &data;
  s.kernel = GneitingKernel(theta);
  maybe_precompute_lags(s.kernel, data);
  s.inducing = build_inducing_structure(data, s.kernel, inducing);
  s.residual_neighbors = residual_neighbors;
  s.policy = policy;

  const int n = data.n();
  const int m = s.inducing.basis.m();
  const den_mat_t& U = s.inducing.cross_cov;
  if (m > 0) {
    s.whitened = s.inducing.basis.llt().matrixL().solve(U);
  } else {
    s.whitened.resize(0, n);
  }
  const double nugget = policy == DiagonalPolicy::kObservation ? theta.sigma2 : 0.0;
  const BlockCov cov{&data.points, &s.kernel, nugget, &s.whitened};
  assemble_b_and_d(data, cov, s.residual_neighbors, theta.sigma1_2, s.B, s.D);

  if (m > 0) {
    s.QUt = sparse_q_apply(s.B, s.D, den_mat_t(U.transpose()));
    den_mat_t M = s.inducing.basis.cov();
    M.noalias() += U * s.QUt;
    s.M_llt.compute(M);
    if (s.M_llt.info() != Eigen::Success) {
      throw NumericError("build_vif: Woodbury core factorization failed");
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// negative log-likelihoods
// ---------------------------------------------------------------------------

namespace {

double latent_policy_nll(const LaplaceAlgebra& algebra, double sigma2,
                         const vec_t& r) {
  if (!(sigma2 > 0.0)) {
    throw NumericError("nll: the Gaussian path requires a positive nugget");
  }
  const int n = static_cast<int>(r.size());
  const double w = 1.0 / sigma2;
  const_cast<LaplaceAlgebra&>(algebra).prepare(vec_t::Constant(n, w));
  const double logdet = n * std::log(sigma2) + algebra.logdet_I_plus_WS();
  const vec_t z = algebra.solve(r);
  const double quad = w * (r.squaredNorm() - w * r.dot(z));
  return 0.5 * (logdet + quad + n * kLog2Pi);
}

}  // namespace

double nll(const VecchiaStructure& s, const vec_t& y, const den_mat_t& X,
           const vec_t& beta) {
  const vec_t r = residual_vector(y, X, beta);
  if (s.policy == DiagonalPolicy::kObservation) {
    const vec_t u = s.B * r;
    const int n = static_cast<int>(r.size());
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += std::log(s.D[i]) + u[i] * u[i] / s.D[i];
    }
    return 0.5 * (acc + n * kLog2Pi);
  }
  auto algebra = make_laplace_algebra(s);
  return latent_policy_nll(*algebra, s.kernel.params().sigma2, r);
}

double nll(const FitcStructure& s, const vec_t& y, const den_mat_t& X,
           const vec_t& beta) {
  const vec_t r = residual_vector(y, X, beta);
  const int n = static_cast<int>(r.size());
  const den_mat_t& U = s.inducing.cross_cov;
  const vec_t rl = r.cwiseQuotient(s.lambda);
  const vec_t v = U * rl;
  const double quad = r.dot(rl) - v.dot(s.M_llt.solve(v));
  double logdet = s.lambda.array().log().sum() - s.inducing.basis.log_det();
  logdet += 2.0 * s.M_llt.matrixLLT().diagonal().array().log().sum();
  return 0.5 * (logdet + quad + n * kLog2Pi);
}

double nll(const VifStructure& s, const vec_t& y, const den_mat_t& X,
           const vec_t& beta) {
  const vec_t r = residual_vector(y, X, beta);
  if (s.policy != DiagonalPolicy::kObservation) {
    auto algebra = make_laplace_algebra(s);
    return latent_policy_nll(*algebra, s.kernel.params().sigma2, r);
  }
  const int n = static_cast<int>(r.size());
  const int m = s.inducing.basis.m();
  const vec_t ur = sparse_q_apply(s.B, s.D, r);
  double logdet = s.D.array().log().sum();
  double quad = r.dot(ur);
  if (m > 0) {
    const vec_t w = s.inducing.cross_cov * ur;
    quad -= w.dot(s.M_llt.solve(w));
    logdet += 2.0 * s.M_llt.matrixLLT().diagonal().array().log().sum() -
              s.inducing.basis.log_det();
  }
  return 0.5 * (logdet + quad + n * kLog2Pi);
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

namespace {

/// Accumulates sum over pairs of grad-kernel components against a weight per
/// pair. The kernel gradient order is (sigma1_2, a, c, alpha, beta, delta),
/// mapped into slots 1..6 of the 7-vector; slot 0 is the nugget.
inline void add_pair_weight(const GneitingKernel& kernel, const SpaceTimePoint& p1,
                            const SpaceTimePoint& p2, double weight, vec_t& grad) {
  const KernelGrad g = kernel.grad(p1, p2);
  for (int k = 0; k < kKernelGradDim; ++k) grad[k + 1] += weight * g[static_cast<std::size_t>(k)];
}

}  // namespace

vec_t nll_grad(const VecchiaStructure& s, const vec_t& y, const den_mat_t& X,
               const vec_t& beta) {
  if (s.policy != DiagonalPolicy::kObservation) {
    throw NumericError(
        "nll_grad: analytic gradient is defined for the observation-policy "
        "structure driven by the optimizer");
  }
  const SpaceTimeDataset& data = *s.data;
  const CovarianceParams& theta = s.kernel.params();
  const vec_t r = residual_vector(y, X, beta);
  const vec_t u = s.B * r;
  const int n = data.n();
  const BlockCov cov{&data.points, &s.kernel, theta.sigma2, nullptr};

  std::vector<vec_t> partial(static_cast<std::size_t>(n));
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 32)
  for (int i = 0; i < n; ++i) {
    try {
      const auto& N = s.neighbors.sets[static_cast<std::size_t>(i)];
      const int k = static_cast<int>(N.size());
      vec_t g = vec_t::Zero(kNllGradDim);
      RowFactors rf = solve_row(cov, N, i, theta.sigma1_2);
      vec_t w(k);
      for (int a = 0; a < k; ++a) w[a] = r[N[static_cast<std::size_t>(a)]];
      if (k > 0) w = rf.llt.solve(w);
      // s1 = a~' dP a~ (= dD), s2 = w~' dP a~ (= -du), with a~ = [-A, 1]
      double s1_nugget = 1.0 + (k > 0 ? rf.A.squaredNorm() : 0.0);
      double s2_nugget = k > 0 ? -rf.A.dot(w) : 0.0;
      std::array<double, kKernelGradDim> s1{}, s2{};
      const auto& pts = data.points;
      for (int a = 0; a < k; ++a) {
        const int pa = N[static_cast<std::size_t>(a)];
        const double ta_a = -rf.A[a];
        const double wa = w[a];
        // pair (a, i): a~_i = 1
        {
          const KernelGrad kg =
              s.kernel.grad(pts[static_cast<std::size_t>(pa)], pts[static_cast<std::size_t>(i)]);
          for (int q = 0; q < kKernelGradDim; ++q) {
            s1[static_cast<std::size_t>(q)] += 2.0 * ta_a * kg[static_cast<std::size_t>(q)];
            s2[static_cast<std::size_t>(q)] += wa * kg[static_cast<std::size_t>(q)];
          }
        }
        for (int b = 0; b < a; ++b) {
          const int pb = N[static_cast<std::size_t>(b)];
          const KernelGrad kg =
              s.kernel.grad(pts[static_cast<std::size_t>(pa)], pts[static_cast<std::size_t>(pb)]);
          const double ta_b = -rf.A[b];
          const double wb = w[b];
          for (int q = 0; q < kKernelGradDim; ++q) {
            s1[static_cast<std::size_t>(q)] += 2.0 * ta_a * ta_b * kg[static_cast<std::size_t>(q)];
            s2[static_cast<std::size_t>(q)] +=
                (wa * ta_b + wb * ta_a) * kg[static_cast<std::size_t>(q)];
          }
        }
        // diagonal (a, a)
        {
          const KernelGrad kg = s.kernel.grad(0.0, 0.0);
          for (int q = 0; q < kKernelGradDim; ++q) {
            s1[static_cast<std::size_t>(q)] += ta_a * ta_a * kg[static_cast<std::size_t>(q)];
            s2[static_cast<std::size_t>(q)] += wa * ta_a * kg[static_cast<std::size_t>(q)];
          }
        }
      }
      // diagonal (i, i), a~_i = 1, w~_i = 0
      {
        const KernelGrad kg = s.kernel.grad(0.0, 0.0);
        for (int q = 0; q < kKernelGradDim; ++q) {
          s1[static_cast<std::size_t>(q)] += kg[static_cast<std::size_t>(q)];
        }
      }
      const double Di = s.D[i];
      const double ui = u[i];
      const double c_d = 0.5 * (1.0 / Di - ui * ui / (Di * Di));
      const double c_u = ui / Di;
      g[0] = c_d * s1_nugget - c_u * s2_nugget;
      for (int q = 0; q < kKernelGradDim; ++q) {
        g[q + 1] = c_d * s1[static_cast<std::size_t>(q)] - c_u * s2[static_cast<std::size_t>(q)];
      }
      partial[static_cast<std::size_t>(i)] = std::move(g);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  vec_t grad = vec_t::Zero(kNllGradDim);
  for (const auto& g : partial) grad += g;
  return grad;
}

vec_t nll_grad(const FitcStructure& s, const vec_t& y, const den_mat_t& X,
               const vec_t& beta) {
  const SpaceTimeDataset& data = *s.data;
  const vec_t r = residual_vector(y, X, beta);
  const int n = data.n();
  const int m = s.inducing.basis.m();
  const den_mat_t& U = s.inducing.cross_cov;
  const auto& ipts = s.inducing.basis.points();
  const auto& pts = data.points;

  const vec_t lam_inv = s.lambda.cwiseInverse();
  const vec_t rl = r.cwiseProduct(lam_inv);
  const vec_t v = U * rl;
  const vec_t Mv = s.M_llt.solve(v);
  const vec_t alpha = rl - lam_inv.cwiseProduct(U.transpose() * Mv);

  const den_mat_t P = s.inducing.basis.llt().solve(U);          // Sigma_m^{-1} U
  const den_mat_t UL = U * lam_inv.asDiagonal();                // U Lambda^{-1}
  const den_mat_t H = s.M_llt.matrixL().solve(UL);              // L_M^{-1} U Lam^{-1}
  vec_t diag_sinv(n);
  for (int i = 0; i < n; ++i) {
    diag_sinv[i] = lam_inv[i] - H.col(i).squaredNorm() / 1.0;
  }
  // K2 = Sigma_m^{-1} U Sigmatilde^{-1}
  const den_mat_t NL = s.M_llt.solve(UL);
  const den_mat_t G1 = P * UL.transpose();  // m x m
  den_mat_t K2 = P * lam_inv.asDiagonal();
  K2.noalias() -= G1 * NL * 1.0;
  // wait: K2 = P Lam^{-1} - (P Lam^{-1} U^T) M^{-1} U Lam^{-1} = PL - G1 * NL
  const den_mat_t W2 = K2 * P.transpose();  // m x m
  const vec_t Pa = P * alpha;               // m

  const vec_t phi = 0.5 * (diag_sinv.array() - alpha.array().square()).matrix();

  // per-observation U-pair weights
  den_mat_t omega = K2;
  omega.noalias() -= Pa * alpha.transpose();
  omega.noalias() -= P * (2.0 * phi).asDiagonal();

  // Sigma_m-pair weights
  den_mat_t wsig = -0.5 * W2 + 0.5 * (Pa * Pa.transpose());
  wsig.noalias() += P * phi.asDiagonal() * P.transpose();

  vec_t grad = vec_t::Zero(kNllGradDim);
  // diagonal k_ii and nugget parts
  grad[0] += phi.sum();  // d Lambda / d sigma2 = 1
  grad[1] += phi.sum();  // d k_ii / d sigma1_2 = 1
  // U pairs
  {
    vec_t acc = vec_t::Zero(kNllGradDim);
#pragma omp parallel
    {
      vec_t local = vec_t::Zero(kNllGradDim);
#pragma omp for schedule(static)
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
          add_pair_weight(s.kernel, ipts[static_cast<std::size_t>(j)],
                          pts[static_cast<std::size_t>(i)], omega(j, i), local);
        }
      }
#pragma omp critical
      acc += local;
    }
    grad += acc;
  }
  // Sigma_m pairs
  for (int j1 = 0; j1 < m; ++j1) {
    add_pair_weight(s.kernel, ipts[static_cast<std::size_t>(j1)],
                    ipts[static_cast<std::size_t>(j1)], wsig(j1, j1), grad);
    for (int j2 = 0; j2 < j1; ++j2) {
      add_pair_weight(s.kernel, ipts[static_cast<std::size_t>(j1)],
                      ipts[static_cast<std::size_t>(j2)], wsig(j1, j2) + wsig(j2, j1),
                      grad);
    }
  }
  return grad;
}

vec_t nll_grad(const VifStructure& s, const vec_t& y, const den_mat_t& X,
               const vec_t& beta) {
  if (s.policy != DiagonalPolicy::kObservation) {
    throw NumericError(
        "nll_grad: analytic gradient is defined for the observation-policy "
        "structure driven by the optimizer");
  }
  const SpaceTimeDataset& data = *s.data;
  const CovarianceParams& theta = s.kernel.params();
  const vec_t r = residual_vector(y, X, beta);
  const int n = data.n();
  const int m = s.inducing.basis.m();
  const den_mat_t& U = s.inducing.cross_cov;
  const auto& pts = data.points;
  const BlockCov cov{&data.points, &s.kernel, theta.sigma2, &s.whitened};

  // shared dense prep
  const vec_t ur = sparse_q_apply(s.B, s.D, r);
  vec_t t = vec_t::Zero(n);
  vec_t yM;
  den_mat_t LVB, Hhat, N1;
  if (m > 0) {
    const vec_t w = U * ur;
    yM = s.M_llt.solve(w);
    t = U.transpose() * yM;
    den_mat_t VB = U * s.B.transpose();       // m x n
    LVB = s.M_llt.matrixL().solve(VB);        // L_M^{-1} U B^T
    Hhat = s.M_llt.matrixU().solve(LVB);      // M^{-1} U B^T
    N1 = s.M_llt.solve(U);                    // M^{-1} U
  }
  const vec_t z = r - t;
  const vec_t Bz = s.B * z;

  // Phi: sparse symmetric weights over residual covariance entries
  std::vector<Eigen::Triplet<double>> phi_trips;
  {
    std::size_t nnz = 0;
    for (const auto& N : s.residual_neighbors.sets) {
      nnz += (N.size() + 1) * (N.size() + 1);
    }
    phi_trips.reserve(nnz);
  }
  std::exception_ptr failure;
#pragma omp parallel
  {
    std::vector<Eigen::Triplet<double>> local;
#pragma omp for schedule(dynamic, 32)
    for (int i = 0; i < n; ++i) {
      try {
        const auto& N = s.residual_neighbors.sets[static_cast<std::size_t>(i)];
        const int k = static_cast<int>(N.size());
        RowFactors rf = solve_row(cov, N, i, theta.sigma1_2);
        const double Di = s.D[i];
        // a~ over cl = [N..., i]: (-A, 1)
        vec_t atil(k + 1);
        for (int a = 0; a < k; ++a) atil[a] = -rf.A[a];
        atil[k] = 1.0;
        // G_cl a~ and a~' G a~ through the cached low-rank pieces
        vec_t Ga = vec_t::Zero(k + 1);
        double aGa = 0.0;
        if (m > 0) {
          const auto hcol = Hhat.col(i);
          for (int a = 0; a < k; ++a) {
            Ga[a] = U.col(N[static_cast<std::size_t>(a)]).dot(hcol);
          }
          Ga[k] = U.col(i).dot(hcol);
          aGa = LVB.col(i).squaredNorm();
        }
        // z over cl and u~_z = a~' z_cl = (Bz)_i
        vec_t zcl(k + 1);
        for (int a = 0; a < k; ++a) zcl[a] = z[N[static_cast<std::size_t>(a)]];
        zcl[k] = z[i];
        const double uz = Bz[i];
        const double c0 = 0.5 * (1.0 / Di - (aGa + uz * uz) / (Di * Di));
        vec_t vrow = (Ga + uz * zcl) / Di;
        // Rv = [rho_N^{-1} v_N; 0]
        vec_t Rv = vec_t::Zero(k + 1);
        if (k > 0) {
          Rv.head(k) = rf.llt.solve(vrow.head(k));
        }
        // Phi_i = c0 a a' - sym(a (Rv)')
        for (int a = 0; a <= k; ++a) {
          const int pa = a < k ? N[static_cast<std::size_t>(a)] : i;
          for (int b = 0; b <= k; ++b) {
            const int pb = b < k ? N[static_cast<std::size_t>(b)] : i;
            const double val = c0 * atil[a] * atil[b] -
                               0.5 * (atil[a] * Rv[b] + atil[b] * Rv[a]);
            if (val != 0.0) local.emplace_back(pa, pb, val);
          }
        }
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
#pragma omp critical
    phi_trips.insert(phi_trips.end(), local.begin(), local.end());
  }
  if (failure) std::rethrow_exception(failure);
  sp_mat_t phi(n, n);
  phi.setFromTriplets(phi_trips.begin(), phi_trips.end());
  phi.makeCompressed();
  phi_trips.clear();
  phi_trips.shrink_to_fit();

  vec_t grad = vec_t::Zero(kNllGradDim);

  // direct pass over residual-entry weights: d rho = d k~ (and the nugget)
  {
    vec_t acc = vec_t::Zero(kNllGradDim);
    double acc_nugget = 0.0;
    for (int outer = 0; outer < phi.outerSize(); ++outer) {
      for (sp_mat_t::InnerIterator it(phi, outer); it; ++it) {
        const int a = static_cast<int>(it.row());
        const int b = static_cast<int>(it.col());
        if (a < b) continue;  // symmetric: handle lower triangle + diagonal
        const double wgt = a == b ? it.value() : it.value() + phi.coeff(b, a);
        add_pair_weight(s.kernel, pts[static_cast<std::size_t>(a)],
                        pts[static_cast<std::size_t>(b)], wgt, acc);
        if (a == b) acc_nugget += wgt;
      }
    }
    grad += acc;
    grad[0] += acc_nugget;
  }

  if (m > 0) {
    const auto& ipts = s.inducing.basis.points();
    const den_mat_t P = s.inducing.basis.llt().solve(U);  // Sigma_m^{-1} U
    // low-rank pair weights: Omega = M^{-1} U Q - yM (ur - Q t)' - 2 P Phi
    den_mat_t omega = sparse_q_apply(s.B, s.D, den_mat_t(N1.transpose())).transpose();
    const vec_t qt = sparse_q_apply(s.B, s.D, t);
    omega.noalias() -= yM * (ur - qt).transpose();
    const den_mat_t PPhi = P * phi;  // m x n
    omega.noalias() -= 2.0 * PPhi;

    // Sigma_m weights
    den_mat_t wsig = 0.5 * (yM * yM.transpose());
    wsig.noalias() += PPhi * P.transpose();
    den_mat_t Minv = s.M_llt.solve(den_mat_t::Identity(m, m));
    den_mat_t Sminv = s.inducing.basis.llt().solve(den_mat_t::Identity(m, m));
    wsig += 0.5 * (Minv - Sminv);

    {
      vec_t acc = vec_t::Zero(kNllGradDim);
#pragma omp parallel
      {
        vec_t local = vec_t::Zero(kNllGradDim);
#pragma omp for schedule(static)
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < m; ++j) {
            add_pair_weight(s.kernel, ipts[static_cast<std::size_t>(j)],
                            pts[static_cast<std::size_t>(i)], omega(j, i), local);
          }
        }
#pragma omp critical
        acc += local;
      }
      grad += acc;
    }
    for (int j1 = 0; j1 < m; ++j1) {
      add_pair_weight(s.kernel, ipts[static_cast<std::size_t>(j1)],
                      ipts[static_cast<std::size_t>(j1)], wsig(j1, j1), grad);
      for (int j2 = 0; j2 < j1; ++j2) {
        add_pair_weight(s.kernel, ipts[static_cast<std::size_t>(j1)],
                        ipts[static_cast<std::size_t>(j2)], wsig(j1, j2) + wsig(j2, j1),
                        grad);
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// GLS coefficients
// ---------------------------------------------------------------------------

namespace {

vec_t gls_from_solver(const den_mat_t& X, const vec_t& y,
                      const std::function<vec_t(const vec_t&)>& sigma_inv) {
  const Eigen::Index p = X.cols();
  if (p == 0) return vec_t();
  den_mat_t SX(X.rows(), p);
  for (Eigen::Index j = 0; j < p; ++j) SX.col(j) = sigma_inv(X.col(j));
  den_mat_t XtSX = X.transpose() * SX;
  vec_t Xty = SX.transpose() * y;
  Eigen::LDLT<den_mat_t> ldlt(XtSX);
  if (ldlt.info() != Eigen::Success) {
    throw NumericError("gls_beta: normal equations are singular");
  }
  return ldlt.solve(Xty);
}

}  // namespace

vec_t gls_beta(const VecchiaStructure& s, const vec_t& y, const den_mat_t& X) {
  if (s.policy != DiagonalPolicy::kObservation) {
    throw NumericError("gls_beta: requires the observation-policy structure");
  }
  return gls_from_solver(
      X, y, [&](const vec_t& v) { return sparse_q_apply(s.B, s.D, v); });
}

vec_t gls_beta(const FitcStructure& s, const vec_t& y, const den_mat_t& X) {
  const den_mat_t& U = s.inducing.cross_cov;
  return gls_from_solver(X, y, [&](const vec_t& v) {
    const vec_t vl = v.cwiseQuotient(s.lambda);
    return vec_t(vl - (U.transpose() * s.M_llt.solve(U * vl)).cwiseQuotient(s.lambda));
  });
}

vec_t gls_beta(const VifStructure& s, const vec_t& y, const den_mat_t& X) {
  if (s.policy != DiagonalPolicy::kObservation) {
    throw NumericError("gls_beta: requires the observation-policy structure");
  }
  const den_mat_t& U = s.inducing.cross_cov;
  const int m = s.inducing.basis.m();
  return gls_from_solver(X, y, [&](const vec_t& v) {
    vec_t qv = sparse_q_apply(s.B, s.D, v);
    if (m > 0) {
      qv -= sparse_q_apply(s.B, s.D, vec_t(U.transpose() * s.M_llt.solve(U * qv)));
    }
    return qv;
  });
}

// ---------------------------------------------------------------------------
// prediction
// ---------------------------------------------------------------------------

namespace {

vec_t fixed_effect(const den_mat_t& X_p, const vec_t& beta, int n_p) {
  if (X_p.cols() == 0 || beta.size() == 0) return vec_t::Zero(n_p);
  if (X_p.rows() != n_p || X_p.cols() != beta.size()) {
    throw ConfigError("predict: covariate matrix does not match targets");
  }
  return X_p * beta;
}

/// pred_m_v nearest training rows to a target under the chosen metric kind;
/// ties toward the smaller index, result ascending.
std::vector<int> target_neighbors(const SpaceTimePoint& q,
                                  const SpaceTimeDataset& train,
                                  const GneitingKernel& kernel,
                                  const NeighborSets& sets, int pred_m_v,
                                  const den_mat_t* whitened, const vec_t* resid_diag,
                                  const vec_t* w_target, double target_resid) {
  const int n = train.n();
  const int want = std::min(pred_m_v, n);
  std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(n));
  const double sigma1_2 = kernel.params().sigma1_2;
  for (int j = 0; j < n; ++j) {
    double d;
    switch (sets.metric_kind) {
      case NeighborSets::MetricKind::kEuclideanScaled: {
        const auto& pj = train.points[static_cast<std::size_t>(j)];
        const double dx = (q.x - pj.x) / sets.space_scale;
        const double dy = (q.y - pj.y) / sets.space_scale;
        const double dt = (q.t - pj.t) / sets.time_scale;
        d = dx * dx + dy * dy + dt * dt;
        break;
      }
      case NeighborSets::MetricKind::kDc: {
        const double rho =
            kernel(q, train.points[static_cast<std::size_t>(j)]) / sigma1_2;
        d = 1.0 - std::abs(rho);
        break;
      }
      case NeighborSets::MetricKind::kDr: {
        const double dj = (*resid_diag)[j];
        const double tol = 1e-7 * sigma1_2;
        if (dj <= tol || target_resid <= tol) {
          d = 1.0;
        } else {
          double rho = kernel(q, train.points[static_cast<std::size_t>(j)]);
          if (w_target->size() > 0) rho -= w_target->dot(whitened->col(j));
          d = 1.0 - std::abs(rho) / std::sqrt(dj * target_resid);
        }
        break;
      }
    }
    cand[static_cast<std::size_t>(j)] = {d, j};
  }
  std::partial_sort(cand.begin(), cand.begin() + want, cand.end());
  std::vector<int> out(static_cast<std::size_t>(want));
  for (int k = 0; k < want; ++k) out[static_cast<std::size_t>(k)] = cand[static_cast<std::size_t>(k)].second;
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

PredictiveDistribution predict(const VecchiaStructure& s, const vec_t& y,
                               const den_mat_t& X, const vec_t& beta,
                               const std::vector<SpaceTimePoint>& targets,
                               const den_mat_t& X_p, int pred_m_v) {
  if (s.policy != DiagonalPolicy::kObservation) {
    throw NumericError("predict: requires the observation-policy structure");
  }
  const SpaceTimeDataset& data = *s.data;
  const CovarianceParams& theta = s.kernel.params();
  const vec_t r = residual_vector(y, X, beta);
  const int n_p = static_cast<int>(targets.size());
  PredictiveDistribution out;
  out.mu = fixed_effect(X_p, beta, n_p);
  out.var.resize(n_p);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 8)
  for (int p = 0; p < n_p; ++p) {
    try {
      const SpaceTimePoint& q = targets[static_cast<std::size_t>(p)];
      const std::vector<int> N = target_neighbors(
          q, data, s.kernel, s.neighbors, pred_m_v, nullptr, nullptr, nullptr, 0.0);
      const int k = static_cast<int>(N.size());
      den_mat_t C(k, k);
      vec_t c(k), rN(k);
      for (int a = 0; a < k; ++a) {
        const auto& pa = data.points[static_cast<std::size_t>(N[static_cast<std::size_t>(a)])];
        c[a] = s.kernel(q, pa);
        rN[a] = r[N[static_cast<std::size_t>(a)]];
        for (int b = 0; b <= a; ++b) {
          const auto& pb = data.points[static_cast<std::size_t>(N[static_cast<std::size_t>(b)])];
          double v = s.kernel(pa, pb);
          if (a == b) v += theta.sigma2;
          C(a, b) = v;
          C(b, a) = v;
        }
      }
      Eigen::LLT<den_mat_t> llt(C);
      if (llt.info() != Eigen::Success) {
        C.diagonal().array() += 1e-10 * theta.sigma1_2;
        llt.compute(C);
        if (llt.info() != Eigen::Success) {
          throw NumericError("predict: conditioning block not positive definite");
        }
      }
      const vec_t A = llt.solve(c);
      out.mu[p] += A.dot(rN);
      out.var[p] = std::max(theta.sigma1_2 + theta.sigma2 - A.dot(c), 0.0);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

PredictiveDistribution predict(const FitcStructure& s, const vec_t& y,
                               const den_mat_t& X, const vec_t& beta,
                               const std::vector<SpaceTimePoint>& targets,
                               const den_mat_t& X_p) {
  const CovarianceParams& theta = s.kernel.params();
  const vec_t r = residual_vector(y, X, beta);
  const int n_p = static_cast<int>(targets.size());
  const int m = s.inducing.basis.m();
  const den_mat_t& U = s.inducing.cross_cov;

  const vec_t rl = r.cwiseQuotient(s.lambda);
  const vec_t v = U * rl;
  const vec_t alpha = rl - s.lambda.cwiseInverse().cwiseProduct(
                               U.transpose() * s.M_llt.solve(v));
  const vec_t v2 = s.inducing.basis.llt().solve(U * alpha);
  const den_mat_t A1 = U * s.lambda.cwiseInverse().asDiagonal() * U.transpose();
  const den_mat_t A2 = A1 * s.M_llt.solve(A1);

  PredictiveDistribution out;
  out.mu = fixed_effect(X_p, beta, n_p);
  out.var.resize(n_p);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < n_p; ++p) {
    const SpaceTimePoint& q = targets[static_cast<std::size_t>(p)];
    vec_t up(m);
    for (int j = 0; j < m; ++j) {
      up[j] = s.kernel(s.inducing.basis.points()[static_cast<std::size_t>(j)], q);
    }
    out.mu[p] += up.dot(v2);
    const vec_t wp = s.inducing.basis.llt().solve(up);
    const double shrink = wp.dot((A1 - A2) * wp);
    out.var[p] = std::max(theta.sigma1_2 + theta.sigma2 - shrink, 0.0);
  }
  return out;
}

PredictiveDistribution predict(const VifStructure& s, const vec_t& y,
                               const den_mat_t& X, const vec_t& beta,
                               const std::vector<SpaceTimePoint>& targets,
                               const den_mat_t& X_p, int pred_m_v) {
  if (s.policy != DiagonalPolicy::kObservation) {
    throw NumericError("predict: requires the observation-policy structure");
  }
  const SpaceTimeDataset& data = *s.data;
  const CovarianceParams& theta = s.kernel.params();
  const vec_t r = residual_vector(y, X, beta);
  const int n = data.n();
  const int n_p = static_cast<int>(targets.size());
  const int m = s.inducing.basis.m();
  const den_mat_t& U = s.inducing.cross_cov;

  // residual diagonal for the d_r metric
  vec_t resid_diag(n);
  for (int i = 0; i < n; ++i) {
    resid_diag[i] =
        theta.sigma1_2 - (m > 0 ? s.whitened.col(i).squaredNorm() : 0.0);
  }

  const vec_t ur = sparse_q_apply(s.B, s.D, r);
  vec_t t = vec_t::Zero(n);
  vec_t yM;
  if (m > 0) {
    yM = s.M_llt.solve(U * ur);
    t = U.transpose() * yM;
  }
  const vec_t z = r - t;
  const vec_t alpha = sparse_q_apply(s.B, s.D, z);
  vec_t v_alpha = m > 0 ? vec_t(s.inducing.basis.llt().solve(U * alpha)) : vec_t();

  PredictiveDistribution out;
  out.mu = fixed_effect(X_p, beta, n_p);
  out.var.resize(n_p);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 8)
  for (int p = 0; p < n_p; ++p) {
    try {
      const SpaceTimePoint& q = targets[static_cast<std::size_t>(p)];
      vec_t up(m), wp(m), wq(m);
      double u_smu = 0.0;     // u_p' Sigma_m^{-1} u_p
      double resid_q = theta.sigma1_2;
      if (m > 0) {
        for (int j = 0; j < m; ++j) {
          up[j] = s.kernel(s.inducing.basis.points()[static_cast<std::size_t>(j)], q);
        }
        wp = s.inducing.basis.llt().solve(up);
        wq = s.inducing.basis.llt().matrixL().solve(up);
        u_smu = up.dot(wp);
        resid_q -= wq.squaredNorm();
      }
      const std::vector<int> N =
          target_neighbors(q, data, s.kernel, s.residual_neighbors, pred_m_v,
                           &s.whitened, &resid_diag, &wq, resid_q);
      const int k = static_cast<int>(N.size());
      // residual row of the target against N
      den_mat_t C(k, k);
      vec_t c(k);
      for (int a = 0; a < k; ++a) {
        const int ja = N[static_cast<std::size_t>(a)];
        const auto& pa = data.points[static_cast<std::size_t>(ja)];
        double va = s.kernel(q, pa);
        if (m > 0) va -= wq.dot(s.whitened.col(ja));
        c[a] = va;
        for (int b = 0; b <= a; ++b) {
          const int jb = N[static_cast<std::size_t>(b)];
          double v = s.kernel(pa, data.points[static_cast<std::size_t>(jb)]);
          if (m > 0) v -= s.whitened.col(ja).dot(s.whitened.col(jb));
          if (a == b) v += theta.sigma2;
          C(a, b) = v;
          C(b, a) = v;
        }
      }
      Eigen::LLT<den_mat_t> llt(C);
      if (llt.info() != Eigen::Success) {
        C.diagonal().array() += 1e-10 * theta.sigma1_2;
        llt.compute(C);
        if (llt.info() != Eigen::Success) {
          throw NumericError("predict: residual conditioning block not positive definite");
        }
      }
      const vec_t A = llt.solve(c);
      const double Dp = resid_q + theta.sigma2 - A.dot(c);

      // mean: Xp beta + w_p' (U alpha) + A' z_N
      double mu = m > 0 ? up.dot(v_alpha) : 0.0;
      for (int a = 0; a < k; ++a) mu += A[a] * z[N[static_cast<std::size_t>(a)]];
      out.mu[p] += mu;

      // c_p = U' w_p + Sigma_s[:, N] A'
      vec_t sN = vec_t::Zero(n);
      for (int a = 0; a < k; ++a) sN[N[static_cast<std::size_t>(a)]] = A[a];
      vec_t c_resid = sN;
      s.B.transpose().triangularView<Eigen::UnitUpper>().solveInPlace(c_resid);
      c_resid.array() *= s.D.array();
      s.B.triangularView<Eigen::UnitLower>().solveInPlace(c_resid);
      vec_t cp = c_resid;
      if (m > 0) cp += U.transpose() * wp;
      // prior variance of the target under the approximation
      double var_prior = u_smu + Dp;
      for (int a = 0; a < k; ++a) {
        var_prior += A[a] * c_resid[N[static_cast<std::size_t>(a)]];
      }
      // shrinkage c_p' Sigmatilde^{-1} c_p
      vec_t qc = sN;
      if (m > 0) qc += sparse_q_apply(s.B, s.D, vec_t(U.transpose() * wp));
      double quad = cp.dot(qc);
      if (m > 0) {
        const vec_t mq = U * qc;
        quad -= mq.dot(s.M_llt.solve(mq));
      }
      out.var[p] = std::max(var_prior - quad, 0.0);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ---------------------------------------------------------------------------
// Laplace algebra
// ---------------------------------------------------------------------------

namespace {

class VecchiaLaplace final : public LaplaceAlgebra {
 public:
  explicit VecchiaLaplace(const VecchiaStructure& s) : s_(&s) {
    if (s.policy != DiagonalPolicy::kLatent) {
      throw NumericError("LaplaceAlgebra: requires a latent-policy structure");
    }
    Q_ = form_precision(s.B, s.D);
    solver_.analyzePattern(Q_);
    log_det_sigma_ = s.D.array().log().sum();
  }

  int n() const override { return static_cast<int>(s_->D.size()); }

  void prepare(const vec_t& w) override {
    sp_mat_t S = Q_;
    for (int i = 0; i < n(); ++i) S.coeffRef(i, i) += w[i];
    solver_.factorize(S);
    if (solver_.info() != Eigen::Success) {
      throw NumericError("VecchiaLaplace: factorization of Q + W failed");
    }
    logdet_S_ = solver_.vectorD().array().log().sum();
  }

  vec_t solve(const vec_t& rhs) const override { return solver_.solve(rhs); }

  double logdet_I_plus_WS() const override { return logdet_S_ + log_det_sigma_; }

  vec_t sigma_times(const vec_t& v) const override {
    return sparse_sigma_apply(s_->B, s_->D, v);
  }

  vec_t cross_cov_to(const SpaceTimePoint& target, int pred_m_v) const override {
    const auto [k, ignored] = target_row(target, pred_m_v);
    (void)ignored;
    return k;
  }

  double prior_var(const SpaceTimePoint& target, int pred_m_v) const override {
    return target_row(target, pred_m_v).second;
  }

 private:
  std::pair<vec_t, double> target_row(const SpaceTimePoint& q, int pred_m_v) const {
    const SpaceTimeDataset& data = *s_->data;
    const CovarianceParams& theta = s_->kernel.params();
    const std::vector<int> N = target_neighbors(
        q, data, s_->kernel, s_->neighbors, pred_m_v, nullptr, nullptr, nullptr, 0.0);
    const int k = static_cast<int>(N.size());
    den_mat_t C(k, k);
    vec_t c(k);
    for (int a = 0; a < k; ++a) {
      const auto& pa = data.points[static_cast<std::size_t>(N[static_cast<std::size_t>(a)])];
      c[a] = s_->kernel(q, pa);
      for (int b = 0; b <= a; ++b) {
        const double v =
            s_->kernel(pa, data.points[static_cast<std::size_t>(N[static_cast<std::size_t>(b)])]);
        C(a, b) = v;
        C(b, a) = v;
      }
    }
    C.diagonal().array() += 1e-10 * theta.sigma1_2;
    Eigen::LLT<den_mat_t> llt(C);
    if (llt.info() != Eigen::Success) {
      throw NumericError("VecchiaLaplace: target conditioning block failed");
    }
    const vec_t A = llt.solve(c);
    const double Dp = theta.sigma1_2 - A.dot(c);
    vec_t kvec = vec_t::Zero(n());
    for (int a = 0; a < k; ++a) kvec[N[static_cast<std::size_t>(a)]] = A[a];
    kvec = sparse_sigma_apply(s_->B, s_->D, kvec);
    double var = Dp;
    for (int a = 0; a < k; ++a) var += A[a] * kvec[N[static_cast<std::size_t>(a)]];
    return {kvec, var};
  }

  const VecchiaStructure* s_;
  sp_mat_t Q_;
  Eigen::SimplicialLDLT<sp_mat_t> solver_;
  double log_det_sigma_ = 0.0;
  double logdet_S_ = 0.0;
};

class FitcLaplace final : public LaplaceAlgebra {
 public:
  explicit FitcLaplace(const FitcStructure& s) : s_(&s) {}

  int n() const override { return static_cast<int>(s_->fitc_diag.size()); }

  void prepare(const vec_t& w) override {
    const den_mat_t& U = s_->inducing.cross_cov;
    const vec_t& lam0 = s_->fitc_diag;
    scale_ = (1.0 + w.array() * lam0.array()).inverse();
    e1_ = lam0.array() * scale_.array();
    const vec_t dw = w.array() * scale_.array();
    den_mat_t Mw = s_->inducing.basis.cov();
    Mw.noalias() += U * dw.asDiagonal() * U.transpose();
    Mw_llt_.compute(Mw);
    if (Mw_llt_.info() != Eigen::Success) {
      throw NumericError("FitcLaplace: core factorization failed");
    }
    logdet_ = (1.0 + w.array() * lam0.array()).log().sum() +
              2.0 * Mw_llt_.matrixLLT().diagonal().array().log().sum() -
              s_->inducing.basis.log_det();
  }

  vec_t solve(const vec_t& x) const override {
    const den_mat_t& U = s_->inducing.cross_cov;
    const vec_t tx = U * x.cwiseProduct(scale_);
    return e1_.cwiseProduct(x) +
           scale_.cwiseProduct(U.transpose() * Mw_llt_.solve(tx));
  }

  double logdet_I_plus_WS() const override { return logdet_; }

  vec_t sigma_times(const vec_t& v) const override {
    const den_mat_t& U = s_->inducing.cross_cov;
    return s_->fitc_diag.cwiseProduct(v) +
           U.transpose() * s_->inducing.basis.llt().solve(U * v);
  }

  vec_t cross_cov_to(const SpaceTimePoint& target, int) const override {
    const den_mat_t& U = s_->inducing.cross_cov;
    vec_t up(s_->inducing.basis.m());
    for (int j = 0; j < up.size(); ++j) {
      up[j] = s_->kernel(s_->inducing.basis.points()[static_cast<std::size_t>(j)], target);
    }
    return U.transpose() * s_->inducing.basis.llt().solve(up);
  }

  double prior_var(const SpaceTimePoint&, int) const override {
    return s_->kernel.params().sigma1_2;  // the diagonal correction is exact
  }

 private:
  const FitcStructure* s_;
  vec_t e1_, scale_;
  Eigen::LLT<den_mat_t> Mw_llt_;
  double logdet_ = 0.0;
};

class VifLaplace final : public LaplaceAlgebra {
 public:
  explicit VifLaplace(const VifStructure& s) : s_(&s) {
    if (s.policy != DiagonalPolicy::kLatent) {
      throw NumericError("LaplaceAlgebra: requires a latent-policy structure");
    }
    Q_ = form_precision(s.B, s.D);
    solver_.analyzePattern(Q_);
    log_det_sigma_s_ = s.D.array().log().sum();
  }

  int n() const override { return static_cast<int>(s_->D.size()); }

  void prepare(const vec_t& w) override {
    const int m = s_->inducing.basis.m();
    sp_mat_t S = Q_;
    for (int i = 0; i < n(); ++i) S.coeffRef(i, i) += w[i];
    solver_.factorize(S);
    if (solver_.info() != Eigen::Success) {
      throw NumericError("VifLaplace: factorization of Q + W failed");
    }
    logdet_Sw_ = solver_.vectorD().array().log().sum();
    if (m > 0) {
      Z_ = solver_.solve(s_->QUt);
      den_mat_t Mw = s_->inducing.basis.cov();
      Mw.noalias() += s_->inducing.cross_cov * s_->QUt;
      Mw.noalias() -= s_->QUt.transpose() * Z_;
      Mw_llt_.compute(Mw);
      if (Mw_llt_.info() != Eigen::Success) {
        throw NumericError("VifLaplace: core factorization failed");
      }
      logdet_Mw_ = 2.0 * Mw_llt_.matrixLLT().diagonal().array().log().sum();
    }
  }

  vec_t solve(const vec_t& x) const override {
    vec_t s0 = solver_.solve(x);
    if (s_->inducing.basis.m() > 0) {
      s0 += Z_ * Mw_llt_.solve(s_->QUt.transpose() * s0);
    }
    return s0;
  }

  double logdet_I_plus_WS() const override {
    double v = logdet_Sw_ + log_det_sigma_s_;
    if (s_->inducing.basis.m() > 0) {
      v += logdet_Mw_ - s_->inducing.basis.log_det();
    }
    return v;
  }

  vec_t sigma_times(const vec_t& v) const override {
    vec_t out = sparse_sigma_apply(s_->B, s_->D, v);
    if (s_->inducing.basis.m() > 0) {
      const den_mat_t& U = s_->inducing.cross_cov;
      out += U.transpose() * s_->inducing.basis.llt().solve(U * v);
    }
    return out;
  }

  vec_t cross_cov_to(const SpaceTimePoint& target, int pred_m_v) const override {
    return target_row(target, pred_m_v).first;
  }

  double prior_var(const SpaceTimePoint& target, int pred_m_v) const override {
    return target_row(target, pred_m_v).second;
  }

 private:
  std::pair<vec_t, double> target_row(const SpaceTimePoint& q, int pred_m_v) const {
    const SpaceTimeDataset& data = *s_->data;
    const CovarianceParams& theta = s_->kernel.params();
    const int m = s_->inducing.basis.m();
    const den_mat_t& U = s_->inducing.cross_cov;
    vec_t resid_diag(n());
    for (int i = 0; i < n(); ++i) {
      resid_diag[i] =
          theta.sigma1_2 - (m > 0 ? s_->whitened.col(i).squaredNorm() : 0.0);
    }
    vec_t up(m), wp(m), wq(m);
    double u_smu = 0.0;
    double resid_q = theta.sigma1_2;
    if (m > 0) {
      for (int j = 0; j < m; ++j) {
        up[j] = s_->kernel(s_->inducing.basis.points()[static_cast<std::size_t>(j)], q);
      }
      wp = s_->inducing.basis.llt().solve(up);
      wq = s_->inducing.basis.llt().matrixL().solve(up);
      u_smu = up.dot(wp);
      resid_q -= wq.squaredNorm();
    }
    const std::vector<int> N =
        target_neighbors(q, data, s_->kernel, s_->residual_neighbors, pred_m_v,
                         &s_->whitened, &resid_diag, &wq, resid_q);
    const int k = static_cast<int>(N.size());
    den_mat_t C(k, k);
    vec_t c(k);
    for (int a = 0; a < k; ++a) {
      const int ja = N[static_cast<std::size_t>(a)];
      const auto& pa = data.points[static_cast<std::size_t>(ja)];
      double va = s_->kernel(q, pa);
      if (m > 0) va -= wq.dot(s_->whitened.col(ja));
      c[a] = va;
      for (int b = 0; b <= a; ++b) {
        const int jb = N[static_cast<std::size_t>(b)];
        double v = s_->kernel(pa, data.points[static_cast<std::size_t>(jb)]);
        if (m > 0) v -= s_->whitened.col(ja).dot(s_->whitened.col(jb));
        C(a, b) = v;
        C(b, a) = v;
      }
    }
    C.diagonal().array() += 1e-10 * theta.sigma1_2;
    Eigen::LLT<den_mat_t> llt(C);
    if (llt.info() != Eigen::Success) {
      throw NumericError("VifLaplace: target conditioning block failed");
    }
    const vec_t A = llt.solve(c);
    const double Dp = resid_q - A.dot(c);
    vec_t sN = vec_t::Zero(n());
    for (int a = 0; a < k; ++a) sN[N[static_cast<std::size_t>(a)]] = A[a];
    vec_t kvec = sparse_sigma_apply(s_->B, s_->D, sN);
    double var = u_smu + Dp;
    for (int a = 0; a < k; ++a) var += A[a] * kvec[N[static_cast<std::size_t>(a)]];
    if (m > 0) kvec += U.transpose() * wp;
    return {kvec, var};
  }

  const VifStructure* s_;
  sp_mat_t Q_;
  Eigen::SimplicialLDLT<sp_mat_t> solver_;
  den_mat_t Z_;
  Eigen::LLT<den_mat_t> Mw_llt_;
  double log_det_sigma_s_ = 0.0;
  double logdet_Sw_ = 0.0;
  double logdet_Mw_ = 0.0;
};

}  // namespace

std::unique_ptr<LaplaceAlgebra> make_laplace_algebra(const VecchiaStructure& s) {
  return std::make_unique<VecchiaLaplace>(s);
}
std::unique_ptr<LaplaceAlgebra> make_laplace_algebra(const FitcStructure& s) {
  return std::make_unique<FitcLaplace>(s);
}
std::unique_ptr<LaplaceAlgebra> make_laplace_algebra(const VifStructure& s) {
  return std::make_unique<VifLaplace>(s);
}

}  // namespace stgp
