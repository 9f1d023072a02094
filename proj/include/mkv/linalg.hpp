#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mkv/errors.hpp"
#include "mkv/mat.hpp"
#include "mkv/rng.hpp"

namespace mkv {

// ---------------------------------------------------------------------------
// Inverse and determinant (Gauss-Jordan with partial pivoting)
// ---------------------------------------------------------------------------

// Pivot magnitudes are compared against 1e-12 * ||a||_F; anything at or below
// that is treated as a singular matrix.
inline Mat mat_inverse(const Mat& a) {
  if (a.rows() != a.cols() || a.rows() == 0)
    throw ShapeMismatch("mat_inverse: need square nonempty matrix, got " + shape_str(a));
  const int n = a.rows();
  const double threshold = 1e-12 * frob_norm(a);

  // Augmented [a | I], reduced in place.
  Mat aug(n, 2 * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) aug(i, j) = a(i, j);
    aug(i, n + i) = 1.0;
  }
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::fabs(aug(r, col)) > std::fabs(aug(pivot, col))) pivot = r;
    if (std::fabs(aug(pivot, col)) <= threshold)
      throw SingularMatrix("mat_inverse: pivot " + std::to_string(aug(pivot, col)) +
                           " at column " + std::to_string(col));
    if (pivot != col)
      for (int j = 0; j < 2 * n; ++j) std::swap(aug(col, j), aug(pivot, j));
    const double inv_piv = 1.0 / aug(col, col);
    for (int j = 0; j < 2 * n; ++j) aug(col, j) *= inv_piv;
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = aug(r, col);
      if (f == 0.0) continue;
      for (int j = 0; j < 2 * n; ++j) aug(r, j) -= f * aug(col, j);
    }
  }
  Mat out(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out(i, j) = aug(i, n + j);
  return out;
}

inline double determinant(const Mat& a) {
  if (a.rows() != a.cols() || a.rows() == 0)
    throw ShapeMismatch("determinant: need square nonempty matrix, got " + shape_str(a));
  const int n = a.rows();
  Mat lu = a;
  double det = 1.0;
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::fabs(lu(r, col)) > std::fabs(lu(pivot, col))) pivot = r;
    if (lu(pivot, col) == 0.0) return 0.0;
    if (pivot != col) {
      for (int j = 0; j < n; ++j) std::swap(lu(col, j), lu(pivot, j));
      det = -det;
    }
    det *= lu(col, col);
    for (int r = col + 1; r < n; ++r) {
      const double f = lu(r, col) / lu(col, col);
      if (f == 0.0) continue;
      for (int j = col; j < n; ++j) lu(r, j) -= f * lu(col, j);
    }
  }
  return det;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

struct EighResult {
  std::vector<double> eigenvalues;  // descending
  Mat eigenvectors;                 // column k pairs with eigenvalues[k]
};

namespace detail {
inline double offdiag_norm(const Mat& a) {
  double s = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}
}  // namespace detail

// Input must be symmetric to 1e-9 * ||a||_F; converges when the off-diagonal
// Frobenius norm falls to 1e-12 * ||a||_F, errors out after 100 sweeps.
// Eigenvalues come back descending (stable order on ties); each eigenvector's
// largest-magnitude entry (first such index on ties) is made non-negative.
inline EighResult jacobi_eigh(const Mat& a) {
  if (a.rows() != a.cols() || a.rows() == 0)
    throw ShapeMismatch("jacobi_eigh: need square nonempty matrix, got " + shape_str(a));
  const int n = a.rows();
  const double norm = frob_norm(a);
  if (frob_norm(sub(a, transpose(a))) > 1e-9 * norm)
    throw NotSymmetric("jacobi_eigh: input is not symmetric");

  // Work on the symmetrized copy so the rotations cannot reintroduce skew.
  Mat w(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) w(i, j) = 0.5 * (a(i, j) + a(j, i));
  Mat v = Mat::identity(n);

  const double tol = 1e-12 * norm;
  bool converged = false;
  for (int sweep = 0; sweep < 100; ++sweep) {
    if (detail::offdiag_norm(w) <= tol) {
      converged = true;
      break;
    }
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = w(p, q);
        if (apq == 0.0) continue;
        const double theta = (w(q, q) - w(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {  // rotate rows/cols p and q of w
          const double wkp = w(k, p), wkq = w(k, q);
          w(k, p) = c * wkp - s * wkq;
          w(k, q) = s * wkp + c * wkq;
        }
        for (int k = 0; k < n; ++k) {
          const double wpk = w(p, k), wqk = w(q, k);
          w(p, k) = c * wpk - s * wqk;
          w(q, k) = s * wpk + c * wqk;
        }
        for (int k = 0; k < n; ++k) {  // accumulate eigenvectors
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged && detail::offdiag_norm(w) > tol)
    throw NoConvergence("jacobi_eigh: 100 sweeps without convergence");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return w(x, x) > w(y, y); });

  EighResult res;
  res.eigenvalues.resize(n);
  res.eigenvectors = Mat(n, n);
  for (int k = 0; k < n; ++k) {
    const int src = order[k];
    res.eigenvalues[k] = w(src, src);
    int arg = 0;
    for (int i = 1; i < n; ++i)
      if (std::fabs(v(i, src)) > std::fabs(v(arg, src))) arg = i;
    const double flip = v(arg, src) < 0.0 ? -1.0 : 1.0;
    for (int i = 0; i < n; ++i) res.eigenvectors(i, k) = flip * v(i, src);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Skew-symmetric generators and the Cayley transform
// ---------------------------------------------------------------------------

// A d x d skew-symmetric matrix stored as its strict lower triangle,
// row-major: params[k] = S(i, j) for i > j, k running over
// (1,0), (2,0), (2,1), (3,0), ...
struct SkewGenerator {
  int dim = 0;
  std::vector<double> params;

  SkewGenerator() = default;
  explicit SkewGenerator(int d) : dim(d), params(size_t(d) * (d - 1) / 2, 0.0) {
    if (d < 1) throw ShapeMismatch("SkewGenerator: dim must be >= 1");
  }

  static size_t param_count(int d) { return size_t(d) * (d - 1) / 2; }

  Mat to_matrix() const {
    Mat s(dim, dim);
    size_t k = 0;
    for (int i = 1; i < dim; ++i) {
      for (int j = 0; j < i; ++j, ++k) {
        s(i, j) = params[k];
        s(j, i) = -params[k];
      }
    }
    return s;
  }
};

// U = (I + S)(I - S)^{-1}.  Always orthogonal with det +1 for skew S;
// I - S is nonsingular for every real skew-symmetric S.
inline Mat cayley_map(const Mat& s) {
  if (s.rows() != s.cols()) throw ShapeMismatch("cayley_map: need square matrix");
  const Mat eye = Mat::identity(s.rows());
  return matmul(add(eye, s), mat_inverse(sub(eye, s)));
}

inline Mat cayley_map(const SkewGenerator& gen) { return cayley_map(gen.to_matrix()); }

inline double orthogonality_defect(const Mat& u) {
  if (u.rows() != u.cols()) throw ShapeMismatch("orthogonality_defect: need square matrix");
  return frob_norm(sub(matmul(transpose(u), u), Mat::identity(u.cols())));
}

inline SkewGenerator random_skew(int dim, Rng& rng, double scale = 1.0) {
  SkewGenerator gen(dim);
  for (auto& p : gen.params) p = scale * rng.next_normal();
  return gen;
}

// Random rotation via the Cayley transform of a random generator.  Not Haar
// (the Cayley map cannot reach U with -1 in its spectrum) but plenty for
// seeding and stress tests.
inline Mat random_orthogonal(int dim, Rng& rng, double scale = 1.0) {
  return cayley_map(random_skew(dim, rng, scale));
}

}  // namespace mkv
