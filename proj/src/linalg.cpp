#include "resbm/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "resbm/error.hpp"

namespace resbm {

namespace {

using Column = std::vector<double>;

double dot(const Column& x, const Column& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

// Replaces each zero column of `basis` (flagged in `missing`) with a unit
// vector orthogonal to all other columns.
void complete_orthonormal(std::vector<Column>& basis, const std::vector<bool>& missing) {
  const std::size_t dim = basis.empty() ? 0 : basis.front().size();
  std::vector<bool> done(basis.size());
  for (std::size_t j = 0; j < basis.size(); ++j) done[j] = !missing[j];
  for (std::size_t j = 0; j < basis.size(); ++j) {
    if (done[j]) continue;
    Column best;
    double best_norm = -1.0;
    for (std::size_t k = 0; k < dim; ++k) {
      Column cand(dim, 0.0);
      cand[k] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < basis.size(); ++i) {
          if (!done[i]) continue;
          const double proj = dot(cand, basis[i]);
          for (std::size_t t = 0; t < dim; ++t) cand[t] -= proj * basis[i][t];
        }
      }
      const double nrm = std::sqrt(dot(cand, cand));
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(cand);
      }
    }
    for (double& x : best) x /= best_norm;
    basis[j] = std::move(best);
    done[j] = true;
  }
}

// SVD of a row-major m x n matrix with m >= n.
Svd svd_tall(std::span<const double> a, std::size_t m, std::size_t n) {
  std::vector<Column> w(n, Column(m));
  std::vector<Column> v(n, Column(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) w[j][i] = a[i * n + j];
    v[j][j] = 1.0;
  }

  constexpr double kTol = 1e-15;
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(w[p], w[p]);
        const double beta = dot(w[q], w[q]);
        const double gamma = dot(w[p], w[q]);
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w[p][i], wq = w[q][i];
          w[p][i] = c * wp - s * wq;
          w[q][i] = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v[p][i], vq = v[q][i];
          v[p][i] = c * vp - s * vq;
          v[q][i] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(w[j], w[j]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  std::vector<Column> ucols(n);
  std::vector<bool> missing(n, false);
  Svd out;
  out.s.resize(n);
  out.u = Tensor::zeros({m, n});
  out.v = Tensor::zeros({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sigma[j];
    ucols[k] = w[j];
    if (sigma[j] > 0.0 && std::isnormal(sigma[j])) {
      for (double& x : ucols[k]) x /= sigma[j];
    } else {
      missing[k] = true;
      out.s[k] = 0.0;
    }
    for (std::size_t i = 0; i < n; ++i) out.v.data()[i * n + k] = v[j][i];
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end()) {
    complete_orthonormal(ucols, missing);
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < m; ++i) out.u.data()[i * n + k] = ucols[k][i];
  return out;
}

}  // namespace

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros({c, r});
  auto ad = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = ad[i * c + j];
  return out;
}

Tensor identity_matrix(std::size_t n) {
  Tensor out = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) out.data()[i * n + i] = 1.0;
  return out;
}

double frobenius_norm(const Tensor& a) {
  double ss = 0.0;
  for (double x : a.data()) ss += x * x;
  return std::sqrt(ss);
}

Svd svd(const Tensor& a) {
  if (a.dim() != 2) throw DimensionError("svd: expected a 2-D tensor, got " + shape_str(a.shape()));
  for (double x : a.data()) {
    if (!std::isfinite(x)) throw NumericError("svd: input contains non-finite entries");
  }
  const std::size_t m = a.rows(), n = a.cols();
  if (m >= n) return svd_tall(a.data(), m, n);
  Tensor at = transpose(a);
  Svd t = svd_tall(at.data(), n, m);
  return Svd{t.v, std::move(t.s), t.u};
}

std::vector<double> singular_values(const Tensor& a) { return svd(a).s; }

}  // namespace resbm
