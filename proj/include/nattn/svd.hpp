#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "nattn/errors.hpp"
#include "nattn/matrix.hpp"

namespace nattn {

/// Thin SVD x = U * diag(sigma) * Vt with sigma descending. U is
/// rows(x) x m and Vt is m x cols(x), m = min(rows, cols). Columns of U and
/// rows of Vt are orthonormal even when x is rank deficient.
struct SvdResult {
    Matrix U;
    std::vector<double> sigma;
    Matrix Vt;

    Matrix reconstruct() const {
        Matrix us = U;
        for (std::size_t i = 0; i < us.rows(); ++i)
            for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= sigma[j];
        return matmul(us, Vt);
    }
};

namespace detail {

// One-sided Jacobi on a tall matrix (rows >= cols): rotate column pairs of W
// until mutually orthogonal; then sigma_j = ||W_:j||, U_:j = W_:j / sigma_j,
// and V accumulates the rotations. Rotations are exact orthogonal maps, so
// the reconstruction error stays near machine precision regardless of tol;
// tol only bounds the residual off-diagonal correlation.
struct TallSvd {
    Matrix U;                   // m x n
    std::vector<double> sigma;  // n
    Matrix V;                   // n x n
};

inline TallSvd jacobi_tall_svd(const Matrix& a, double tol) {
    const std::size_t m = a.rows(), n = a.cols();
    Matrix w = a;
    Matrix v = Matrix::identity(n);

    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    w(i, p) = c * wp - s * wq;
                    w(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }

    TallSvd out;
    out.sigma.resize(n);
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += w(i, j) * w(i, j);
        out.sigma[j] = std::sqrt(s);
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return out.sigma[x] > out.sigma[y]; });

    Matrix u(m, n), vs(n, n);
    std::vector<double> sig(n);
    const double sig_max = out.sigma.empty() ? 0.0 : out.sigma[order[0]];
    const double dead = sig_max * 1e-13;
    std::size_t n_dead = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        sig[j] = out.sigma[src];
        for (std::size_t i = 0; i < n; ++i) vs(i, j) = v(i, src);
        if (sig[j] > dead && sig[j] > 0.0) {
            const double inv = 1.0 / sig[j];
            for (std::size_t i = 0; i < m; ++i) u(i, j) = w(i, src) * inv;
        } else {
            n_dead++;  // filled below by basis completion
        }
    }

    // Rank-deficient columns: complete U with unit vectors orthogonal to the
    // columns populated so far (standard basis vector with the largest
    // residual after projection, lowest index on ties).
    if (n_dead > 0) {
        std::vector<bool> populated(n);
        for (std::size_t j = 0; j < n; ++j) populated[j] = sig[j] > dead && sig[j] > 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (populated[j]) continue;
            double best_norm = -1.0;
            std::vector<double> best_col(m), cand(m);
            for (std::size_t axis = 0; axis < m; ++axis) {
                std::fill(cand.begin(), cand.end(), 0.0);
                cand[axis] = 1.0;
                for (std::size_t jj = 0; jj < n; ++jj) {
                    if (!populated[jj]) continue;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < m; ++i) dot += cand[i] * u(i, jj);
                    for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * u(i, jj);
                }
                double nrm = 0.0;
                for (double x : cand) nrm += x * x;
                nrm = std::sqrt(nrm);
                if (nrm > best_norm) {
                    best_norm = nrm;
                    best_col = cand;
                }
            }
            const double inv = 1.0 / best_norm;
            for (std::size_t i = 0; i < m; ++i) u(i, j) = best_col[i] * inv;
            populated[j] = true;
        }
    }

    return TallSvd{std::move(u), std::move(sig), std::move(vs)};
}

}  // namespace detail

/// Thin SVD with a fixed sign convention: in every column of U the entry of
/// largest magnitude (lowest row index on ties) is non-negative; rows of Vt
/// are flipped to match. tol is the relative off-diagonal threshold of the
/// Jacobi sweep.
inline SvdResult thin_svd(const Matrix& x, double tol = 1e-12) {
    if (x.empty()) throw InvalidInputError("thin_svd: empty matrix");
    if (tol <= 0.0) throw InvalidParameterError("thin_svd: tol must be > 0");
    x.validate_finite();

    SvdResult res;
    if (x.rows() >= x.cols()) {
        auto t = detail::jacobi_tall_svd(x, tol);
        res.U = std::move(t.U);
        res.sigma = std::move(t.sigma);
        res.Vt = transpose(t.V);
    } else {
        // Wide input: factor the transpose, then swap roles of U and V.
        auto t = detail::jacobi_tall_svd(transpose(x), tol);
        res.U = std::move(t.V);
        res.sigma = std::move(t.sigma);
        res.Vt = transpose(t.U);
    }

    for (std::size_t j = 0; j < res.U.cols(); ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < res.U.rows(); ++i) {
            const double v = std::abs(res.U(i, j));
            if (v > best) {
                best = v;
                arg = i;
            }
        }
        if (res.U(arg, j) < 0.0) {
            for (std::size_t i = 0; i < res.U.rows(); ++i) res.U(i, j) = -res.U(i, j);
            for (std::size_t i = 0; i < res.Vt.cols(); ++i) res.Vt(j, i) = -res.Vt(j, i);
        }
    }
    return res;
}

}  // namespace nattn
