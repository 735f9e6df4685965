#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "nattn/errors.hpp"

namespace nattn {

/// Dense row-major matrix of 64-bit floats. The whole library works in
/// double precision; the downstream tolerances (1e-8 reconstruction,
/// 1e-9 orthonormality) are not reachable in single precision.
class Matrix {
  public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                                 " != rows*cols " + std::to_string(rows_ * cols_));
        validate_finite();
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Matrix(r, c, std::move(data));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
    const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void validate_finite() const {
        if (!all_finite()) throw InvalidInputError("Matrix: non-finite entry");
    }

    Matrix& operator+=(const Matrix& o) {
        if (!same_shape(o)) throw DimensionError("Matrix+=: shape mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// a (m×k) times b (k×n). i-k-j order with k blocked by four, so each pass
/// over the output row folds four rhs rows; the inner loop vectorizes.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols(), kk = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* cr = c.row_ptr(i);
        const double* ar = a.row_ptr(i);
        std::size_t k = 0;
        for (; k + 4 <= kk; k += 4) {
            const double a0 = ar[k], a1 = ar[k + 1], a2 = ar[k + 2], a3 = ar[k + 3];
            const double* b0 = b.row_ptr(k);
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (std::size_t j = 0; j < n; ++j)
                cr[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; k < kk; ++k) {
            const double aik = ar[k];
            const double* br = b.row_ptr(k);
            for (std::size_t j = 0; j < n; ++j) cr[j] += aik * br[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix operator*(const Matrix& a, double s) {
    Matrix r = a;
    r *= s;
    return r;
}

inline Matrix operator+(Matrix a, const Matrix& b) {
    a += b;
    return a;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw DimensionError("Matrix-: shape mismatch");
    Matrix r(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) r.data()[i] = a.data()[i] - b.data()[i];
    return r;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

/// Row-wise softmax with per-row max subtraction. Rejects NaN/inf input;
/// the check rides on the row sum (any non-finite logit poisons it) so the
/// hot path stays three tight passes.
inline Matrix row_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const double* in = logits.row_ptr(i);
        double* o = out.row_ptr(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        if (std::isfinite(mx)) {
            for (std::size_t j = 0; j < logits.cols(); ++j) {
                o[j] = std::exp(in[j] - mx);
                sum += o[j];
            }
        }
        if (!(sum > 0.0) || !std::isfinite(sum))
            throw InvalidInputError("row_softmax: non-finite logits in row " + std::to_string(i));
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < logits.cols(); ++j) o[j] *= inv;
    }
    return out;
}

/// Indices of the k largest scores, ties broken toward the lower index,
/// result sorted ascending. k >= length returns every index.
inline std::vector<std::size_t> top_k_indices(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (k < scores.size()) {
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

/// Nearest-neighbor resize between row-major grids. The source index for
/// destination cell x is round-half-down((x+0.5)*W_s/W_d - 0.5), halves
/// rounding toward -inf, clamped to the grid; same rule on y.
inline std::vector<double> nn_resize(const std::vector<double>& src, std::size_t src_w,
                                     std::size_t src_h, std::size_t dst_w, std::size_t dst_h) {
    if (src_w == 0 || src_h == 0 || dst_w == 0 || dst_h == 0)
        throw DimensionError("nn_resize: zero-sized grid");
    if (src.size() != src_w * src_h)
        throw DimensionError("nn_resize: source length != grid size");
    auto map_index = [](std::size_t x, std::size_t n_dst, std::size_t n_src) -> std::size_t {
        const double t = (static_cast<double>(x) + 0.5) * static_cast<double>(n_src) /
                             static_cast<double>(n_dst) - 0.5;
        auto i = static_cast<long long>(std::ceil(t - 0.5));  // round-half-down
        i = std::clamp<long long>(i, 0, static_cast<long long>(n_src) - 1);
        return static_cast<std::size_t>(i);
    };
    std::vector<double> dst(dst_w * dst_h);
    for (std::size_t y = 0; y < dst_h; ++y) {
        const std::size_t sy = map_index(y, dst_h, src_h);
        for (std::size_t x = 0; x < dst_w; ++x)
            dst[y * dst_w + x] = src[sy * src_w + map_index(x, dst_w, src_w)];
    }
    return dst;
}

}  // namespace nattn
