#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "nattn/errors.hpp"
#include "nattn/matrix.hpp"
#include "nattn/svd.hpp"

namespace nattn::absvr {

/// Ordered frame-level token blocks (each D x T_f, features x tokens);
/// current_index marks the expressed block, the rest are suppressed.
struct FrameSegments {
    std::vector<Matrix> frames;
    std::size_t current_index = 0;

    void validate() const {
        if (frames.empty()) throw InvalidInputError("FrameSegments: no frames");
        if (current_index >= frames.size())
            throw InvalidInputError("FrameSegments: current_index out of range");
        for (const auto& f : frames)
            if (f.rows() != frames[0].rows())
                throw DimensionError("FrameSegments: feature dimension mismatch");
    }
};

/// Spectrum diagnostics of the expressed block: singular values, cumulative
/// energy E(r), the selected rank, and up to three knees (largest energy
/// drops).
struct SpectralReport {
    std::vector<double> sigma;
    std::vector<double> cumulative_energy;  // E(r) for r = 1..m, stored at r-1
    std::size_t k = 0;
    std::vector<std::size_t> knees;
};

struct AbsvrParams {
    double tau = 0.85;
    double gain_exp = 1.1;   // gamma_e, gentle boost of the kept trunk
    double gain_sup = 0.9;   // gamma_s, attenuation of the notched residual
    double zero_energy_epsilon = 1e-12;

    void validate() const {
        if (!(tau > 0.0 && tau <= 1.0)) throw ConfigurationError("AbsvrParams: tau outside (0,1]");
        if (!(gain_exp >= 1.0)) throw ConfigurationError("AbsvrParams: gain_exp must be >= 1");
        if (!(gain_sup >= 0.0 && gain_sup <= 1.0))
            throw ConfigurationError("AbsvrParams: gain_sup outside [0,1]");
        if (!(zero_energy_epsilon >= 0.0))
            throw ConfigurationError("AbsvrParams: negative epsilon");
    }
};

/// Cumulative spectral energy of a descending spectrum. The last entry is
/// exactly 1 when the total energy is positive.
inline std::vector<double> cumulative_energy(const std::vector<double>& sigma) {
    std::vector<double> e(sigma.size(), 0.0);
    double total = 0.0;
    for (double s : sigma) total += s * s;
    if (total <= 0.0) return e;
    double cum = 0.0;
    for (std::size_t i = 0; i < sigma.size(); ++i) {
        cum += sigma[i] * sigma[i];
        e[i] = cum / total;
    }
    e.back() = 1.0;
    return e;
}

/// k = min{ r : E(r) >= tau }. Zero total energy (<= eps) selects k = 0.
inline std::size_t select_rank(const std::vector<double>& sigma, double tau,
                               double zero_energy_epsilon = 1e-12) {
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigurationError("select_rank: tau outside (0,1]");
    for (std::size_t i = 0; i < sigma.size(); ++i) {
        if (sigma[i] < 0.0) throw InvalidInputError("select_rank: negative singular value");
        if (i > 0 && sigma[i] > sigma[i - 1])
            throw InvalidInputError("select_rank: spectrum not descending");
    }
    double total = 0.0;
    for (double s : sigma) total += s * s;
    if (total <= zero_energy_epsilon) return 0;
    const auto e = cumulative_energy(sigma);
    for (std::size_t r = 0; r < e.size(); ++r)
        if (e[r] >= tau) return r + 1;
    return sigma.size();
}

/// Trunk projector P_k = U_k U_k^T (D x D); k = 0 gives the zero matrix.
inline Matrix trunk_projector(const SvdResult& svd, std::size_t k) {
    if (k > svd.U.cols()) throw InvalidParameterError("trunk_projector: k exceeds rank count");
    const std::size_t d = svd.U.rows();
    Matrix p(d, d);
    for (std::size_t col = 0; col < k; ++col)
        for (std::size_t i = 0; i < d; ++i) {
            const double ui = svd.U(i, col);
            if (ui == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) p(i, j) += ui * svd.U(j, col);
        }
    return p;
}

/// Indices of the (up to) three largest drops sigma_i^2 - sigma_{i+1}^2,
/// ties toward the lower index, sorted ascending. Fewer than two values
/// yield no knees.
inline std::vector<std::size_t> detect_knees(const std::vector<double>& sigma) {
    if (sigma.size() < 2) return {};
    std::vector<double> drop(sigma.size() - 1);
    for (std::size_t i = 0; i + 1 < sigma.size(); ++i)
        drop[i] = sigma[i] * sigma[i] - sigma[i + 1] * sigma[i + 1];
    auto knees = top_k_indices(drop, 3);
    return knees;
}

/// Recommended cumulative-energy threshold per emphasis band.
enum class Emphasis { Identity, Actions, Background, Style, Details };

inline double band_recommendation(Emphasis e) {
    switch (e) {
        case Emphasis::Identity: return 0.60;
        case Emphasis::Actions: return 0.80;
        case Emphasis::Background: return 0.90;
        case Emphasis::Style: return 0.93;
        case Emphasis::Details: return 0.98;
    }
    throw ConfigurationError("band_recommendation: unknown emphasis");
}

inline Emphasis parse_emphasis(const std::string& name) {
    if (name == "identity") return Emphasis::Identity;
    if (name == "actions") return Emphasis::Actions;
    if (name == "background") return Emphasis::Background;
    if (name == "style") return Emphasis::Style;
    if (name == "details") return Emphasis::Details;
    throw ConfigurationError("unknown emphasis: " + name);
}

/// Slice a D x T token matrix into column blocks at the given boundaries
/// (strictly increasing cut points inside (0, T)).
inline FrameSegments segment_frames(const Matrix& tokens, const std::vector<std::size_t>& boundaries,
                                    std::size_t current) {
    FrameSegments out;
    std::size_t prev = 0;
    for (std::size_t b : boundaries) {
        if (b <= prev || b >= tokens.cols())
            throw InvalidInputError("segment_frames: boundaries must be strictly increasing inside the token range");
        prev = b;
    }
    std::vector<std::size_t> cuts = boundaries;
    cuts.push_back(tokens.cols());
    std::size_t start = 0;
    for (std::size_t end : cuts) {
        Matrix block(tokens.rows(), end - start);
        for (std::size_t i = 0; i < tokens.rows(); ++i)
            for (std::size_t j = start; j < end; ++j) block(i, j - start) = tokens(i, j);
        out.frames.push_back(std::move(block));
        start = end;
    }
    out.current_index = current;
    out.validate();
    return out;
}

/// Baseline comparator: uniform gains, no projection. Returns new blocks.
struct PlainSvrResult {
    Matrix express;
    std::vector<Matrix> suppress;
};

inline PlainSvrResult plain_svr(const Matrix& express, const std::vector<Matrix>& suppress,
                                double gain_up, double gain_down) {
    if (!(gain_up > 0.0) || !(gain_down > 0.0))
        throw InvalidParameterError("plain_svr: gains must be positive");
    PlainSvrResult r;
    r.express = express * gain_up;
    for (const auto& s : suppress) r.suppress.push_back(s * gain_down);
    return r;
}

/// Trunk-and-notch reweighting. The expressed block becomes
/// U_k (gamma_e Sigma_k) V_k^T; every suppressed block is notch-projected
/// off the trunk and attenuated: gamma_s (I - P_k) X. Blocks are rewritten
/// in place and the spectrum report is returned.
inline SpectralReport absvr_apply(FrameSegments& segments, const AbsvrParams& params) {
    params.validate();
    segments.validate();
    Matrix& x_exp = segments.frames[segments.current_index];
    if (x_exp.empty()) throw InvalidInputError("absvr_apply: empty expressed block");

    const SvdResult svd = thin_svd(x_exp);
    SpectralReport report;
    report.sigma = svd.sigma;
    report.cumulative_energy = cumulative_energy(svd.sigma);
    report.k = select_rank(svd.sigma, params.tau, params.zero_energy_epsilon);
    report.knees = detect_knees(svd.sigma);
    const std::size_t k = report.k;

    // X_exp <- U_k (gamma_e Sigma_k) V_k^T
    const std::size_t d = x_exp.rows(), t = x_exp.cols();
    Matrix uk_scaled(d, k);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < k; ++j)
            uk_scaled(i, j) = svd.U(i, j) * (params.gain_exp * svd.sigma[j]);
    Matrix vk_t(k, t);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < t; ++j) vk_t(i, j) = svd.Vt(i, j);
    x_exp = matmul(uk_scaled, vk_t);

    // X_sup <- gamma_s (X_sup - U_k (U_k^T X_sup)) for every other block.
    Matrix uk(d, k);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < k; ++j) uk(i, j) = svd.U(i, j);
    const Matrix uk_t = transpose(uk);
    for (std::size_t f = 0; f < segments.frames.size(); ++f) {
        if (f == segments.current_index) continue;
        Matrix& x_sup = segments.frames[f];
        if (k > 0) {
            const Matrix proj = matmul(uk, matmul(uk_t, x_sup));
            x_sup = (x_sup - proj) * params.gain_sup;
        } else {
            x_sup *= params.gain_sup;
        }
    }
    return report;
}

}  // namespace nattn::absvr
