#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "nattn/errors.hpp"
#include "nattn/grounding.hpp"
#include "nattn/matrix.hpp"
#include "nattn/rng.hpp"

namespace nattn::gca {

using grounding::AttentionBias;
using grounding::GcaParams;
using grounding::GroundingBox;
using grounding::IpSpan;
using grounding::MaskStrategy;
using grounding::PatchGrid;
using grounding::SubjectMask;

struct AttentionConfig {
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t patches = 4096;
    std::size_t text_tokens = 77;
    std::size_t ip_tokens_per_subject = 4;
    std::size_t n_dummy = 4;
    double subject_factor = 0.6;
    /// Optional per-subject text-token spans; when set, the influence
    /// strength averages only over that subject's declared tokens instead
    /// of the whole text axis.
    std::vector<IpSpan> subject_text_spans;

    void validate() const {
        if (heads < 1 || head_dim < 1 || patches < 1 || text_tokens < 1 ||
            ip_tokens_per_subject < 1)
            throw ConfigurationError("AttentionConfig: counts must be >= 1");
        if (!(subject_factor >= 0.0))
            throw ConfigurationError("AttentionConfig: subject_factor must be >= 0");
    }
};

/// Frame-level conditioning split into text tokens and IP (subject
/// reference) tokens; both share the encoder feature width.
struct EncoderStates {
    Matrix text;  // T_t x d_enc
    Matrix ip;    // N_ip x d_enc

    void validate() const {
        if (text.cols() != ip.cols())
            throw DimensionError("EncoderStates: text/ip width mismatch");
    }
};

struct SubjectGrounding {
    GroundingBox box;
    IpSpan ip_span;
};

/// Seeded per-head projection matrices standing in for learned attention
/// weights. Entries are N(0,1)/sqrt(fan_in), drawn from streams keyed by
/// (seed, role, layer, head).
struct LayerWeights {
    std::vector<Matrix> q, k_text, v_text, k_ip, v_ip;
};

namespace role {
constexpr uint64_t kProjQ = 11, kProjKText = 12, kProjVText = 13, kProjKIp = 14, kProjVIp = 15;
}

inline Matrix seeded_projection(uint64_t seed, uint64_t role_tag, uint64_t layer_id, uint64_t head,
                                std::size_t fan_in, std::size_t fan_out) {
    SplitMix64 rng(derive_seed(seed, role_tag, layer_id, head));
    Matrix w(fan_in, fan_out);
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.data()) v = rng.next_normal() * scale;
    return w;
}

inline LayerWeights make_layer_weights(uint64_t seed, uint64_t layer_id, std::size_t d_model,
                                       std::size_t d_enc, std::size_t heads, std::size_t head_dim) {
    LayerWeights w;
    for (std::size_t h = 0; h < heads; ++h) {
        w.q.push_back(seeded_projection(seed, role::kProjQ, layer_id, h, d_model, head_dim));
        w.k_text.push_back(seeded_projection(seed, role::kProjKText, layer_id, h, d_enc, head_dim));
        w.v_text.push_back(seeded_projection(seed, role::kProjVText, layer_id, h, d_enc, head_dim));
        w.k_ip.push_back(seeded_projection(seed, role::kProjKIp, layer_id, h, d_enc, head_dim));
        w.v_ip.push_back(seeded_projection(seed, role::kProjVIp, layer_id, h, d_enc, head_dim));
    }
    return w;
}

struct TextBranchResult {
    Matrix output;  // P x d
    Matrix alpha;   // P x T_t
};

/// Scaled dot-product cross attention over the text tokens; the attention
/// map is returned because it drives the influence strengths.
inline TextBranchResult text_branch(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (q.cols() != k.cols() || k.rows() != v.rows() || k.cols() != v.cols())
        throw DimensionError("text_branch: inconsistent shapes");
    Matrix logits = matmul(q, transpose(k));
    logits *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix alpha = row_softmax(logits);
    return {matmul(alpha, v), std::move(alpha)};
}

/// Mean text attention over the subject's patches, clipped to [0,1].
inline double influence_strength(const Matrix& alpha_text,
                                 const std::vector<std::size_t>& region) {
    if (region.empty()) throw InvalidInputError("influence_strength: empty region");
    double sum = 0.0;
    for (std::size_t p : region) {
        if (p >= alpha_text.rows()) throw InvalidInputError("influence_strength: patch out of range");
        const double* row = alpha_text.row_ptr(p);
        for (std::size_t j = 0; j < alpha_text.cols(); ++j) sum += row[j];
    }
    const double mean = sum / (static_cast<double>(region.size()) * alpha_text.cols());
    return std::clamp(mean, 0.0, 1.0);
}

/// Gaussian-biased IP attention: softmax(Q K^T / sqrt(d) + B) V. Key rows
/// include the dummy columns (bias there is zero by construction).
inline Matrix ip_branch(const Matrix& q, const Matrix& k_ip, const Matrix& v_ip,
                        const Matrix& bias) {
    if (q.cols() != k_ip.cols() || k_ip.rows() != v_ip.rows())
        throw DimensionError("ip_branch: inconsistent shapes");
    if (bias.rows() != q.rows() || bias.cols() != k_ip.rows())
        throw DimensionError("ip_branch: bias shape != P x key rows");
    Matrix logits = matmul(q, transpose(k_ip));
    logits *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
    logits += bias;
    return matmul(row_softmax(logits), v_ip);
}

/// Hook for wrapping the text branch (the cache module supplies one that
/// concatenates selected history). alpha spans history columns first, then
/// the current tokens.
struct TextAttendOutput {
    Matrix output;              // P x d
    Matrix alpha;               // P x (n_history + T_t)
    std::size_t n_history = 0;
};
using TextAttendFn =
    std::function<TextAttendOutput(std::size_t head, const Matrix& q, const Matrix& k,
                                   const Matrix& v)>;

struct ForwardResult {
    Matrix new_hidden;       // hidden + attention update
    Matrix attn_out;         // H_text + s_ip * H_ip, merged across heads
    Matrix alpha_text;       // head-averaged attention over current text tokens
    Matrix alpha_ip;         // head-averaged IP attention (incl. dummy cols)
    std::vector<SubjectMask> masks;
    std::vector<double> strengths;       // p per subject used for the masks
    double mean_text_entropy = 0.0;      // over heads and query rows
};

/// One cross-attention layer update. Step 0 is the center-initialized
/// stage (p = 0.5); later steps derive p per subject from this step's text
/// attention. Head h occupies output columns [h*d_h, (h+1)*d_h).
inline ForwardResult forward(const Matrix& hidden, const EncoderStates& states,
                             const LayerWeights& weights, const PatchGrid& grid,
                             const std::vector<SubjectGrounding>& subjects,
                             const AttentionConfig& cfg, const GcaParams& params,
                             MaskStrategy strategy, std::size_t step,
                             const TextAttendFn& text_attend = {}) {
    cfg.validate();
    params.validate();
    grid.validate();
    states.validate();
    if (hidden.rows() != cfg.patches || grid.patches() != cfg.patches)
        throw DimensionError("gca::forward: hidden rows != configured patches");
    if (states.text.rows() != cfg.text_tokens)
        throw DimensionError("gca::forward: text rows != configured text_tokens");
    const std::size_t n_ip = states.ip.rows();
    std::size_t span_end = 0;
    for (const auto& s : subjects) {
        if (s.ip_span.end > n_ip || s.ip_span.begin >= s.ip_span.end)
            throw ConfigurationError("gca::forward: ip span outside the IP block");
        span_end = std::max(span_end, s.ip_span.end);
    }
    if (!subjects.empty() && span_end != n_ip)
        throw ConfigurationError("gca::forward: ip spans must reach the IP block width");

    const std::size_t H = cfg.heads, dh = cfg.head_dim, P = cfg.patches;

    // Text branch per head, optionally wrapped by the caller's history hook.
    std::vector<Matrix> q_heads(H), text_out(H);
    Matrix alpha_cur_avg(P, cfg.text_tokens);
    double entropy_sum = 0.0;
    for (std::size_t h = 0; h < H; ++h) {
        q_heads[h] = matmul(hidden, weights.q[h]);
        Matrix k_t = matmul(states.text, weights.k_text[h]);
        Matrix v_t = matmul(states.text, weights.v_text[h]);
        TextAttendOutput r;
        if (text_attend) {
            r = text_attend(h, q_heads[h], k_t, v_t);
        } else {
            auto tb = text_branch(q_heads[h], k_t, v_t);
            r = {std::move(tb.output), std::move(tb.alpha), 0};
        }
        for (std::size_t i = 0; i < P; ++i) {
            const double* row = r.alpha.row_ptr(i);
            double ent = 0.0;
            for (std::size_t j = 0; j < r.alpha.cols(); ++j)
                if (row[j] > 0.0) ent -= row[j] * std::log(row[j]);
            entropy_sum += ent;
            double* acc = alpha_cur_avg.row_ptr(i);
            for (std::size_t j = 0; j < cfg.text_tokens; ++j) acc[j] += row[r.n_history + j];
        }
        text_out[h] = std::move(r.output);
    }
    alpha_cur_avg *= 1.0 / static_cast<double>(H);

    // Influence strengths: center-initialized at step 0, attention-guided after.
    std::vector<double> strengths(subjects.size(), 0.5);
    if (step > 0) {
        for (std::size_t i = 0; i < subjects.size(); ++i) {
            const auto region = grounding::box_footprint(subjects[i].box, grid);
            if (!cfg.subject_text_spans.empty()) {
                if (cfg.subject_text_spans.size() != subjects.size())
                    throw ConfigurationError("gca::forward: subject_text_spans size mismatch");
                const IpSpan span = cfg.subject_text_spans[i];
                Matrix sliced(P, span.length());
                for (std::size_t r = 0; r < P; ++r)
                    for (std::size_t c = 0; c < span.length(); ++c)
                        sliced(r, c) = alpha_cur_avg(r, span.begin + c);
                strengths[i] = influence_strength(sliced, region);
            } else {
                strengths[i] = influence_strength(alpha_cur_avg, region);
            }
        }
    }

    std::vector<GroundingBox> boxes;
    boxes.reserve(subjects.size());
    for (const auto& s : subjects) boxes.push_back(s.box);
    auto masks = grounding::mask_variant(strategy, boxes, grid, params, &strengths);

    std::vector<IpSpan> spans;
    spans.reserve(subjects.size());
    for (const auto& s : subjects) spans.push_back(s.ip_span);
    AttentionBias bias = subjects.empty()
                             ? AttentionBias{Matrix(P, n_ip + cfg.n_dummy), {}}
                             : grounding::assemble_bias(masks, spans, cfg.n_dummy,
                                                        params.bias_scale);

    // IP branch per head; dummy tokens carry zero keys and values.
    Matrix alpha_ip_avg(P, n_ip + cfg.n_dummy);
    std::vector<Matrix> ip_out(H);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < H; ++h) {
        Matrix k_ip(n_ip + cfg.n_dummy, dh), v_ip(n_ip + cfg.n_dummy, dh);
        Matrix kp = matmul(states.ip, weights.k_ip[h]);
        Matrix vp = matmul(states.ip, weights.v_ip[h]);
        for (std::size_t r = 0; r < n_ip; ++r)
            for (std::size_t c = 0; c < dh; ++c) {
                k_ip(r, c) = kp(r, c);
                v_ip(r, c) = vp(r, c);
            }
        Matrix logits = matmul(q_heads[h], transpose(k_ip));
        logits *= inv_sqrt_d;
        logits += bias.bias;
        Matrix alpha = row_softmax(logits);
        ip_out[h] = matmul(alpha, v_ip);
        alpha_ip_avg += alpha;
    }
    alpha_ip_avg *= 1.0 / static_cast<double>(H);

    ForwardResult res;
    res.attn_out = Matrix(P, H * dh);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t c = 0; c < dh; ++c)
                res.attn_out(i, h * dh + c) =
                    text_out[h](i, c) + cfg.subject_factor * ip_out[h](i, c);
    if (hidden.cols() != H * dh)
        throw DimensionError("gca::forward: hidden width != heads*head_dim");
    res.new_hidden = hidden + res.attn_out;
    res.alpha_text = std::move(alpha_cur_avg);
    res.alpha_ip = std::move(alpha_ip_avg);
    res.masks = std::move(masks);
    res.strengths = std::move(strengths);
    res.mean_text_entropy = entropy_sum / static_cast<double>(H * P);
    return res;
}

}  // namespace nattn::gca
