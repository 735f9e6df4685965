#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nattn/errors.hpp"
#include "nattn/matrix.hpp"

namespace nattn::grounding {

/// Lattice of spatial query positions at one attention layer. Patch (x,y)
/// has its center at ((x+0.5)/W, (y+0.5)/H) in normalized image
/// coordinates; linear index is y*W + x (row-major).
struct PatchGrid {
    std::size_t width = 1;
    std::size_t height = 1;

    std::size_t patches() const { return width * height; }

    void validate() const {
        if (width < 1 || height < 1) throw InvalidParameterError("PatchGrid: zero-sized grid");
    }

    double center_x(std::size_t x) const { return (static_cast<double>(x) + 0.5) / width; }
    double center_y(std::size_t y) const { return (static_cast<double>(y) + 0.5) / height; }
};

/// Normalized rectangle assigning a subject to an image region.
struct GroundingBox {
    double x1 = 0.0, y1 = 0.0, x2 = 1.0, y2 = 1.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }

    void validate() const {
        if (!(0.0 <= x1 && x1 < x2 && x2 <= 1.0) || !(0.0 <= y1 && y1 < y2 && y2 <= 1.0))
            throw InvalidParameterError("GroundingBox: need 0<=x1<x2<=1 and 0<=y1<y2<=1");
    }
};

/// Gaussian mask construction parameters. p=0.5 with the default
/// [sigma_min, sigma_max] lands the inner radius on the 0.35 base fraction
/// and rho=2 puts the outer at 0.70.
struct GcaParams {
    double r1 = 0.35;            // base inner fraction of the short side
    double r2 = 0.70;            // base outer fraction
    double sigma_min = 0.20;     // radius interval endpoints for clip(p)
    double sigma_max = 0.50;
    double rho = 2.0;            // outer/inner ratio
    double fuse_weight = 0.5;    // lambda: inner weight in the linear fusion
    double bias_scale = 6.0;     // beta: logit depth of a fully masked patch
    double overlap_damping = 0.5;  // kappa: outer-radius shrink per unit overlap

    void validate() const {
        if (!(sigma_min > 0.0) || !(sigma_min <= sigma_max))
            throw ConfigurationError("GcaParams: need 0 < sigma_min <= sigma_max");
        if (!(rho > 1.0)) throw ConfigurationError("GcaParams: need rho > 1");
        if (!(r1 < r2)) throw ConfigurationError("GcaParams: need r1 < r2");
        if (!(fuse_weight >= 0.0 && fuse_weight <= 1.0))
            throw ConfigurationError("GcaParams: fuse_weight outside [0,1]");
        if (!(bias_scale >= 0.0)) throw ConfigurationError("GcaParams: bias_scale negative");
        if (!(overlap_damping >= 0.0 && overlap_damping <= 1.0))
            throw ConfigurationError("GcaParams: overlap_damping outside [0,1]");
    }
};

/// Per-patch soft mask in [0,1] plus the two split centroids it was built
/// around. Peak is exactly 1 unless the field is identically zero.
struct SubjectMask {
    std::vector<double> values;
    std::pair<double, double> center1{0.0, 0.0};
    std::pair<double, double> center2{0.0, 0.0};
};

/// P x (N_ip + N_dummy) logit bias. Entries are <= 0; dummy columns stay
/// exactly zero. owner[j] is the subject index of column j, or nullopt for
/// dummy/unowned columns.
struct AttentionBias {
    Matrix bias;
    std::vector<std::optional<std::size_t>> owner;
};

/// Half-open token-column range [begin, end) owned by one subject inside
/// the IP block.
struct IpSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t length() const { return end - begin; }
};

enum class MaskStrategy { BoxBinary, XorSplit, StaticTwoStage, SingleStage, Gca };

inline const char* mask_strategy_name(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::BoxBinary: return "box_binary";
        case MaskStrategy::XorSplit: return "xor_split";
        case MaskStrategy::StaticTwoStage: return "static_two_stage";
        case MaskStrategy::SingleStage: return "single_stage";
        case MaskStrategy::Gca: return "gca";
    }
    return "?";
}

inline MaskStrategy parse_mask_strategy(const std::string& name) {
    if (name == "box_binary") return MaskStrategy::BoxBinary;
    if (name == "xor_split") return MaskStrategy::XorSplit;
    if (name == "static_two_stage") return MaskStrategy::StaticTwoStage;
    if (name == "single_stage") return MaskStrategy::SingleStage;
    if (name == "gca") return MaskStrategy::Gca;
    throw ConfigurationError("unknown mask strategy: " + name);
}

/// Split the box at the midpoint of its longer side (ties split along x)
/// and return the geometric centroids of the two halves.
inline std::pair<std::pair<double, double>, std::pair<double, double>> split_box_centers(
    const GroundingBox& box) {
    box.validate();
    const double cx = 0.5 * (box.x1 + box.x2);
    const double cy = 0.5 * (box.y1 + box.y2);
    if (box.width() >= box.height()) {
        const double mid = cx;
        return {{0.5 * (box.x1 + mid), cy}, {0.5 * (mid + box.x2), cy}};
    }
    const double mid = cy;
    return {{cx, 0.5 * (box.y1 + mid)}, {cx, 0.5 * (mid + box.y2)}};
}

struct Radii {
    double x_in = 0.0, y_in = 0.0, x_out = 0.0, y_out = 0.0;
    double scalar_in = 0.0, scalar_out = 0.0;
};

/// Map influence strength p (clipped to [0,1]) to the per-axis Gaussian
/// scales. The scalar radius lives on [sigma_min, sigma_max] * short side;
/// the outer radius is rho times that, damped by overlap; anisotropy
/// stretches the scalar by the box aspect.
inline Radii radii_from_strength(double p, const GroundingBox& box, const GcaParams& params,
                                 double overlap) {
    box.validate();
    params.validate();
    overlap = std::clamp(overlap, 0.0, 1.0);
    const double pc = std::clamp(p, 0.0, 1.0);
    const double w = box.width(), h = box.height();
    const double m = std::min(w, h);
    Radii r;
    r.scalar_in = (params.sigma_min + (params.sigma_max - params.sigma_min) * pc) * m;
    r.scalar_out = params.rho * r.scalar_in * (1.0 - params.overlap_damping * overlap);
    r.x_in = r.scalar_in * (w / m);
    r.y_in = r.scalar_in * (h / m);
    r.x_out = r.scalar_out * (w / m);
    r.y_out = r.scalar_out * (h / m);
    return r;
}

/// Anisotropic Gaussian exp(-0.5 [(x-mx)^2/sx^2 + (y-my)^2/sy^2]) sampled
/// at every patch center.
inline std::vector<double> gaussian_field(std::pair<double, double> center, double s_x, double s_y,
                                          const PatchGrid& grid) {
    grid.validate();
    if (!(s_x > 0.0) || !(s_y > 0.0))
        throw InvalidParameterError("gaussian_field: scale must be > 0");
    std::vector<double> out(grid.patches());
    const double inv_sx2 = 1.0 / (s_x * s_x), inv_sy2 = 1.0 / (s_y * s_y);
    for (std::size_t y = 0; y < grid.height; ++y) {
        const double dy = grid.center_y(y) - center.second;
        const double ty = dy * dy * inv_sy2;
        for (std::size_t x = 0; x < grid.width; ++x) {
            const double dx = grid.center_x(x) - center.first;
            out[y * grid.width + x] = std::exp(-0.5 * (dx * dx * inv_sx2 + ty));
        }
    }
    return out;
}

/// Patch indices covered by the box: x in [floor(x1*W), ceil(x2*W)),
/// y in [floor(y1*H), ceil(y2*H)), clamped to the grid.
inline std::vector<std::size_t> box_footprint(const GroundingBox& box, const PatchGrid& grid) {
    box.validate();
    grid.validate();
    const auto W = static_cast<double>(grid.width), H = static_cast<double>(grid.height);
    const auto x0 = static_cast<std::size_t>(std::clamp(std::floor(box.x1 * W), 0.0, W - 1.0));
    const auto y0 = static_cast<std::size_t>(std::clamp(std::floor(box.y1 * H), 0.0, H - 1.0));
    const auto x1 = static_cast<std::size_t>(std::clamp(std::ceil(box.x2 * W), 1.0, W));
    const auto y1 = static_cast<std::size_t>(std::clamp(std::ceil(box.y2 * H), 1.0, H));
    std::vector<std::size_t> patches;
    patches.reserve((x1 - x0) * (y1 - y0));
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) patches.push_back(y * grid.width + x);
    return patches;
}

/// Fraction of the box's area covered by the union of the other boxes.
/// Exact rectangle-union sweep over the clipped pieces.
inline double overlap_fraction(std::size_t subject, const std::vector<GroundingBox>& boxes) {
    const GroundingBox& self = boxes[subject];
    std::vector<GroundingBox> clipped;
    std::vector<double> xs;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (i == subject) continue;
        GroundingBox c{std::max(self.x1, boxes[i].x1), std::max(self.y1, boxes[i].y1),
                       std::min(self.x2, boxes[i].x2), std::min(self.y2, boxes[i].y2)};
        if (c.x1 < c.x2 && c.y1 < c.y2) {
            clipped.push_back(c);
            xs.push_back(c.x1);
            xs.push_back(c.x2);
        }
    }
    if (clipped.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    double area = 0.0;
    for (std::size_t s = 0; s + 1 < xs.size(); ++s) {
        const double xa = xs[s], xb = xs[s + 1];
        std::vector<std::pair<double, double>> spans;
        for (const auto& c : clipped)
            if (c.x1 <= xa && xb <= c.x2) spans.emplace_back(c.y1, c.y2);
        if (spans.empty()) continue;
        std::sort(spans.begin(), spans.end());
        double covered = 0.0, cur_lo = spans[0].first, cur_hi = spans[0].second;
        for (std::size_t i = 1; i < spans.size(); ++i) {
            if (spans[i].first > cur_hi) {
                covered += cur_hi - cur_lo;
                cur_lo = spans[i].first;
                cur_hi = spans[i].second;
            } else {
                cur_hi = std::max(cur_hi, spans[i].second);
            }
        }
        covered += cur_hi - cur_lo;
        area += covered * (xb - xa);
    }
    return std::clamp(area / self.area(), 0.0, 1.0);
}

namespace detail {

// Peak becomes exactly 1: IEEE division gives v/mx == 1.0 at the argmax and
// stays <= 1 elsewhere. An identically zero field is left untouched.
inline void normalize_peak(std::vector<double>& values) {
    double mx = 0.0;
    for (double v : values) mx = std::max(mx, v);
    if (mx <= 0.0) return;
    for (double& v : values) v /= mx;
}

}  // namespace detail

/// Two-centroid fused Gaussian mask: inner and outer fields per centroid,
/// linearly fused with fuse_weight, per-patch max across the two centroids,
/// then scaled so the global peak is exactly 1.
inline SubjectMask build_subject_mask(const GroundingBox& box, const PatchGrid& grid,
                                      const GcaParams& params, double p, double overlap) {
    const auto centers = split_box_centers(box);
    const Radii r = radii_from_strength(p, box, params, overlap);
    SubjectMask mask;
    mask.center1 = centers.first;
    mask.center2 = centers.second;
    mask.values.assign(grid.patches(), 0.0);
    const double lam = params.fuse_weight;
    for (const auto& c : {centers.first, centers.second}) {
        const auto g_in = gaussian_field(c, r.x_in, r.y_in, grid);
        const auto g_out = gaussian_field(c, r.x_out, r.y_out, grid);
        for (std::size_t i = 0; i < mask.values.size(); ++i)
            mask.values[i] = std::max(mask.values[i], lam * g_in[i] + (1.0 - lam) * g_out[i]);
    }
    detail::normalize_peak(mask.values);
    return mask;
}

/// Per-subject influence strengths for mask_variant. Strengths default to
/// 0.5 (center-initialized stage) when no attention map is supplied.
inline std::vector<double> default_strengths(std::size_t n) { return std::vector<double>(n, 0.5); }

/// Build one mask per subject under the requested strategy. `strengths`
/// carries the attention-driven p per subject where the strategy uses it.
inline std::vector<SubjectMask> mask_variant(MaskStrategy strategy,
                                             const std::vector<GroundingBox>& boxes,
                                             const PatchGrid& grid, const GcaParams& params,
                                             const std::vector<double>* strengths = nullptr) {
    grid.validate();
    params.validate();
    for (const auto& b : boxes) b.validate();
    std::vector<double> p(boxes.size(), 0.5);
    if (strengths) {
        if (strengths->size() != boxes.size())
            throw ConfigurationError("mask_variant: strengths/boxes size mismatch");
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::clamp((*strengths)[i], 0.0, 1.0);
    }

    std::vector<SubjectMask> masks(boxes.size());
    switch (strategy) {
        case MaskStrategy::BoxBinary:
        case MaskStrategy::XorSplit: {
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                auto& m = masks[i];
                m.values.assign(grid.patches(), 0.0);
                for (std::size_t idx : box_footprint(boxes[i], grid)) m.values[idx] = 1.0;
                auto centers = split_box_centers(boxes[i]);
                m.center1 = centers.first;
                m.center2 = centers.second;
            }
            if (strategy == MaskStrategy::XorSplit && boxes.size() > 1) {
                std::vector<int> cover(grid.patches(), 0);
                for (const auto& b : boxes)
                    for (std::size_t idx : box_footprint(b, grid)) cover[idx]++;
                for (auto& m : masks)
                    for (std::size_t idx = 0; idx < cover.size(); ++idx)
                        if (cover[idx] >= 2) m.values[idx] = 0.0;
            }
            break;
        }
        case MaskStrategy::StaticTwoStage:
        case MaskStrategy::Gca: {
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                const double pi = strategy == MaskStrategy::StaticTwoStage ? 0.5 : p[i];
                masks[i] = build_subject_mask(boxes[i], grid, params, pi,
                                              overlap_fraction(i, boxes));
            }
            break;
        }
        case MaskStrategy::SingleStage: {
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                const auto& b = boxes[i];
                const Radii r = radii_from_strength(p[i], b, params, overlap_fraction(i, boxes));
                const std::pair<double, double> c{0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2)};
                masks[i].values = gaussian_field(c, r.scalar_in, r.scalar_in, grid);
                detail::normalize_peak(masks[i].values);
                masks[i].center1 = masks[i].center2 = c;
            }
            break;
        }
        default:
            throw ConfigurationError("mask_variant: unknown strategy");
    }
    return masks;
}

/// Logit bias B(p, j) = beta * (M_i(p) - 1) for columns owned by subject i;
/// dummy columns stay exactly zero. The same bias is broadcast across heads
/// by the caller.
inline AttentionBias assemble_bias(const std::vector<SubjectMask>& masks,
                                   const std::vector<IpSpan>& ip_spans, std::size_t n_dummy,
                                   double beta) {
    if (masks.size() != ip_spans.size())
        throw ConfigurationError("assemble_bias: masks/spans size mismatch");
    if (!(beta >= 0.0)) throw ConfigurationError("assemble_bias: beta must be >= 0");
    std::size_t n_ip = 0;
    for (const auto& s : ip_spans) {
        if (s.begin >= s.end) throw ConfigurationError("assemble_bias: empty span");
        n_ip = std::max(n_ip, s.end);
    }
    for (std::size_t i = 0; i < ip_spans.size(); ++i)
        for (std::size_t j = i + 1; j < ip_spans.size(); ++j)
            if (ip_spans[i].begin < ip_spans[j].end && ip_spans[j].begin < ip_spans[i].end)
                throw ConfigurationError("assemble_bias: overlapping ip spans");

    const std::size_t patches = masks.empty() ? 0 : masks[0].values.size();
    AttentionBias out;
    out.bias = Matrix(patches, n_ip + n_dummy);
    out.owner.assign(n_ip + n_dummy, std::nullopt);
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].values.size() != patches)
            throw DimensionError("assemble_bias: masks disagree on patch count");
        for (std::size_t j = ip_spans[i].begin; j < ip_spans[i].end; ++j) {
            out.owner[j] = i;
            for (std::size_t pidx = 0; pidx < patches; ++pidx)
                out.bias(pidx, j) = beta * (masks[i].values[pidx] - 1.0);
        }
    }
    return out;
}

/// Complement of the subject masks: M_b(p) = clip(1 - max_i M_i(p), 0, 1).
/// Empty mask list means everything is background.
inline std::vector<double> background_mask(const std::vector<SubjectMask>& masks,
                                           std::optional<double> binarize_threshold = std::nullopt,
                                           std::size_t patches_if_empty = 0) {
    std::size_t patches = masks.empty() ? patches_if_empty : masks[0].values.size();
    std::vector<double> out(patches, 1.0);
    for (const auto& m : masks) {
        if (m.values.size() != patches) throw DimensionError("background_mask: grid mismatch");
        for (std::size_t i = 0; i < patches; ++i)
            out[i] = std::min(out[i], std::clamp(1.0 - m.values[i], 0.0, 1.0));
    }
    if (binarize_threshold)
        for (double& v : out) v = v >= *binarize_threshold ? 1.0 : 0.0;
    return out;
}

}  // namespace nattn::grounding
