#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nattn/absvr.hpp"
#include "nattn/errors.hpp"
#include "nattn/gca.hpp"
#include "nattn/grounding.hpp"
#include "nattn/io.hpp"
#include "nattn/matrix.hpp"
#include "nattn/rng.hpp"
#include "nattn/sfc.hpp"

namespace nattn::pipeline {

struct LayerSpec {
    std::size_t grid_w = 64;
    std::size_t grid_h = 64;
    std::size_t d_model = 64;
    std::size_t heads = 4;

    std::size_t head_dim() const { return d_model / heads; }
    grounding::PatchGrid grid() const { return {grid_w, grid_h}; }
};

struct SubjectSpec {
    std::vector<grounding::GroundingBox> boxes;  // one per frame, or one shared
    std::size_t ip_tokens = 4;

    const grounding::GroundingBox& box_for_frame(std::size_t f) const {
        return boxes.size() == 1 ? boxes[0] : boxes[f];
    }
};

struct StoryConfig {
    uint64_t seed = 42;
    std::size_t frames = 20;
    std::size_t steps_per_frame = 30;
    std::vector<LayerSpec> layers;
    std::vector<SubjectSpec> subjects;
    std::size_t token_dim = 64;        // feature dimension D of the token blocks
    std::size_t tokens_per_frame = 8;
    grounding::GcaParams gca;
    absvr::AbsvrParams absvr;
    sfc::SfcParams sfc;
    grounding::MaskStrategy strategy = grounding::MaskStrategy::Gca;

    std::size_t total_tokens() const { return frames * tokens_per_frame; }

    /// The two-subject scene from the anisotropy ablation setup (boxes with
    /// a ~12% overlap region), 20 frames at 30 steps, 64x64 top grid with
    /// two lower-resolution mixing layers.
    static StoryConfig defaults() {
        StoryConfig c;
        c.layers = {{64, 64, 64, 4}, {32, 32, 64, 4}, {16, 16, 64, 4}};
        c.subjects = {{{{0.20, 0.20, 0.60, 0.60}}, 4}, {{{0.45, 0.20, 0.80, 0.60}}, 4}};
        return c;
    }

    std::vector<std::string> validate_issues() const {
        std::vector<std::string> issues;
        if (frames < 1) issues.push_back("frames (must be >= 1)");
        if (steps_per_frame < 1) issues.push_back("steps_per_frame (must be >= 1)");
        if (token_dim < 1) issues.push_back("token_dim (must be >= 1)");
        if (tokens_per_frame < 1) issues.push_back("tokens_per_frame (must be >= 1)");
        if (layers.empty()) issues.push_back("layers (need at least one)");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string tag = "layers[" + std::to_string(i) + "]";
            if (l.grid_w < 1 || l.grid_h < 1) issues.push_back(tag + ".grid (zero-sized)");
            if (l.heads < 1) issues.push_back(tag + ".heads (must be >= 1)");
            else if (l.d_model < 1 || l.d_model % l.heads != 0)
                issues.push_back(tag + ".d_model (must be a positive multiple of heads)");
        }
        for (std::size_t i = 0; i < subjects.size(); ++i) {
            const auto& s = subjects[i];
            const std::string tag = "subjects[" + std::to_string(i) + "]";
            if (s.ip_tokens < 1) issues.push_back(tag + ".ip_tokens (must be >= 1)");
            if (s.boxes.size() != 1 && s.boxes.size() != frames)
                issues.push_back(tag + ".boxes (need 1 or `frames` boxes)");
            for (const auto& b : s.boxes) {
                try {
                    b.validate();
                } catch (const std::exception&) {
                    issues.push_back(tag + ".boxes (invalid box coordinates)");
                    break;
                }
            }
        }
        try {
            gca.validate();
        } catch (const std::exception& e) {
            issues.push_back(std::string("gca (") + e.what() + ")");
        }
        try {
            absvr.validate();
        } catch (const std::exception& e) {
            issues.push_back(std::string("absvr (") + e.what() + ")");
        }
        try {
            sfc.validate();
        } catch (const std::exception& e) {
            issues.push_back(std::string("sfc (") + e.what() + ")");
        }
        return issues;
    }

    void validate() const {
        auto issues = validate_issues();
        if (!issues.empty()) {
            std::string msg = "invalid story config:";
            for (const auto& s : issues) msg += " " + s + ";";
            throw ConfigurationError(msg);
        }
    }
};

// Dummy-column count and IP fusion factor are fixed pipeline conventions,
// not config schema fields.
constexpr std::size_t kDummyTokens = 4;
constexpr double kSubjectFactor = 0.6;

namespace role {
constexpr uint64_t kTokens = 1, kIp = 2, kHidden = 3;
}

/// Per-frame stats aggregated over steps, layers, and heads.
struct FrameStats {
    std::size_t frame = 0;
    std::vector<double> mask_coverage;  // per layer
    double mean_entropy = 0.0;
    double mean_history_mass = 0.0;
    std::size_t cache_occupancy = 0;  // max stored rows seen this frame
    std::size_t k = 0;
    std::vector<std::size_t> knees;
    double wall_ms = 0.0;
};

struct StepRow {
    std::size_t frame = 0, layer = 0, step = 0;
    double mask_cov = 0.0, entropy = 0.0, history_mass = 0.0;
    std::size_t occupancy = 0, k = 0;
    std::string knees;
    double ms = 0.0;
};

struct TraceRow {
    std::size_t frame = 0, layer = 0, step = 0;
    std::size_t rows_before = 0, rows_selected = 0, rows_after = 0;
    double history_mass_mean = 0.0;
    bool wrote = false;
};

struct StoryState {
    std::vector<Matrix> frame_tokens;  // pristine D x T_f blocks
    Matrix ip_states;                  // N_ip x D
    std::vector<gca::LayerWeights> weights;
    std::vector<Matrix> hidden;  // per layer, current frame
    sfc::Cache cache;

    std::vector<StepRow> step_rows;
    std::vector<TraceRow> trace_rows;
    std::vector<absvr::SpectralReport> reports;                 // per frame
    std::vector<std::vector<grounding::SubjectMask>> frame_masks;  // last-step top-layer masks

    // Ablation probes accumulated over every layer/step.
    double oob_mass_sum = 0.0;
    std::size_t oob_mass_n = 0;
    double coact_sum = 0.0;
    std::size_t coact_n = 0;
};

inline std::string format_knees(const std::vector<std::size_t>& knees) {
    std::string s;
    for (std::size_t i = 0; i < knees.size(); ++i) {
        if (i) s += ";";
        s += std::to_string(knees[i]);
    }
    return s;
}

/// Synthesize every tensor of the story from splitmix64 streams keyed by
/// (seed, role, frame/subject/layer); entries are N(0,1) scaled by
/// 1/sqrt(feature dim).
inline StoryState synth_story(const StoryConfig& cfg) {
    cfg.validate();
    StoryState st;
    const double tok_scale = 1.0 / std::sqrt(static_cast<double>(cfg.token_dim));
    for (std::size_t f = 0; f < cfg.frames; ++f) {
        SplitMix64 rng(derive_seed(cfg.seed, role::kTokens, f));
        Matrix block(cfg.token_dim, cfg.tokens_per_frame);
        for (double& v : block.data()) v = rng.next_normal() * tok_scale;
        st.frame_tokens.push_back(std::move(block));
    }
    std::size_t n_ip = 0;
    for (const auto& s : cfg.subjects) n_ip += s.ip_tokens;
    st.ip_states = Matrix(n_ip, cfg.token_dim);
    std::size_t row = 0;
    for (std::size_t s = 0; s < cfg.subjects.size(); ++s) {
        SplitMix64 rng(derive_seed(cfg.seed, role::kIp, s));
        for (std::size_t r = 0; r < cfg.subjects[s].ip_tokens; ++r, ++row)
            for (std::size_t c = 0; c < cfg.token_dim; ++c)
                st.ip_states(row, c) = rng.next_normal() * tok_scale;
    }
    for (std::size_t l = 0; l < cfg.layers.size(); ++l)
        st.weights.push_back(gca::make_layer_weights(cfg.seed, l, cfg.layers[l].d_model,
                                                     cfg.token_dim, cfg.layers[l].heads,
                                                     cfg.layers[l].head_dim()));
    st.hidden.resize(cfg.layers.size());
    return st;
}

inline Matrix synth_hidden(const StoryConfig& cfg, std::size_t frame, std::size_t layer) {
    const auto& l = cfg.layers[layer];
    SplitMix64 rng(derive_seed(cfg.seed, role::kHidden, frame, layer));
    Matrix h(l.grid().patches(), l.d_model);
    const double scale = 1.0 / std::sqrt(static_cast<double>(l.d_model));
    for (double& v : h.data()) v = rng.next_normal() * scale;
    return h;
}

/// One frame of the story: reweight the token blocks for this frame
/// (AB-SVR), then run `steps_per_frame` passes over the attention layers
/// with the cache wrapping the text branch and context mixing at
/// low-resolution layers. `zero_timing` zeroes the wall-time stats so
/// replays are byte-comparable.
inline FrameStats run_frame(std::size_t frame_idx, StoryState& state, const StoryConfig& cfg,
                            bool zero_timing = false) {
    namespace chrono = std::chrono;
    const auto frame_start = chrono::steady_clock::now();
    cfg.validate();
    if (frame_idx >= cfg.frames) throw InvalidInputError("run_frame: frame index out of range");

    // AB-SVR on a fresh copy of the pristine embeddings: each frame
    // re-expresses its own block against the full story, so reweighting
    // never compounds across frames.
    absvr::FrameSegments segs;
    segs.frames = state.frame_tokens;
    segs.current_index = frame_idx;
    const auto report = absvr::absvr_apply(segs, cfg.absvr);
    state.reports.push_back(report);

    const std::size_t total_tokens = cfg.total_tokens();
    gca::EncoderStates states;
    states.text = Matrix(total_tokens, cfg.token_dim);
    {
        std::size_t col0 = 0;
        for (const auto& block : segs.frames) {
            for (std::size_t c = 0; c < block.cols(); ++c)
                for (std::size_t r = 0; r < block.rows(); ++r)
                    states.text(col0 + c, r) = block(r, c);
            col0 += block.cols();
        }
    }
    states.ip = state.ip_states;

    std::vector<gca::SubjectGrounding> subjects(cfg.subjects.size());
    {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < cfg.subjects.size(); ++i) {
            subjects[i].box = cfg.subjects[i].box_for_frame(frame_idx);
            subjects[i].ip_span = {offset, offset + cfg.subjects[i].ip_tokens};
            offset += cfg.subjects[i].ip_tokens;
        }
    }

    for (std::size_t l = 0; l < cfg.layers.size(); ++l)
        state.hidden[l] = synth_hidden(cfg, frame_idx, l);

    FrameStats stats;
    stats.frame = frame_idx;
    stats.mask_coverage.assign(cfg.layers.size(), 0.0);
    stats.k = report.k;
    stats.knees = report.knees;
    double entropy_sum = 0.0, mass_sum = 0.0;
    std::size_t mass_n = 0;

    // Latest background mask for context mixing; refreshed from the
    // highest-resolution layer each step.
    std::vector<double> mb;
    grounding::PatchGrid mb_grid;
    std::vector<std::optional<sfc::ContextEntry>> staged(cfg.layers.size());

    for (std::size_t step = 0; step < cfg.steps_per_frame; ++step) {
        for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
            const auto layer_start = chrono::steady_clock::now();
            const auto& spec = cfg.layers[l];
            const grounding::PatchGrid grid = spec.grid();
            gca::AttentionConfig acfg;
            acfg.heads = spec.heads;
            acfg.head_dim = spec.head_dim();
            acfg.patches = grid.patches();
            acfg.text_tokens = total_tokens;
            acfg.ip_tokens_per_subject =
                subjects.empty() ? 1 : std::max<std::size_t>(1, states.ip.rows() / subjects.size());
            acfg.n_dummy = kDummyTokens;
            acfg.subject_factor = kSubjectFactor;

            TraceRow trace;
            trace.frame = frame_idx;
            trace.layer = l;
            trace.step = step;
            double layer_mass_sum = 0.0;
            std::size_t layer_mass_n = 0;
            gca::TextAttendFn hook;
            if (cfg.sfc.accumulate) {
                hook = [&](std::size_t head, const Matrix& q, const Matrix& k, const Matrix& v) {
                    sfc::CacheKey key{l * spec.heads + head, step, sfc::Branch::Conditional};
                    auto kr = state.cache.kv_accumulate(key, q, k, v, cfg.sfc, frame_idx);
                    Matrix k_hist(kr.n_history, k.cols()), v_hist(kr.n_history, v.cols());
                    for (std::size_t r = 0; r < kr.n_history; ++r)
                        for (std::size_t c = 0; c < k.cols(); ++c) {
                            k_hist(r, c) = kr.k_cat(r, c);
                            v_hist(r, c) = kr.v_cat(r, c);
                        }
                    auto ca = sfc::concat_attend(q, k_hist, v_hist, k, v, cfg.sfc.delta_h);
                    trace.rows_before = kr.rows_before;
                    trace.rows_selected = kr.n_history;
                    trace.rows_after = kr.rows_after;
                    trace.wrote = kr.wrote;
                    for (double m : ca.history_mass) layer_mass_sum += m;
                    layer_mass_n += ca.history_mass.size();
                    return gca::TextAttendOutput{std::move(ca.output), std::move(ca.alpha),
                                                 ca.n_history};
                };
            }

            auto res = gca::forward(state.hidden[l], states, state.weights[l], grid, subjects,
                                    acfg, cfg.gca, cfg.strategy, step, hook);

            Matrix update = std::move(res.attn_out);
            if (cfg.sfc.accumulate && grid.patches() <= cfg.sfc.mix_patch_threshold &&
                !mb.empty()) {
                auto mixres = sfc::context_mix(update, grid, state.cache.context(l), mb, mb_grid,
                                               cfg.sfc.alpha, cfg.sfc.mix_patch_threshold);
                staged[l] = std::move(mixres.entry);
                update = std::move(mixres.mixed);
            }
            state.hidden[l] += update;

            if (l == 0) {
                mb = grounding::background_mask(res.masks, std::nullopt, grid.patches());
                mb_grid = grid;
                if (step + 1 == cfg.steps_per_frame) {
                    if (state.frame_masks.size() <= frame_idx)
                        state.frame_masks.resize(frame_idx + 1);
                    state.frame_masks[frame_idx] = res.masks;
                }
            }

            // Ablation probes: subject attention mass landing outside its
            // own box, and co-activation of overlapping subject masks.
            for (std::size_t i = 0; i < subjects.size(); ++i) {
                const auto fp = grounding::box_footprint(subjects[i].box, grid);
                std::vector<char> inside(grid.patches(), 0);
                for (std::size_t idx : fp) inside[idx] = 1;
                double in_box = 0.0, total = 0.0;
                for (std::size_t p = 0; p < grid.patches(); ++p) {
                    double row_mass = 0.0;
                    for (std::size_t j = subjects[i].ip_span.begin; j < subjects[i].ip_span.end;
                         ++j)
                        row_mass += res.alpha_ip(p, j);
                    total += row_mass;
                    if (inside[p]) in_box += row_mass;
                }
                if (total > 0.0) {
                    state.oob_mass_sum += (total - in_box) / total;
                    state.oob_mass_n++;
                }
            }
            if (subjects.size() >= 2) {
                std::vector<int> cover(grid.patches(), 0);
                for (const auto& s : subjects)
                    for (std::size_t idx : grounding::box_footprint(s.box, grid)) cover[idx]++;
                double co = 0.0;
                std::size_t n_overlap = 0;
                for (std::size_t p = 0; p < grid.patches(); ++p) {
                    if (cover[p] < 2) continue;
                    n_overlap++;
                    double best = 0.0;
                    for (std::size_t i = 0; i < res.masks.size(); ++i)
                        for (std::size_t j = i + 1; j < res.masks.size(); ++j)
                            best = std::max(best, std::min(res.masks[i].values[p],
                                                           res.masks[j].values[p]));
                    co += best;
                }
                if (n_overlap > 0) {
                    state.coact_sum += co / static_cast<double>(n_overlap);
                    state.coact_n++;
                }
            }

            double cov = 0.0;
            for (const auto& m : res.masks)
                for (double v : m.values) cov += v;
            cov = res.masks.empty()
                      ? 0.0
                      : cov / static_cast<double>(res.masks.size() * grid.patches());
            stats.mask_coverage[l] += cov / static_cast<double>(cfg.steps_per_frame);
            entropy_sum += res.mean_text_entropy;
            const double layer_mass =
                layer_mass_n ? layer_mass_sum / static_cast<double>(layer_mass_n) : 0.0;
            trace.history_mass_mean = layer_mass;
            mass_sum += layer_mass;
            mass_n++;
            stats.cache_occupancy = std::max(stats.cache_occupancy, trace.rows_after);

            StepRow row;
            row.frame = frame_idx;
            row.layer = l;
            row.step = step;
            row.mask_cov = cov;
            row.entropy = res.mean_text_entropy;
            row.history_mass = layer_mass;
            row.occupancy = trace.rows_after;
            row.k = report.k;
            row.knees = format_knees(report.knees);
            row.ms = zero_timing
                         ? 0.0
                         : chrono::duration<double, std::milli>(chrono::steady_clock::now() -
                                                                layer_start)
                               .count();
            state.step_rows.push_back(std::move(row));
            state.trace_rows.push_back(trace);
        }
    }

    // Stage the final unmixed context for the next frame.
    for (std::size_t l = 0; l < cfg.layers.size(); ++l)
        if (staged[l]) state.cache.store_context(l, std::move(*staged[l]));

    const std::size_t denom = cfg.steps_per_frame * cfg.layers.size();
    stats.mean_entropy = entropy_sum / static_cast<double>(denom);
    stats.mean_history_mass = mass_n ? mass_sum / static_cast<double>(mass_n) : 0.0;
    stats.wall_ms = zero_timing ? 0.0
                                : chrono::duration<double, std::milli>(
                                      chrono::steady_clock::now() - frame_start)
                                      .count();
    return stats;
}

struct StoryRunResult {
    std::vector<FrameStats> frames;
    double mean_out_of_box_mass = 0.0;
    double mean_overlap_coactivation = 0.0;
};

/// Run every frame in sequence without touching the filesystem.
inline StoryRunResult run_story_core(const StoryConfig& cfg, StoryState& state,
                                     bool zero_timing = false) {
    cfg.validate();
    state = synth_story(cfg);
    StoryRunResult out;
    for (std::size_t f = 0; f < cfg.frames; ++f)
        out.frames.push_back(run_frame(f, state, cfg, zero_timing));
    out.mean_out_of_box_mass =
        state.oob_mass_n ? state.oob_mass_sum / static_cast<double>(state.oob_mass_n) : 0.0;
    out.mean_overlap_coactivation =
        state.coact_n ? state.coact_sum / static_cast<double>(state.coact_n) : 0.0;
    return out;
}

namespace detail {

inline std::ofstream open_artifact(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path.string());
    return out;
}

}  // namespace detail

/// Run the story and emit stats.csv, cache_trace.csv, per-frame spectrum
/// CSVs, and per-frame subject-mask PGMs under out_dir.
inline StoryRunResult run_story(const StoryConfig& cfg, const std::string& out_dir,
                                bool zero_timing = false) {
    namespace fs = std::filesystem;
    StoryState state;
    StoryRunResult result = run_story_core(cfg, state, zero_timing);

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "masks", ec);
    fs::create_directories(fs::path(out_dir) / "spectrum", ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    {
        auto out = detail::open_artifact(fs::path(out_dir) / "stats.csv");
        out << "frame,layer,step,mask_cov,entropy,history_mass,occupancy,k,knees,ms\n";
        for (const auto& r : state.step_rows)
            out << r.frame << "," << r.layer << "," << r.step << "," << format_double(r.mask_cov)
                << "," << format_double(r.entropy) << "," << format_double(r.history_mass) << ","
                << r.occupancy << "," << r.k << "," << r.knees << "," << format_double(r.ms)
                << "\n";
    }
    {
        auto out = detail::open_artifact(fs::path(out_dir) / "cache_trace.csv");
        out << "frame,layer,step,rows_before,rows_selected,rows_after,history_mass_mean,wrote\n";
        for (const auto& r : state.trace_rows)
            out << r.frame << "," << r.layer << "," << r.step << "," << r.rows_before << ","
                << r.rows_selected << "," << r.rows_after << ","
                << format_double(r.history_mass_mean) << "," << (r.wrote ? 1 : 0) << "\n";
    }
    for (std::size_t f = 0; f < state.reports.size(); ++f) {
        const auto& rep = state.reports[f];
        char name[64];
        std::snprintf(name, sizeof(name), "frame_%03zu.csv", f);
        auto out = detail::open_artifact(fs::path(out_dir) / "spectrum" / name);
        out << "i,sigma,energy_cum,is_knee,k_selected\n";
        for (std::size_t i = 0; i < rep.sigma.size(); ++i) {
            const bool knee = std::find(rep.knees.begin(), rep.knees.end(), i) != rep.knees.end();
            out << i << "," << format_double(rep.sigma[i]) << ","
                << format_double(rep.cumulative_energy[i]) << "," << (knee ? 1 : 0) << "," << rep.k
                << "\n";
        }
    }
    const grounding::PatchGrid top = cfg.layers[0].grid();
    for (std::size_t f = 0; f < state.frame_masks.size(); ++f) {
        for (std::size_t s = 0; s < state.frame_masks[f].size(); ++s) {
            char name[64];
            std::snprintf(name, sizeof(name), "frame_%03zu_subject_%zu.pgm", f, s);
            write_pgm(state.frame_masks[f][s].values, top.width, top.height,
                      (std::filesystem::path(out_dir) / "masks" / name).string());
        }
    }
    return result;
}

struct AblationRow {
    std::string strategy;
    double out_of_box_mass = 0.0;
    double overlap_coactivation = 0.0;
};

/// Shared-seed strategy comparison: per strategy, the mean fraction of a
/// subject's IP attention landing outside its own box (background-drag
/// analogue) and the mean co-activation of subject masks over overlap
/// patches (confusion analogue).
inline std::vector<AblationRow> ablation_matrix(const StoryConfig& cfg,
                                                const std::vector<grounding::MaskStrategy>& strategies) {
    if (strategies.size() < 2)
        throw ConfigurationError("ablation_matrix: need at least two strategies");
    std::vector<AblationRow> rows;
    for (auto strategy : strategies) {
        StoryConfig c = cfg;
        c.strategy = strategy;
        StoryState state;
        auto res = run_story_core(c, state, true);
        rows.push_back({grounding::mask_strategy_name(strategy), res.mean_out_of_box_mass,
                        res.mean_overlap_coactivation});
    }
    return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    auto out = detail::open_artifact(path);
    out << "strategy,out_of_box_mass,overlap_coactivation\n";
    for (const auto& r : rows)
        out << r.strategy << "," << format_double(r.out_of_box_mass) << ","
            << format_double(r.overlap_coactivation) << "\n";
}

}  // namespace nattn::pipeline
