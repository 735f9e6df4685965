#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "nattn/errors.hpp"
#include "nattn/grounding.hpp"
#include "nattn/matrix.hpp"
#include "nattn/rng.hpp"

namespace nattn::sfc {

enum class Branch { Conditional, Unconditional };

/// Cache slots are keyed per layer and step; the unconditional guidance
/// branch reads the conditional history but never writes.
struct CacheKey {
    uint64_t layer_id = 0;
    uint64_t step_id = 0;
    Branch branch = Branch::Conditional;

    friend bool operator<(const CacheKey& a, const CacheKey& b) {
        return std::tie(a.layer_id, a.step_id, a.branch) <
               std::tie(b.layer_id, b.step_id, b.branch);
    }
};

/// Key/value history rows plus their arrival counters (monotone per slot,
/// surviving eviction so FIFO order is always recoverable).
struct KVEntry {
    Matrix k;  // L x d_h
    Matrix v;  // L x d_h
    std::vector<uint64_t> arrival;

    std::size_t rows() const { return arrival.size(); }

    void validate() const {
        if (k.rows() != v.rows() || k.rows() != arrival.size())
            throw DimensionError("KVEntry: K/V/arrival row mismatch");
    }
};

enum class CapPolicy { Fifo, Reservoir };

inline const char* cap_policy_name(CapPolicy p) {
    return p == CapPolicy::Fifo ? "fifo" : "reservoir";
}

inline CapPolicy parse_cap_policy(const std::string& name) {
    if (name == "fifo") return CapPolicy::Fifo;
    if (name == "reservoir") return CapPolicy::Reservoir;
    throw ConfigurationError("unknown cap policy: " + name);
}

struct SfcParams {
    std::size_t k_h = 128;            // history tokens surfaced per attention call
    double delta_h = -0.1;            // forgetting bias on historical logits
    std::size_t l_max = 512;          // capacity cap per slot
    CapPolicy policy = CapPolicy::Fifo;
    double alpha = 0.6;               // context blend strength
    std::size_t mix_patch_threshold = 1024;  // layers with P <= this get mixing
    bool accumulate = true;
    uint64_t seed = 42;

    void validate() const {
        if (k_h < 1) throw ConfigurationError("SfcParams: k_h must be >= 1");
        if (l_max < 1) throw ConfigurationError("SfcParams: l_max must be >= 1");
        if (!(alpha >= 0.0 && alpha <= 1.0))
            throw ConfigurationError("SfcParams: alpha outside [0,1]");
    }
};

/// Batch-averaged, unmixed attention output cached per layer.
struct ContextEntry {
    Matrix c_bar;  // P_layer x d
    grounding::PatchGrid grid;
};

/// Relevance ranking of history rows: score(t) = max over queries of
/// Q_p . K_t / sqrt(d_h), unbiased (the forgetting bias is applied later,
/// at attention time). Returns the top-k_h row indices, ascending.
inline std::vector<std::size_t> topk_history(const Matrix& q, const Matrix& k_h,
                                             std::size_t top_k) {
    if (k_h.rows() == 0) return {};
    if (q.cols() != k_h.cols()) throw DimensionError("topk_history: head dim mismatch");
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    std::vector<double> scores(k_h.rows(), -std::numeric_limits<double>::infinity());
    for (std::size_t p = 0; p < q.rows(); ++p) {
        const double* qr = q.row_ptr(p);
        for (std::size_t t = 0; t < k_h.rows(); ++t) {
            const double* kr = k_h.row_ptr(t);
            double dot = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) dot += qr[c] * kr[c];
            scores[t] = std::max(scores[t], dot * inv);
        }
    }
    return top_k_indices(scores, top_k);
}

/// Historical logits with the constant forgetting bias added.
inline Matrix history_logits(const Matrix& q, const Matrix& k_selected, double delta_h) {
    if (q.cols() != k_selected.cols()) throw DimensionError("history_logits: head dim mismatch");
    Matrix s = matmul(q, transpose(k_selected));
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    for (double& v : s.data()) v = v * inv + delta_h;
    return s;
}

struct ConcatAttendResult {
    Matrix output;                      // P x d_h
    std::vector<double> history_mass;   // per query, sum of alpha over history cols
    Matrix alpha;                       // P x (n_history + T), history columns first
    std::size_t n_history = 0;
};

/// Single softmax over [history ; current] logits with the history block
/// biased by delta_h; output attends into the concatenated values.
inline ConcatAttendResult concat_attend(const Matrix& q, const Matrix& k_hist,
                                        const Matrix& v_hist, const Matrix& k_cur,
                                        const Matrix& v_cur, double delta_h) {
    const std::size_t nh = k_hist.rows(), nc = k_cur.rows();
    if (nc == 0) throw DimensionError("concat_attend: empty current keys");
    if (q.cols() != k_cur.cols() || (nh > 0 && q.cols() != k_hist.cols()))
        throw DimensionError("concat_attend: head dim mismatch");
    if (v_cur.rows() != nc || v_hist.rows() != nh)
        throw DimensionError("concat_attend: key/value row mismatch");
    if (nh > 0 && v_hist.cols() != v_cur.cols())
        throw DimensionError("concat_attend: value width mismatch");

    // Concatenated K/V, history rows first.
    Matrix k_all(nh + nc, q.cols()), v_all(nh + nc, v_cur.cols());
    if (nh > 0) {
        std::copy(k_hist.data().begin(), k_hist.data().end(), k_all.data().begin());
        std::copy(v_hist.data().begin(), v_hist.data().end(), v_all.data().begin());
    }
    std::copy(k_cur.data().begin(), k_cur.data().end(),
              k_all.data().begin() + static_cast<std::ptrdiff_t>(nh * q.cols()));
    std::copy(v_cur.data().begin(), v_cur.data().end(),
              v_all.data().begin() + static_cast<std::ptrdiff_t>(nh * v_cur.cols()));

    Matrix logits = matmul(q, transpose(k_all));
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    for (std::size_t p = 0; p < q.rows(); ++p) {
        double* lr = logits.row_ptr(p);
        for (std::size_t t = 0; t < nh; ++t) lr[t] = lr[t] * inv + delta_h;
        for (std::size_t t = nh; t < nh + nc; ++t) lr[t] *= inv;
    }
    ConcatAttendResult res;
    res.alpha = row_softmax(logits);
    res.n_history = nh;
    res.history_mass.assign(q.rows(), 0.0);
    for (std::size_t p = 0; p < q.rows(); ++p) {
        const double* ar = res.alpha.row_ptr(p);
        double m = 0.0;
        for (std::size_t t = 0; t < nh; ++t) m += ar[t];
        res.history_mass[p] = m;
    }
    res.output = matmul(res.alpha, v_all);
    return res;
}

/// Capacity cap. FIFO keeps the rows with the largest arrival counters in
/// arrival order; reservoir takes an Algorithm-R uniform sample over the
/// stored rows (deterministic in the supplied stream), sorted by arrival.
/// Entries at or under capacity pass through unchanged.
inline KVEntry cap_cache(const KVEntry& entry, std::size_t l_max, CapPolicy policy,
                         SplitMix64& rng) {
    entry.validate();
    if (l_max < 1) throw InvalidParameterError("cap_cache: l_max must be >= 1");
    if (entry.rows() <= l_max) return entry;

    std::vector<std::size_t> keep;
    if (policy == CapPolicy::Fifo) {
        std::vector<std::size_t> idx(entry.rows());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return entry.arrival[a] > entry.arrival[b];
        });
        keep.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(l_max));
    } else {
        keep.resize(l_max);
        std::iota(keep.begin(), keep.end(), 0);
        for (std::size_t i = l_max; i < entry.rows(); ++i) {
            const uint64_t j = rng.next_below(i + 1);
            if (j < l_max) keep[j] = i;
        }
    }
    std::sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
        return std::tie(entry.arrival[a], a) < std::tie(entry.arrival[b], b);
    });

    KVEntry out;
    out.k = Matrix(l_max, entry.k.cols());
    out.v = Matrix(l_max, entry.v.cols());
    out.arrival.resize(l_max);
    for (std::size_t r = 0; r < l_max; ++r) {
        const std::size_t src = keep[r];
        out.arrival[r] = entry.arrival[src];
        for (std::size_t c = 0; c < entry.k.cols(); ++c) {
            out.k(r, c) = entry.k(src, c);
            out.v(r, c) = entry.v(src, c);
        }
    }
    return out;
}

struct KvAccumulateResult {
    Matrix k_cat;  // [selected history ; current]
    Matrix v_cat;
    bool wrote = false;
    std::size_t n_history = 0;    // selected history rows in k_cat
    std::size_t rows_before = 0;  // stored rows before this call
    std::size_t rows_after = 0;   // stored rows after this call
};

/// Per-layer KV history plus per-layer context entries. Single writer per
/// generation session; mutation happens only in kv_accumulate and
/// store_context.
class Cache {
  public:
    /// Fetch history for (layer, step, Conditional), surface the top-k_h
    /// rows for attention, and append the current K/V to the stored history
    /// (capped at l_max) unless the branch is unconditional or accumulate
    /// mode is off. The write path caps the full arrival log, not the
    /// top-k selection, so FIFO retains exactly the latest l_max rows.
    KvAccumulateResult kv_accumulate(const CacheKey& key, const Matrix& q, const Matrix& k,
                                     const Matrix& v, const SfcParams& params,
                                     uint64_t frame_id) {
        params.validate();
        if (k.rows() != v.rows() || k.rows() == 0)
            throw DimensionError("kv_accumulate: current K/V rows mismatch or empty");
        KvAccumulateResult res;
        if (!params.accumulate) {
            res.k_cat = k;
            res.v_cat = v;
            return res;
        }
        const CacheKey read_key{key.layer_id, key.step_id, Branch::Conditional};
        Slot& slot = slots_[read_key];
        res.rows_before = slot.entry.rows();

        Matrix k_sel(0, k.cols()), v_sel(0, v.cols());
        if (res.rows_before > 0) {
            const auto idx = topk_history(q, slot.entry.k, params.k_h);
            k_sel = Matrix(idx.size(), k.cols());
            v_sel = Matrix(idx.size(), v.cols());
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t c = 0; c < k.cols(); ++c) {
                    k_sel(r, c) = slot.entry.k(idx[r], c);
                    v_sel(r, c) = slot.entry.v(idx[r], c);
                }
            res.n_history = idx.size();
        }
        res.k_cat = vstack(k_sel, k);
        res.v_cat = vstack(v_sel, v);

        if (key.branch == Branch::Conditional) {
            KVEntry grown;
            grown.k = vstack(slot.entry.k, k);
            grown.v = vstack(slot.entry.v, v);
            grown.arrival = slot.entry.arrival;
            for (std::size_t r = 0; r < k.rows(); ++r) grown.arrival.push_back(slot.next_arrival++);
            SplitMix64 rng(derive_seed(params.seed, key.layer_id, frame_id));
            slot.entry = cap_cache(grown, params.l_max, params.policy, rng);
            res.wrote = true;
            res.rows_after = slot.entry.rows();
        } else {
            res.rows_after = res.rows_before;
        }
        return res;
    }

    const KVEntry* entry(const CacheKey& key) const {
        auto it = slots_.find(CacheKey{key.layer_id, key.step_id, Branch::Conditional});
        return it == slots_.end() ? nullptr : &it->second.entry;
    }

    void store_context(uint64_t layer_id, ContextEntry entry) {
        contexts_[layer_id] = std::move(entry);
    }

    const ContextEntry* context(uint64_t layer_id) const {
        auto it = contexts_.find(layer_id);
        return it == contexts_.end() ? nullptr : &it->second;
    }

    /// FNV-1a over every slot and context entry; used to assert that reads
    /// (and unconditional branches) leave the cache untouched.
    uint64_t digest() const {
        uint64_t h = 1469598103934665603ull;
        auto mix_u64 = [&](uint64_t x) {
            for (int i = 0; i < 8; ++i) {
                h ^= (x >> (8 * i)) & 0xff;
                h *= 1099511628211ull;
            }
        };
        auto mix_matrix = [&](const Matrix& m) {
            mix_u64(m.rows());
            mix_u64(m.cols());
            for (double d : m.data()) {
                uint64_t bits;
                static_assert(sizeof(bits) == sizeof(d));
                std::memcpy(&bits, &d, sizeof(bits));
                mix_u64(bits);
            }
        };
        for (const auto& [key, slot] : slots_) {
            mix_u64(key.layer_id);
            mix_u64(key.step_id);
            mix_u64(static_cast<uint64_t>(key.branch));
            mix_u64(slot.next_arrival);
            for (uint64_t a : slot.entry.arrival) mix_u64(a);
            mix_matrix(slot.entry.k);
            mix_matrix(slot.entry.v);
        }
        for (const auto& [layer, ctx] : contexts_) {
            mix_u64(layer);
            mix_u64(ctx.grid.width);
            mix_u64(ctx.grid.height);
            mix_matrix(ctx.c_bar);
        }
        return h;
    }

    void clear() {
        slots_.clear();
        contexts_.clear();
    }

  private:
    struct Slot {
        KVEntry entry;
        uint64_t next_arrival = 0;
    };

    static Matrix vstack(const Matrix& top, const Matrix& bottom) {
        if (top.rows() == 0) return bottom;
        if (bottom.rows() == 0) return top;
        if (top.cols() != bottom.cols()) throw DimensionError("vstack: column mismatch");
        Matrix out(top.rows() + bottom.rows(), top.cols());
        std::copy(top.data().begin(), top.data().end(), out.data().begin());
        std::copy(bottom.data().begin(), bottom.data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(top.size()));
        return out;
    }

    std::map<CacheKey, Slot> slots_;
    std::map<uint64_t, ContextEntry> contexts_;
};

struct ContextMixResult {
    Matrix mixed;
    ContextEntry entry;  // stores the pre-mix output
};

/// Background-context blend at low-resolution layers:
/// C~ = C (1 - alpha M_b') + C_prev (alpha M_b'), with M_b' the background
/// mask nearest-neighbor-resized onto this layer's grid and broadcast over
/// features. The returned entry always holds the unmixed C, so repeated
/// mixing never feeds back. Layers with more than `mix_patch_threshold`
/// patches, or a missing previous entry, pass C through untouched.
inline ContextMixResult context_mix(const Matrix& c, const grounding::PatchGrid& grid,
                                    const ContextEntry* prev, const std::vector<double>& m_b,
                                    const grounding::PatchGrid& m_b_grid, double alpha,
                                    std::size_t mix_patch_threshold) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidParameterError("context_mix: alpha outside [0,1]");
    if (c.rows() != grid.patches()) throw DimensionError("context_mix: C rows != grid patches");
    ContextMixResult res;
    res.entry = ContextEntry{c, grid};
    if (c.rows() > mix_patch_threshold || prev == nullptr) {
        res.mixed = c;
        return res;
    }
    if (prev->grid.width != grid.width || prev->grid.height != grid.height ||
        !prev->c_bar.same_shape(c))
        throw DimensionError("context_mix: cached entry does not match this layer");
    if (m_b.size() != m_b_grid.patches())
        throw DimensionError("context_mix: mask length != its grid");
    const std::vector<double> mb = nn_resize(m_b, m_b_grid.width, m_b_grid.height, grid.width,
                                             grid.height);
    res.mixed = Matrix(c.rows(), c.cols());
    for (std::size_t p = 0; p < c.rows(); ++p) {
        const double w = alpha * mb[p];
        const double* cr = c.row_ptr(p);
        const double* prv = prev->c_bar.row_ptr(p);
        double* out = res.mixed.row_ptr(p);
        if (w == 0.0) {
            std::copy(cr, cr + c.cols(), out);  // bit-identical where the mask is zero
        } else {
            for (std::size_t j = 0; j < c.cols(); ++j) out[j] = cr[j] * (1.0 - w) + prv[j] * w;
        }
    }
    return res;
}

}  // namespace nattn::sfc
