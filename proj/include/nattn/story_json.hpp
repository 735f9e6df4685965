#pragma once

#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "nattn/errors.hpp"
#include "nattn/pipeline.hpp"

namespace nattn::pipeline {

using nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                                const std::string& where, std::vector<std::string>& issues) {
    if (!j.is_object()) {
        issues.push_back(where + " (must be a JSON object)");
        return;
    }
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) issues.push_back(where + "." + it.key() + " (unknown field)");
}

template <typename T>
void read_field(const json& j, const char* key, T& out, std::vector<std::string>& issues,
                const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        issues.push_back(where + "." + key + " (wrong type)");
    }
}

}  // namespace detail

inline json to_json(const StoryConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["frames"] = c.frames;
    j["steps_per_frame"] = c.steps_per_frame;
    j["layers"] = json::array();
    for (const auto& l : c.layers)
        j["layers"].push_back(
            {{"grid_w", l.grid_w}, {"grid_h", l.grid_h}, {"d_model", l.d_model}, {"heads", l.heads}});
    j["subjects"] = json::array();
    for (const auto& s : c.subjects) {
        json boxes = json::array();
        for (const auto& b : s.boxes)
            boxes.push_back({{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}});
        j["subjects"].push_back({{"boxes", boxes}, {"ip_tokens", s.ip_tokens}});
    }
    j["token_dim"] = c.token_dim;
    j["tokens_per_frame"] = c.tokens_per_frame;
    j["gca"] = {{"r1", c.gca.r1},
                {"r2", c.gca.r2},
                {"sigma_min", c.gca.sigma_min},
                {"sigma_max", c.gca.sigma_max},
                {"rho", c.gca.rho},
                {"fuse_weight", c.gca.fuse_weight},
                {"bias_scale", c.gca.bias_scale},
                {"overlap_damping", c.gca.overlap_damping}};
    j["absvr"] = {{"tau", c.absvr.tau},
                  {"gain_exp", c.absvr.gain_exp},
                  {"gain_sup", c.absvr.gain_sup},
                  {"zero_energy_epsilon", c.absvr.zero_energy_epsilon}};
    j["sfc"] = {{"k_h", c.sfc.k_h},
                {"delta_h", c.sfc.delta_h},
                {"l_max", c.sfc.l_max},
                {"policy", sfc::cap_policy_name(c.sfc.policy)},
                {"alpha", c.sfc.alpha},
                {"mix_patch_threshold", c.sfc.mix_patch_threshold},
                {"accumulate", c.sfc.accumulate},
                {"seed", c.sfc.seed}};
    j["strategy"] = grounding::mask_strategy_name(c.strategy);
    return j;
}

/// Parse a StoryConfig, collecting schema problems instead of throwing so
/// the CLI can list every offending field at once. Unset fields keep their
/// defaults; unknown fields are rejected.
inline StoryConfig story_config_from_json(const json& j, std::vector<std::string>& issues) {
    StoryConfig c = StoryConfig::defaults();
    if (!j.is_object()) {
        issues.push_back("config (must be a JSON object)");
        return c;
    }
    detail::reject_unknown_keys(j,
                                {"seed", "frames", "steps_per_frame", "layers", "subjects",
                                 "token_dim", "tokens_per_frame", "gca", "absvr", "sfc",
                                 "strategy"},
                                "config", issues);
    detail::read_field(j, "seed", c.seed, issues, "config");
    detail::read_field(j, "frames", c.frames, issues, "config");
    detail::read_field(j, "steps_per_frame", c.steps_per_frame, issues, "config");
    detail::read_field(j, "token_dim", c.token_dim, issues, "config");
    detail::read_field(j, "tokens_per_frame", c.tokens_per_frame, issues, "config");

    if (j.contains("layers")) {
        c.layers.clear();
        if (!j["layers"].is_array()) {
            issues.push_back("config.layers (must be an array)");
        } else {
            std::size_t i = 0;
            for (const auto& lj : j["layers"]) {
                const std::string where = "config.layers[" + std::to_string(i++) + "]";
                LayerSpec l;
                detail::reject_unknown_keys(lj, {"grid_w", "grid_h", "d_model", "heads"}, where,
                                            issues);
                detail::read_field(lj, "grid_w", l.grid_w, issues, where);
                detail::read_field(lj, "grid_h", l.grid_h, issues, where);
                detail::read_field(lj, "d_model", l.d_model, issues, where);
                detail::read_field(lj, "heads", l.heads, issues, where);
                c.layers.push_back(l);
            }
        }
    }
    if (j.contains("subjects")) {
        c.subjects.clear();
        if (!j["subjects"].is_array()) {
            issues.push_back("config.subjects (must be an array)");
        } else {
            std::size_t i = 0;
            for (const auto& sj : j["subjects"]) {
                const std::string where = "config.subjects[" + std::to_string(i++) + "]";
                SubjectSpec s;
                s.boxes.clear();
                detail::reject_unknown_keys(sj, {"boxes", "ip_tokens"}, where, issues);
                detail::read_field(sj, "ip_tokens", s.ip_tokens, issues, where);
                if (sj.contains("boxes") && sj["boxes"].is_array()) {
                    for (const auto& bj : sj["boxes"]) {
                        grounding::GroundingBox b;
                        detail::reject_unknown_keys(bj, {"x1", "y1", "x2", "y2"}, where + ".boxes",
                                                    issues);
                        detail::read_field(bj, "x1", b.x1, issues, where);
                        detail::read_field(bj, "y1", b.y1, issues, where);
                        detail::read_field(bj, "x2", b.x2, issues, where);
                        detail::read_field(bj, "y2", b.y2, issues, where);
                        s.boxes.push_back(b);
                    }
                } else {
                    issues.push_back(where + ".boxes (must be an array of boxes)");
                }
                c.subjects.push_back(std::move(s));
            }
        }
    }
    if (j.contains("gca")) {
        const auto& g = j["gca"];
        detail::reject_unknown_keys(g,
                                    {"r1", "r2", "sigma_min", "sigma_max", "rho", "fuse_weight",
                                     "bias_scale", "overlap_damping"},
                                    "config.gca", issues);
        detail::read_field(g, "r1", c.gca.r1, issues, "config.gca");
        detail::read_field(g, "r2", c.gca.r2, issues, "config.gca");
        detail::read_field(g, "sigma_min", c.gca.sigma_min, issues, "config.gca");
        detail::read_field(g, "sigma_max", c.gca.sigma_max, issues, "config.gca");
        detail::read_field(g, "rho", c.gca.rho, issues, "config.gca");
        detail::read_field(g, "fuse_weight", c.gca.fuse_weight, issues, "config.gca");
        detail::read_field(g, "bias_scale", c.gca.bias_scale, issues, "config.gca");
        detail::read_field(g, "overlap_damping", c.gca.overlap_damping, issues, "config.gca");
    }
    if (j.contains("absvr")) {
        const auto& a = j["absvr"];
        detail::reject_unknown_keys(a, {"tau", "gain_exp", "gain_sup", "zero_energy_epsilon"},
                                    "config.absvr", issues);
        detail::read_field(a, "tau", c.absvr.tau, issues, "config.absvr");
        detail::read_field(a, "gain_exp", c.absvr.gain_exp, issues, "config.absvr");
        detail::read_field(a, "gain_sup", c.absvr.gain_sup, issues, "config.absvr");
        detail::read_field(a, "zero_energy_epsilon", c.absvr.zero_energy_epsilon, issues,
                           "config.absvr");
    }
    if (j.contains("sfc")) {
        const auto& s = j["sfc"];
        detail::reject_unknown_keys(
            s, {"k_h", "delta_h", "l_max", "policy", "alpha", "mix_patch_threshold", "accumulate",
                "seed"},
            "config.sfc", issues);
        detail::read_field(s, "k_h", c.sfc.k_h, issues, "config.sfc");
        detail::read_field(s, "delta_h", c.sfc.delta_h, issues, "config.sfc");
        detail::read_field(s, "l_max", c.sfc.l_max, issues, "config.sfc");
        detail::read_field(s, "alpha", c.sfc.alpha, issues, "config.sfc");
        detail::read_field(s, "mix_patch_threshold", c.sfc.mix_patch_threshold, issues,
                           "config.sfc");
        detail::read_field(s, "accumulate", c.sfc.accumulate, issues, "config.sfc");
        detail::read_field(s, "seed", c.sfc.seed, issues, "config.sfc");
        if (s.contains("policy")) {
            try {
                c.sfc.policy = sfc::parse_cap_policy(s.at("policy").get<std::string>());
            } catch (const std::exception&) {
                issues.push_back("config.sfc.policy (want fifo|reservoir)");
            }
        }
    }
    if (j.contains("strategy")) {
        try {
            c.strategy = grounding::parse_mask_strategy(j.at("strategy").get<std::string>());
        } catch (const std::exception&) {
            issues.push_back("config.strategy (unknown strategy name)");
        }
    }
    if (!j.contains("sfc") || !j.at("sfc").contains("seed")) c.sfc.seed = c.seed;
    for (const auto& v : c.validate_issues()) issues.push_back("config." + v);
    return c;
}

}  // namespace nattn::pipeline
