// Command-line front end: subject-mask rendering, spectrum analysis,
// token-block reweighting, story simulation, and strategy ablation.
//
// Exit codes: 0 success, 2 usage/validation problem, 1 internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nattn/absvr.hpp"
#include "nattn/errors.hpp"
#include "nattn/grounding.hpp"
#include "nattn/io.hpp"
#include "nattn/pipeline.hpp"
#include "nattn/story_json.hpp"
#include "nattn/svd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

void require_input_file(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("input file not found: " + path);
}

json load_json_file(const std::string& path) {
    require_input_file(path);
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("malformed JSON in " + path + ": " + e.what());
    }
}

/// Apply a `--set a.b.c=value` override onto a JSON document. Values parse
/// as JSON literals when possible, otherwise as strings.
void apply_override(json& doc, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override must look like key=value: " + kv);
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw UsageError("bad override path: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

nattn::grounding::PatchGrid parse_grid(const std::string& spec) {
    const auto x = spec.find('x');
    if (x == std::string::npos) throw UsageError("grid must look like WxH: " + spec);
    try {
        const auto w = static_cast<std::size_t>(std::stoul(spec.substr(0, x)));
        const auto h = static_cast<std::size_t>(std::stoul(spec.substr(x + 1)));
        if (w == 0 || h == 0) throw UsageError("grid sides must be positive: " + spec);
        return {w, h};
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("grid must look like WxH: " + spec);
    }
}

std::vector<nattn::grounding::GroundingBox> load_boxes(const std::string& path) {
    const json j = load_json_file(path);
    if (!j.is_array() || j.empty()) throw UsageError("boxes JSON must be a non-empty array: " + path);
    std::vector<nattn::grounding::GroundingBox> boxes;
    for (const auto& bj : j) {
        if (!bj.is_object() || !bj.contains("x1") || !bj.contains("y1") || !bj.contains("x2") ||
            !bj.contains("y2"))
            throw UsageError("each box needs x1,y1,x2,y2: " + path);
        nattn::grounding::GroundingBox b{bj.at("x1").get<double>(), bj.at("y1").get<double>(),
                                         bj.at("x2").get<double>(), bj.at("y2").get<double>()};
        try {
            b.validate();
        } catch (const std::exception& e) {
            throw UsageError(std::string("invalid box: ") + e.what());
        }
        boxes.push_back(b);
    }
    return boxes;
}

nattn::pipeline::StoryConfig load_story_config(const std::string& path,
                                               const std::vector<std::string>& overrides,
                                               std::optional<uint64_t> seed_flag) {
    json j = load_json_file(path);
    for (const auto& kv : overrides) apply_override(j, kv);
    if (seed_flag) {
        j["seed"] = *seed_flag;
        if (j.contains("sfc") && j["sfc"].is_object()) j["sfc"].erase("seed");
    } else if (!j.contains("seed")) {
        if (const char* env = std::getenv("NARRATIVE_ATTN_SEED")) {
            try {
                j["seed"] = static_cast<uint64_t>(std::stoull(env));
            } catch (const std::exception&) {
                throw UsageError("NARRATIVE_ATTN_SEED is not an integer");
            }
        }
    }
    std::vector<std::string> issues;
    auto cfg = nattn::pipeline::story_config_from_json(j, issues);
    if (!issues.empty()) {
        std::string msg = "invalid config:";
        for (const auto& s : issues) msg += "\n  " + s;
        throw UsageError(msg);
    }
    return cfg;
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw nattn::IoError("cannot create output directory: " + dir);
}

int cmd_mask(const std::string& grid_spec, const std::string& boxes_path, const std::string& out,
             const std::string& strategy_name, double p, const std::vector<std::string>& sets) {
    const auto grid = parse_grid(grid_spec);
    const auto boxes = load_boxes(boxes_path);
    const auto strategy = nattn::grounding::parse_mask_strategy(strategy_name);

    // Route --set through the config schema so mask params stay validated.
    json doc = nattn::pipeline::to_json(nattn::pipeline::StoryConfig::defaults());
    for (const auto& kv : sets) apply_override(doc, kv);
    std::vector<std::string> issues;
    const auto cfg = nattn::pipeline::story_config_from_json(doc, issues);
    if (!issues.empty()) {
        std::string msg = "invalid override:";
        for (const auto& s : issues) msg += "\n  " + s;
        throw UsageError(msg);
    }

    ensure_out_dir(out);
    std::vector<double> strengths(boxes.size(), p);
    const auto masks = nattn::grounding::mask_variant(strategy, boxes, grid, cfg.gca, &strengths);

    std::vector<double> composite(grid.patches(), 0.0);
    for (std::size_t i = 0; i < masks.size(); ++i) {
        for (std::size_t j = 0; j < composite.size(); ++j)
            composite[j] = std::max(composite[j], masks[i].values[j]);
        const std::string path = out + "/subject_" + std::to_string(i) + ".pgm";
        nattn::write_pgm(masks[i].values, grid.width, grid.height, path);
        const double overlap = nattn::grounding::overlap_fraction(i, boxes);
        const auto radii = nattn::grounding::radii_from_strength(p, boxes[i], cfg.gca, overlap);
        std::cout << "subject " << i << ": centers (" << masks[i].center1.first << ","
                  << masks[i].center1.second << ") (" << masks[i].center2.first << ","
                  << masks[i].center2.second << ")"
                  << " p=" << p << " overlap=" << nattn::format_double(overlap) << " s_in=("
                  << nattn::format_double(radii.x_in) << "," << nattn::format_double(radii.y_in)
                  << ") s_out=(" << nattn::format_double(radii.x_out) << ","
                  << nattn::format_double(radii.y_out) << ") -> " << path << "\n";
    }
    nattn::write_pgm(composite, grid.width, grid.height, out + "/composite.pgm");
    std::cout << "composite -> " << out << "/composite.pgm\n";
    return kExitOk;
}

int cmd_spectrum(const std::string& input, double tau, const std::string& out_csv) {
    require_input_file(input);
    const auto m = nattn::read_matrix_csv(input);
    const auto svd = nattn::thin_svd(m);
    const auto k = nattn::absvr::select_rank(svd.sigma, tau);
    const auto energy = nattn::absvr::cumulative_energy(svd.sigma);
    const auto knees = nattn::absvr::detect_knees(svd.sigma);

    std::ofstream out(out_csv, std::ios::binary);
    if (!out) throw nattn::IoError("cannot open for write: " + out_csv);
    out << "i,sigma,energy_cum,is_knee,k_selected\n";
    for (std::size_t i = 0; i < svd.sigma.size(); ++i) {
        const bool knee = std::find(knees.begin(), knees.end(), i) != knees.end();
        out << i << "," << nattn::format_double(svd.sigma[i]) << ","
            << nattn::format_double(energy[i]) << "," << (knee ? 1 : 0) << "," << k << "\n";
    }
    std::cout << "k=" << k << " knees=" << nattn::pipeline::format_knees(knees) << " -> "
              << out_csv << "\n";
    return kExitOk;
}

int cmd_svr(const std::string& input, const std::vector<std::size_t>& boundaries,
            std::size_t current, double tau, double gain_exp, double gain_sup,
            const std::string& out) {
    require_input_file(input);
    const auto tokens = nattn::read_matrix_csv(input);
    auto segments = nattn::absvr::segment_frames(tokens, boundaries, current);
    nattn::absvr::AbsvrParams params;
    params.tau = tau;
    params.gain_exp = gain_exp;
    params.gain_sup = gain_sup;
    const auto report = nattn::absvr::absvr_apply(segments, params);

    ensure_out_dir(out);
    nattn::Matrix reshaped(tokens.rows(), tokens.cols());
    std::size_t col0 = 0;
    for (const auto& block : segments.frames) {
        for (std::size_t r = 0; r < block.rows(); ++r)
            for (std::size_t c = 0; c < block.cols(); ++c) reshaped(r, col0 + c) = block(r, c);
        col0 += block.cols();
    }
    nattn::write_matrix_csv(reshaped, out + "/svr_tokens.csv");

    std::ofstream spec(out + "/svr_spectrum.csv", std::ios::binary);
    if (!spec) throw nattn::IoError("cannot open for write: " + out + "/svr_spectrum.csv");
    spec << "i,sigma,energy_cum,is_knee,k_selected\n";
    for (std::size_t i = 0; i < report.sigma.size(); ++i) {
        const bool knee =
            std::find(report.knees.begin(), report.knees.end(), i) != report.knees.end();
        spec << i << "," << nattn::format_double(report.sigma[i]) << ","
             << nattn::format_double(report.cumulative_energy[i]) << "," << (knee ? 1 : 0) << ","
             << report.k << "\n";
    }
    std::cout << "k=" << report.k << " tokens -> " << out << "/svr_tokens.csv\n";
    return kExitOk;
}

int cmd_simulate(const std::string& config_path, const std::string& out, bool no_timing,
                 const std::vector<std::string>& sets, std::optional<uint64_t> seed,
                 const std::string& strategy_name) {
    auto cfg = load_story_config(config_path, sets, seed);
    if (!strategy_name.empty()) cfg.strategy = nattn::grounding::parse_mask_strategy(strategy_name);
    ensure_out_dir(out);
    const auto result = nattn::pipeline::run_story(cfg, out, no_timing);
    for (const auto& f : result.frames)
        std::cout << "frame " << f.frame << ": entropy=" << nattn::format_double(f.mean_entropy)
                  << " history_mass=" << nattn::format_double(f.mean_history_mass)
                  << " occupancy=" << f.cache_occupancy << " k=" << f.k
                  << (no_timing ? std::string()
                                : " ms=" + nattn::format_double(f.wall_ms))
                  << "\n";
    std::cout << "artifacts -> " << out << "\n";
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& strategies_csv,
               const std::string& out, const std::vector<std::string>& sets,
               std::optional<uint64_t> seed) {
    auto cfg = load_story_config(config_path, sets, seed);
    std::vector<nattn::grounding::MaskStrategy> strategies;
    std::string cur;
    for (char c : strategies_csv + ",") {
        if (c == ',') {
            if (!cur.empty()) strategies.push_back(nattn::grounding::parse_mask_strategy(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    const auto rows = nattn::pipeline::ablation_matrix(cfg, strategies);
    ensure_out_dir(out);
    nattn::pipeline::write_ablation_csv(rows, out + "/ablation.csv");
    for (const auto& r : rows)
        std::cout << r.strategy << ": out_of_box_mass=" << nattn::format_double(r.out_of_box_mass)
                  << " overlap_coactivation=" << nattn::format_double(r.overlap_coactivation)
                  << "\n";
    std::cout << "ablation -> " << out << "/ablation.csv\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Inference-time attention toolkit: Gaussian-centered masks, "
                 "spectral token reweighting, and a selective-forgetting KV cache "
                 "driven by a deterministic story simulator"};
    app.require_subcommand(1);

    // mask
    auto* mask = app.add_subcommand("mask", "Render subject masks for a box list");
    std::string mask_grid = "64x64", mask_boxes, mask_out = "out", mask_strategy = "gca";
    double mask_p = 0.5;
    std::vector<std::string> mask_sets;
    mask->add_option("--grid", mask_grid, "patch grid, WxH");
    mask->add_option("--boxes", mask_boxes, "grounding box JSON")->required();
    mask->add_option("--out", mask_out, "output directory");
    mask->add_option("--strategy", mask_strategy, "mask strategy name");
    mask->add_option("--p", mask_p, "influence strength in [0,1]");
    mask->add_option("--set", mask_sets, "config override key=value (gca.* fields)");

    // spectrum
    auto* spectrum = app.add_subcommand("spectrum", "Singular-value energy report of a matrix CSV");
    std::string spec_input, spec_out = "spectrum.csv";
    double spec_tau = 0.85;
    spectrum->add_option("--input", spec_input, "matrix CSV")->required();
    spectrum->add_option("--tau", spec_tau, "cumulative-energy threshold in (0,1]");
    spectrum->add_option("--out", spec_out, "output CSV path");

    // svr
    auto* svr = app.add_subcommand("svr", "Trunk-and-notch reweighting of frame token blocks");
    std::string svr_input, svr_out = "out";
    std::vector<std::size_t> svr_boundaries;
    std::size_t svr_current = 0;
    double svr_tau = 0.85, svr_gain_exp = 1.1, svr_gain_sup = 0.9;
    svr->add_option("--input", svr_input, "token matrix CSV (features x tokens)")->required();
    svr->add_option("--boundaries", svr_boundaries, "column cut points")->delimiter(',');
    svr->add_option("--current", svr_current, "index of the expressed block");
    svr->add_option("--tau", svr_tau, "cumulative-energy threshold in (0,1]");
    svr->add_option("--gain-exp", svr_gain_exp, "trunk gain (>= 1)");
    svr->add_option("--gain-sup", svr_gain_sup, "suppressed-block gain in [0,1]");
    svr->add_option("--out", svr_out, "output directory");

    // simulate
    auto* simulate = app.add_subcommand("simulate", "Run the deterministic story simulator");
    std::string sim_config, sim_out = "out", sim_strategy;
    bool sim_no_timing = false;
    std::vector<std::string> sim_sets;
    std::optional<uint64_t> sim_seed;
    simulate->add_option("--config", sim_config, "story config JSON")->required();
    simulate->add_option("--out", sim_out, "output directory");
    simulate->add_option("--seed", sim_seed, "seed override (else config, else NARRATIVE_ATTN_SEED)");
    simulate->add_option("--strategy", sim_strategy, "mask strategy override");
    simulate->add_option("--set", sim_sets, "config override key=value");
    simulate->add_flag("--no-timing", sim_no_timing, "zero the ms column for byte-stable replays");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Compare mask strategies under a shared seed");
    std::string abl_config, abl_out = "out", abl_strategies;
    std::vector<std::string> abl_sets;
    std::optional<uint64_t> abl_seed;
    ablate->add_option("--config", abl_config, "story config JSON")->required();
    ablate->add_option("--strategies", abl_strategies, "comma-separated strategy names")->required();
    ablate->add_option("--out", abl_out, "output directory");
    ablate->add_option("--seed", abl_seed, "seed override");
    ablate->add_option("--set", abl_sets, "config override key=value");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (mask->parsed())
            return cmd_mask(mask_grid, mask_boxes, mask_out, mask_strategy, mask_p, mask_sets);
        if (spectrum->parsed()) return cmd_spectrum(spec_input, spec_tau, spec_out);
        if (svr->parsed())
            return cmd_svr(svr_input, svr_boundaries, svr_current, svr_tau, svr_gain_exp,
                           svr_gain_sup, svr_out);
        if (simulate->parsed())
            return cmd_simulate(sim_config, sim_out, sim_no_timing, sim_sets, sim_seed,
                                sim_strategy);
        if (ablate->parsed())
            return cmd_ablate(abl_config, abl_strategies, abl_out, abl_sets, abl_seed);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const nattn::ConfigurationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const nattn::InvalidInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const nattn::InvalidParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const nattn::DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitUsage;
}
