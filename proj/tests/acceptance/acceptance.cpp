// Acceptance run: one PASS/FAIL line per primary criterion.
//
// usage: acceptance <cli-binary> <work-dir> [--known-red N]...
//
// Criteria listed with --known-red still print their real verdict but do not
// change the exit status.

#include "cvsteer/abc.hpp"
#include "cvsteer/error.hpp"
#include "cvsteer/experiments.hpp"
#include "cvsteer/localization.hpp"
#include "cvsteer/pipeline.hpp"
#include "cvsteer/random.hpp"
#include "cvsteer/steering.hpp"
#include "cvsteer/style_corpus.hpp"
#include "cvsteer/tinylm.hpp"
#include "../oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

using namespace cvsteer;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Verdict grad_check() {
    lm::ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.context_len = 8;
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = lm::grad_check(cfg, 11);
    const double secs = seconds_since(t0);
    return {r.max_rel_error < 1e-3 && r.n_params <= 10000 && secs < 30.0,
            fmt("max rel err %.3g over %d samples, %zu params, %.2f s", r.max_rel_error, r.n_samples, r.n_params, secs)};
}

Verdict tokenizer_round_trip() {
    const auto reg = corpus::default_registry();
    int failures = 0;
    for (std::uint64_t i = 0; i < 10000; ++i) {
        const auto text = corpus::generate_piece(reg[i % reg.size()], 1000003 * i + 17);
        try {
            if (abc::detokenize(abc::tokenize(text)) != text) ++failures;
        } catch (const Error&) {
            ++failures;
        }
    }
    return {failures == 0, fmt("%d failures in 10000 pieces", failures)};
}

Verdict metrics_vs_brute_force() {
    Rng rng(2024);
    double worst = 0.0;
    int mismatched_flags = 0;
    for (int t = 0; t < 100; ++t) {
        const int K = 2 + static_cast<int>(rng.below(3));
        const auto inst = oracle::random_instance(rng, 6 + K, 50, K);
        const auto gap = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
        gap(loc::knn_purity(inst.X, inst.y, 5), oracle::knn_purity(inst.X, inst.y, 5));
        const auto dbi = loc::neg_davies_bouldin(inst.X, inst.y);
        const auto sep = loc::separation_ratio(inst.X, inst.y);
        if (dbi.degenerate || sep.degenerate) {
            ++mismatched_flags;
            continue;
        }
        gap(dbi.value, oracle::neg_davies_bouldin(inst.X, inst.y));
        gap(sep.value, oracle::separation_ratio(inst.X, inst.y));
        std::vector<double> x(inst.y.size()), y(inst.y.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = inst.X(static_cast<Eigen::Index>(i), 0);
            y[i] = static_cast<double>(inst.y[i]);
        }
        gap(exp::spearman(x, y).rho, oracle::spearman(x, y));
    }
    return {worst <= 1e-12 && mismatched_flags == 0,
            fmt("max |impl - brute force| = %.3g over 100 instances, %d unexpected degenerate", worst,
                mismatched_flags)};
}

Verdict localization(pipeline::Workspace& ws, double train_seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& rep = ws.layer_report();
    const double secs = train_seconds + seconds_since(t0);
    const int L = ws.checkpoint().config().n_layers;
    const auto& m = rep.layers.at(static_cast<std::size_t>(rep.selected_layer - 1));
    return {m.probe_accuracy >= 0.90 && 2 * rep.selected_layer > L && secs <= 600.0,
            fmt("l* = %d of %d, probe %.3f, train + localize %.1f s", rep.selected_layer, L, m.probe_accuracy, secs)};
}

Verdict norm_and_identity(pipeline::Workspace& ws) {
    Rng rng(55);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const int d = 1 + static_cast<int>(rng.below(128));
        Eigen::VectorXd h(d), s(d);
        const double hs = std::exp(2.0 * rng.normal()), ss = std::exp(2.0 * rng.normal());
        for (int j = 0; j < d; ++j) {
            h(j) = hs * rng.normal();
            s(j) = ss * rng.normal();
        }
        const double alpha = 4.0 * rng.uniform();
        const auto out = steer::steer_hidden(h, s, alpha, true);
        worst = std::max(worst, std::abs(out.norm() - h.norm()) / h.norm());
    }
    const auto ctx = ws.context();
    int differing = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto& style = ctx.styles[seed % ctx.styles.size()];
        const auto prompt = steer::make_prompt(style);
        const auto& v = ctx.vectors[(seed + 1) % ctx.vectors.size()];
        const lm::Sampler sampler{ctx.temperature, seed};
        const auto steered = steer::steered_generate(*ctx.ckpt, prompt, steer::make_config(v, 0.0), sampler, ctx.max_len);
        const auto plain =
            lm::generate_ids(*ctx.ckpt, steer::prompt_ids(ctx.ckpt->vocab(), prompt), ctx.max_len, sampler);
        differing += steered.ids != plain;
    }
    return {worst < 1e-6 && differing == 0,
            fmt("max relative norm deviation %.3g, %d of 100 alpha=0 runs differ", worst, differing)};
}

Verdict single_steer(pipeline::Workspace& ws) {
    const auto ctx = ws.context();
    const auto t0 = std::chrono::steady_clock::now();
    const double alphas[] = {0.5};
    const auto r = exp::run_single_steer(ctx, alphas);
    const double secs = seconds_since(t0);
    int positive = 0, cells = 0;
    std::ostringstream gains;
    for (const auto& c : r.cells) {
        if (c.prompt_style == c.target_style) continue;
        ++cells;
        positive += c.improvement[0] > 0.0;
        gains << ' ' << c.prompt_style[0] << c.target_style[0] << '=' << fmt("%+.3f", c.improvement[0]);
    }
    return {positive * 10 >= cells * 8 && secs < 900.0,
            fmt("%d of %d cells improve at alpha 0.5, %d seeds, %.0f s;", positive, cells, ctx.seeds_per_cell, secs) +
                gains.str()};
}

Verdict alpha_sweep(pipeline::Workspace& ws) {
    const auto ctx = ws.context();
    auto x = ws.config().experiments;
    x.sweep_start = 0.0;
    x.sweep_stop = 0.8;
    x.sweep_step = 0.05;
    const auto grid = x.sweep_grid();
    bool ok = grid.size() == 17;
    std::string detail;
    for (std::size_t t = 0; t < 3; ++t) {
        const auto name = ctx.styles[t].label.name;
        const auto s = exp::run_alpha_sweep(ctx, name, grid);
        ok = ok && s.mean_rho > 0.5;
        detail += fmt("%s rho %.3f; ", name.c_str(), s.mean_rho);
    }
    return {ok, detail + "grid 0..0.8 step 0.05"};
}

Verdict fusion(pipeline::Workspace& ws) {
    const auto ctx = ws.context();
    const auto& x = ws.config().experiments;
    const auto pairs = exp::most_distinct_pairs(ctx.vectors, 3);
    bool ok = true;
    std::string detail;
    for (const auto& [a, b] : pairs) {
        const auto f = exp::run_fusion_sweep(ctx, a, b, x.fusion_ratios, 0.5);
        ok = ok && f.slope1 > 0.0 && f.slope2 < 0.0;
        detail += fmt("%s-%s slopes %+.4f/%+.4f; ", a.c_str(), b.c_str(), f.slope1, f.slope2);
    }
    return {ok, detail};
}

Verdict format_gate(pipeline::Workspace& ws) {
    const auto ctx = ws.context();
    const auto f = exp::run_format_check(ctx, 0.5);
    return {f.gate_on_rate >= f.gate_off_rate && std::abs(f.gate_on_rate - f.unsteered_rate) <= 0.05,
            fmt("parse_valid unsteered %.3f, gate on %.3f, gate off %.3f", f.unsteered_rate, f.gate_on_rate,
                f.gate_off_rate)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Verdict cli_rerun(const std::string& cli, const fs::path& work) {
    const fs::path cfg = work / "rerun.toml";
    std::ofstream(cfg) << "seed = 5\n"
                          "[corpus]\nn_per_style = 24\n"
                          "[model]\nn_layers = 2\nd_model = 32\nsteps = 30\n"
                          "[experiments]\nseeds_per_cell = 2\nalphas = [0.5]\nsweep_step = 0.25\n"
                          "fusion_ratios = [0.1, 0.9]\n"
                          "[classifier]\nepochs = 100\n";
    const char* steps[] = {"gen-corpus", "train", "localize", "build-vectors", "sweep-alpha", "sweep-fusion", "eval",
                           "project"};
    // Both runs use the same output path, so printed paths match too; the
    // first run is moved aside before the second starts.
    const auto out = work / "rerun";
    std::vector<fs::path> dirs;
    for (const char* run : {"rerun-a", "rerun-b"}) {
        const auto kept = work / run;
        fs::remove_all(out);
        fs::remove_all(kept);
        fs::create_directories(out);
        for (const char* step : steps) {
            const auto cmd = "\"" + cli + "\" " + step + " -q --config \"" + cfg.string() + "\" --out \"" +
                             out.string() + "\" > \"" + (out / (std::string("stdout-") + step)).string() + "\"";
            if (std::system(cmd.c_str()) != 0) return {false, std::string("cli step failed: ") + step};
        }
        fs::rename(out, kept);
        dirs.push_back(kept);
    }
    int files = 0, differ = 0;
    for (const auto& e : fs::recursive_directory_iterator(dirs[0])) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dirs[0]);
        ++files;
        if (!fs::exists(dirs[1] / rel) || slurp(e.path()) != slurp(dirs[1] / rel)) ++differ;
    }
    return {files > std::size(steps) && differ == 0,
            fmt("%d files compared (run directory and stdout of %zu subcommands), %d differ", files, std::size(steps),
                differ)};
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 3) {
        std::cerr << "usage: acceptance <cli-binary> <work-dir> [--known-red N]...\n";
        return 2;
    }
    const std::string cli = argv[1];
    const fs::path work = argv[2];
    std::set<int> known_red;
    for (int i = 3; i + 1 < argc; i += 2)
        if (std::string(argv[i]) == "--known-red") known_red.insert(std::atoi(argv[i + 1]));
    fs::create_directories(work);

    // A fresh run directory so training time is measured on every run.
    auto cfg = pipeline::RunConfig{};
    cfg.out = work / "default";
    fs::remove_all(cfg.out);
    pipeline::Workspace ws(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    ws.checkpoint();
    const double train_seconds = seconds_since(t0);

    const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
        {1, grad_check},
        {2, tokenizer_round_trip},
        {3, metrics_vs_brute_force},
        {4, [&] { return localization(ws, train_seconds); }},
        {5, [&] { return norm_and_identity(ws); }},
        {6, [&] { return single_steer(ws); }},
        {7, [&] { return alpha_sweep(ws); }},
        {8, [&] { return fusion(ws); }},
        {9, [&] { return format_gate(ws); }},
        {10, [&] { return cli_rerun(cli, work); }},
    };
    int unexpected = 0;
    for (const auto& [id, run] : criteria) {
        Verdict v;
        try {
            v = run();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        const bool excused = !v.pass && known_red.contains(id);
        if (!v.pass && !excused) ++unexpected;
        std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail
                  << (excused ? "  [known red, see README]" : "") << std::endl;
    }
    return unexpected == 0 ? 0 : 1;
}
