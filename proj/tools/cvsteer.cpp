// cvsteer: command-line driver for the steering pipeline.

#include "cvsteer/error.hpp"
#include "cvsteer/experiments.hpp"
#include "cvsteer/pipeline.hpp"
#include "cvsteer/service.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

using namespace cvsteer;
using nlohmann::json;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::string target;
    std::optional<double> alpha;
    std::string weights;
    std::optional<int> layer;
    bool no_format_gate = false;
    bool no_norm_preserve = false;
    std::optional<double> temperature;
    bool no_steering = false;
    std::string prompt_style;
    bool centered = false;
    int trial = 0;
    bool quiet = false;
    std::string host = "127.0.0.1";
    int port = 8080;
    int threads = 4;
};

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::ConfigError, "cli", msg); }

std::vector<std::pair<std::string, double>> parse_weights(const std::string& text) {
    std::vector<std::pair<std::string, double>> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) config_error("--weights expects Style=weight pairs, got '" + item + "'");
        const auto name = item.substr(0, eq);
        double w = 0.0;
        try {
            std::size_t used = 0;
            w = std::stod(item.substr(eq + 1), &used);
            if (used != item.size() - eq - 1) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            config_error("--weights has a malformed weight in '" + item + "'");
        }
        if (!std::isfinite(w)) config_error("--weights must be finite");
        out.emplace_back(name, w);
    }
    if (out.empty()) config_error("--weights is empty");
    return out;
}

pipeline::RunConfig resolve(const Flags& f) {
    auto cfg = f.config.empty() ? pipeline::RunConfig{} : pipeline::load_config(f.config);
    if (f.seed) cfg.seed = *f.seed;
    if (f.out) cfg.out = *f.out;
    if (f.layer) cfg.layer = *f.layer;
    if (f.alpha) {
        cfg.steering.alpha = *f.alpha;
        cfg.experiments.fusion_alpha = *f.alpha;
    }
    if (f.temperature) cfg.steering.temperature = *f.temperature;
    if (f.no_format_gate) cfg.steering.format_gate = false;
    if (f.no_norm_preserve) cfg.steering.norm_preserve = false;
    if (f.centered) cfg.steering.centered = true;
    try {
        cfg.check();
    } catch (const Error& e) {
        if (e.code() == ErrorCode::ConfigError) throw;
        config_error(e.what());
    }
    return cfg;
}

pipeline::Workspace open(const Flags& f) {
    pipeline::Workspace ws(resolve(f));
    if (!f.quiet) ws.log = [](const std::string& m) { std::cerr << "[cvsteer] " << m << '\n'; };
    return ws;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, "cli", "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

void cmd_steer(const Flags& f) {
    auto ws = open(f);
    const auto ctx = ws.context();
    const auto& labels = ws.corpus().labels;
    std::vector<std::pair<std::string, double>> terms;
    if (!f.weights.empty()) terms = parse_weights(f.weights);
    else if (!f.target.empty()) terms = {{f.target, 1.0}};
    if (terms.empty() && !f.no_steering) config_error("steer needs --target, --weights or --no-steering");

    std::string prompt_name = f.prompt_style;
    if (prompt_name.empty())
        for (const auto& l : labels)
            if (terms.empty() || l.name != terms.front().first) {
                prompt_name = l.name;
                break;
            }
    const int prompt = ctx.style_index(prompt_name);
    Eigen::VectorXd direction;
    json target_echo = json::array();
    if (!f.no_steering) {
        std::vector<steer::FusionTerm> fterms;
        for (const auto& [name, w] : terms) {
            fterms.push_back({&ctx.vectors[static_cast<std::size_t>(ctx.style_index(name))], w});
            target_echo.push_back({{"style", name}, {"weight", w}});
        }
        direction = steer::fuse(fterms);
    }
    const auto seed = ctx.trial_seed(f.trial);
    const double alpha = ws.config().steering.alpha;
    steer::SteeringConfig cfg;
    cfg.alpha = alpha;
    cfg.direction = direction;
    cfg.layer = ws.steering_layer();
    cfg.format_gate = ctx.format_gate;
    cfg.norm_preserve = ctx.norm_preserve;
    const auto gen = steer::steered_generate(*ctx.ckpt, steer::make_prompt(ctx.styles[static_cast<std::size_t>(prompt)]),
                                             cfg, lm::Sampler{ctx.temperature, seed}, ctx.max_len);
    const auto piece = gen.piece_tokens();
    const Eigen::VectorXd p = ctx.classifier->predict_proba(piece);
    json probs = json::object();
    for (std::size_t i = 0; i < ctx.styles.size(); ++i) probs[ctx.styles[i].label.name] = p(static_cast<Eigen::Index>(i));
    const json out = {{"prompt_style", prompt_name},
                      {"targets", target_echo},
                      {"steered", !f.no_steering},
                      {"alpha", alpha},
                      {"layer", cfg.layer},
                      {"trial", f.trial},
                      {"seed", seed},
                      {"abc", piece.source_text},
                      {"parse_valid", abc::validate(piece).parse_valid},
                      {"was_gated_count", gen.gated_count()},
                      {"probabilities", probs}};
    std::filesystem::create_directories(ws.reports_dir());
    const auto tag = pipeline::fnv1a64(json{{"prompt", prompt_name}, {"targets", target_echo}, {"trial", f.trial},
                                             {"steered", !f.no_steering}}
                                           .dump());
    std::ostringstream name;
    name << "steer-" << prompt_name << '-' << std::hex << (tag & 0xffffffffULL) << ".json";
    std::ofstream(ws.reports_dir() / name.str(), std::ios::binary) << out.dump(2) << '\n';
    print(out);
}

void cmd_serve(const Flags& f) {
    service::Service svc;
    auto cfg = resolve(f);
    std::thread loader([&svc, cfg, quiet = f.quiet] {
        try {
            pipeline::Workspace ws(cfg);
            if (!quiet) ws.log = [](const std::string& m) { std::cerr << "[cvsteer] " << m << '\n'; };
            auto a = std::make_shared<service::Artifacts>(service::Artifacts{
                ws.checkpoint(), ws.context().styles, ws.vectors(), ws.classifier(), "", ws.steering_layer()});
            a->layer_report_json = read_file(ws.layer_report_path());
            svc.load(std::move(a));
            if (!quiet) std::cerr << "[cvsteer] artifacts loaded\n";
        } catch (const Error& e) {
            std::cerr << json{{"code", std::string(to_string(e.code()))}, {"module", e.module()}, {"message", e.what()}}.dump()
                      << '\n';
            std::exit(2);
        }
    });
    loader.detach();
    if (!f.quiet) std::cerr << "[cvsteer] listening on " << f.host << ':' << f.port << '\n';
    service::serve(svc, f.host, f.port, f.threads);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Composer-vector style steering on a toy ABC language model"};
    app.require_subcommand(1);
    Flags f;

    const auto common = [&f](CLI::App* sub) {
        sub->add_option("--config", f.config, "TOML run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", f.seed, "top-level seed (overrides the config)");
        sub->add_option("--out", f.out, "output root; the run directory is named by config hash");
        sub->add_option("--layer", f.layer, "steering layer (overrides the selected layer)");
        sub->add_option("--temperature", f.temperature, "sampling temperature");
        sub->add_flag("--no-format-gate", f.no_format_gate, "steer format tokens too");
        sub->add_flag("--no-norm-preserve", f.no_norm_preserve, "skip rescaling to the original norm");
        sub->add_flag("--centered", f.centered, "subtract the grand mean from composer vectors");
        sub->add_flag("-q,--quiet", f.quiet, "no progress messages");
    };

    auto* gen = app.add_subcommand("gen-corpus", "generate the labelled ABC corpus");
    auto* train = app.add_subcommand("train", "train the toy language model");
    auto* localize = app.add_subcommand("localize", "layer-wise probe and clustering report");
    auto* build = app.add_subcommand("build-vectors", "composer vector per style at the steering layer");
    auto* steer_cmd = app.add_subcommand("steer", "generate one steered piece");
    auto* sweep_alpha = app.add_subcommand("sweep-alpha", "continuous steering-coefficient sweep");
    auto* sweep_fusion = app.add_subcommand("sweep-fusion", "two-style fusion sweep");
    auto* eval = app.add_subcommand("eval", "single-style steering grid and format check");
    auto* project = app.add_subcommand("project", "2-D PCA projection of piece embeddings");
    auto* serve = app.add_subcommand("serve", "HTTP service");
    for (auto* s : {gen, train, localize, build, steer_cmd, sweep_alpha, sweep_fusion, eval, project, serve}) common(s);

    for (auto* s : {steer_cmd, sweep_alpha})
        s->add_option("--target", f.target, "target style");
    for (auto* s : {steer_cmd, sweep_fusion}) {
        s->add_option("--alpha", f.alpha, "steering coefficient");
        s->add_option("--weights", f.weights, "fusion weights, e.g. \"Alpha=0.7,Beta=0.3\"");
    }
    eval->add_option("--alpha", f.alpha, "coefficient for the format check");
    steer_cmd->add_option("--prompt-style", f.prompt_style, "prompt style (default: first non-target style)");
    steer_cmd->add_flag("--no-steering", f.no_steering, "plain sampling");
    steer_cmd->add_option("--trial", f.trial, "seed slot; equal slots give equal sampler draws")->check(CLI::NonNegativeNumber);
    serve->add_option("--host", f.host, "bind address");
    serve->add_option("--port", f.port, "port")->check(CLI::Range(1, 65535));
    serve->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) {
            auto ws = open(f);
            const auto& c = ws.corpus();
            ws.styles();
            print({{"run_dir", ws.dir().generic_string()}, {"entries", c.entries.size()}, {"styles", c.labels.size()}});
        } else if (train->parsed()) {
            auto ws = open(f);
            const auto& ck = ws.checkpoint();
            print({{"run_dir", ws.dir().generic_string()},
                   {"heldout_loss", ck.meta.heldout_loss},
                   {"unigram_loss", ck.meta.unigram_loss},
                   {"vocab_size", ck.config().vocab_size}});
        } else if (localize->parsed()) {
            auto ws = open(f);
            ws.layer_report();
            std::cout << read_file(ws.layer_report_path());
        } else if (build->parsed()) {
            auto ws = open(f);
            json files = json::array();
            for (const auto& v : ws.vectors())
                files.push_back({{"style", v.label.name}, {"norm", v.s.norm()}, {"n_sources", v.n_sources}});
            print({{"layer", ws.steering_layer()}, {"dir", ws.vectors_dir().generic_string()}, {"vectors", files}});
        } else if (steer_cmd->parsed()) {
            cmd_steer(f);
        } else if (sweep_alpha->parsed()) {
            auto ws = open(f);
            std::vector<std::string> targets;
            if (!f.target.empty()) targets.push_back(f.target);
            print(pipeline::write_alpha_sweeps(ws, targets));
        } else if (sweep_fusion->parsed()) {
            auto ws = open(f);
            std::vector<std::pair<std::string, std::string>> pairs;
            if (!f.weights.empty()) {
                const auto w = parse_weights(f.weights);
                if (w.size() != 2) config_error("sweep-fusion --weights names exactly two styles");
                pairs.emplace_back(w[0].first, w[1].first);
            }
            print(pipeline::write_fusion_sweeps(ws, pairs));
        } else if (eval->parsed()) {
            auto ws = open(f);
            print(pipeline::write_eval(ws));
        } else if (project->parsed()) {
            auto ws = open(f);
            pipeline::write_projection(ws);
            print({{"layer", ws.steering_layer()}, {"run_dir", ws.dir().generic_string()}});
        } else if (serve->parsed()) {
            cmd_serve(f);
        }
    } catch (const Error& e) {
        std::cerr << json{{"code", std::string(to_string(e.code()))}, {"module", e.module()}, {"message", e.what()}}.dump()
                  << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << json{{"code", "Internal"}, {"module", "cli"}, {"message", e.what()}}.dump() << '\n';
        return 3;
    }
    return 0;
}
