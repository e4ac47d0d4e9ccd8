#include "cvsteer/pipeline.hpp"

#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace cvsteer::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModule = "cli";

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::ConfigError, kModule, msg); }

json node_to_json(const toml::node& node, const std::string& where) {
    if (const auto* t = node.as_table()) {
        json j = json::object();
        for (const auto& [k, v] : *t) j[std::string(k.str())] = node_to_json(v, where + "." + std::string(k.str()));
        return j;
    }
    if (const auto* a = node.as_array()) {
        json j = json::array();
        for (const auto& v : *a) j.push_back(node_to_json(v, where));
        return j;
    }
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    if (const auto* v = node.as_string()) return v->get();
    config_error(where + ": unsupported value type");
}

void only_keys(const json& section, const std::string& name, const std::set<std::string>& allowed) {
    if (!section.is_object()) config_error(name + " must be a table");
    for (const auto& [k, v] : section.items())
        if (!allowed.contains(k)) config_error("unknown key '" + k + "' in " + (name.empty() ? "top level" : "[" + name + "]"));
}

template <typename T>
void read(const json& section, const std::string& section_name, const char* key, T& out) {
    if (!section.contains(key)) return;
    const auto& v = section.at(key);
    const std::string field = section_name.empty() ? key : section_name + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) config_error(field + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) config_error(field + " must be an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) config_error(field + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) config_error(field + " must be a string");
    }
    try {
        out = v.get<T>();
    } catch (const json::exception&) {
        config_error(field + " has the wrong type");
    }
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw Error(ErrorCode::IoFailure, kModule, "cannot create " + p.string() + ": " + ec.message());
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + path.string());
}

} // namespace

std::vector<double> ExperimentSettings::sweep_grid() const {
    const auto n = std::llround((sweep_stop - sweep_start) / sweep_step);
    std::vector<double> out;
    for (long long i = 0; i <= n; ++i)
        out.push_back(static_cast<double>(std::llround((sweep_start + static_cast<double>(i) * sweep_step) * 1e12)) / 1e12);
    return out;
}

void RunConfig::check() const {
    auto m = model;
    m.vocab_size = std::max(m.vocab_size, 2); // fixed by the corpus at training time
    m.check();
    if (corpus.n_per_style < 4) config_error("corpus.n_per_style must be at least 4");
    if (layer < 0 || layer > model.n_layers) config_error("localization.layer must be in 0..n_layers");
    if (!std::isfinite(steering.alpha)) config_error("steering.alpha must be finite");
    if (!(steering.temperature >= 0.0) || !std::isfinite(steering.temperature))
        config_error("steering.temperature must be a finite value >= 0");
    if (steering.max_len < 2 || steering.max_len > model.context_len)
        config_error("steering.max_len must be in 2..model.context_len");
    if (experiments.seeds_per_cell < 1) config_error("experiments.seeds_per_cell must be positive");
    for (double a : experiments.alphas)
        if (!std::isfinite(a)) config_error("experiments.alphas must be finite");
    if (!(experiments.sweep_step > 0.0) || !(experiments.sweep_stop >= experiments.sweep_start))
        config_error("experiments sweep needs step > 0 and stop >= start");
    if (experiments.fusion_ratios.empty()) config_error("experiments.fusion_ratios is empty");
    for (double w : experiments.fusion_ratios)
        if (!std::isfinite(w)) config_error("experiments.fusion_ratios must be finite");
    for (const auto& [a, b] : experiments.fusion_pairs)
        if (a == b) config_error("experiments.fusion_pairs needs two distinct styles per pair");
    if (experiments.fusion_pair_count < 1) config_error("experiments.fusion_pair_count must be positive");
    if (!std::isfinite(experiments.fusion_alpha)) config_error("experiments.fusion_alpha must be finite");
    if (!(classifier.l2 >= 0.0) || classifier.epochs < 1) config_error("classifier needs l2 >= 0 and epochs >= 1");
}

RunConfig parse_config(std::string_view toml_text) {
    json root;
    try {
        root = node_to_json(toml::parse(toml_text), "");
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << "TOML parse error at line " << e.source().begin.line << ": " << e.description();
        config_error(msg.str());
    }
    only_keys(root, "", {"seed", "out", "corpus", "model", "localization", "steering", "experiments", "classifier"});
    RunConfig cfg;
    if (root.contains("seed")) {
        std::int64_t s = 0;
        read(root, "", "seed", s);
        if (s < 0) config_error("seed must be non-negative");
        cfg.seed = static_cast<std::uint64_t>(s);
    }
    if (root.contains("out")) {
        std::string out;
        read(root, "", "out", out);
        cfg.out = out;
    }
    const json empty = json::object();
    const auto section = [&](const char* name) -> const json& { return root.contains(name) ? root.at(name) : empty; };

    const auto& c = section("corpus");
    only_keys(c, "corpus", {"n_per_style", "registry"});
    read(c, "corpus", "n_per_style", cfg.corpus.n_per_style);
    read(c, "corpus", "registry", cfg.corpus.registry);

    const auto& m = section("model");
    {
        json defaults;
        lm::to_json(defaults, cfg.model);
        std::set<std::string> keys;
        for (const auto& [k, v] : defaults.items())
            if (k != "vocab_size") keys.insert(k);
        only_keys(m, "model", keys);
        for (const auto& [k, v] : m.items()) {
            if (defaults.at(k).is_number_integer() && !v.is_number_integer())
                config_error("model." + k + " must be an integer");
            if (!v.is_number()) config_error("model." + k + " must be a number");
            defaults[k] = v;
        }
        lm::from_json(defaults, cfg.model);
    }

    const auto& l = section("localization");
    only_keys(l, "localization", {"layer"});
    read(l, "localization", "layer", cfg.layer);

    const auto& s = section("steering");
    only_keys(s, "steering", {"alpha", "temperature", "max_len", "format_gate", "norm_preserve", "centered"});
    read(s, "steering", "alpha", cfg.steering.alpha);
    read(s, "steering", "temperature", cfg.steering.temperature);
    read(s, "steering", "max_len", cfg.steering.max_len);
    read(s, "steering", "format_gate", cfg.steering.format_gate);
    read(s, "steering", "norm_preserve", cfg.steering.norm_preserve);
    read(s, "steering", "centered", cfg.steering.centered);

    const auto& e = section("experiments");
    only_keys(e, "experiments",
              {"seeds_per_cell", "alphas", "sweep_start", "sweep_stop", "sweep_step", "sweep_targets", "fusion_pairs",
               "fusion_pair_count", "fusion_ratios", "fusion_alpha"});
    auto& x = cfg.experiments;
    read(e, "experiments", "seeds_per_cell", x.seeds_per_cell);
    read(e, "experiments", "alphas", x.alphas);
    read(e, "experiments", "sweep_start", x.sweep_start);
    read(e, "experiments", "sweep_stop", x.sweep_stop);
    read(e, "experiments", "sweep_step", x.sweep_step);
    read(e, "experiments", "sweep_targets", x.sweep_targets);
    if (e.contains("fusion_pairs")) {
        x.fusion_pairs.clear();
        const auto& pairs = e.at("fusion_pairs");
        if (!pairs.is_array()) config_error("experiments.fusion_pairs must be an array of [style, style]");
        for (const auto& p : pairs) {
            if (!p.is_array() || p.size() != 2 || !p[0].is_string() || !p[1].is_string())
                config_error("experiments.fusion_pairs must be an array of [style, style]");
            x.fusion_pairs.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
        }
    }
    read(e, "experiments", "fusion_pair_count", x.fusion_pair_count);
    read(e, "experiments", "fusion_ratios", x.fusion_ratios);
    read(e, "experiments", "fusion_alpha", x.fusion_alpha);

    const auto& k = section("classifier");
    only_keys(k, "classifier", {"l2", "epochs"});
    read(k, "classifier", "l2", cfg.classifier.l2);
    read(k, "classifier", "epochs", cfg.classifier.epochs);

    try {
        cfg.check();
    } catch (const Error& err) {
        if (err.code() == ErrorCode::ConfigError) throw;
        config_error(err.what());
    }
    return cfg;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) config_error("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

json to_json(const RunConfig& cfg) {
    json model;
    lm::to_json(model, cfg.model);
    model.erase("vocab_size");
    json pairs = json::array();
    for (const auto& [a, b] : cfg.experiments.fusion_pairs) pairs.push_back({a, b});
    const auto& x = cfg.experiments;
    return {{"seed", cfg.seed},
            {"out", cfg.out.generic_string()},
            {"corpus", {{"n_per_style", cfg.corpus.n_per_style}, {"registry", cfg.corpus.registry}}},
            {"model", model},
            {"localization", {{"layer", cfg.layer}}},
            {"steering",
             {{"alpha", cfg.steering.alpha},
              {"temperature", cfg.steering.temperature},
              {"max_len", cfg.steering.max_len},
              {"format_gate", cfg.steering.format_gate},
              {"norm_preserve", cfg.steering.norm_preserve},
              {"centered", cfg.steering.centered}}},
            {"experiments",
             {{"seeds_per_cell", x.seeds_per_cell},
              {"alphas", x.alphas},
              {"sweep_start", x.sweep_start},
              {"sweep_stop", x.sweep_stop},
              {"sweep_step", x.sweep_step},
              {"sweep_targets", x.sweep_targets},
              {"fusion_pairs", pairs},
              {"fusion_pair_count", x.fusion_pair_count},
              {"fusion_ratios", x.fusion_ratios},
              {"fusion_alpha", x.fusion_alpha}}},
            {"classifier", {{"l2", cfg.classifier.l2}, {"epochs", cfg.classifier.epochs}}}};
}

std::uint64_t stream_seed(const RunConfig& cfg, Stream s) { return derive_seed(cfg.seed, static_cast<std::uint64_t>(s)); }

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string artifact_hash(const RunConfig& cfg) {
    const auto j = to_json(cfg);
    const json key = {{"seed", j["seed"]}, {"corpus", j["corpus"]}, {"model", j["model"]}, {"classifier", j["classifier"]}};
    return hex64(fnv1a64(key.dump()));
}

std::string report_hash(const RunConfig& cfg) {
    const auto j = to_json(cfg);
    const json key = {{"localization", j["localization"]}, {"steering", j["steering"]}, {"experiments", j["experiments"]}};
    return hex64(fnv1a64(key.dump())).substr(0, 8);
}

Workspace::Workspace(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.check();
    dir_ = cfg_.out / ("run-" + artifact_hash(cfg_));
    ensure_dir(dir_);
    auto j = to_json(cfg_);
    j.erase("out");
    j.erase("localization");
    j.erase("steering");
    j.erase("experiments");
    write_json(j, dir_ / "config.json");
}

fs::path Workspace::reports_dir() const { return dir_ / ("reports-" + report_hash(cfg_)); }

void Workspace::note(const std::string& msg) const {
    if (log) log(msg);
}

const std::vector<corpus::StyleSpec>& Workspace::styles() {
    if (!styles_) {
        if (!fs::exists(styles_path())) {
            const auto specs = cfg_.corpus.registry.empty() ? corpus::default_registry()
                                                            : corpus::load_registry(cfg_.corpus.registry);
            corpus::save_registry(specs, styles_path());
        }
        styles_ = corpus::load_registry(styles_path());
    }
    return *styles_;
}

const corpus::StyleCorpus& Workspace::corpus() {
    if (!corpus_) {
        if (!fs::exists(corpus_path())) {
            note("generating corpus");
            corpus::save_corpus(corpus::build_corpus(styles(), cfg_.corpus.n_per_style, stream_seed(cfg_, Stream::Corpus)),
                                corpus_path());
        }
        corpus_ = corpus::load_corpus(corpus_path());
    }
    return *corpus_;
}

const lm::Checkpoint& Workspace::checkpoint() {
    if (!ckpt_) {
        if (!fs::exists(checkpoint_path())) {
            note("training model");
            lm::TrainOptions opts;
            if (log)
                opts.on_step = [this](int step, double loss) {
                    if (step % 50 == 0) note("step " + std::to_string(step) + " loss " + std::to_string(loss));
                };
            const auto ck = lm::train(corpus(), cfg_.model, stream_seed(cfg_, Stream::Train), opts);
            lm::save_checkpoint(ck, checkpoint_path());
        }
        ckpt_ = lm::load_checkpoint(checkpoint_path());
    }
    return *ckpt_;
}

const loc::EmbeddingTable& Workspace::embeddings() {
    if (!table_) table_ = loc::embed_corpus(checkpoint(), corpus());
    return *table_;
}

const loc::LayerReport& Workspace::layer_report() {
    if (!report_) {
        if (!fs::exists(layer_report_path())) {
            note("computing layer report");
            loc::save_layer_report(loc::layer_report(embeddings(), stream_seed(cfg_, Stream::Probe)), layer_report_path());
        }
        report_ = loc::load_layer_report(layer_report_path());
    }
    return *report_;
}

int Workspace::steering_layer() { return cfg_.layer > 0 ? cfg_.layer : layer_report().selected_layer; }

fs::path Workspace::vectors_dir() {
    return dir_ / "vectors" / ("L" + std::to_string(steering_layer()) + (cfg_.steering.centered ? "-centered" : ""));
}

const std::vector<steer::ComposerVector>& Workspace::vectors() {
    if (!vectors_) {
        const auto vdir = vectors_dir();
        const auto& labels = corpus().labels;
        bool present = true;
        for (const auto& l : labels) present = present && fs::exists(vdir / (l.name + ".json"));
        if (!present) {
            note("building composer vectors at layer " + std::to_string(steering_layer()));
            ensure_dir(vdir);
            for (const auto& v : steer::build_vectors(embeddings(), corpus(), steering_layer(), cfg_.steering.centered))
                steer::save_vector(v, vdir / (v.label.name + ".json"));
        }
        std::vector<steer::ComposerVector> vs;
        for (const auto& l : labels) vs.push_back(steer::load_vector(vdir / (l.name + ".json")));
        vectors_ = std::move(vs);
    }
    return *vectors_;
}

const shallow::StyleClassifier& Workspace::classifier() {
    if (!classifier_) {
        if (!fs::exists(classifier_path())) {
            note("training style classifier");
            const auto rep = shallow::train_style_classifier(corpus(), stream_seed(cfg_, Stream::Classifier),
                                                             cfg_.classifier.l2, cfg_.classifier.epochs);
            shallow::save_classifier(rep.classifier, classifier_path());
            write_json({{"train_accuracy", rep.train_accuracy},
                        {"val_accuracy", rep.val_accuracy},
                        {"test_accuracy", rep.test_accuracy},
                        {"n_train", rep.n_train},
                        {"n_val", rep.n_val},
                        {"n_test", rep.n_test}},
                       dir_ / "classifier_report.json");
        }
        classifier_ = shallow::load_classifier(classifier_path());
    }
    return *classifier_;
}

exp::Context Workspace::context() {
    exp::Context ctx;
    ctx.ckpt = &checkpoint();
    // Experiments follow corpus label order, which is the registry order.
    for (const auto& l : corpus().labels) {
        const auto& all = styles();
        const auto it = std::find_if(all.begin(), all.end(), [&](const corpus::StyleSpec& s) { return s.label.name == l.name; });
        if (it == all.end()) throw Error(ErrorCode::UnknownStyle, kModule, "corpus style " + l.name + " not in registry");
        ctx.styles.push_back(*it);
    }
    ctx.vectors = vectors();
    ctx.classifier = &classifier();
    ctx.temperature = cfg_.steering.temperature;
    ctx.seeds_per_cell = cfg_.experiments.seeds_per_cell;
    ctx.max_len = cfg_.steering.max_len;
    ctx.format_gate = cfg_.steering.format_gate;
    ctx.norm_preserve = cfg_.steering.norm_preserve;
    ctx.seed = stream_seed(cfg_, Stream::Trials);
    return ctx;
}

namespace {

std::vector<std::string> label_names(const exp::Context& ctx) {
    std::vector<std::string> out;
    for (const auto& s : ctx.styles) out.push_back(s.label.name);
    return out;
}

} // namespace

json write_eval(Workspace& ws) {
    const auto ctx = ws.context();
    const auto labels = label_names(ctx);
    const auto single = exp::run_single_steer(ctx, ws.config().experiments.alphas);
    auto s1 = exp::summary_json(single, ctx);
    exp::emit_report(single.trials, labels, s1, ws.reports_dir(), "single_steer");
    const auto fmt = exp::run_format_check(ctx, ws.config().steering.alpha);
    const auto s2 = exp::summary_json(fmt);
    exp::emit_report(fmt.trials, labels, s2, ws.reports_dir(), "format_check");
    return {{"single_steer", s1}, {"format_check", s2}};
}

json write_alpha_sweeps(Workspace& ws, const std::vector<std::string>& targets) {
    const auto ctx = ws.context();
    const auto labels = label_names(ctx);
    auto names = targets;
    if (names.empty()) names = ws.config().experiments.sweep_targets;
    if (names.empty())
        for (std::size_t i = 0; i < std::min<std::size_t>(3, labels.size()); ++i) names.push_back(labels[i]);
    const auto grid = ws.config().experiments.sweep_grid();
    json all = json::array();
    std::vector<exp::SteerTrial> trials;
    for (const auto& t : names) {
        auto s = exp::run_alpha_sweep(ctx, t, grid);
        all.push_back(exp::summary_json(s));
        trials.insert(trials.end(), s.trials.begin(), s.trials.end());
    }
    const json summary = {{"experiment", "alpha_sweep"}, {"sweeps", all}};
    exp::emit_report(trials, labels, summary, ws.reports_dir(), "alpha_sweep");
    return summary;
}

json write_fusion_sweeps(Workspace& ws, const std::vector<std::pair<std::string, std::string>>& pairs) {
    const auto ctx = ws.context();
    const auto labels = label_names(ctx);
    const auto& x = ws.config().experiments;
    auto chosen = pairs;
    if (chosen.empty()) chosen = x.fusion_pairs;
    if (chosen.empty()) chosen = exp::most_distinct_pairs(ctx.vectors, static_cast<std::size_t>(x.fusion_pair_count));
    json all = json::array();
    std::vector<exp::SteerTrial> trials;
    for (const auto& [a, b] : chosen) {
        auto f = exp::run_fusion_sweep(ctx, a, b, x.fusion_ratios, x.fusion_alpha);
        all.push_back(exp::summary_json(f));
        trials.insert(trials.end(), f.trials.begin(), f.trials.end());
    }
    const json summary = {{"experiment", "fusion_sweep"}, {"pairs", all}};
    exp::emit_report(trials, labels, summary, ws.reports_dir(), "fusion_sweep");
    return summary;
}

void write_projection(Workspace& ws) {
    const int layer = ws.steering_layer();
    const auto& table = ws.embeddings();
    const auto coords = loc::pca_projection(table.at(layer), 2);
    loc::write_projection_csv(coords, table.labels, table.label_names, ws.dir() / ("projection-L" + std::to_string(layer) + ".csv"));
}

} // namespace cvsteer::pipeline
