#include "cvsteer/experiments.hpp"

#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cvsteer::exp {

namespace {

constexpr const char* kModule = "experiments";

std::string num(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void check_context(const Context& ctx) {
    if (!ctx.ckpt || !ctx.classifier) throw Error(ErrorCode::ConfigError, kModule, "context needs a model and a classifier");
    if (ctx.styles.size() != ctx.vectors.size())
        throw Error(ErrorCode::ConfigError, kModule, "one composer vector per style is required");
    if (ctx.styles.size() < 2) throw Error(ErrorCode::ConfigError, kModule, "need at least two styles");
    if (ctx.seeds_per_cell < 1) throw Error(ErrorCode::ConfigError, kModule, "seeds_per_cell must be positive");
    if (static_cast<std::size_t>(ctx.classifier->model.n_classes()) != ctx.styles.size())
        throw Error(ErrorCode::DimensionMismatch, kModule, "classifier labels do not match the styles");
}

double mean(std::span<const double> v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

void tick(const Context& ctx, std::size_t& done) {
    ++done;
    if (ctx.on_trial) ctx.on_trial(done);
}

std::string trial_id(const std::string& kind, const std::string& r, const std::string& c, double alpha,
                     std::optional<double> w1, int slot) {
    std::string id = kind + ':' + r + ':' + c + ":a=" + num(alpha);
    if (w1) id += ":w1=" + num(*w1);
    return id + ":s=" + std::to_string(slot);
}

nlohmann::json trial_settings(const Context& ctx) {
    return {{"temperature", ctx.temperature},
            {"seeds_per_cell", ctx.seeds_per_cell},
            {"max_len", ctx.max_len},
            {"format_gate", ctx.format_gate},
            {"norm_preserve", ctx.norm_preserve},
            {"seed", ctx.seed}};
}

} // namespace

int Context::style_index(const std::string& name) const {
    for (std::size_t i = 0; i < styles.size(); ++i)
        if (styles[i].label.name == name) return static_cast<int>(i);
    throw Error(ErrorCode::UnknownStyle, kModule, "unknown style '" + name + "'");
}

std::uint64_t Context::trial_seed(int i) const { return derive_seed(seed, static_cast<std::uint64_t>(i)); }

SteerTrial run_trial(const Context& ctx, int prompt, const Eigen::VectorXd& direction, int layer, double alpha,
                     std::uint64_t seed, bool format_gate) {
    steer::SteeringConfig cfg;
    cfg.alpha = alpha;
    cfg.direction = direction;
    cfg.layer = layer;
    cfg.norm_preserve = ctx.norm_preserve;
    cfg.format_gate = format_gate;
    const auto& style = ctx.styles.at(static_cast<std::size_t>(prompt));
    const auto gen = steer::steered_generate(*ctx.ckpt, steer::make_prompt(style), cfg,
                                             lm::Sampler{ctx.temperature, seed}, ctx.max_len);
    const auto piece = gen.piece_tokens();
    const Eigen::VectorXd p = ctx.classifier->predict_proba(piece);
    SteerTrial t;
    t.prompt_style = style.label.name;
    t.alpha = alpha;
    t.seed = seed;
    t.probabilities.assign(p.data(), p.data() + p.size());
    t.parse_valid = abc::validate(piece).parse_valid;
    t.was_gated_count = gen.gated_count();
    t.steered = direction.size() > 0;
    t.format_gate = format_gate;
    return t;
}

SingleSteerResult run_single_steer(const Context& ctx, std::span<const double> alphas) {
    check_context(ctx);
    SingleSteerResult res;
    res.alphas.assign(alphas.begin(), alphas.end());
    const auto K = static_cast<int>(ctx.styles.size());
    std::size_t done = 0;
    for (int r = 0; r < K; ++r)
        for (int c = 0; c < K; ++c) {
            const auto& v = ctx.vectors[static_cast<std::size_t>(c)];
            CellSummary cell;
            cell.prompt_style = ctx.styles[static_cast<std::size_t>(r)].label.name;
            cell.target_style = ctx.styles[static_cast<std::size_t>(c)].label.name;
            std::vector<double> grid{0.0};
            grid.insert(grid.end(), alphas.begin(), alphas.end());
            for (std::size_t a = 0; a < grid.size(); ++a) {
                std::vector<double> ps;
                for (int s = 0; s < ctx.seeds_per_cell; ++s) {
                    auto t = run_trial(ctx, r, v.s, v.layer, grid[a], ctx.trial_seed(s), ctx.format_gate);
                    t.target_style = cell.target_style;
                    t.p_target = t.probabilities[static_cast<std::size_t>(c)];
                    t.trial_id = trial_id("single", cell.prompt_style, cell.target_style, grid[a], std::nullopt, s);
                    ps.push_back(t.p_target);
                    res.trials.push_back(std::move(t));
                    tick(ctx, done);
                }
                if (a == 0)
                    cell.baseline = mean(ps);
                else
                    cell.steered.push_back(mean(ps));
            }
            for (double s : cell.steered) cell.improvement.push_back(s - cell.baseline);
            res.cells.push_back(std::move(cell));
        }
    return res;
}

Correlation spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw Error(ErrorCode::LengthMismatch, kModule, "spearman inputs differ in length");
    if (xs.size() < 2) throw Error(ErrorCode::LengthMismatch, kModule, "spearman needs at least two points");
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    const double mx = mean(rx);
    const double my = mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return {0.0, true};
    return {sxy / std::sqrt(sxx * syy), false};
}

double ols_slope(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw Error(ErrorCode::LengthMismatch, kModule, "slope inputs differ in length");
    const double mx = mean(xs);
    const double my = mean(ys);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    return sxx == 0.0 ? 0.0 : sxy / sxx;
}

SweepSummary run_alpha_sweep(const Context& ctx, const std::string& target, std::span<const double> alphas,
                             std::span<const std::string> prompts) {
    check_context(ctx);
    const int c = ctx.style_index(target);
    std::vector<std::string> prompt_names(prompts.begin(), prompts.end());
    if (prompt_names.empty())
        for (const auto& s : ctx.styles)
            if (s.label.name != target) prompt_names.push_back(s.label.name);
    const auto& v = ctx.vectors[static_cast<std::size_t>(c)];
    SweepSummary sum;
    sum.target_style = target;
    sum.alphas.assign(alphas.begin(), alphas.end());
    std::size_t done = 0;
    std::vector<double> baselines;
    for (const auto& name : prompt_names) {
        const int r = ctx.style_index(name);
        PromptSweep ps;
        ps.prompt_style = name;
        for (double a : alphas) {
            std::vector<double> p;
            for (int s = 0; s < ctx.seeds_per_cell; ++s) {
                auto t = run_trial(ctx, r, v.s, v.layer, a, ctx.trial_seed(s), ctx.format_gate);
                t.target_style = target;
                t.p_target = t.probabilities[static_cast<std::size_t>(c)];
                t.trial_id = trial_id("sweep", name, target, a, std::nullopt, s);
                p.push_back(t.p_target);
                sum.trials.push_back(std::move(t));
                tick(ctx, done);
            }
            ps.mean_p.push_back(mean(p));
            if (a == 0.0) baselines.push_back(ps.mean_p.back());
        }
        ps.slope = ols_slope(alphas, ps.mean_p);
        ps.spearman = spearman(alphas, ps.mean_p);
        sum.prompts.push_back(std::move(ps));
    }
    sum.baseline = mean(baselines);
    std::vector<double> rhos;
    for (const auto& ps : sum.prompts) rhos.push_back(ps.spearman.rho);
    sum.mean_rho = mean(rhos);
    return sum;
}

FusionSummary run_fusion_sweep(const Context& ctx, const std::string& style1, const std::string& style2,
                               std::span<const double> w1_grid, double alpha, std::span<const std::string> prompts) {
    check_context(ctx);
    const int c1 = ctx.style_index(style1);
    const int c2 = ctx.style_index(style2);
    if (c1 == c2) throw Error(ErrorCode::ConfigError, kModule, "fusion needs two distinct styles");
    FusionSummary f;
    f.style1 = style1;
    f.style2 = style2;
    f.alpha = alpha;
    f.w1.assign(w1_grid.begin(), w1_grid.end());
    f.prompts.assign(prompts.begin(), prompts.end());
    if (f.prompts.empty())
        for (const auto& s : ctx.styles) f.prompts.push_back(s.label.name);
    std::size_t done = 0;
    const auto& v1 = ctx.vectors[static_cast<std::size_t>(c1)];
    const auto& v2 = ctx.vectors[static_cast<std::size_t>(c2)];
    for (double w : w1_grid) {
        const steer::FusionTerm terms[] = {{&v1, w}, {&v2, 1.0 - w}};
        const Eigen::VectorXd dir = steer::fuse(terms);
        std::vector<double> p1, p2;
        for (const auto& name : f.prompts) {
            const int r = ctx.style_index(name);
            for (int s = 0; s < ctx.seeds_per_cell; ++s) {
                auto t = run_trial(ctx, r, dir, v1.layer, alpha, ctx.trial_seed(s), ctx.format_gate);
                t.target_style = style1 + '+' + style2;
                t.w1 = w;
                t.p_target = t.probabilities[static_cast<std::size_t>(c1)];
                p1.push_back(t.probabilities[static_cast<std::size_t>(c1)]);
                p2.push_back(t.probabilities[static_cast<std::size_t>(c2)]);
                t.trial_id = trial_id("fusion", name, t.target_style, alpha, w, s);
                f.trials.push_back(std::move(t));
                tick(ctx, done);
            }
        }
        f.mean_p1.push_back(mean(p1));
        f.mean_p2.push_back(mean(p2));
    }
    f.slope1 = ols_slope(f.w1, f.mean_p1);
    f.slope2 = ols_slope(f.w1, f.mean_p2);
    return f;
}

std::vector<std::pair<std::string, std::string>> most_distinct_pairs(std::span<const steer::ComposerVector> vectors,
                                                                     std::size_t n) {
    struct Cand {
        double dist;
        std::size_t a, b;
    };
    std::vector<Cand> cands;
    for (std::size_t a = 0; a < vectors.size(); ++a)
        for (std::size_t b = a + 1; b < vectors.size(); ++b) {
            if (vectors[a].s.size() != vectors[b].s.size())
                throw Error(ErrorCode::DimensionMismatch, kModule, "composer vectors differ in dimension");
            cands.push_back({(vectors[a].s - vectors[b].s).norm(), a, b});
        }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return x.dist > y.dist; });
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 0; i < std::min(n, cands.size()); ++i)
        out.emplace_back(vectors[cands[i].a].label.name, vectors[cands[i].b].label.name);
    return out;
}

FormatCheck run_format_check(const Context& ctx, double alpha) {
    check_context(ctx);
    FormatCheck fc;
    fc.alpha = alpha;
    const auto K = static_cast<int>(ctx.styles.size());
    std::size_t done = 0;
    int n = 0, unsteered = 0, on = 0, off = 0;
    for (int r = 0; r < K; ++r) {
        for (int s = 0; s < ctx.seeds_per_cell; ++s) {
            auto t = run_trial(ctx, r, Eigen::VectorXd{}, 0, 0.0, ctx.trial_seed(s), true);
            t.target_style = "none";
            t.trial_id = trial_id("format-unsteered", t.prompt_style, "none", 0.0, std::nullopt, s);
            unsteered += t.parse_valid;
            fc.trials.push_back(std::move(t));
            tick(ctx, done);
        }
        for (int c = 0; c < K; ++c) {
            if (c == r) continue;
            const auto& v = ctx.vectors[static_cast<std::size_t>(c)];
            for (int s = 0; s < ctx.seeds_per_cell; ++s) {
                for (bool gate : {true, false}) {
                    auto t = run_trial(ctx, r, v.s, v.layer, alpha, ctx.trial_seed(s), gate);
                    t.target_style = v.label.name;
                    t.p_target = t.probabilities[static_cast<std::size_t>(c)];
                    t.trial_id = trial_id(gate ? "format-gate-on" : "format-gate-off", t.prompt_style, t.target_style,
                                          alpha, std::nullopt, s);
                    (gate ? on : off) += t.parse_valid;
                    fc.trials.push_back(std::move(t));
                    tick(ctx, done);
                }
                ++n;
            }
        }
    }
    fc.unsteered_rate = static_cast<double>(unsteered) / (K * ctx.seeds_per_cell);
    fc.gate_on_rate = static_cast<double>(on) / n;
    fc.gate_off_rate = static_cast<double>(off) / n;
    return fc;
}

nlohmann::json summary_json(const SingleSteerResult& r, const Context& ctx) {
    nlohmann::json cells = nlohmann::json::array();
    int positive = 0, off_diagonal = 0;
    const auto mid = std::find(r.alphas.begin(), r.alphas.end(), 0.5);
    for (const auto& c : r.cells) {
        cells.push_back({{"prompt_style", c.prompt_style},
                         {"target_style", c.target_style},
                         {"baseline", c.baseline},
                         {"steered", c.steered},
                         {"improvement", c.improvement}});
        if (c.prompt_style != c.target_style && mid != r.alphas.end()) {
            ++off_diagonal;
            if (c.improvement[static_cast<std::size_t>(mid - r.alphas.begin())] > 0.0) ++positive;
        }
    }
    nlohmann::json j = {{"experiment", "single_steer"}, {"alphas", r.alphas}, {"cells", cells}, {"settings", trial_settings(ctx)}};
    if (mid != r.alphas.end())
        j["alpha_0_5_positive_cells"] = {{"positive", positive}, {"cells", off_diagonal}};
    return j;
}

nlohmann::json summary_json(const SweepSummary& s) {
    nlohmann::json prompts = nlohmann::json::array();
    for (const auto& p : s.prompts)
        prompts.push_back({{"prompt_style", p.prompt_style},
                           {"mean_p", p.mean_p},
                           {"slope", p.slope},
                           {"spearman", p.spearman.rho},
                           {"spearman_undefined", p.spearman.undefined}});
    return {{"experiment", "alpha_sweep"}, {"target_style", s.target_style}, {"alphas", s.alphas},
            {"baseline", s.baseline},      {"mean_spearman", s.mean_rho},     {"prompts", prompts}};
}

nlohmann::json summary_json(const FusionSummary& f) {
    return {{"experiment", "fusion_sweep"}, {"style1", f.style1}, {"style2", f.style2}, {"alpha", f.alpha},
            {"w1", f.w1},                   {"mean_p1", f.mean_p1}, {"mean_p2", f.mean_p2},
            {"slope1", f.slope1},           {"slope2", f.slope2},   {"prompts", f.prompts}};
}

nlohmann::json summary_json(const FormatCheck& f) {
    return {{"experiment", "format_check"},
            {"alpha", f.alpha},
            {"unsteered_rate", f.unsteered_rate},
            {"gate_on_rate", f.gate_on_rate},
            {"gate_off_rate", f.gate_off_rate}};
}

std::vector<std::string> csv_header(std::span<const std::string> labels) {
    std::vector<std::string> h{"trial_id", "prompt_style", "target_style", "alpha", "w1", "seed", "p_target"};
    for (const auto& l : labels) h.push_back("p_" + l);
    h.push_back("parse_valid");
    h.push_back("was_gated_count");
    return h;
}

void emit_report(std::span<const SteerTrial> trials, std::span<const std::string> labels,
                 const nlohmann::json& summary, const std::filesystem::path& dir, const std::string& stem) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoFailure, kModule, "cannot create " + dir.string() + ": " + ec.message());
    {
        std::ofstream out(dir / (stem + ".csv"), std::ios::binary);
        if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + (dir / (stem + ".csv")).string());
        const auto header = csv_header(labels);
        for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
        out << '\n';
        for (const auto& t : trials) {
            if (t.probabilities.size() != labels.size())
                throw Error(ErrorCode::DimensionMismatch, kModule, "trial probabilities do not match the labels");
            out << t.trial_id << ',' << t.prompt_style << ',' << t.target_style << ',' << num(t.alpha) << ','
                << (t.w1 ? num(*t.w1) : std::string()) << ',' << t.seed << ',' << num(t.p_target);
            for (double p : t.probabilities) out << ',' << num(p);
            out << ',' << (t.parse_valid ? 1 : 0) << ',' << t.was_gated_count << '\n';
        }
        if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + stem + ".csv");
    }
    nlohmann::json j = summary;
    j["n_trials"] = trials.size();
    std::ofstream out(dir / (stem + ".json"), std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + (dir / (stem + ".json")).string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + stem + ".json");
}

} // namespace cvsteer::exp
