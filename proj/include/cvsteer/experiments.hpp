#pragma once

// Steering experiments, scored by the independent bigram classifier.
// Single-style steering is compared against an unsteered baseline; sweeps
// vary alpha or the mix of two styles.

#include "cvsteer/classifier.hpp"
#include "cvsteer/steering.hpp"
#include "cvsteer/style_corpus.hpp"
#include "cvsteer/tinylm.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cvsteer::exp {

struct Context {
    const lm::Checkpoint* ckpt = nullptr;
    std::vector<corpus::StyleSpec> styles;
    std::vector<steer::ComposerVector> vectors; // same order as styles
    const shallow::StyleClassifier* classifier = nullptr;
    double temperature = 0.8;
    int seeds_per_cell = 20;
    int max_len = 160;
    bool format_gate = true;
    bool norm_preserve = true;
    std::uint64_t seed = 0;
    std::function<void(std::size_t done)> on_trial;

    int style_index(const std::string& name) const; // throws Error{UnknownStyle}
    // Sampler seed shared by every condition for seed slot `i`, so
    // conditions are compared on paired draws.
    std::uint64_t trial_seed(int i) const;
};

struct SteerTrial {
    std::string trial_id;
    std::string prompt_style;
    std::string target_style;
    double alpha = 0.0;
    std::optional<double> w1;
    std::uint64_t seed = 0;
    std::vector<double> probabilities; // classifier order
    double p_target = 0.0;
    bool parse_valid = false;
    int was_gated_count = 0;
    bool steered = true;
    bool format_gate = true;
};

// One generation scored by the classifier. An empty direction runs the
// model without steering.
SteerTrial run_trial(const Context& ctx, int prompt, const Eigen::VectorXd& direction, int layer, double alpha,
                     std::uint64_t seed, bool format_gate);

struct CellSummary {
    std::string prompt_style;
    std::string target_style;
    double baseline = 0.0;             // mean P(target) at alpha = 0
    std::vector<double> steered;       // per alpha in the grid
    std::vector<double> improvement;   // steered - baseline
};

struct SingleSteerResult {
    std::vector<double> alphas;
    std::vector<CellSummary> cells; // every (r, c), r-major
    std::vector<SteerTrial> trials;
};

SingleSteerResult run_single_steer(const Context& ctx, std::span<const double> alphas);

struct Correlation {
    double rho = 0.0;
    bool undefined = false; // a constant input; rho reported as 0
};

// Rank correlation with average ranks for ties. Throws Error{LengthMismatch}.
Correlation spearman(std::span<const double> xs, std::span<const double> ys);
// Least-squares slope of ys on xs; 0 when xs is constant.
double ols_slope(std::span<const double> xs, std::span<const double> ys);

struct PromptSweep {
    std::string prompt_style;
    std::vector<double> mean_p; // per alpha
    double slope = 0.0;
    Correlation spearman;
};

struct SweepSummary {
    std::string target_style;
    std::vector<double> alphas;
    std::vector<PromptSweep> prompts;
    double baseline = 0.0; // mean P(target) at alpha = 0 over prompts
    double mean_rho = 0.0;
    std::vector<SteerTrial> trials;
};

// Prompts default to every style other than the target.
SweepSummary run_alpha_sweep(const Context& ctx, const std::string& target, std::span<const double> alphas,
                             std::span<const std::string> prompts = {});

struct FusionSummary {
    std::string style1;
    std::string style2;
    double alpha = 0.0;
    std::vector<double> w1;
    std::vector<double> mean_p1;
    std::vector<double> mean_p2;
    double slope1 = 0.0;
    double slope2 = 0.0;
    std::vector<std::string> prompts;
    std::vector<SteerTrial> trials;
};

// Direction w1 * s_c1 + (1 - w1) * s_c2. Prompts default to every style.
FusionSummary run_fusion_sweep(const Context& ctx, const std::string& style1, const std::string& style2,
                               std::span<const double> w1_grid, double alpha,
                               std::span<const std::string> prompts = {});

struct FormatCheck {
    double alpha = 0.0;
    double unsteered_rate = 0.0;
    double gate_on_rate = 0.0;
    double gate_off_rate = 0.0;
    std::vector<SteerTrial> trials;
};

// The n style pairs with the largest |s_a - s_b|, most distant first; each
// pair is ordered by style index.
std::vector<std::pair<std::string, std::string>> most_distinct_pairs(std::span<const steer::ComposerVector> vectors,
                                                                     std::size_t n);

// parse_valid rates over every (r, c != r) cell and seed.
FormatCheck run_format_check(const Context& ctx, double alpha);

nlohmann::json summary_json(const SingleSteerResult& r, const Context& ctx);
nlohmann::json summary_json(const SweepSummary& s);
nlohmann::json summary_json(const FusionSummary& f);
nlohmann::json summary_json(const FormatCheck& f);

std::vector<std::string> csv_header(std::span<const std::string> labels);
// Writes <stem>.csv (one row per trial) and <stem>.json (summary plus run
// settings). Numbers are printed in shortest round-trip form, so equal runs
// give byte-identical files.
void emit_report(std::span<const SteerTrial> trials, std::span<const std::string> labels,
                 const nlohmann::json& summary, const std::filesystem::path& dir, const std::string& stem);

} // namespace cvsteer::exp
