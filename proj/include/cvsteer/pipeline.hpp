#pragma once

// Run configuration (TOML) and the on-disk run directory that caches every
// artifact of the pipeline: corpus, checkpoint, layer report, vectors and
// classifier. Reports go to a sub-directory keyed by the experiment settings.

#include "cvsteer/classifier.hpp"
#include "cvsteer/experiments.hpp"
#include "cvsteer/localization.hpp"
#include "cvsteer/steering.hpp"
#include "cvsteer/style_corpus.hpp"
#include "cvsteer/tinylm.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cvsteer::pipeline {

struct CorpusSettings {
    int n_per_style = 100;
    std::string registry; // empty: built-in registry
};

struct SteeringSettings {
    double alpha = 0.5;
    double temperature = 0.8;
    int max_len = 160;
    bool format_gate = true;
    bool norm_preserve = true;
    bool centered = false;
};

struct ExperimentSettings {
    int seeds_per_cell = 20;
    std::vector<double> alphas{0.1, 0.3, 0.5, 0.8};
    double sweep_start = 0.0;
    double sweep_stop = 1.0;
    double sweep_step = 0.05;
    std::vector<std::string> sweep_targets; // empty: first three styles
    std::vector<std::pair<std::string, std::string>> fusion_pairs; // empty: most distinct
    int fusion_pair_count = 3;
    std::vector<double> fusion_ratios{0.1, 0.3, 0.5, 0.7, 0.9};
    double fusion_alpha = 0.5;

    std::vector<double> sweep_grid() const;
};

struct ClassifierSettings {
    double l2 = 1e-3;
    int epochs = 300;
};

struct RunConfig {
    std::uint64_t seed = 7;
    std::filesystem::path out = "runs";
    CorpusSettings corpus;
    lm::ModelConfig model;
    int layer = 0; // 0: use the selected layer
    SteeringSettings steering;
    ExperimentSettings experiments;
    ClassifierSettings classifier;

    // Throws Error{ConfigError} on out-of-range values.
    void check() const;
};

// Unknown sections or keys and wrong value types throw Error{ConfigError}.
RunConfig parse_config(std::string_view toml_text);
RunConfig load_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& cfg);

// Independent seed streams drawn from the top-level seed.
enum class Stream : std::uint64_t { Corpus = 1, Train = 2, Probe = 3, Classifier = 4, Trials = 5 };
std::uint64_t stream_seed(const RunConfig& cfg, Stream s);

std::uint64_t fnv1a64(std::string_view bytes);
// Hash of the settings that define cached artifacts (seed, corpus, model,
// classifier) and of the settings that define reports (steering, experiments).
std::string artifact_hash(const RunConfig& cfg);
std::string report_hash(const RunConfig& cfg);

// Artifacts are loaded when present and computed (then written and read
// back) otherwise, so every consumer sees the on-disk values.
class Workspace {
public:
    explicit Workspace(RunConfig cfg);

    const RunConfig& config() const { return cfg_; }
    const std::filesystem::path& dir() const { return dir_; }
    std::filesystem::path reports_dir() const;

    const std::vector<corpus::StyleSpec>& styles();
    const corpus::StyleCorpus& corpus();
    const lm::Checkpoint& checkpoint();
    const loc::EmbeddingTable& embeddings();
    const loc::LayerReport& layer_report();
    int steering_layer();
    const std::vector<steer::ComposerVector>& vectors();
    const shallow::StyleClassifier& classifier();

    std::filesystem::path corpus_path() const { return dir_ / "corpus.jsonl"; }
    std::filesystem::path styles_path() const { return dir_ / "styles.json"; }
    std::filesystem::path checkpoint_path() const { return dir_ / "model.ckpt"; }
    std::filesystem::path layer_report_path() const { return dir_ / "layer_report.json"; }
    std::filesystem::path classifier_path() const { return dir_ / "classifier.json"; }
    std::filesystem::path vectors_dir();

    exp::Context context();

    std::function<void(const std::string&)> log;

private:
    void note(const std::string& msg) const;

    RunConfig cfg_;
    std::filesystem::path dir_;
    std::optional<std::vector<corpus::StyleSpec>> styles_;
    std::optional<corpus::StyleCorpus> corpus_;
    std::optional<lm::Checkpoint> ckpt_;
    std::optional<loc::EmbeddingTable> table_;
    std::optional<loc::LayerReport> report_;
    std::optional<std::vector<steer::ComposerVector>> vectors_;
    std::optional<shallow::StyleClassifier> classifier_;
};

// Report writers used by the CLI; each returns the summary it wrote.
nlohmann::json write_eval(Workspace& ws);
nlohmann::json write_alpha_sweeps(Workspace& ws, const std::vector<std::string>& targets);
nlohmann::json write_fusion_sweeps(Workspace& ws, const std::vector<std::pair<std::string, std::string>>& pairs);
void write_projection(Workspace& ws);

} // namespace cvsteer::pipeline
