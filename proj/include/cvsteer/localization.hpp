#pragma once

// Layer-wise clustering metrics over piece-level embeddings (final-token
// hidden rows) and the first-place-count rule that picks the steering layer.

#include "cvsteer/style_corpus.hpp"
#include "cvsteer/tinylm.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cvsteer::loc {

struct PieceEmbedding {
    Eigen::VectorXd vector;
    int layer = 0;
    corpus::StyleLabel label;
};

PieceEmbedding piece_embedding(const lm::Checkpoint& ckpt, const abc::TokenSequence& seq, int layer,
                               const corpus::StyleLabel& label = {});

// One row per corpus entry (in corpus order) for every layer 1..L, taken
// from the entry's concat(prompt, piece).
struct EmbeddingTable {
    std::vector<int> labels; // index into label_names
    std::vector<std::string> label_names;
    std::vector<Eigen::MatrixXd> layers; // layers[l - 1] is n x d

    const Eigen::MatrixXd& at(int layer) const { return layers.at(static_cast<std::size_t>(layer - 1)); }
};

EmbeddingTable embed_corpus(const lm::Checkpoint& ckpt, const corpus::StyleCorpus& corpus);

// Degenerate clusterings return a sentinel value with the flag set instead
// of throwing, so a layer report can still be produced.
struct MetricValue {
    double value = 0.0;
    bool degenerate = false;
};

inline constexpr double kProbeL2 = 1e-3;
inline constexpr int kProbeEpochs = 500;

// Stratified 75/25 split; standardized features; exact-match test accuracy.
double probe_accuracy(const Eigen::MatrixXd& X, std::span<const int> labels, std::uint64_t split_seed);

// Ties in distance are resolved by the lower sample index.
double knn_purity(const Eigen::MatrixXd& X, std::span<const int> labels, int k = 5);

// -inf sentinel when two centroids coincide.
MetricValue neg_davies_bouldin(const Eigen::MatrixXd& X, std::span<const int> labels);

// Mean pairwise centroid distance over mean point-to-own-centroid distance;
// +inf sentinel when the latter is zero.
MetricValue separation_ratio(const Eigen::MatrixXd& X, std::span<const int> labels);

struct LayerMetrics {
    int layer = 0;
    double probe_accuracy = 0.0;
    double knn_purity = 0.0;
    MetricValue neg_dbi;
    MetricValue sep_ratio;
    int first_place_count = 0;
};

struct LayerReport {
    std::vector<LayerMetrics> layers;
    int selected_layer = 0;
};

// Fills first_place_count (ties credit every tied layer) and picks the layer
// with the most first places, preferring the deepest on ties.
void select_layer(LayerReport& report);

LayerReport layer_report(const EmbeddingTable& table, std::uint64_t split_seed);
LayerReport layer_report(const lm::Checkpoint& ckpt, const corpus::StyleCorpus& corpus, std::uint64_t split_seed);

void to_json(nlohmann::json& j, const LayerReport& report);
void from_json(const nlohmann::json& j, LayerReport& report);
void save_layer_report(const LayerReport& report, const std::filesystem::path& path);
LayerReport load_layer_report(const std::filesystem::path& path);

// Mean-centered projection onto the top principal directions (n x dims).
// Each direction's sign is fixed so its largest-magnitude entry is positive.
Eigen::MatrixXd pca_projection(const Eigen::MatrixXd& X, int dims = 2);

void write_projection_csv(const Eigen::MatrixXd& coords, std::span<const int> labels,
                          std::span<const std::string> label_names, const std::filesystem::path& path);

} // namespace cvsteer::loc
