#pragma once

// Multinomial logistic regression trained by full-batch gradient descent,
// and the bigram surface features used by the evaluation classifier.

#include "cvsteer/abc.hpp"
#include "cvsteer/style_corpus.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cvsteer::shallow {

// Bigrams of consecutive content tokens. Feature index size() - 1 is the
// bucket for bigrams not seen when the table was built.
class BigramVocab {
public:
    static BigramVocab build(std::span<const abc::TokenSequence> seqs);
    static BigramVocab from_keys(std::vector<std::string> keys);

    int size() const noexcept { return static_cast<int>(keys_.size()) + 1; }
    int oov_index() const noexcept { return static_cast<int>(keys_.size()); }
    int index_of(const std::string& first, const std::string& second) const;
    const std::vector<std::string>& keys() const noexcept { return keys_; }

    static std::string key(const std::string& first, const std::string& second);

private:
    std::vector<std::string> keys_;
    std::unordered_map<std::string, int> index_;
};

struct FeatureVector {
    Eigen::VectorXd values;
    bool empty = false; // fewer than two content tokens
};

FeatureVector bigram_features(const abc::TokenSequence& seq, const BigramVocab& vocab);

struct TrainingInfo {
    double l2 = 0.0;
    int epochs = 0;
    double learning_rate = 0.0;
    std::vector<double> loss_history; // objective before each epoch, then after the last
};

class LinearClassifier {
public:
    LinearClassifier() = default;
    // weights: K x (F + 1), last column is the bias.
    LinearClassifier(Eigen::MatrixXd weights, std::vector<std::string> labels);

    int n_classes() const noexcept { return static_cast<int>(weights_.rows()); }
    int n_features() const noexcept { return static_cast<int>(weights_.cols()) - 1; }
    const Eigen::MatrixXd& weights() const noexcept { return weights_; }
    const std::vector<std::string>& labels() const noexcept { return labels_; }

    Eigen::VectorXd scores(const Eigen::VectorXd& x) const;
    Eigen::VectorXd predict_proba(const Eigen::VectorXd& x) const; // throws Error{DimensionMismatch}
    int predict(const Eigen::VectorXd& x) const;

    TrainingInfo info;

private:
    Eigen::MatrixXd weights_;
    std::vector<std::string> labels_;
};

// Rows of X are samples; y holds class indices into `labels`. The step size
// is the inverse of a bound on the objective's curvature, so the loss never
// increases. Deterministic: zero init, full batch.
LinearClassifier train_classifier(const Eigen::MatrixXd& X, std::span<const int> y, std::vector<std::string> labels,
                                  double l2, int epochs, int min_per_class = 5);

// Mean cross-entropy plus 0.5 * l2 * ||W without bias||^2.
double objective(const LinearClassifier& clf, const Eigen::MatrixXd& X, std::span<const int> y, double l2);

double accuracy(const LinearClassifier& clf, const Eigen::MatrixXd& X, std::span<const int> y);

double cosine(const Eigen::VectorXd& u, const Eigen::VectorXd& v); // throws Error{ZeroVector}

// Splits sample indices into parts with the given fractions, separately
// within each class so every part keeps the class proportions.
std::vector<std::vector<std::size_t>> stratified_split(std::span<const int> y, std::span<const double> fractions,
                                                       std::uint64_t seed);

struct StyleClassifier {
    BigramVocab vocab;
    LinearClassifier model;

    Eigen::VectorXd predict_proba(const abc::TokenSequence& seq) const;
};

struct StyleClassifierReport {
    StyleClassifier classifier;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::size_t n_train = 0, n_val = 0, n_test = 0;
};

// Stratified 70/10/20 split of the corpus pieces; bigram table from the
// training part only.
StyleClassifierReport train_style_classifier(const corpus::StyleCorpus& corpus, std::uint64_t seed, double l2,
                                             int epochs);

void to_json(nlohmann::json& j, const StyleClassifier& clf);
void from_json(const nlohmann::json& j, StyleClassifier& clf);
void save_classifier(const StyleClassifier& clf, const std::filesystem::path& path);
StyleClassifier load_classifier(const std::filesystem::path& path);

} // namespace cvsteer::shallow
