#include "cvsteer/classifier.hpp"

#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace cvsteer::shallow {

namespace {

constexpr const char* kModule = "shallow_models";

std::vector<const abc::Token*> content_tokens(const abc::TokenSequence& seq) {
    std::vector<const abc::Token*> out;
    for (const auto& t : seq.tokens)
        if (!abc::is_format(t)) out.push_back(&t);
    return out;
}

Eigen::VectorXd stable_softmax(const Eigen::VectorXd& s) {
    const Eigen::VectorXd e = (s.array() - s.maxCoeff()).exp();
    return e / e.sum();
}

void check_labels(const Eigen::MatrixXd& X, std::span<const int> y, std::size_t k) {
    if (static_cast<std::size_t>(X.rows()) != y.size())
        throw Error(ErrorCode::LengthMismatch, kModule, "feature rows and labels differ in length");
    for (int c : y)
        if (c < 0 || static_cast<std::size_t>(c) >= k)
            throw Error(ErrorCode::SchemaViolation, kModule, "label index out of range");
}

} // namespace

std::string BigramVocab::key(const std::string& first, const std::string& second) {
    return first + ' ' + second;
}

BigramVocab BigramVocab::build(std::span<const abc::TokenSequence> seqs) {
    std::set<std::string> keys;
    for (const auto& seq : seqs) {
        const auto content = content_tokens(seq);
        for (std::size_t i = 1; i < content.size(); ++i) keys.insert(key(content[i - 1]->text, content[i]->text));
    }
    return from_keys({keys.begin(), keys.end()});
}

BigramVocab BigramVocab::from_keys(std::vector<std::string> keys) {
    BigramVocab v;
    v.keys_ = std::move(keys);
    for (std::size_t i = 0; i < v.keys_.size(); ++i) {
        if (!v.index_.emplace(v.keys_[i], static_cast<int>(i)).second)
            throw Error(ErrorCode::SchemaViolation, kModule, "duplicate bigram key '" + v.keys_[i] + "'");
    }
    return v;
}

int BigramVocab::index_of(const std::string& first, const std::string& second) const {
    const auto it = index_.find(key(first, second));
    return it == index_.end() ? oov_index() : it->second;
}

FeatureVector bigram_features(const abc::TokenSequence& seq, const BigramVocab& vocab) {
    FeatureVector f;
    f.values = Eigen::VectorXd::Zero(vocab.size());
    const auto content = content_tokens(seq);
    if (content.size() < 2) {
        f.empty = true;
        return f;
    }
    for (std::size_t i = 1; i < content.size(); ++i) f.values(vocab.index_of(content[i - 1]->text, content[i]->text)) += 1.0;
    f.values /= static_cast<double>(content.size() - 1);
    return f;
}

LinearClassifier::LinearClassifier(Eigen::MatrixXd weights, std::vector<std::string> labels)
    : weights_(std::move(weights)), labels_(std::move(labels)) {
    if (weights_.rows() < 2 || weights_.cols() < 1)
        throw Error(ErrorCode::SchemaViolation, kModule, "classifier needs at least two classes");
    if (static_cast<Eigen::Index>(labels_.size()) != weights_.rows())
        throw Error(ErrorCode::SchemaViolation, kModule, "label table does not match weight rows");
    if (!weights_.allFinite()) throw Error(ErrorCode::SchemaViolation, kModule, "non-finite classifier weights");
}

Eigen::VectorXd LinearClassifier::scores(const Eigen::VectorXd& x) const {
    if (x.size() != n_features())
        throw Error(ErrorCode::DimensionMismatch, kModule,
                    "expected " + std::to_string(n_features()) + " features, got " + std::to_string(x.size()));
    return weights_.leftCols(n_features()) * x + weights_.col(n_features());
}

Eigen::VectorXd LinearClassifier::predict_proba(const Eigen::VectorXd& x) const { return stable_softmax(scores(x)); }

int LinearClassifier::predict(const Eigen::VectorXd& x) const {
    Eigen::Index best = 0;
    scores(x).maxCoeff(&best);
    return static_cast<int>(best);
}

double objective(const LinearClassifier& clf, const Eigen::MatrixXd& X, std::span<const int> y, double l2) {
    check_labels(X, y, clf.labels().size());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const Eigen::VectorXd s = clf.scores(X.row(i).transpose());
        const double mx = s.maxCoeff();
        loss += mx + std::log((s.array() - mx).exp().sum()) - s(y[static_cast<std::size_t>(i)]);
    }
    loss /= static_cast<double>(X.rows());
    return loss + 0.5 * l2 * clf.weights().leftCols(clf.n_features()).squaredNorm();
}

LinearClassifier train_classifier(const Eigen::MatrixXd& X, std::span<const int> y, std::vector<std::string> labels,
                                  double l2, int epochs, int min_per_class) {
    const auto k = labels.size();
    if (k < 2) throw Error(ErrorCode::InsufficientSamples, kModule, "need at least two labels");
    check_labels(X, y, k);
    std::vector<int> per_class(k, 0);
    for (int c : y) ++per_class[static_cast<std::size_t>(c)];
    for (std::size_t c = 0; c < k; ++c)
        if (per_class[c] < min_per_class)
            throw Error(ErrorCode::InsufficientSamples, kModule,
                        "label '" + labels[c] + "' has " + std::to_string(per_class[c]) + " samples, need " +
                            std::to_string(min_per_class));
    if (l2 < 0.0 || epochs < 0) throw Error(ErrorCode::ConfigError, kModule, "l2 and epochs must be non-negative");

    const Eigen::Index n = X.rows();
    const Eigen::Index f = X.cols();
    Eigen::MatrixXd Xa(n, f + 1);
    Xa << X, Eigen::VectorXd::Ones(n);
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < n; ++i) Y(i, y[static_cast<std::size_t>(i)]) = 1.0;

    // The softmax cross-entropy Hessian is bounded by 0.5 * x x^T per sample.
    const double curvature = 0.5 * Xa.rowwise().squaredNorm().maxCoeff() + l2;
    const double lr = 1.0 / curvature;

    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), f + 1);
    TrainingInfo info{l2, epochs, lr, {}};
    auto eval = [&](Eigen::MatrixXd* grad) {
        Eigen::MatrixXd S = Xa * W.transpose();
        double loss = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double mx = S.row(i).maxCoeff();
            const Eigen::RowVectorXd e = (S.row(i).array() - mx).exp();
            const double z = e.sum();
            loss += mx + std::log(z) - S(i, y[static_cast<std::size_t>(i)]);
            S.row(i) = e / z;
        }
        loss = loss / static_cast<double>(n) + 0.5 * l2 * W.leftCols(f).squaredNorm();
        if (grad) {
            *grad = (S - Y).transpose() * Xa / static_cast<double>(n);
            grad->leftCols(f) += l2 * W.leftCols(f);
        }
        return loss;
    };
    Eigen::MatrixXd G;
    for (int e = 0; e < epochs; ++e) {
        info.loss_history.push_back(eval(&G));
        W -= lr * G;
    }
    info.loss_history.push_back(eval(nullptr));
    if (!W.allFinite()) throw Error(ErrorCode::DivergenceDetected, kModule, "classifier weights became non-finite");

    LinearClassifier clf(std::move(W), std::move(labels));
    clf.info = std::move(info);
    return clf;
}

double accuracy(const LinearClassifier& clf, const Eigen::MatrixXd& X, std::span<const int> y) {
    check_labels(X, y, clf.labels().size());
    if (X.rows() == 0) return 0.0;
    int hits = 0;
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        if (clf.predict(X.row(i).transpose()) == y[static_cast<std::size_t>(i)]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(X.rows());
}

double cosine(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
    if (u.size() != v.size()) throw Error(ErrorCode::DimensionMismatch, kModule, "cosine of vectors of different size");
    const double nu = u.norm();
    const double nv = v.norm();
    if (nu == 0.0 || nv == 0.0) throw Error(ErrorCode::ZeroVector, kModule, "cosine of a zero vector");
    return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

std::vector<std::vector<std::size_t>> stratified_split(std::span<const int> y, std::span<const double> fractions,
                                                       std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> parts(fractions.size());
    if (y.empty() || fractions.empty()) return parts;
    const int k = *std::max_element(y.begin(), y.end()) + 1;
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < y.size(); ++i) by_class[static_cast<std::size_t>(y[i])].push_back(i);
    Rng rng(seed);
    for (auto& members : by_class) {
        rng.shuffle(members);
        const double n = static_cast<double>(members.size());
        double cum = 0.0;
        std::size_t start = 0;
        for (std::size_t p = 0; p < fractions.size(); ++p) {
            cum += fractions[p];
            const std::size_t end = p + 1 == fractions.size()
                                        ? members.size()
                                        : std::min(members.size(), static_cast<std::size_t>(std::llround(cum * n)));
            for (std::size_t i = start; i < end; ++i) parts[p].push_back(members[i]);
            start = std::max(start, end);
        }
    }
    for (auto& part : parts) std::sort(part.begin(), part.end());
    return parts;
}

Eigen::VectorXd StyleClassifier::predict_proba(const abc::TokenSequence& seq) const {
    return model.predict_proba(bigram_features(seq, vocab).values);
}

StyleClassifierReport train_style_classifier(const corpus::StyleCorpus& corpus, std::uint64_t seed, double l2,
                                             int epochs) {
    if (corpus.entries.empty()) throw Error(ErrorCode::EmptyCorpus, kModule, "no pieces to train the classifier on");
    std::vector<int> y;
    std::vector<std::string> labels;
    for (const auto& l : corpus.labels) labels.push_back(l.name);
    for (const auto& e : corpus.entries) {
        const auto it = std::find(corpus.labels.begin(), corpus.labels.end(), e.label);
        if (it == corpus.labels.end()) throw Error(ErrorCode::UnknownStyle, kModule, "entry label not in corpus");
        y.push_back(static_cast<int>(it - corpus.labels.begin()));
    }
    const double fractions[] = {0.7, 0.1, 0.2};
    const auto parts = stratified_split(y, fractions, seed);

    std::vector<abc::TokenSequence> train_pieces;
    for (std::size_t i : parts[0]) train_pieces.push_back(corpus.entries[i].piece);
    StyleClassifierReport report;
    report.classifier.vocab = BigramVocab::build(train_pieces);

    auto design = [&](const std::vector<std::size_t>& idx, std::vector<int>& labels_out) {
        Eigen::MatrixXd X(static_cast<Eigen::Index>(idx.size()), report.classifier.vocab.size());
        labels_out.clear();
        for (std::size_t r = 0; r < idx.size(); ++r) {
            X.row(static_cast<Eigen::Index>(r)) =
                bigram_features(corpus.entries[idx[r]].piece, report.classifier.vocab).values.transpose();
            labels_out.push_back(y[idx[r]]);
        }
        return X;
    };
    std::vector<int> ytr, yva, yte;
    const Eigen::MatrixXd Xtr = design(parts[0], ytr);
    const Eigen::MatrixXd Xva = design(parts[1], yva);
    const Eigen::MatrixXd Xte = design(parts[2], yte);
    report.classifier.model = train_classifier(Xtr, ytr, labels, l2, epochs);
    report.train_accuracy = accuracy(report.classifier.model, Xtr, ytr);
    report.val_accuracy = accuracy(report.classifier.model, Xva, yva);
    report.test_accuracy = accuracy(report.classifier.model, Xte, yte);
    report.n_train = parts[0].size();
    report.n_val = parts[1].size();
    report.n_test = parts[2].size();
    return report;
}

void to_json(nlohmann::json& j, const StyleClassifier& clf) {
    const auto& W = clf.model.weights();
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
        std::vector<double> row;
        for (Eigen::Index c = 0; c < W.cols(); ++c) row.push_back(W(r, c));
        rows.push_back(row);
    }
    j = nlohmann::json{{"labels", clf.model.labels()}, {"bigram_vocab", clf.vocab.keys()}, {"weights", rows}};
}

void from_json(const nlohmann::json& j, StyleClassifier& clf) {
    try {
        auto labels = j.at("labels").get<std::vector<std::string>>();
        clf.vocab = BigramVocab::from_keys(j.at("bigram_vocab").get<std::vector<std::string>>());
        const auto rows = j.at("weights").get<std::vector<std::vector<double>>>();
        const auto cols = static_cast<Eigen::Index>(clf.vocab.size()) + 1;
        Eigen::MatrixXd W(static_cast<Eigen::Index>(rows.size()), cols);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (static_cast<Eigen::Index>(rows[r].size()) != cols)
                throw Error(ErrorCode::SchemaViolation, kModule, "weight row width does not match bigram_vocab");
            for (Eigen::Index c = 0; c < cols; ++c) W(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
        }
        clf.model = LinearClassifier(std::move(W), std::move(labels));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaViolation, kModule, std::string("classifier file: ") + e.what());
    }
}

void save_classifier(const StyleClassifier& clf, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    out << nlohmann::json(clf).dump() << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + path.string());
}

StyleClassifier load_classifier(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoFailure, kModule, "cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaViolation, kModule, std::string("classifier file: ") + e.what());
    }
    return j.get<StyleClassifier>();
}

} // namespace cvsteer::shallow
