#include "cvsteer/localization.hpp"

#include "cvsteer/classifier.hpp"
#include "cvsteer/error.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>

namespace cvsteer::loc {

namespace {

constexpr const char* kModule = "localization";

void check_inputs(const Eigen::MatrixXd& X, std::span<const int> labels) {
    if (static_cast<std::size_t>(X.rows()) != labels.size())
        throw Error(ErrorCode::LengthMismatch, kModule, "embedding rows and labels differ in length");
    for (int c : labels)
        if (c < 0) throw Error(ErrorCode::SchemaViolation, kModule, "negative label index");
    if (!X.allFinite()) throw Error(ErrorCode::SchemaViolation, kModule, "non-finite embedding entries");
}

struct Clusters {
    std::vector<int> present; // label ids with at least one member
    Eigen::MatrixXd centroids; // one row per present label
    std::vector<int> slot;    // label id -> row in centroids, -1 if absent
};

Clusters clusters_of(const Eigen::MatrixXd& X, std::span<const int> labels) {
    Clusters c;
    const int k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    c.slot.assign(static_cast<std::size_t>(k), -1);
    for (int l = 0; l < k; ++l)
        if (counts[static_cast<std::size_t>(l)] > 0) {
            c.slot[static_cast<std::size_t>(l)] = static_cast<int>(c.present.size());
            c.present.push_back(l);
        }
    c.centroids = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c.present.size()), X.cols());
    for (std::size_t i = 0; i < labels.size(); ++i)
        c.centroids.row(c.slot[static_cast<std::size_t>(labels[i])]) += X.row(static_cast<Eigen::Index>(i));
    for (std::size_t s = 0; s < c.present.size(); ++s)
        c.centroids.row(static_cast<Eigen::Index>(s)) /= counts[static_cast<std::size_t>(c.present[s])];
    return c;
}

void require_two_labels(const Clusters& c) {
    if (c.present.size() < 2) throw Error(ErrorCode::InsufficientSamples, kModule, "need at least two labels");
}

} // namespace

PieceEmbedding piece_embedding(const lm::Checkpoint& ckpt, const abc::TokenSequence& seq, int layer,
                               const corpus::StyleLabel& label) {
    if (layer < 1 || layer > ckpt.config().n_layers)
        throw Error(ErrorCode::LayerMismatch, kModule, "layer " + std::to_string(layer) + " out of range");
    const auto ids = ckpt.vocab().encode(seq);
    const auto fr = lm::forward(ckpt, ids);
    const auto& h = fr.hiddens[static_cast<std::size_t>(layer - 1)].values;
    return PieceEmbedding{h.row(h.rows() - 1).transpose(), layer, label};
}

EmbeddingTable embed_corpus(const lm::Checkpoint& ckpt, const corpus::StyleCorpus& corpus) {
    if (corpus.entries.empty()) throw Error(ErrorCode::EmptyCorpus, kModule, "no entries to embed");
    const int L = ckpt.config().n_layers;
    const auto n = static_cast<Eigen::Index>(corpus.entries.size());
    EmbeddingTable t;
    for (const auto& l : corpus.labels) t.label_names.push_back(l.name);
    t.layers.assign(static_cast<std::size_t>(L), Eigen::MatrixXd(n, ckpt.config().d_model));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& e = corpus.entries[static_cast<std::size_t>(i)];
        const auto it = std::find(corpus.labels.begin(), corpus.labels.end(), e.label);
        if (it == corpus.labels.end()) throw Error(ErrorCode::UnknownStyle, kModule, "entry label not in corpus");
        t.labels.push_back(static_cast<int>(it - corpus.labels.begin()));
        const auto ids = ckpt.vocab().encode(corpus::concat(e.prompt, e.piece));
        const auto fr = lm::forward(ckpt, ids);
        for (int l = 0; l < L; ++l) {
            const auto& h = fr.hiddens[static_cast<std::size_t>(l)].values;
            t.layers[static_cast<std::size_t>(l)].row(i) = h.row(h.rows() - 1);
        }
    }
    return t;
}

double probe_accuracy(const Eigen::MatrixXd& X, std::span<const int> labels, std::uint64_t split_seed) {
    check_inputs(X, labels);
    const auto c = clusters_of(X, labels);
    require_two_labels(c);
    std::vector<int> counts(c.slot.size(), 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    for (int l : c.present)
        if (counts[static_cast<std::size_t>(l)] < 4)
            throw Error(ErrorCode::InsufficientSamples, kModule, "probe needs at least 4 samples per label");

    const double fractions[] = {0.75, 0.25};
    const auto parts = shallow::stratified_split(labels, fractions, split_seed);
    const auto& tr = parts[0];
    const auto& te = parts[1];

    // Dense relabelling so absent label ids do not become empty classes.
    auto dense = [&](std::size_t i) { return c.slot[static_cast<std::size_t>(labels[i])]; };
    Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(tr.size()), X.cols());
    std::vector<int> ytr;
    for (std::size_t r = 0; r < tr.size(); ++r) {
        Xtr.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(tr[r]));
        ytr.push_back(dense(tr[r]));
    }
    const Eigen::RowVectorXd mean = Xtr.colwise().mean();
    Eigen::RowVectorXd sd = ((Xtr.rowwise() - mean).colwise().squaredNorm() / static_cast<double>(Xtr.rows())).cwiseSqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j)
        if (!(sd(j) > 1e-12)) sd(j) = 1.0;
    Xtr = (Xtr.rowwise() - mean).array().rowwise() / sd.array();

    Eigen::MatrixXd Xte(static_cast<Eigen::Index>(te.size()), X.cols());
    std::vector<int> yte;
    for (std::size_t r = 0; r < te.size(); ++r) {
        Xte.row(static_cast<Eigen::Index>(r)) =
            (X.row(static_cast<Eigen::Index>(te[r])) - mean).array() / sd.array();
        yte.push_back(dense(te[r]));
    }
    std::vector<std::string> names(c.present.size());
    for (std::size_t s = 0; s < names.size(); ++s) names[s] = std::to_string(c.present[s]);
    const auto clf = shallow::train_classifier(Xtr, ytr, std::move(names), kProbeL2, kProbeEpochs, 1);
    return shallow::accuracy(clf, Xte, yte);
}

double knn_purity(const Eigen::MatrixXd& X, std::span<const int> labels, int k) {
    check_inputs(X, labels);
    const auto n = X.rows();
    if (k < 1 || n <= k)
        throw Error(ErrorCode::InsufficientSamples, kModule,
                    "knn purity needs more than k=" + std::to_string(k) + " points");
    double total = 0.0;
    std::vector<std::pair<double, Eigen::Index>> dist;
    for (Eigen::Index i = 0; i < n; ++i) {
        dist.clear();
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) dist.emplace_back((X.row(i) - X.row(j)).norm(), j);
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
        int same = 0;
        for (int m = 0; m < k; ++m)
            if (labels[static_cast<std::size_t>(dist[static_cast<std::size_t>(m)].second)] ==
                labels[static_cast<std::size_t>(i)])
                ++same;
        total += static_cast<double>(same) / k;
    }
    return total / static_cast<double>(n);
}

MetricValue neg_davies_bouldin(const Eigen::MatrixXd& X, std::span<const int> labels) {
    check_inputs(X, labels);
    const auto c = clusters_of(X, labels);
    require_two_labels(c);
    const auto K = c.present.size();
    std::vector<double> sigma(K, 0.0);
    std::vector<int> members(K, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto s = static_cast<std::size_t>(c.slot[static_cast<std::size_t>(labels[i])]);
        sigma[s] += (X.row(static_cast<Eigen::Index>(i)) - c.centroids.row(static_cast<Eigen::Index>(s))).norm();
        ++members[s];
    }
    for (std::size_t s = 0; s < K; ++s) sigma[s] /= members[s];
    double sum = 0.0;
    for (std::size_t a = 0; a < K; ++a) {
        double worst = -std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < K; ++b) {
            if (a == b) continue;
            const double dist =
                (c.centroids.row(static_cast<Eigen::Index>(a)) - c.centroids.row(static_cast<Eigen::Index>(b))).norm();
            if (dist == 0.0) return {-std::numeric_limits<double>::infinity(), true};
            worst = std::max(worst, (sigma[a] + sigma[b]) / dist);
        }
        sum += worst;
    }
    return {-sum / static_cast<double>(K), false};
}

MetricValue separation_ratio(const Eigen::MatrixXd& X, std::span<const int> labels) {
    check_inputs(X, labels);
    const auto c = clusters_of(X, labels);
    require_two_labels(c);
    const auto K = static_cast<Eigen::Index>(c.present.size());
    double inter = 0.0;
    int pairs = 0;
    for (Eigen::Index a = 0; a < K; ++a)
        for (Eigen::Index b = a + 1; b < K; ++b) {
            inter += (c.centroids.row(a) - c.centroids.row(b)).norm();
            ++pairs;
        }
    inter /= pairs;
    double intra = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        intra += (X.row(static_cast<Eigen::Index>(i)) - c.centroids.row(c.slot[static_cast<std::size_t>(labels[i])])).norm();
    intra /= static_cast<double>(labels.size());
    if (intra == 0.0) return {std::numeric_limits<double>::infinity(), true};
    return {inter / intra, false};
}

void select_layer(LayerReport& report) {
    if (report.layers.empty()) throw Error(ErrorCode::InsufficientSamples, kModule, "empty layer report");
    for (auto& m : report.layers) m.first_place_count = 0;
    const std::function<double(const LayerMetrics&)> metrics[] = {
        [](const LayerMetrics& m) { return m.probe_accuracy; },
        [](const LayerMetrics& m) { return m.knn_purity; },
        [](const LayerMetrics& m) { return m.neg_dbi.value; },
        [](const LayerMetrics& m) { return m.sep_ratio.value; },
    };
    for (const auto& f : metrics) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& m : report.layers) best = std::max(best, f(m));
        for (auto& m : report.layers)
            if (f(m) == best) ++m.first_place_count;
    }
    const LayerMetrics* pick = &report.layers.front();
    for (const auto& m : report.layers)
        if (m.first_place_count > pick->first_place_count ||
            (m.first_place_count == pick->first_place_count && m.layer > pick->layer))
            pick = &m;
    report.selected_layer = pick->layer;
}

LayerReport layer_report(const EmbeddingTable& table, std::uint64_t split_seed) {
    LayerReport report;
    for (std::size_t l = 0; l < table.layers.size(); ++l) {
        const auto& X = table.layers[l];
        LayerMetrics m;
        m.layer = static_cast<int>(l) + 1;
        m.probe_accuracy = probe_accuracy(X, table.labels, split_seed);
        m.knn_purity = knn_purity(X, table.labels, 5);
        m.neg_dbi = neg_davies_bouldin(X, table.labels);
        m.sep_ratio = separation_ratio(X, table.labels);
        report.layers.push_back(m);
    }
    select_layer(report);
    return report;
}

LayerReport layer_report(const lm::Checkpoint& ckpt, const corpus::StyleCorpus& corpus, std::uint64_t split_seed) {
    return layer_report(embed_corpus(ckpt, corpus), split_seed);
}

namespace {

nlohmann::json metric_json(const MetricValue& v) {
    // JSON has no infinities; the sentinel is carried by the flag.
    return {{"value", std::isfinite(v.value) ? nlohmann::json(v.value) : nlohmann::json(nullptr)},
            {"degenerate", v.degenerate}};
}

MetricValue metric_from_json(const nlohmann::json& j, double sentinel) {
    MetricValue v;
    v.degenerate = j.at("degenerate").get<bool>();
    v.value = j.at("value").is_null() ? sentinel : j.at("value").get<double>();
    return v;
}

} // namespace

void to_json(nlohmann::json& j, const LayerReport& report) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& m : report.layers)
        layers.push_back({{"layer", m.layer},
                          {"probe_accuracy", m.probe_accuracy},
                          {"knn_purity", m.knn_purity},
                          {"neg_dbi", metric_json(m.neg_dbi)},
                          {"sep_ratio", metric_json(m.sep_ratio)},
                          {"first_place_count", m.first_place_count}});
    j = {{"layers", layers}, {"selected_layer", report.selected_layer}};
}

void from_json(const nlohmann::json& j, LayerReport& report) {
    try {
        report = {};
        for (const auto& l : j.at("layers")) {
            LayerMetrics m;
            m.layer = l.at("layer").get<int>();
            m.probe_accuracy = l.at("probe_accuracy").get<double>();
            m.knn_purity = l.at("knn_purity").get<double>();
            m.neg_dbi = metric_from_json(l.at("neg_dbi"), -std::numeric_limits<double>::infinity());
            m.sep_ratio = metric_from_json(l.at("sep_ratio"), std::numeric_limits<double>::infinity());
            m.first_place_count = l.at("first_place_count").get<int>();
            report.layers.push_back(m);
        }
        report.selected_layer = j.at("selected_layer").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaViolation, kModule, std::string("layer report: ") + e.what());
    }
}

void save_layer_report(const LayerReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    out << nlohmann::json(report).dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + path.string());
}

LayerReport load_layer_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoFailure, kModule, "cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaViolation, kModule, std::string("layer report: ") + e.what());
    }
    return j.get<LayerReport>();
}

Eigen::MatrixXd pca_projection(const Eigen::MatrixXd& X, int dims) {
    if (dims < 1 || X.rows() < dims || X.cols() < dims)
        throw Error(ErrorCode::InsufficientSamples, kModule, "pca needs at least `dims` points and features");
    const Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
    const Eigen::MatrixXd cov = C.transpose() * C;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw Error(ErrorCode::DivergenceDetected, kModule, "eigen decomposition failed");
    Eigen::MatrixXd basis(X.cols(), dims);
    for (int k = 0; k < dims; ++k) {
        Eigen::VectorXd v = eig.eigenvectors().col(X.cols() - 1 - k); // eigenvalues are ascending
        Eigen::Index big = 0;
        v.cwiseAbs().maxCoeff(&big);
        if (v(big) < 0.0) v = -v;
        basis.col(k) = v;
    }
    return C * basis;
}

void write_projection_csv(const Eigen::MatrixXd& coords, std::span<const int> labels,
                          std::span<const std::string> label_names, const std::filesystem::path& path) {
    if (static_cast<std::size_t>(coords.rows()) != labels.size() || coords.cols() < 2)
        throw Error(ErrorCode::LengthMismatch, kModule, "projection rows and labels differ");
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    out << "piece_id,label,x,y\n";
    out.precision(17);
    for (Eigen::Index i = 0; i < coords.rows(); ++i)
        out << i << ',' << label_names[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] << ','
            << coords(i, 0) << ',' << coords(i, 1) << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + path.string());
}

} // namespace cvsteer::loc
