#include "cvsteer/error.hpp"
#include "cvsteer/localization.hpp"
#include "cvsteer/random.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

using namespace cvsteer;

namespace {

Eigen::MatrixXd two_clusters(int per, double gap, Rng& rng, double spread = 0.01) {
    Eigen::MatrixXd X(2 * per, 3);
    for (int i = 0; i < 2 * per; ++i)
        for (int c = 0; c < 3; ++c) X(i, c) = (i < per ? 0.0 : gap) + spread * rng.normal();
    return X;
}

std::vector<int> halves(int per) {
    std::vector<int> y(2 * static_cast<std::size_t>(per), 0);
    for (int i = per; i < 2 * per; ++i) y[static_cast<std::size_t>(i)] = 1;
    return y;
}

} // namespace

TEST_CASE("knn purity: separated clusters, alternating labels") {
    Rng rng(1);
    CHECK(loc::knn_purity(two_clusters(10, 50.0, rng), halves(10), 5) == 1.0);

    // Even polygon with alternating labels: both nearest neighbours differ.
    const int n = 12;
    Eigen::MatrixXd ring(n, 2);
    std::vector<int> alt(n);
    for (int i = 0; i < n; ++i) {
        ring(i, 0) = std::cos(2 * std::numbers::pi * i / n);
        ring(i, 1) = std::sin(2 * std::numbers::pi * i / n);
        alt[static_cast<std::size_t>(i)] = i % 2;
    }
    CHECK(loc::knn_purity(ring, alt, 2) == doctest::Approx(0.0));

    // On an open line the two endpoints reach one same-label point at distance 2.
    Eigen::MatrixXd line(n, 1);
    for (int i = 0; i < n; ++i) line(i, 0) = i;
    CHECK(loc::knn_purity(line, alt, 2) == doctest::Approx(1.0 / n));
    CHECK(loc::knn_purity(line, alt, 2) == doctest::Approx(oracle::knn_purity(line, alt, 2)));

    CHECK_THROWS_AS(loc::knn_purity(line.topRows(5), std::vector<int>(5, 0), 5), Error);
}

TEST_CASE("metrics match brute force on random instances") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const int K = 2 + static_cast<int>(rng.below(3));
        const auto inst = oracle::random_instance(rng, 7, 50, K);
        CHECK(std::abs(loc::knn_purity(inst.X, inst.y, 5) - oracle::knn_purity(inst.X, inst.y, 5)) <= 1e-12);
        const auto dbi = loc::neg_davies_bouldin(inst.X, inst.y);
        CHECK_FALSE(dbi.degenerate);
        CHECK(std::abs(dbi.value - oracle::neg_davies_bouldin(inst.X, inst.y)) <= 1e-12);
        const auto sep = loc::separation_ratio(inst.X, inst.y);
        CHECK(std::abs(sep.value - oracle::separation_ratio(inst.X, inst.y)) <= 1e-12);
    }
}

TEST_CASE("davies-bouldin hand cases") {
    Eigen::MatrixXd X(2, 2);
    X << 0, 0, 2, 0;
    const std::vector<int> y{0, 1};
    const auto v = loc::neg_davies_bouldin(X, y);
    CHECK(v.value == 0.0);
    CHECK_FALSE(v.degenerate);

    // Three planar clusters worked by hand: scatters 1, 1, 0.5 and
    // centroids (0,0), (4,0), (0,3).
    Eigen::MatrixXd P(6, 2);
    P << -1, 0, 1, 0, 4, 1, 4, -1, 0, 2.5, 0, 3.5;
    const std::vector<int> lab{0, 0, 1, 1, 2, 2};
    const double r01 = 2.0 / 4.0, r02 = 1.5 / 3.0, r12 = 1.5 / 5.0;
    const double expect = -(std::max(r01, r02) + std::max(r01, r12) + std::max(r02, r12)) / 3.0;
    CHECK(std::abs(loc::neg_davies_bouldin(P, lab).value - expect) <= 1e-12);
    CHECK(std::abs(oracle::neg_davies_bouldin(P, lab) - expect) <= 1e-12);

    Eigen::MatrixXd C(4, 1);
    C << -1, 1, -2, 2;
    const auto d = loc::neg_davies_bouldin(C, std::vector<int>{0, 0, 1, 1});
    CHECK(d.degenerate);
    CHECK(d.value == -std::numeric_limits<double>::infinity());
}

TEST_CASE("separation ratio") {
    Eigen::MatrixXd X(2, 2);
    X << 0, 0, 2, 0;
    const auto s = loc::separation_ratio(X, std::vector<int>{0, 1});
    CHECK(s.degenerate);
    CHECK(s.value == std::numeric_limits<double>::infinity());

    Rng a(3), b(3);
    const auto near = two_clusters(40, 10.0, a, 1.0);
    auto far = near;
    far.bottomRows(40).array() += 10.0; // centroid distance grows, scatter unchanged
    const double r1 = loc::separation_ratio(near, halves(40)).value;
    const double r2 = loc::separation_ratio(far, halves(40)).value;
    CHECK(r1 > 5.0);
    const double d1 = (near.topRows(40).colwise().mean() - near.bottomRows(40).colwise().mean()).norm();
    const double d2 = (far.topRows(40).colwise().mean() - far.bottomRows(40).colwise().mean()).norm();
    CHECK(r2 / r1 == doctest::Approx(d2 / d1).epsilon(1e-12));
}

TEST_CASE("probe accuracy") {
    Eigen::MatrixXd X(40, 3);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
        y[static_cast<std::size_t>(i)] = i % 2;
        X.row(i) = i % 2 ? Eigen::RowVector3d(1, 2, 3) : Eigen::RowVector3d(-1, 0, 5);
    }
    CHECK(loc::probe_accuracy(X, y, 1) == 1.0);
    CHECK_THROWS_AS(loc::probe_accuracy(X, std::vector<int>(40, 0), 1), Error);

    // Identical embeddings with random labels sit at chance.
    Rng rng(8);
    double sum = 0.0;
    const int runs = 20;
    for (int r = 0; r < runs; ++r) {
        Eigen::MatrixXd Z = Eigen::MatrixXd::Ones(80, 4);
        std::vector<int> lab(80);
        for (int i = 0; i < 80; ++i) lab[static_cast<std::size_t>(i)] = i < 4 ? i : static_cast<int>(rng.below(4));
        const double acc = loc::probe_accuracy(Z, lab, static_cast<std::uint64_t>(r));
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
        sum += acc;
    }
    CHECK(std::abs(sum / runs - 0.25) <= 0.15);
}

TEST_CASE("layer selection rule") {
    loc::LayerReport rep;
    for (int l = 1; l <= 4; ++l) {
        loc::LayerMetrics m;
        m.layer = l;
        m.probe_accuracy = l == 3 ? 0.9 : 0.5;
        m.knn_purity = l == 3 ? 0.9 : 0.5;
        m.neg_dbi.value = l == 3 ? -0.5 : -1.0;
        m.sep_ratio.value = l == 4 ? 3.0 : 1.0;
        rep.layers.push_back(m);
    }
    loc::select_layer(rep);
    CHECK(rep.selected_layer == 3);
    CHECK(rep.layers[2].first_place_count == 3);
    CHECK(rep.layers[3].first_place_count == 1);
    for (const auto& m : rep.layers) CHECK(rep.layers[2].first_place_count >= m.first_place_count);

    for (auto& m : rep.layers) {
        m.probe_accuracy = 0.7;
        m.knn_purity = 0.7;
        m.neg_dbi.value = -1.0;
        m.sep_ratio.value = 2.0;
    }
    loc::select_layer(rep);
    CHECK(rep.selected_layer == 4);
}

TEST_CASE("layer report JSON keeps sentinels") {
    loc::LayerReport rep;
    loc::LayerMetrics m;
    m.layer = 1;
    m.probe_accuracy = 0.5;
    m.knn_purity = 0.25;
    m.neg_dbi = {-std::numeric_limits<double>::infinity(), true};
    m.sep_ratio = {std::numeric_limits<double>::infinity(), true};
    rep.layers.push_back(m);
    m.layer = 2;
    m.neg_dbi = {-0.75, false};
    m.sep_ratio = {1.5, false};
    rep.layers.push_back(m);
    loc::select_layer(rep);
    const auto path = std::filesystem::temp_directory_path() / "cvsteer_test_layers.json";
    loc::save_layer_report(rep, path);
    const auto back = loc::load_layer_report(path);
    REQUIRE(back.layers.size() == 2);
    CHECK(back.selected_layer == rep.selected_layer);
    CHECK(back.layers[0].neg_dbi.degenerate);
    CHECK(std::isinf(back.layers[0].neg_dbi.value));
    CHECK(back.layers[0].neg_dbi.value < 0);
    CHECK(back.layers[0].sep_ratio.value > 0);
    CHECK(back.layers[1].neg_dbi.value == -0.75);
    std::filesystem::remove(path);
}

TEST_CASE("piece embedding is the final hidden row") {
    lm::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.context_len = 64;
    const auto seq = abc::tokenize("%style:Alpha\nX:1\nK:C\nCDE|");
    const auto vocab = lm::Vocab::from_sequences(std::vector<abc::TokenSequence>{seq});
    cfg.vocab_size = vocab.size();
    lm::Checkpoint ck(cfg, vocab);
    ck.init_random(3);
    const auto ids = vocab.encode(seq);
    const auto fw = lm::forward(ck, ids);
    for (int l = 1; l <= 2; ++l) {
        const auto e = loc::piece_embedding(ck, seq, l);
        CHECK(e.layer == l);
        CHECK(e.vector == fw.hiddens[static_cast<std::size_t>(l - 1)].values.row(fw.logits.rows() - 1).transpose());
        CHECK(e.vector == loc::piece_embedding(ck, seq, l).vector);
    }
    const auto single = abc::tokenize("C");
    const auto e1 = loc::piece_embedding(ck, single, 1);
    CHECK(e1.vector == lm::forward(ck, vocab.encode(single)).hiddens[0].values.row(0).transpose());
}

TEST_CASE("pca projection") {
    Rng rng(6);
    Eigen::MatrixXd X(30, 2);
    for (int i = 0; i < 30; ++i) X.row(i) << 3.0 * rng.normal(), rng.normal();
    X.rowwise() -= X.colwise().mean();
    const auto P = loc::pca_projection(X, 2);
    for (int i = 0; i < 30; ++i)
        for (int j = 0; j < 30; ++j)
            CHECK(std::abs((P.row(i) - P.row(j)).norm() - (X.row(i) - X.row(j)).norm()) < 1e-9);
    const Eigen::RowVectorXd var = P.array().square().colwise().mean();
    CHECK(var(0) >= var(1));

    Eigen::MatrixXd R(20, 4);
    const Eigen::RowVector4d dir(1, -2, 0.5, 3);
    for (int i = 0; i < 20; ++i) R.row(i) = rng.normal() * dir;
    const auto Q = loc::pca_projection(R, 2);
    CHECK(Q.col(1).cwiseAbs().maxCoeff() < 1e-9);

    const auto csv = std::filesystem::temp_directory_path() / "cvsteer_test_proj.csv";
    loc::write_projection_csv(Q, std::vector<int>(20, 1), std::vector<std::string>{"A", "B"}, csv);
    std::ifstream in(csv);
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "piece_id,label,x,y");
    CHECK(first.rfind("0,B,", 0) == 0);
    std::filesystem::remove(csv);
}
