#include "cvsteer/classifier.hpp"
#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace cvsteer;

TEST_CASE("bigram features") {
    const auto seq = abc::tokenize("C D | E C D");
    const abc::TokenSequence seqs[] = {seq};
    const auto vocab = shallow::BigramVocab::build(seqs);
    // Barlines are skipped, so D E is a bigram.
    CHECK(vocab.keys() == std::vector<std::string>{"C D", "D E", "E C"});
    CHECK(vocab.index_of("C", "D") == 0);
    CHECK(vocab.index_of("G", "A") == vocab.oov_index());

    const auto f = shallow::bigram_features(seq, vocab);
    CHECK_FALSE(f.empty);
    CHECK(f.values(0) == doctest::Approx(0.5));
    CHECK(f.values(1) == doctest::Approx(0.25));
    CHECK(f.values(2) == doctest::Approx(0.25));
    CHECK(f.values(vocab.oov_index()) == 0.0);
    CHECK(f.values.sum() == doctest::Approx(1.0));

    const auto unseen = shallow::bigram_features(abc::tokenize("G A"), vocab);
    CHECK(unseen.values(vocab.oov_index()) == 1.0);

    const auto short_seq = shallow::bigram_features(abc::tokenize("C | |"), vocab);
    CHECK(short_seq.empty);
    CHECK(short_seq.values.isZero());
}

TEST_CASE("training on separable data") {
    Eigen::MatrixXd X(6, 2);
    X << 1, 0, 0.9, 0.1, 1, 0.2, 0, 1, 0.1, 0.9, 0.2, 1;
    const std::vector<int> y{0, 0, 0, 1, 1, 1};
    const auto clf = shallow::train_classifier(X, y, {"a", "b"}, 0.0, 500, 1);
    CHECK(shallow::accuracy(clf, X, y) == 1.0);
    const auto& loss = clf.info.loss_history;
    REQUIRE(loss.size() == 501);
    for (std::size_t i = 1; i < loss.size(); ++i) CHECK(loss[i] <= loss[i - 1] + 1e-12);

    const auto again = shallow::train_classifier(X, y, {"a", "b"}, 0.0, 500, 1);
    CHECK(again.weights() == clf.weights());
}

TEST_CASE("identical features predict the majority class") {
    const Eigen::MatrixXd X = Eigen::MatrixXd::Ones(10, 3);
    const std::vector<int> y{0, 1, 1, 1, 2, 1, 1, 0, 2, 1};
    const auto clf = shallow::train_classifier(X, y, {"a", "b", "c"}, 1e-3, 300, 1);
    const auto p = clf.predict_proba(Eigen::VectorXd::Ones(3));
    CHECK(clf.predict(Eigen::VectorXd::Ones(3)) == 1);
    CHECK(p(1) == doctest::Approx(0.6).epsilon(0.02));
}

TEST_CASE("monotone loss with weight decay on random data") {
    Rng rng(8);
    Eigen::MatrixXd X(40, 5);
    std::vector<int> y;
    for (int i = 0; i < 40; ++i) {
        for (int j = 0; j < 5; ++j) X(i, j) = rng.normal();
        y.push_back(i % 3);
    }
    const auto clf = shallow::train_classifier(X, y, {"a", "b", "c"}, 0.1, 200);
    const auto& loss = clf.info.loss_history;
    for (std::size_t i = 1; i < loss.size(); ++i) CHECK(loss[i] <= loss[i - 1] + 1e-12);
    CHECK(loss.back() == doctest::Approx(shallow::objective(clf, X, y, 0.1)).epsilon(1e-12));
}

TEST_CASE("predict_proba") {
    const shallow::LinearClassifier zero(Eigen::MatrixXd::Zero(4, 3), {"a", "b", "c", "d"});
    const auto p = zero.predict_proba(Eigen::Vector2d(3.0, -1.0));
    for (int i = 0; i < 4; ++i) CHECK(p(i) == doctest::Approx(0.25).epsilon(1e-15));

    Eigen::MatrixXd w(2, 2);
    w << 1, 0, 0, 0;
    const shallow::LinearClassifier two(w, {"a", "b"});
    const auto q = two.predict_proba(Eigen::VectorXd::Ones(1));
    const double e = std::exp(1.0);
    CHECK(q(0) == doctest::Approx(e / (e + 1)).epsilon(1e-15));
    CHECK(q(1) == doctest::Approx(1 / (e + 1)).epsilon(1e-15));

    Rng rng(2);
    for (int t = 0; t < 200; ++t) {
        Eigen::MatrixXd W(3, 4);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) W(i, j) = 50.0 * rng.normal();
        const shallow::LinearClassifier c(W, {"a", "b", "c"});
        Eigen::VectorXd x(3);
        for (int j = 0; j < 3; ++j) x(j) = rng.normal();
        const auto r = c.predict_proba(x);
        CHECK(r.allFinite());
        CHECK(std::abs(r.sum() - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(two.predict_proba(Eigen::VectorXd::Ones(3)), Error);
    CHECK_THROWS_AS(shallow::LinearClassifier(Eigen::MatrixXd::Zero(1, 2), {"a"}), Error);
}

TEST_CASE("cosine") {
    const Eigen::Vector2d x(1, 0), y(0, 1), d(1, 1);
    CHECK(shallow::cosine(x, x) == doctest::Approx(1.0));
    CHECK(shallow::cosine(x, y) == 0.0);
    CHECK(shallow::cosine(x, d) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(shallow::cosine(d, x) == shallow::cosine(x, d));
    CHECK(shallow::cosine(3.0 * d, x) == doctest::Approx(shallow::cosine(d, x)).epsilon(1e-15));
    CHECK(shallow::cosine(-x, x) == doctest::Approx(-1.0));
    try {
        shallow::cosine(Eigen::Vector2d::Zero(), x);
        FAIL("expected ZeroVector");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ZeroVector);
    }
}

TEST_CASE("stratified split") {
    std::vector<int> y;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 20; ++i) y.push_back(c);
    const double fractions[] = {0.7, 0.1, 0.2};
    const auto parts = shallow::stratified_split(y, fractions, 11);
    REQUIRE(parts.size() == 3);
    std::vector<std::size_t> all;
    for (const auto& p : parts) all.insert(all.end(), p.begin(), p.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(y.size());
    std::iota(expect.begin(), expect.end(), 0);
    CHECK(all == expect);
    for (int c = 0; c < 3; ++c) {
        const auto count = [&](const std::vector<std::size_t>& p) {
            return std::count_if(p.begin(), p.end(), [&](std::size_t i) { return y[i] == c; });
        };
        CHECK(count(parts[0]) == 14);
        CHECK(count(parts[1]) == 2);
        CHECK(count(parts[2]) == 4);
    }
    CHECK(shallow::stratified_split(y, fractions, 11) == parts);
    CHECK(shallow::stratified_split(y, fractions, 12) != parts);
}

TEST_CASE("too few samples per class") {
    const Eigen::MatrixXd X = Eigen::MatrixXd::Ones(6, 2);
    const std::vector<int> y{0, 0, 0, 0, 0, 1};
    try {
        shallow::train_classifier(X, y, {"a", "b"}, 0.0, 10);
        FAIL("expected InsufficientSamples");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InsufficientSamples);
        CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
}

TEST_CASE("style classifier round trip") {
    const auto& t = fixture::tiny();
    const auto path = std::filesystem::temp_directory_path() / "cvsteer_test_classifier.json";
    shallow::save_classifier(t.classifier, path);
    const auto back = shallow::load_classifier(path);
    CHECK(back.model.weights() == t.classifier.model.weights());
    CHECK(back.model.labels() == t.classifier.model.labels());
    CHECK(back.vocab.keys() == t.classifier.vocab.keys());
    const auto& piece = t.corpus.entries.front().piece;
    CHECK(back.predict_proba(piece) == t.classifier.predict_proba(piece));
    std::filesystem::remove(path);
}
