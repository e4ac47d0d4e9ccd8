#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"
#include "cvsteer/steering.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace cvsteer;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

steer::ComposerVector cv(Eigen::VectorXd s, int layer = 1) {
    steer::ComposerVector v;
    v.s = std::move(s);
    v.layer = layer;
    return v;
}

Eigen::VectorXd random_vec(Rng& rng, int d, double scale) {
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v(i) = scale * rng.normal();
    return v;
}

} // namespace

TEST_CASE("steer_hidden hand cases") {
    const auto h = vec({3, 4});
    CHECK(steer::steer_hidden(h, vec({0, 1}), 0.0, true) == h);
    CHECK(steer::steer_hidden(h, vec({0, 1}), 0.0, false) == h);
    const auto out = steer::steer_hidden(h, vec({0, 1}), 1.0, true);
    CHECK(out(0) == doctest::Approx(15.0 / std::sqrt(34.0)).epsilon(1e-15));
    CHECK(out(1) == doctest::Approx(25.0 / std::sqrt(34.0)).epsilon(1e-15));
    CHECK(out.norm() == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(steer::steer_hidden(h, vec({0, 1}), 1.0, false) == vec({3, 5}));
    // Exact cancellation and a zero row leave h untouched.
    CHECK(steer::steer_hidden(h, -h / 2.0, 2.0, true) == h);
    CHECK(steer::steer_hidden(vec({0, 0}), vec({1, 1}), 1.0, true) == vec({0, 0}));
    CHECK_THROWS_AS(steer::steer_hidden(h, vec({1, 2, 3}), 1.0, true), Error);
}

TEST_CASE("property: norm preservation and direction scaling") {
    Rng rng(77);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const int d = 1 + static_cast<int>(rng.below(64));
        const auto h = random_vec(rng, d, std::exp(2.0 * rng.normal()));
        const auto s = random_vec(rng, d, std::exp(2.0 * rng.normal()));
        const double alpha = 4.0 * (rng.uniform() - 0.5);
        const auto out = steer::steer_hidden(h, s, alpha, true);
        worst = std::max(worst, std::abs(out.norm() - h.norm()) / h.norm());
        const double beta = 0.1 + 3.0 * rng.uniform();
        const auto scaled = steer::steer_hidden(h, beta * s, alpha, true);
        const auto folded = steer::steer_hidden(h, s, alpha * beta, true);
        CHECK((scaled - folded).norm() <= 1e-12 * h.norm());
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("fuse") {
    const auto a = cv(vec({1, 0})), b = cv(vec({0, 1}));
    const steer::FusionTerm one[] = {{&a, 1.0}};
    CHECK(steer::fuse(one) == a.s);
    const steer::FusionTerm cancel[] = {{&a, 1.0}, {&a, -1.0}};
    CHECK(steer::fuse(cancel) == vec({0, 0}));
    const steer::FusionTerm mix[] = {{&a, 0.7}, {&b, 0.3}};
    CHECK(steer::fuse(mix) == vec({0.7, 0.3}));
    const steer::FusionTerm w0[] = {{&a, 0.0}, {&b, 1.0}};
    CHECK(steer::fuse(w0) == b.s);

    const auto c = cv(vec({1, 2, 3}));
    const steer::FusionTerm dims[] = {{&a, 1.0}, {&c, 1.0}};
    CHECK_THROWS_AS(steer::fuse(dims), Error);
    const auto other_layer = cv(vec({1, 1}), 2);
    const steer::FusionTerm layers[] = {{&a, 1.0}, {&other_layer, 1.0}};
    try {
        steer::fuse(layers);
        FAIL("expected LayerMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::LayerMismatch);
    }
    CHECK_THROWS_AS(steer::fuse(std::span<const steer::FusionTerm>{}), Error);

    // Linearity over concatenated term lists.
    Rng rng(4);
    std::vector<steer::ComposerVector> vs;
    for (int i = 0; i < 6; ++i) vs.push_back(cv(random_vec(rng, 5, 1.0)));
    std::vector<steer::FusionTerm> t1, t2, both;
    for (int i = 0; i < 6; ++i) {
        const steer::FusionTerm t{&vs[static_cast<std::size_t>(i)], rng.normal()};
        (i < 3 ? t1 : t2).push_back(t);
        both.push_back(t);
    }
    CHECK((steer::fuse(both) - (steer::fuse(t1) + steer::fuse(t2))).norm() < 1e-12);
}

TEST_CASE("composer vectors are per-label means") {
    using corpus::StyleLabel;
    loc::EmbeddingTable table;
    table.label_names = {"A", "B"};
    corpus::StyleCorpus c;
    c.labels = {StyleLabel{0, "A"}, StyleLabel{1, "B"}};
    Rng rng(12);
    const int d = 6;
    std::vector<Eigen::VectorXd> rows;
    const auto e = random_vec(rng, d, 1.0);
    rows.push_back(e);
    rows.push_back(-e);
    table.labels = {0, 0};
    for (int i = 0; i < 10; ++i) {
        rows.push_back(random_vec(rng, d, 1.0));
        table.labels.push_back(1);
    }
    Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    table.layers = {X};
    const auto vs = steer::build_vectors(table, c, 1);
    CHECK(vs[0].s.norm() < 1e-15);
    CHECK(vs[0].n_sources == 2);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    for (int i = 2; i < 12; ++i) sum += rows[static_cast<std::size_t>(i)];
    CHECK((vs[1].s - sum / 10.0).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(vs[1].n_sources == 10);

    const auto centered = steer::build_vectors(table, c, 1, true);
    const Eigen::VectorXd grand = X.colwise().mean().transpose();
    CHECK((centered[1].s - (vs[1].s - grand)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(centered[1].centered);
    CHECK_THROWS_AS(steer::build_vectors(table, c, 2), Error);
}

TEST_CASE("build_vector from a checkpoint") {
    const auto& t = fixture::tiny();
    const auto entries = t.corpus.entries_for(1);
    const std::vector<const corpus::CorpusEntry*> one{entries.front()};
    const auto v = steer::build_vector(t.model, one, 2);
    const auto& e = *entries.front();
    CHECK(v.s == loc::piece_embedding(t.model, corpus::concat(e.prompt, e.piece), 2).vector);
    CHECK(v.n_sources == 1);
    const auto all = steer::build_vector(t.model, entries, 2);
    CHECK((all.s - t.vectors[1].s).cwiseAbs().maxCoeff() < 1e-9);
    CHECK_THROWS_AS(steer::build_vector(t.model, std::span<const corpus::CorpusEntry* const>{}, 2), Error);
}

TEST_CASE("alpha zero is token-identical to unsteered generation") {
    const auto& t = fixture::tiny();
    const auto& v = t.vectors[2];
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto prompt = steer::make_prompt(t.styles[seed % 4]);
        const lm::Sampler sampler{0.8, seed};
        for (bool gate : {true, false}) {
            auto cfg = steer::make_config(v, 0.0);
            cfg.format_gate = gate;
            const auto steered = steer::steered_generate(t.model, prompt, cfg, sampler, 100);
            const auto plain = lm::generate_ids(t.model, steer::prompt_ids(t.model.vocab(), prompt), 100, sampler);
            CHECK(steered.ids == plain);
        }
        auto none = steer::make_config(v, 0.5);
        none.direction.resize(0);
        CHECK(steer::steered_generate(t.model, prompt, none, sampler, 100).ids ==
              lm::generate_ids(t.model, steer::prompt_ids(t.model.vocab(), prompt), 100, sampler));
    }
}

TEST_CASE("gating soundness") {
    const auto& t = fixture::tiny();
    const auto& vocab = t.model.vocab();
    int gated = 0, steered = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto cfg = steer::make_config(t.vectors[seed % 4], 2.0);
        const auto r = steer::steered_generate(t.model, steer::make_prompt(t.styles[(seed + 1) % 4]), cfg,
                                               lm::Sampler{0.8, seed}, 100);
        for (const auto& s : r.per_step) {
            CHECK(s.was_gated == vocab.is_format(s.candidate));
            if (s.was_gated) {
                CHECK(s.token == s.candidate);
                ++gated;
            } else {
                CHECK_FALSE(vocab.is_format(s.token));
                ++steered;
            }
        }
        CHECK(r.gated_count() == static_cast<int>(std::count_if(r.per_step.begin(), r.per_step.end(),
                                                                 [](const steer::StepRecord& s) { return s.was_gated; })));
        cfg.format_gate = false;
        const auto off = steer::steered_generate(t.model, steer::make_prompt(t.styles[(seed + 1) % 4]), cfg,
                                                 lm::Sampler{0.8, seed}, 100);
        CHECK(off.gated_count() == 0);
    }
    CHECK(gated > 0);
    CHECK(steered > 0);
}

TEST_CASE("content resample") {
    const auto& t = fixture::tiny();
    const auto& vocab = t.model.vocab();
    Rng rng(5);
    int content = -1;
    for (int i = 0; i < vocab.size(); ++i)
        if (!vocab.is_format(i)) content = i;
    REQUIRE(content >= 0);
    const lm::Vec base = random_vec(rng, vocab.size(), 1.0);
    CHECK(steer::sample_content(vocab, base, base, 0.8, 0.3, content) == content);
    for (int i = 0; i < 500; ++i) {
        const lm::Vec steered = base + random_vec(rng, vocab.size(), 2.0);
        const double u = rng.uniform();
        const int cand = lm::sample_token(base, 0.8, u);
        if (vocab.is_format(cand)) {
            CHECK_THROWS_AS(steer::sample_content(vocab, base, steered, 0.8, u, cand), Error);
            continue;
        }
        CHECK_FALSE(vocab.is_format(steer::sample_content(vocab, base, steered, 0.8, u, cand)));
    }
    const lm::Vec wrong = lm::Vec::Zero(vocab.size() + 1);
    CHECK_THROWS_AS(steer::sample_content(vocab, base, wrong, 0.8, 0.3, content), Error);
}

TEST_CASE("context and layer checks") {
    const auto& t = fixture::tiny();
    auto cfg = steer::make_config(t.vectors[0], 0.5);
    CHECK_THROWS_AS(steer::steered_generate(t.model, steer::make_prompt(t.styles[0]), cfg, lm::Sampler{0.8, 1}, 500),
                    Error);
    cfg.layer = 7;
    CHECK_THROWS_AS(steer::steered_generate(t.model, steer::make_prompt(t.styles[0]), cfg, lm::Sampler{0.8, 1}, 50),
                    Error);
}

TEST_CASE("vector file round trip and schema errors") {
    const auto& t = fixture::tiny();
    const auto path = std::filesystem::temp_directory_path() / "cvsteer_test_vector.json";
    steer::save_vector(t.vectors[1], path);
    const auto back = steer::load_vector(path);
    CHECK(back.s == t.vectors[1].s);
    CHECK(back.layer == t.vectors[1].layer);
    CHECK(back.label == t.vectors[1].label);
    CHECK(back.n_sources == t.vectors[1].n_sources);

    const auto write = [&](const std::string& body) { std::ofstream(path) << body; };
    write(R"({"label":"A","layer":1,"dim":3,"n_sources":1,"values":[1,2]})");
    CHECK_THROWS_AS(steer::load_vector(path), Error);
    write(R"({"label":"A","layer":-1,"dim":2,"n_sources":1,"values":[1,2]})");
    try {
        steer::load_vector(path);
        FAIL("expected SchemaViolation");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SchemaViolation);
    }
    std::filesystem::remove(path);
}
