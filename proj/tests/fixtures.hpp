#pragma once

// Small trained artifacts shared by tests that need a model with a real
// ABC vocabulary. Built once per test binary.

#include "cvsteer/classifier.hpp"
#include "cvsteer/localization.hpp"
#include "cvsteer/steering.hpp"
#include "cvsteer/style_corpus.hpp"
#include "cvsteer/tinylm.hpp"

namespace fixture {

struct Tiny {
    std::vector<cvsteer::corpus::StyleSpec> styles;
    cvsteer::corpus::StyleCorpus corpus;
    cvsteer::lm::Checkpoint model;
    cvsteer::loc::EmbeddingTable table;
    std::vector<cvsteer::steer::ComposerVector> vectors; // layer 2
    cvsteer::shallow::StyleClassifier classifier;
};

inline cvsteer::lm::Checkpoint train_tiny(const cvsteer::corpus::StyleCorpus& c) {
    cvsteer::lm::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.context_len = 128;
    cfg.steps = 60;
    return cvsteer::lm::train(c, cfg, 3);
}

inline const Tiny& tiny() {
    static const Tiny t = [] {
        using namespace cvsteer;
        auto styles = corpus::default_registry();
        auto c = corpus::build_corpus(styles, 16, 5);
        auto model = train_tiny(c);
        auto table = loc::embed_corpus(model, c);
        auto vectors = steer::build_vectors(table, c, 2);
        auto clf = shallow::train_style_classifier(c, 2, 1e-3, 100).classifier;
        return Tiny{std::move(styles), std::move(c), std::move(model), std::move(table), std::move(vectors),
                    std::move(clf)};
    }();
    return t;
}

} // namespace fixture
