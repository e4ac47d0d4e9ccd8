#pragma once

// Composer vectors are mean final-token hidden rows of a style's corpus at
// one layer. They are mixed linearly and injected with norm preservation
// while generating, skipping format tokens.

#include "cvsteer/localization.hpp"
#include "cvsteer/style_corpus.hpp"
#include "cvsteer/tinylm.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cvsteer::steer {

struct ComposerVector {
    Eigen::VectorXd s;
    int layer = 0;
    corpus::StyleLabel label;
    int n_sources = 0;
    bool centered = false;
};

// Entries are embedded as concat(prompt, piece). Throws Error{EmptyCorpus}.
ComposerVector build_vector(const lm::Checkpoint& ckpt, std::span<const corpus::CorpusEntry* const> entries, int layer);

// One vector per corpus label from a precomputed embedding table. With
// `centered`, the mean over all entries is subtracted from each vector.
std::vector<ComposerVector> build_vectors(const loc::EmbeddingTable& table, const corpus::StyleCorpus& corpus,
                                          int layer, bool centered = false);

struct FusionTerm {
    const ComposerVector* vector = nullptr;
    double weight = 0.0;
};

// Sum of weight * vector. Throws Error{DimensionMismatch, LayerMismatch}.
Eigen::VectorXd fuse(std::span<const FusionTerm> terms);

inline constexpr double kGuardEps = 1e-8;

// h + alpha * s, rescaled to |h| when norm_preserve. Returns h unchanged when
// |h| is zero or the sum nearly cancels.
Eigen::VectorXd steer_hidden(const Eigen::VectorXd& h, const Eigen::VectorXd& s, double alpha, bool norm_preserve);

struct SteeringConfig {
    double alpha = 0.0;
    Eigen::VectorXd direction;
    int layer = 0;
    bool norm_preserve = true;
    bool format_gate = true;
};

SteeringConfig make_config(const ComposerVector& v, double alpha);

struct PromptSpec {
    corpus::StyleLabel prompt_style;
    abc::TokenSequence text;
};

PromptSpec make_prompt(const corpus::StyleSpec& style);

// Prompt tokens followed by the separator that precedes every piece.
std::vector<int> prompt_ids(const lm::Vocab& vocab, const PromptSpec& prompt);

struct StepRecord {
    int token = 0;     // emitted id
    int candidate = 0; // unsteered draw used for gating
    bool was_gated = false;
};

struct GenerationResult {
    std::vector<int> ids; // prompt + continuation, end-of-piece excluded
    std::size_t prompt_length = 0;
    abc::TokenSequence tokens;
    std::vector<StepRecord> per_step;
    SteeringConfig config;

    // Continuation only, as ABC text.
    std::string piece_text() const;
    abc::TokenSequence piece_tokens() const;
    int gated_count() const;
};

// Draws a content token from softmax(steered_logits / temperature) limited
// to content tokens. `u` is the uniform that produced `candidate` from the
// base logits; its position inside the candidate's slot is carried over, so
// equal logits give back the candidate.
int sample_content(const lm::Vocab& vocab, const lm::Vec& base_logits, const lm::Vec& steered_logits,
                   double temperature, double u, int candidate);

// Per step: one uniform draw u; the unsteered candidate is sampled with u.
// With the gate on, a Format-class candidate is emitted as-is and a content
// candidate is replaced by sample_content over the steered logits, so the
// unsteered model alone decides where structure goes. With the gate off the
// token is re-sampled from the full steered distribution with the same u.
GenerationResult steered_generate(const lm::Checkpoint& ckpt, const PromptSpec& prompt, const SteeringConfig& cfg,
                                  const lm::Sampler& sampler, int max_len);

void save_vector(const ComposerVector& v, const std::filesystem::path& path);
ComposerVector load_vector(const std::filesystem::path& path);

} // namespace cvsteer::steer
