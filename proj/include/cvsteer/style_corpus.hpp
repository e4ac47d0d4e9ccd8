#pragma once

// Procedurally generated "composer" styles: each style is a small
// stochastic grammar over ABC (pitch walk, duration mix, meter, key).

#include "cvsteer/abc.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cvsteer::corpus {

struct StyleLabel {
    int id = 0;
    std::string name;

    bool operator==(const StyleLabel&) const = default;
};

struct WeightedStep {
    int step = 0;
    double weight = 0.0;
};

struct WeightedDuration {
    std::string token; // "" is one unit note length
    double weight = 0.0;
};

struct StyleSpec {
    StyleLabel label;
    std::vector<std::string> pitch_set; // may carry accidentals, e.g. "^f"
    std::vector<WeightedStep> interval_weights;
    std::vector<WeightedDuration> duration_weights;
    std::string meter = "4/4";
    std::string key = "C";
    int bars_min = 6;
    int bars_max = 9;
    std::string prompt_text;

    // Throws Error{SchemaViolation} when weights or pitch set are malformed.
    void check() const;
};

// Four well separated styles. Dominant pitch sets are disjoint; meter and
// duration mix differ per style.
std::vector<StyleSpec> default_registry();

std::vector<StyleSpec> load_registry(const std::filesystem::path& path);
void save_registry(const std::vector<StyleSpec>& specs, const std::filesystem::path& path);

std::string generate_piece(const StyleSpec& spec, std::uint64_t seed);

struct CorpusEntry {
    abc::TokenSequence prompt;
    abc::TokenSequence piece;
    StyleLabel label;

    bool operator==(const CorpusEntry&) const = default;
};

struct StyleCorpus {
    std::vector<StyleLabel> labels;
    std::vector<CorpusEntry> entries;

    std::vector<int> counts() const;
    std::vector<const CorpusEntry*> entries_for(int label_id) const;
    const StyleLabel& label_named(const std::string& name) const;

    bool operator==(const StyleCorpus&) const = default;
};

StyleCorpus build_corpus(const std::vector<StyleSpec>& specs, int n_per_style, std::uint64_t seed);

// prompt, one newline separator token, piece.
abc::TokenSequence concat(const abc::TokenSequence& prompt, const abc::TokenSequence& piece);

// JSONL, one {"style", "prompt", "piece"} object per line. Labels are
// assigned densely in order of first appearance.
void save_corpus(const StyleCorpus& corpus, const std::filesystem::path& path);
StyleCorpus load_corpus(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const StyleSpec& spec);
void from_json(const nlohmann::json& j, StyleSpec& spec);

} // namespace cvsteer::corpus
