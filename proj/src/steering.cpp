#include "cvsteer/steering.hpp"

#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cvsteer::steer {

namespace {

constexpr const char* kModule = "steering";

} // namespace

ComposerVector build_vector(const lm::Checkpoint& ckpt, std::span<const corpus::CorpusEntry* const> entries,
                            int layer) {
    if (entries.empty()) throw Error(ErrorCode::EmptyCorpus, kModule, "no entries for the composer vector");
    if (layer < 1 || layer > ckpt.config().n_layers)
        throw Error(ErrorCode::LayerMismatch, kModule, "layer " + std::to_string(layer) + " out of range");
    ComposerVector v;
    v.layer = layer;
    v.label = entries.front()->label;
    v.s = Eigen::VectorXd::Zero(ckpt.config().d_model);
    for (const auto* e : entries) {
        if (!(e->label == v.label))
            throw Error(ErrorCode::SchemaViolation, kModule, "entries for one vector must share a label");
        v.s += loc::piece_embedding(ckpt, corpus::concat(e->prompt, e->piece), layer).vector;
    }
    v.s /= static_cast<double>(entries.size());
    v.n_sources = static_cast<int>(entries.size());
    return v;
}

std::vector<ComposerVector> build_vectors(const loc::EmbeddingTable& table, const corpus::StyleCorpus& corpus,
                                          int layer, bool centered) {
    if (layer < 1 || layer > static_cast<int>(table.layers.size()))
        throw Error(ErrorCode::LayerMismatch, kModule, "layer " + std::to_string(layer) + " out of range");
    const auto& X = table.at(layer);
    if (X.rows() == 0) throw Error(ErrorCode::EmptyCorpus, kModule, "empty embedding table");
    std::vector<ComposerVector> out;
    for (std::size_t c = 0; c < corpus.labels.size(); ++c) {
        ComposerVector v;
        v.layer = layer;
        v.label = corpus.labels[c];
        v.centered = centered;
        v.s = Eigen::VectorXd::Zero(X.cols());
        for (std::size_t i = 0; i < table.labels.size(); ++i)
            if (table.labels[i] == static_cast<int>(c)) {
                v.s += X.row(static_cast<Eigen::Index>(i)).transpose();
                ++v.n_sources;
            }
        if (v.n_sources == 0)
            throw Error(ErrorCode::EmptyCorpus, kModule, "style " + v.label.name + " has no corpus entries");
        v.s /= static_cast<double>(v.n_sources);
        out.push_back(std::move(v));
    }
    if (centered) {
        const Eigen::VectorXd grand = X.colwise().mean().transpose();
        for (auto& v : out) v.s -= grand;
    }
    return out;
}

Eigen::VectorXd fuse(std::span<const FusionTerm> terms) {
    if (terms.empty()) throw Error(ErrorCode::DimensionMismatch, kModule, "fusion needs at least one term");
    const auto& first = *terms.front().vector;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(first.s.size());
    for (const auto& t : terms) {
        if (t.vector->s.size() != first.s.size())
            throw Error(ErrorCode::DimensionMismatch, kModule, "fused vectors differ in dimension");
        if (t.vector->layer != first.layer)
            throw Error(ErrorCode::LayerMismatch, kModule, "fused vectors come from different layers");
        out += t.weight * t.vector->s;
    }
    return out;
}

Eigen::VectorXd steer_hidden(const Eigen::VectorXd& h, const Eigen::VectorXd& s, double alpha, bool norm_preserve) {
    if (h.size() != s.size()) throw Error(ErrorCode::DimensionMismatch, kModule, "hidden row and direction differ");
    if (alpha == 0.0) return h;
    Eigen::VectorXd out = h + alpha * s;
    if (!norm_preserve) return out;
    const double hn = h.norm();
    const double on = out.norm();
    if (hn == 0.0 || on < kGuardEps) return h;
    out *= hn / on;
    return out;
}

SteeringConfig make_config(const ComposerVector& v, double alpha) {
    SteeringConfig cfg;
    cfg.alpha = alpha;
    cfg.direction = v.s;
    cfg.layer = v.layer;
    return cfg;
}

PromptSpec make_prompt(const corpus::StyleSpec& style) { return {style.label, abc::tokenize(style.prompt_text)}; }

std::vector<int> prompt_ids(const lm::Vocab& vocab, const PromptSpec& prompt) {
    return vocab.encode(corpus::concat(prompt.text, abc::TokenSequence{}));
}

std::string GenerationResult::piece_text() const { return abc::detokenize(piece_tokens()); }

abc::TokenSequence GenerationResult::piece_tokens() const {
    abc::TokenSequence out;
    out.tokens.assign(tokens.tokens.begin() + static_cast<std::ptrdiff_t>(std::min(prompt_length, tokens.tokens.size())),
                      tokens.tokens.end());
    out.source_text = abc::detokenize(out);
    return out;
}

int GenerationResult::gated_count() const {
    return static_cast<int>(std::count_if(per_step.begin(), per_step.end(), [](const StepRecord& r) { return r.was_gated; }));
}

int sample_content(const lm::Vocab& vocab, const lm::Vec& base_logits, const lm::Vec& steered_logits,
                   double temperature, double u, int candidate) {
    if (base_logits.size() != steered_logits.size() || base_logits.size() != vocab.size())
        throw Error(ErrorCode::DimensionMismatch, kModule, "logit vectors do not match the vocabulary");
    if (vocab.is_format(candidate))
        throw Error(ErrorCode::SchemaViolation, kModule, "content re-sample needs a content candidate");
    // Identical distributions: the conditional draw is the candidate itself.
    if (steered_logits == base_logits) return candidate;
    const auto n = base_logits.size();
    if (!(temperature > 0.0)) {
        int best = -1;
        for (Eigen::Index i = 0; i < n; ++i)
            if (!vocab.is_format(static_cast<int>(i)) && (best < 0 || steered_logits(i) > steered_logits(best)))
                best = static_cast<int>(i);
        return best;
    }
    const lm::Vec p = lm::softmax(base_logits / temperature);
    const lm::Vec q = lm::softmax(steered_logits / temperature);
    // Position of u inside the candidate's slot of the full CDF, carried over
    // to the content-only CDF.
    double full_before = 0.0, content_before = 0.0, content_total_p = 0.0, content_total_q = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const bool content = !vocab.is_format(static_cast<int>(i));
        if (i < candidate) {
            full_before += p(i);
            if (content) content_before += p(i);
        }
        if (content) {
            content_total_p += p(i);
            content_total_q += q(i);
        }
    }
    const double offset = std::clamp(u - full_before, 0.0, p(candidate));
    const double target = (content_before + offset) / content_total_p * content_total_q;
    double acc = 0.0;
    int last = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (vocab.is_format(static_cast<int>(i))) continue;
        acc += q(i);
        if (q(i) > 0.0) last = static_cast<int>(i);
        if (target < acc) return static_cast<int>(i);
    }
    return last;
}

GenerationResult steered_generate(const lm::Checkpoint& ckpt, const PromptSpec& prompt, const SteeringConfig& cfg,
                                  const lm::Sampler& sampler, int max_len) {
    const auto& mc = ckpt.config();
    // An empty direction means plain sampling; alpha = 0 still goes through the edit path.
    const bool steering = cfg.direction.size() > 0;
    if (steering) {
        if (cfg.layer < 1 || cfg.layer > mc.n_layers)
            throw Error(ErrorCode::LayerMismatch, kModule, "steering layer " + std::to_string(cfg.layer) + " out of range");
        if (cfg.direction.size() != mc.d_model)
            throw Error(ErrorCode::DimensionMismatch, kModule, "direction dimension differs from the model width");
    }
    if (!std::isfinite(cfg.alpha)) throw Error(ErrorCode::ConfigError, kModule, "alpha must be finite");

    GenerationResult res;
    res.config = cfg;
    res.ids = prompt_ids(ckpt.vocab(), prompt);
    res.prompt_length = res.ids.size();
    if (max_len > mc.context_len || static_cast<int>(res.ids.size()) > mc.context_len)
        throw Error(ErrorCode::ContextOverflow, kModule,
                    "max_len " + std::to_string(max_len) + " exceeds context_len " + std::to_string(mc.context_len));

    lm::Decoder dec(ckpt);
    for (int t : res.ids) dec.push(t);
    Rng rng(sampler.seed);
    while (static_cast<int>(res.ids.size()) < max_len) {
        const double u = rng.uniform();
        StepRecord step;
        step.candidate = lm::sample_token(dec.logits(), sampler.temperature, u);
        if (cfg.format_gate && ckpt.vocab().is_format(step.candidate)) {
            step.token = step.candidate;
            step.was_gated = true;
        } else if (steering) {
            const auto edited = steer_hidden(dec.hidden(cfg.layer), cfg.direction, cfg.alpha, cfg.norm_preserve);
            const lm::Vec steered = dec.logits_with_edit(cfg.layer, edited);
            step.token = cfg.format_gate ? sample_content(ckpt.vocab(), dec.logits(), steered, sampler.temperature, u,
                                                          step.candidate)
                                         : lm::sample_token(steered, sampler.temperature, u);
        } else {
            step.token = step.candidate;
        }
        res.per_step.push_back(step);
        if (step.token == lm::Vocab::kEos) break;
        res.ids.push_back(step.token);
        if (static_cast<int>(res.ids.size()) < max_len) dec.push(step.token);
    }
    res.tokens = ckpt.vocab().decode(res.ids);
    return res;
}

void save_vector(const ComposerVector& v, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    const nlohmann::json j = {{"label", v.label.name},
                              {"label_id", v.label.id},
                              {"layer", v.layer},
                              {"dim", v.s.size()},
                              {"n_sources", v.n_sources},
                              {"centered", v.centered},
                              {"values", std::vector<double>(v.s.data(), v.s.data() + v.s.size())}};
    out << j.dump() << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + path.string());
}

ComposerVector load_vector(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoFailure, kModule, "cannot read " + path.string());
    try {
        nlohmann::json j;
        in >> j;
        ComposerVector v;
        v.label.name = j.at("label").get<std::string>();
        v.label.id = j.value("label_id", 0);
        v.layer = j.at("layer").get<int>();
        v.n_sources = j.at("n_sources").get<int>();
        v.centered = j.value("centered", false);
        const auto dim = j.at("dim").get<long>();
        const auto values = j.at("values").get<std::vector<double>>();
        if (v.layer < 1) throw Error(ErrorCode::SchemaViolation, kModule, "vector layer must be >= 1");
        if (dim != static_cast<long>(values.size()))
            throw Error(ErrorCode::SchemaViolation, kModule, "dim field does not match the number of values");
        v.s = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
        if (!v.s.allFinite()) throw Error(ErrorCode::SchemaViolation, kModule, "non-finite vector entries");
        return v;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaViolation, kModule, std::string("vector file: ") + e.what());
    }
}

} // namespace cvsteer::steer
