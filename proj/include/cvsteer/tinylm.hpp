#pragma once

// A small pre-norm decoder-only transformer with learned positional
// embeddings and a weight-tied output head. Residual-stream rows at the
// exit of each block are readable (forward) and writable (forward_with_edit,
// Decoder::logits_with_edit).

#include "cvsteer/abc.hpp"
#include "cvsteer/style_corpus.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cvsteer::lm {

namespace detail {
struct ModelOffsets;
}

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct ModelConfig {
    int vocab_size = 0;
    int n_layers = 6;
    int d_model = 64;
    int n_heads = 4;
    int context_len = 256;
    int mlp_mult = 4;

    double learning_rate = 3e-3;
    int steps = 400;
    int batch_size = 8;
    int warmup_steps = 20;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    double init_std = 0.02;
    double holdout_fraction = 0.1;

    int head_dim() const { return d_model / n_heads; }
    int mlp_dim() const { return d_model * mlp_mult; }

    // Throws Error{ConfigError}.
    void check() const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

class Vocab {
public:
    static constexpr int kEos = 0;
    static constexpr std::string_view kEosText = "<eos>";

    Vocab();

    static Vocab from_sequences(std::span<const abc::TokenSequence> seqs);
    // "<eos>" plus size-1 opaque tokens; for tests and gradient checks.
    static Vocab placeholder(int size);

    // No-op when the text is already present.
    void add_entry(const std::string& text, abc::TokenKind kind);

    int size() const noexcept { return static_cast<int>(texts_.size()); }
    std::optional<int> find(std::string_view text) const;
    int id_of(std::string_view text) const; // throws Error{UnknownToken}
    const std::string& text(int id) const { return texts_.at(static_cast<std::size_t>(id)); }
    abc::TokenKind kind(int id) const { return kinds_.at(static_cast<std::size_t>(id)); }
    // End-of-piece counts as a control symbol.
    bool is_format(int id) const;

    std::vector<int> encode(const abc::TokenSequence& seq) const;
    abc::TokenSequence decode(std::span<const int> ids) const;

    const std::vector<std::string>& texts() const noexcept { return texts_; }

private:
    std::vector<std::string> texts_;
    std::vector<abc::TokenKind> kinds_;
    std::unordered_map<std::string, int> index_;
};

struct ParamEntry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct TrainingMeta {
    std::uint64_t seed = 0;
    std::vector<double> loss_curve;
    double heldout_loss = 0.0;
    double unigram_loss = 0.0;
};

// Parameters live in one flat array (row-major per tensor, [in, out] for
// weight matrices) so optimizer and gradient check can treat them uniformly.
class Checkpoint {
public:
    Checkpoint(ModelConfig config, Vocab vocab);

    const ModelConfig& config() const noexcept { return config_; }
    const Vocab& vocab() const noexcept { return vocab_; }
    const std::vector<ParamEntry>& layout() const noexcept { return layout_; }
    const ParamEntry& entry(std::string_view name) const;

    std::span<const double> params() const noexcept { return params_; }
    std::span<double> params() noexcept { return params_; }
    const double* data(std::string_view name) const { return params_.data() + entry(name).offset; }

    void init_random(std::uint64_t seed);
    // Snap every parameter to the nearest float32 so saved files reload exactly.
    void round_to_float();

    TrainingMeta meta;

private:
    ModelConfig config_;
    Vocab vocab_;
    std::vector<ParamEntry> layout_;
    std::unordered_map<std::string, std::size_t> by_name_;
    std::vector<double> params_;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct HiddenStates {
    int layer = 0; // 1..L
    Mat values;    // T x d, residual stream at the exit of block `layer`
};

struct ForwardResult {
    Mat logits; // T x vocab
    std::vector<HiddenStates> hiddens;
};

ForwardResult forward(const Checkpoint& ckpt, std::span<const int> tokens);

using RowEdit = std::function<Vec(const Vec&)>;

// Runs the model with `edit` applied to the final-position row at the exit of
// block `layer` (1-based); returns the final-position logits.
Vec forward_with_edit(const Checkpoint& ckpt, std::span<const int> tokens, int layer, const RowEdit& edit);

// Incremental decoding with a key/value cache. The cache always holds the
// unedited rows; logits_with_edit recomputes only the newest position from
// the edited layer upward without committing anything.
class Decoder {
public:
    explicit Decoder(const Checkpoint& ckpt);
    ~Decoder();
    Decoder(Decoder&&) noexcept;

    void push(int token);
    int length() const noexcept { return len_; }
    const Vec& logits() const noexcept { return logits_; }
    const Vec& hidden(int layer) const { return exit_rows_.at(static_cast<std::size_t>(layer - 1)); }
    Vec logits_with_edit(int layer, const Vec& edited_row) const;

private:
    Vec block_step(int layer_index, const Vec& x, int pos, bool commit) const;
    Vec head(const Vec& x) const;

    const Checkpoint& ckpt_;
    std::unique_ptr<detail::ModelOffsets> offsets_;
    mutable std::vector<Mat> keys_;
    mutable std::vector<Mat> values_;
    std::vector<Vec> exit_rows_;
    Vec logits_;
    int len_ = 0;
};

Vec softmax(const Vec& logits);

// Inverse-CDF draw from softmax(logits / temperature) using the supplied
// uniform u; temperature <= 0 is argmax.
int sample_token(const Vec& logits, double temperature, double u);

struct Sampler {
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

struct PerStepEdit {
    int layer = 0;
    RowEdit edit;
};

// Output begins with the prompt and stops at max_len tokens or end-of-piece.
std::vector<int> generate_ids(const Checkpoint& ckpt, std::span<const int> prompt, int max_len,
                              const Sampler& sampler, const std::optional<PerStepEdit>& per_step_edit = {});

abc::TokenSequence generate(const Checkpoint& ckpt, std::span<const int> prompt, int max_len,
                            const Sampler& sampler, const std::optional<PerStepEdit>& per_step_edit = {});

// Mean next-token cross-entropy over all positions of all sequences; fills
// `grad` (same layout as params) when non-null.
double loss_and_grad(const Checkpoint& ckpt, const std::vector<std::vector<int>>& batch,
                     std::vector<double>* grad);

// Training sequences: encode(concat(prompt, piece)) followed by end-of-piece.
std::vector<int> training_ids(const Vocab& vocab, const corpus::CorpusEntry& entry);

struct TrainOptions {
    std::function<void(int step, double loss)> on_step;
};

// Throws Error{DivergenceDetected} when the loss stops being finite.
Checkpoint train(const corpus::StyleCorpus& corpus, ModelConfig config, std::uint64_t seed,
                 const TrainOptions& options = {});

struct HoldoutSplit {
    std::vector<std::vector<int>> train;
    std::vector<std::vector<int>> heldout;
};
HoldoutSplit split_sequences(const Vocab& vocab, const corpus::StyleCorpus& corpus, double holdout_fraction,
                             std::uint64_t seed);

// Cross-entropy of the held-out targets under their own unigram distribution.
double unigram_entropy(const std::vector<std::vector<int>>& sequences, int vocab_size);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t n_params = 0;
    int n_samples = 0;
};

// Compares analytic gradients with central differences on a random model.
// `corrupt_index` perturbs that coordinate of the analytic gradient.
GradCheckResult grad_check(const ModelConfig& config, std::uint64_t seed, int n_samples = 100,
                           double step = 1e-4, std::optional<std::size_t> corrupt_index = std::nullopt);

} // namespace cvsteer::lm
