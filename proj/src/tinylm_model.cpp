#include "cvsteer/tinylm.hpp"

#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace cvsteer::lm {

namespace {

constexpr const char* kModule = "tinylm";
constexpr char kMagic[8] = {'C', 'V', 'S', 'T', 'L', 'M', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

[[noreturn]] void config_error(const std::string& what) {
    throw Error(ErrorCode::ConfigError, kModule, what);
}

[[noreturn]] void schema_error(const std::string& what) {
    throw Error(ErrorCode::SchemaViolation, kModule, what);
}

abc::TokenKind kind_from_string(const std::string& s) {
    using abc::TokenKind;
    for (TokenKind k : {TokenKind::HeaderField, TokenKind::Barline, TokenKind::Note, TokenKind::Rest,
                        TokenKind::Duration, TokenKind::Accidental, TokenKind::Chord, TokenKind::Decoration,
                        TokenKind::Whitespace, TokenKind::Other}) {
        if (abc::to_string(k) == s) return k;
    }
    schema_error("unknown token kind '" + s + "'");
}

} // namespace

void ModelConfig::check() const {
    if (vocab_size < 2) config_error("vocab_size must be >= 2");
    if (n_layers < 1) config_error("n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
        config_error("d_model must be a positive multiple of n_heads");
    if (context_len < 2) config_error("context_len must be >= 2");
    if (mlp_mult < 1) config_error("mlp_mult must be >= 1");
    if (steps < 0 || batch_size < 1) config_error("steps >= 0 and batch_size >= 1 required");
    if (!(learning_rate > 0.0) || !(init_std > 0.0)) config_error("learning_rate and init_std must be > 0");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) config_error("holdout_fraction must be in (0,1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size},   {"n_layers", c.n_layers},
                       {"d_model", c.d_model},         {"n_heads", c.n_heads},
                       {"context_len", c.context_len}, {"mlp_mult", c.mlp_mult},
                       {"learning_rate", c.learning_rate}, {"steps", c.steps},
                       {"batch_size", c.batch_size},   {"warmup_steps", c.warmup_steps},
                       {"beta1", c.beta1},             {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},       {"weight_decay", c.weight_decay},
                       {"grad_clip", c.grad_clip},     {"init_std", c.init_std},
                       {"holdout_fraction", c.holdout_fraction}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    const ModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.d_model = j.value("d_model", d.d_model);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.context_len = j.value("context_len", d.context_len);
    c.mlp_mult = j.value("mlp_mult", d.mlp_mult);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.steps = j.value("steps", d.steps);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.init_std = j.value("init_std", d.init_std);
    c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
}

// ---------------------------------------------------------------- vocab

Vocab::Vocab() { add_entry(std::string(kEosText), abc::TokenKind::Other); }

void Vocab::add_entry(const std::string& text, abc::TokenKind kind) {
    if (index_.contains(text)) return;
    index_.emplace(text, static_cast<int>(texts_.size()));
    texts_.push_back(text);
    kinds_.push_back(kind);
}

Vocab Vocab::from_sequences(std::span<const abc::TokenSequence> seqs) {
    std::set<std::pair<std::string, abc::TokenKind>> seen;
    for (const auto& s : seqs)
        for (const auto& t : s.tokens) seen.emplace(t.text, t.kind);
    Vocab v;
    for (const auto& [text, kind] : seen) v.add_entry(text, kind);
    return v;
}

Vocab Vocab::placeholder(int size) {
    Vocab v;
    for (int i = 1; i < size; ++i) v.add_entry("tok" + std::to_string(i), abc::TokenKind::Other);
    return v;
}

std::optional<int> Vocab::find(std::string_view text) const {
    const auto it = index_.find(std::string(text));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

int Vocab::id_of(std::string_view text) const {
    if (auto id = find(text)) return *id;
    throw Error(ErrorCode::UnknownToken, kModule, "token '" + std::string(text) + "' is not in the vocabulary");
}

bool Vocab::is_format(int id) const {
    return id == kEos || abc::classify(kind(id)) == abc::TokenClass::Format;
}

std::vector<int> Vocab::encode(const abc::TokenSequence& seq) const {
    std::vector<int> ids;
    ids.reserve(seq.size());
    for (const auto& t : seq.tokens) ids.push_back(id_of(t.text));
    return ids;
}

abc::TokenSequence Vocab::decode(std::span<const int> ids) const {
    abc::TokenSequence seq;
    for (int id : ids) {
        if (id == kEos) continue;
        seq.tokens.push_back(abc::Token{text(id), kind(id)});
        seq.source_text += text(id);
    }
    return seq;
}

// ---------------------------------------------------------------- checkpoint

Checkpoint::Checkpoint(ModelConfig config, Vocab vocab) : config_(config), vocab_(std::move(vocab)) {
    config_.vocab_size = vocab_.size();
    config_.check();
    const int d = config_.d_model;
    const int h = config_.mlp_dim();
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<int> shape) {
        std::size_t n = 1;
        for (int s : shape) n *= static_cast<std::size_t>(s);
        by_name_.emplace(name, layout_.size());
        layout_.push_back(ParamEntry{std::move(name), std::move(shape), offset, n});
        offset += n;
    };
    add("wte", {config_.vocab_size, d});
    add("wpe", {config_.context_len, d});
    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        add(p + "ln1.weight", {d});
        add(p + "ln1.bias", {d});
        add(p + "attn.qkv.weight", {d, 3 * d});
        add(p + "attn.qkv.bias", {3 * d});
        add(p + "attn.proj.weight", {d, d});
        add(p + "attn.proj.bias", {d});
        add(p + "ln2.weight", {d});
        add(p + "ln2.bias", {d});
        add(p + "mlp.fc.weight", {d, h});
        add(p + "mlp.fc.bias", {h});
        add(p + "mlp.proj.weight", {h, d});
        add(p + "mlp.proj.bias", {d});
    }
    add("lnf.weight", {d});
    add("lnf.bias", {d});
    params_.assign(offset, 0.0);
}

const ParamEntry& Checkpoint::entry(std::string_view name) const {
    const auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) throw Error(ErrorCode::SchemaViolation, kModule, "no parameter " + std::string(name));
    return layout_[it->second];
}

void Checkpoint::init_random(std::uint64_t seed) {
    Rng rng(seed);
    const double proj_std = config_.init_std / std::sqrt(2.0 * config_.n_layers);
    for (const auto& e : layout_) {
        double* p = params_.data() + e.offset;
        const bool is_norm_gain = e.name.ends_with("ln1.weight") || e.name.ends_with("ln2.weight") ||
                                  e.name == "lnf.weight";
        if (is_norm_gain) {
            std::fill(p, p + e.size, 1.0);
        } else if (e.name.ends_with(".bias")) {
            std::fill(p, p + e.size, 0.0);
        } else {
            const double std = e.name.ends_with("proj.weight") ? proj_std : config_.init_std;
            for (std::size_t i = 0; i < e.size; ++i) p[i] = std * rng.normal();
        }
    }
}

void Checkpoint::round_to_float() {
    for (double& p : params_) p = static_cast<double>(static_cast<float>(p));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    nlohmann::json header;
    header["format"] = "cvsteer-checkpoint";
    header["version"] = 1;
    header["config"] = ckpt.config();
    nlohmann::json vocab = nlohmann::json::array();
    for (int i = 0; i < ckpt.vocab().size(); ++i)
        vocab.push_back({{"text", ckpt.vocab().text(i)}, {"kind", abc::to_string(ckpt.vocab().kind(i))}});
    header["vocab"] = vocab;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& e : ckpt.layout())
        tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
    header["tensors"] = tensors;
    header["meta"] = {{"seed", ckpt.meta.seed},
                      {"loss_curve", ckpt.meta.loss_curve},
                      {"heldout_loss", ckpt.meta.heldout_loss},
                      {"unigram_loss", ckpt.meta.unigram_loss}};
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<float> data(ckpt.params().begin(), ckpt.params().end());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, kModule, "cannot read " + path.string());
    char magic[8] = {};
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) schema_error(path.string() + ": not a checkpoint");
    if (len > (1u << 28)) schema_error(path.string() + ": header too large");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) schema_error(path.string() + ": truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        schema_error(path.string() + ": " + ex.what());
    }
    try {
        Vocab vocab;
        const auto& entries = header.at("vocab");
        if (entries.empty() || entries[0].at("text").get<std::string>() != Vocab::kEosText)
            schema_error("vocab must start with the end-of-piece token");
        for (std::size_t i = 1; i < entries.size(); ++i)
            vocab.add_entry(entries[i].at("text").get<std::string>(),
                            kind_from_string(entries[i].at("kind").get<std::string>()));
        if (vocab.size() != static_cast<int>(entries.size())) schema_error("duplicate vocab entries");
        Checkpoint ckpt(header.at("config").get<ModelConfig>(), std::move(vocab));
        for (const auto& t : header.at("tensors")) {
            const auto& e = ckpt.entry(t.at("name").get<std::string>());
            if (t.at("offset").get<std::size_t>() != e.offset || t.at("shape").get<std::vector<int>>() != e.shape)
                schema_error("tensor " + e.name + " does not match the configured shape");
        }
        if (header.at("tensors").size() != ckpt.layout().size()) schema_error("tensor count mismatch");
        const auto& meta = header.at("meta");
        ckpt.meta.seed = meta.at("seed").get<std::uint64_t>();
        ckpt.meta.loss_curve = meta.at("loss_curve").get<std::vector<double>>();
        ckpt.meta.heldout_loss = meta.at("heldout_loss").get<double>();
        ckpt.meta.unigram_loss = meta.at("unigram_loss").get<double>();

        std::vector<float> data(ckpt.params().size());
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!in) schema_error(path.string() + ": truncated parameter data");
        std::copy(data.begin(), data.end(), ckpt.params().begin());
        return ckpt;
    } catch (const nlohmann::json::exception& ex) {
        schema_error(path.string() + ": " + ex.what());
    }
}

} // namespace cvsteer::lm
