#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"
#include "tinylm_detail.hpp"

#include <algorithm>
#include <limits>

namespace cvsteer::lm {

using namespace detail;

namespace {

constexpr const char* kModule = "tinylm";

void check_tokens(const Checkpoint& ck, std::span<const int> tokens) {
    if (tokens.empty()) throw Error(ErrorCode::ContextOverflow, kModule, "empty token sequence");
    if (static_cast<int>(tokens.size()) > ck.config().context_len)
        throw Error(ErrorCode::ContextOverflow, kModule,
                    std::to_string(tokens.size()) + " tokens exceed context_len " +
                        std::to_string(ck.config().context_len));
    for (int t : tokens)
        if (t < 0 || t >= ck.vocab().size())
            throw Error(ErrorCode::UnknownToken, kModule, "token id " + std::to_string(t) + " out of range");
}

Mat embed(const Checkpoint& ck, const ModelOffsets& off, std::span<const int> tokens) {
    const int d = ck.config().d_model;
    const double* p = ck.params().data();
    Mat x(static_cast<Eigen::Index>(tokens.size()), d);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        x.row(static_cast<Eigen::Index>(t)) =
            CMapRow(p + off.wte + static_cast<std::size_t>(tokens[t]) * d, d) + CMapRow(p + off.wpe + t * d, d);
    }
    return x;
}

// Causal multi-head attention over all rows of `a` (already normalized).
Mat attention(const Checkpoint& ck, const BlockOffsets& b, const Mat& a) {
    const auto& cfg = ck.config();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const double* p = ck.params().data();
    const auto T = a.rows();
    Mat qkv = a * CMapMat(p + b.qkv_w, d, 3 * d);
    qkv.rowwise() += CMapRow(p + b.qkv_b, 3 * d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Mat att(T, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
        const auto q = qkv.middleCols(h * hd, hd);
        const auto k = qkv.middleCols(d + h * hd, hd);
        const auto v = qkv.middleCols(2 * d + h * hd, hd);
        Mat s = (q * k.transpose()) * scale;
        for (Eigen::Index i = 0; i < T; ++i) {
            const double mx = s.row(i).head(i + 1).maxCoeff();
            double sum = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                s(i, j) = std::exp(s(i, j) - mx);
                sum += s(i, j);
            }
            s.row(i).head(i + 1) /= sum;
            s.row(i).tail(T - i - 1).setZero();
        }
        att.middleCols(h * hd, hd) = s * v;
    }
    Mat y = att * CMapMat(p + b.proj_w, d, d);
    y.rowwise() += CMapRow(p + b.proj_b, d);
    return y;
}

Mat mlp(const Checkpoint& ck, const BlockOffsets& b, const Mat& m) {
    const int d = ck.config().d_model;
    const int h = ck.config().mlp_dim();
    const double* p = ck.params().data();
    Mat f = m * CMapMat(p + b.fc_w, d, h);
    f.rowwise() += CMapRow(p + b.fc_b, h);
    f = f.unaryExpr([](double x) { return gelu(x); });
    Mat z = f * CMapMat(p + b.fc2_w, h, d);
    z.rowwise() += CMapRow(p + b.fc2_b, d);
    return z;
}

Mat block(const Checkpoint& ck, const BlockOffsets& b, const Mat& x) {
    const double* p = ck.params().data();
    Mat mid = x + attention(ck, b, layer_norm(x, p + b.ln1_g, p + b.ln1_b, nullptr));
    return mid + mlp(ck, b, layer_norm(mid, p + b.ln2_g, p + b.ln2_b, nullptr));
}

Mat head_logits(const Checkpoint& ck, const ModelOffsets& off, const Mat& x) {
    const double* p = ck.params().data();
    const Mat xf = layer_norm(x, p + off.lnf_g, p + off.lnf_b, nullptr);
    return xf * CMapMat(p + off.wte, ck.config().vocab_size, ck.config().d_model).transpose();
}

} // namespace

ForwardResult forward(const Checkpoint& ck, std::span<const int> tokens) {
    check_tokens(ck, tokens);
    const auto off = model_offsets(ck);
    ForwardResult out;
    Mat x = embed(ck, off, tokens);
    for (int l = 0; l < ck.config().n_layers; ++l) {
        x = block(ck, off.blocks[static_cast<std::size_t>(l)], x);
        out.hiddens.push_back(HiddenStates{l + 1, x});
    }
    out.logits = head_logits(ck, off, x);
    return out;
}

Vec forward_with_edit(const Checkpoint& ck, std::span<const int> tokens, int layer, const RowEdit& edit) {
    check_tokens(ck, tokens);
    if (layer < 1 || layer > ck.config().n_layers)
        throw Error(ErrorCode::LayerMismatch, kModule, "layer " + std::to_string(layer) + " outside 1..L");
    const auto off = model_offsets(ck);
    Mat x = embed(ck, off, tokens);
    const auto last = x.rows() - 1;
    for (int l = 0; l < ck.config().n_layers; ++l) {
        x = block(ck, off.blocks[static_cast<std::size_t>(l)], x);
        if (l + 1 == layer) {
            const Vec row = x.row(last).transpose();
            const Vec edited = edit(row);
            if (edited.size() != row.size())
                throw Error(ErrorCode::DimensionMismatch, kModule, "edit changed the row dimension");
            x.row(last) = edited.transpose();
        }
    }
    return head_logits(ck, off, x.bottomRows(1)).row(0).transpose();
}

// ---------------------------------------------------------------- decoder

Decoder::~Decoder() = default;
Decoder::Decoder(Decoder&&) noexcept = default;

Decoder::Decoder(const Checkpoint& ckpt)
    : ckpt_(ckpt), offsets_(std::make_unique<ModelOffsets>(model_offsets(ckpt))) {
    const auto& cfg = ckpt.config();
    keys_.assign(static_cast<std::size_t>(cfg.n_layers), Mat::Zero(cfg.context_len, cfg.d_model));
    values_.assign(static_cast<std::size_t>(cfg.n_layers), Mat::Zero(cfg.context_len, cfg.d_model));
    exit_rows_.assign(static_cast<std::size_t>(cfg.n_layers), Vec::Zero(cfg.d_model));
}

Vec Decoder::block_step(int l, const Vec& x, int pos, bool commit) const {
    const auto& cfg = ckpt_.config();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int hm = cfg.mlp_dim();
    const double* p = ckpt_.params().data();
    const auto& b = offsets_->blocks[static_cast<std::size_t>(l)];

    const Mat xrow = x.transpose();
    RowVec qkv = layer_norm(xrow, p + b.ln1_g, p + b.ln1_b, nullptr) * CMapMat(p + b.qkv_w, d, 3 * d);
    qkv += CMapRow(p + b.qkv_b, 3 * d);

    Mat& kc = keys_[static_cast<std::size_t>(l)];
    Mat& vc = values_[static_cast<std::size_t>(l)];
    // Uncommitted steps attend over the cache plus their own fresh key/value.
    Mat kown = qkv.segment(d, d);
    Mat vown = qkv.segment(2 * d, d);
    if (commit) {
        kc.row(pos) = kown;
        vc.row(pos) = vown;
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    RowVec att(d);
    for (int h = 0; h < cfg.n_heads; ++h) {
        const auto q = qkv.segment(h * hd, hd);
        Eigen::VectorXd s(pos + 1);
        for (int j = 0; j < pos; ++j) s(j) = kc.row(j).segment(h * hd, hd).dot(q) * scale;
        s(pos) = kown.row(0).segment(h * hd, hd).dot(q) * scale;
        s = (s.array() - s.maxCoeff()).exp();
        s /= s.sum();
        RowVec o = RowVec::Zero(hd);
        for (int j = 0; j < pos; ++j) o += s(j) * vc.row(j).segment(h * hd, hd);
        o += s(pos) * vown.row(0).segment(h * hd, hd);
        att.segment(h * hd, hd) = o;
    }
    RowVec mid = xrow.row(0) + att * CMapMat(p + b.proj_w, d, d) + CMapRow(p + b.proj_b, d);

    RowVec f = layer_norm(mid, p + b.ln2_g, p + b.ln2_b, nullptr) * CMapMat(p + b.fc_w, d, hm);
    f += CMapRow(p + b.fc_b, hm);
    f = f.unaryExpr([](double v) { return gelu(v); });
    const RowVec out = mid + f * CMapMat(p + b.fc2_w, hm, d) + CMapRow(p + b.fc2_b, d);
    return out.transpose();
}

Vec Decoder::head(const Vec& x) const {
    const Mat row = x.transpose();
    return head_logits(ckpt_, *offsets_, row).row(0).transpose();
}

void Decoder::push(int token) {
    const auto& cfg = ckpt_.config();
    if (len_ >= cfg.context_len)
        throw Error(ErrorCode::ContextOverflow, kModule, "decoder context is full");
    if (token < 0 || token >= ckpt_.vocab().size())
        throw Error(ErrorCode::UnknownToken, kModule, "token id " + std::to_string(token) + " out of range");
    const int d = cfg.d_model;
    const double* p = ckpt_.params().data();
    Vec x = (CMapRow(p + offsets_->wte + static_cast<std::size_t>(token) * d, d) +
             CMapRow(p + offsets_->wpe + static_cast<std::size_t>(len_) * d, d))
                .transpose();
    for (int l = 0; l < cfg.n_layers; ++l) {
        x = block_step(l, x, len_, true);
        exit_rows_[static_cast<std::size_t>(l)] = x;
    }
    logits_ = head(x);
    ++len_;
}

Vec Decoder::logits_with_edit(int layer, const Vec& edited_row) const {
    if (len_ == 0) throw Error(ErrorCode::ContextOverflow, kModule, "no position to edit");
    if (layer < 1 || layer > ckpt_.config().n_layers)
        throw Error(ErrorCode::LayerMismatch, kModule, "layer " + std::to_string(layer) + " outside 1..L");
    Vec x = edited_row;
    for (int l = layer; l < ckpt_.config().n_layers; ++l) x = block_step(l, x, len_ - 1, false);
    return head(x);
}

// ---------------------------------------------------------------- sampling

Vec softmax(const Vec& logits) {
    Vec p = (logits.array() - logits.maxCoeff()).exp();
    return p / p.sum();
}

int sample_token(const Vec& logits, double temperature, double u) {
    if (!(temperature > 0.0)) {
        Eigen::Index best = 0;
        logits.maxCoeff(&best);
        return static_cast<int>(best);
    }
    const Vec p = softmax(logits / temperature);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        acc += p(i);
        if (u < acc) return static_cast<int>(i);
    }
    for (Eigen::Index i = p.size(); i-- > 0;)
        if (p(i) > 0.0) return static_cast<int>(i);
    return 0;
}

std::vector<int> generate_ids(const Checkpoint& ck, std::span<const int> prompt, int max_len,
                              const Sampler& sampler, const std::optional<PerStepEdit>& per_step_edit) {
    if (prompt.empty()) throw Error(ErrorCode::ContextOverflow, kModule, "prompt must be non-empty");
    if (max_len > ck.config().context_len || static_cast<int>(prompt.size()) > ck.config().context_len)
        throw Error(ErrorCode::ContextOverflow, kModule,
                    "max_len " + std::to_string(max_len) + " exceeds context_len " +
                        std::to_string(ck.config().context_len));
    std::vector<int> out(prompt.begin(), prompt.end());
    Decoder dec(ck);
    for (int t : prompt) dec.push(t);
    Rng rng(sampler.seed);
    while (static_cast<int>(out.size()) < max_len) {
        const double u = rng.uniform();
        Vec logits = dec.logits();
        if (per_step_edit) logits = dec.logits_with_edit(per_step_edit->layer, per_step_edit->edit(dec.hidden(per_step_edit->layer)));
        const int next = sample_token(logits, sampler.temperature, u);
        if (next == Vocab::kEos) break;
        out.push_back(next);
        if (static_cast<int>(out.size()) < max_len) dec.push(next);
    }
    return out;
}

abc::TokenSequence generate(const Checkpoint& ck, std::span<const int> prompt, int max_len, const Sampler& sampler,
                            const std::optional<PerStepEdit>& per_step_edit) {
    const auto ids = generate_ids(ck, prompt, max_len, sampler, per_step_edit);
    return ck.vocab().decode(ids);
}

} // namespace cvsteer::lm
