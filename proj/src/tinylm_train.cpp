#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"
#include "tinylm_detail.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace cvsteer::lm {

using namespace detail;

namespace {

constexpr const char* kModule = "tinylm";

using MapMat = Eigen::Map<Mat>;
using MapRow = Eigen::Map<RowVec>;

struct BlockCache {
    Mat x_in;
    LnCache ln1;
    Mat a;
    Mat qkv;
    std::vector<Mat> probs; // per head, T x T
    Mat att;
    Mat mid;
    LnCache ln2;
    Mat m;
    Mat f_pre;
    Mat f_act;
};

void ln_backward(const Mat& dy, const LnCache& c, const double* g, double* dg, double* db, Mat& dx) {
    const auto d = dy.cols();
    const CMapRow gain(g, d);
    MapRow(dg, d) += dy.cwiseProduct(c.xhat).colwise().sum();
    MapRow(db, d) += dy.colwise().sum();
    dx.resize(dy.rows(), d);
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const RowVec dxhat = dy.row(i).cwiseProduct(gain);
        const double mean_dxhat = dxhat.mean();
        const double mean_dxhat_xhat = dxhat.dot(c.xhat.row(i)) / static_cast<double>(d);
        dx.row(i) = c.rstd(i) * (dxhat.array() - mean_dxhat - c.xhat.row(i).array() * mean_dxhat_xhat).matrix();
    }
}

// Loss (summed, not averaged) for one sequence; accumulates gradients
// scaled by `grad_scale` when `grad` is non-null.
double sequence_loss(const Checkpoint& ck, const ModelOffsets& off, const std::vector<int>& tokens,
                     double* grad, double grad_scale) {
    const auto& cfg = ck.config();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int hm = cfg.mlp_dim();
    const int V = cfg.vocab_size;
    const double* p = ck.params().data();
    const auto T = static_cast<Eigen::Index>(tokens.size());
    if (T < 2) return 0.0;
    if (T > cfg.context_len)
        throw Error(ErrorCode::ContextOverflow, kModule, "training sequence longer than context_len");

    Mat x(T, d);
    for (Eigen::Index t = 0; t < T; ++t)
        x.row(t) = CMapRow(p + off.wte + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d, d) +
                   CMapRow(p + off.wpe + static_cast<std::size_t>(t) * d, d);

    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<BlockCache> caches(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& b = off.blocks[static_cast<std::size_t>(l)];
        auto& c = caches[static_cast<std::size_t>(l)];
        c.x_in = x;
        c.a = layer_norm(x, p + b.ln1_g, p + b.ln1_b, &c.ln1);
        c.qkv = c.a * CMapMat(p + b.qkv_w, d, 3 * d);
        c.qkv.rowwise() += CMapRow(p + b.qkv_b, 3 * d);
        c.att.resize(T, d);
        c.probs.resize(static_cast<std::size_t>(cfg.n_heads));
        for (int h = 0; h < cfg.n_heads; ++h) {
            Mat s = (c.qkv.middleCols(h * hd, hd) * c.qkv.middleCols(d + h * hd, hd).transpose()) * scale;
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
            c.att.middleCols(h * hd, hd) = s * c.qkv.middleCols(2 * d + h * hd, hd);
            c.probs[static_cast<std::size_t>(h)] = std::move(s);
        }
        c.mid = x + c.att * CMapMat(p + b.proj_w, d, d);
        c.mid.rowwise() += CMapRow(p + b.proj_b, d);
        c.m = layer_norm(c.mid, p + b.ln2_g, p + b.ln2_b, &c.ln2);
        c.f_pre = c.m * CMapMat(p + b.fc_w, d, hm);
        c.f_pre.rowwise() += CMapRow(p + b.fc_b, hm);
        c.f_act = c.f_pre.unaryExpr([](double v) { return gelu(v); });
        x = c.mid + c.f_act * CMapMat(p + b.fc2_w, hm, d);
        x.rowwise() += CMapRow(p + b.fc2_b, d);
    }
    LnCache lnf;
    const Mat xf = layer_norm(x, p + off.lnf_g, p + off.lnf_b, &lnf);
    const CMapMat wte(p + off.wte, V, d);
    const Mat logits = xf.topRows(T - 1) * wte.transpose();

    double loss = 0.0;
    Mat dlogits(T - 1, V);
    for (Eigen::Index t = 0; t + 1 < T; ++t) {
        const double mx = logits.row(t).maxCoeff();
        const RowVec e = (logits.row(t).array() - mx).exp();
        const double z = e.sum();
        const int target = tokens[static_cast<std::size_t>(t + 1)];
        loss += std::log(z) - (logits(t, target) - mx);
        dlogits.row(t) = e / z;
        dlogits(t, target) -= 1.0;
    }
    if (!grad) return loss;
    dlogits *= grad_scale;

    MapMat(grad + off.wte, V, d) += dlogits.transpose() * xf.topRows(T - 1);
    Mat dxf = Mat::Zero(T, d);
    dxf.topRows(T - 1) = dlogits * wte;
    Mat dx;
    ln_backward(dxf, lnf, p + off.lnf_g, grad + off.lnf_g, grad + off.lnf_b, dx);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& b = off.blocks[static_cast<std::size_t>(l)];
        const auto& c = caches[static_cast<std::size_t>(l)];

        // MLP branch.
        MapMat(grad + b.fc2_w, hm, d) += c.f_act.transpose() * dx;
        MapRow(grad + b.fc2_b, d) += dx.colwise().sum();
        Mat df = dx * CMapMat(p + b.fc2_w, hm, d).transpose();
        df = df.cwiseProduct(c.f_pre.unaryExpr([](double v) { return gelu_grad(v); }));
        MapMat(grad + b.fc_w, d, hm) += c.m.transpose() * df;
        MapRow(grad + b.fc_b, hm) += df.colwise().sum();
        const Mat dm = df * CMapMat(p + b.fc_w, d, hm).transpose();
        Mat dmid;
        ln_backward(dm, c.ln2, p + b.ln2_g, grad + b.ln2_g, grad + b.ln2_b, dmid);
        dmid += dx;

        // Attention branch.
        MapMat(grad + b.proj_w, d, d) += c.att.transpose() * dmid;
        MapRow(grad + b.proj_b, d) += dmid.colwise().sum();
        const Mat datt = dmid * CMapMat(p + b.proj_w, d, d).transpose();
        Mat dqkv(T, 3 * d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Mat& P = c.probs[static_cast<std::size_t>(h)];
            const auto q = c.qkv.middleCols(h * hd, hd);
            const auto k = c.qkv.middleCols(d + h * hd, hd);
            const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
            const auto dO = datt.middleCols(h * hd, hd);
            dqkv.middleCols(2 * d + h * hd, hd) = P.transpose() * dO;
            const Mat dP = dO * v.transpose();
            const Eigen::VectorXd rows = dP.cwiseProduct(P).rowwise().sum();
            const Mat dS = (P.array() * (dP.colwise() - rows).array()).matrix() * scale;
            dqkv.middleCols(h * hd, hd) = dS * k;
            dqkv.middleCols(d + h * hd, hd) = dS.transpose() * q;
        }
        MapMat(grad + b.qkv_w, d, 3 * d) += c.a.transpose() * dqkv;
        MapRow(grad + b.qkv_b, 3 * d) += dqkv.colwise().sum();
        const Mat da = dqkv * CMapMat(p + b.qkv_w, d, 3 * d).transpose();
        Mat dxin;
        ln_backward(da, c.ln1, p + b.ln1_g, grad + b.ln1_g, grad + b.ln1_b, dxin);
        dx = dxin + dmid;
    }
    for (Eigen::Index t = 0; t < T; ++t) {
        MapRow(grad + off.wte + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d, d) += dx.row(t);
        MapRow(grad + off.wpe + static_cast<std::size_t>(t) * d, d) += dx.row(t);
    }
    return loss;
}

std::size_t target_count(const std::vector<std::vector<int>>& batch) {
    std::size_t n = 0;
    for (const auto& s : batch)
        if (s.size() > 1) n += s.size() - 1;
    return n;
}

} // namespace

double loss_and_grad(const Checkpoint& ck, const std::vector<std::vector<int>>& batch, std::vector<double>* grad) {
    const auto off = model_offsets(ck);
    const std::size_t n = target_count(batch);
    if (n == 0) return 0.0;
    const double inv = 1.0 / static_cast<double>(n);
    if (grad) grad->assign(ck.params().size(), 0.0);
    double total = 0.0;
    for (const auto& seq : batch) total += sequence_loss(ck, off, seq, grad ? grad->data() : nullptr, inv);
    return total * inv;
}

std::vector<int> training_ids(const Vocab& vocab, const corpus::CorpusEntry& entry) {
    auto ids = vocab.encode(corpus::concat(entry.prompt, entry.piece));
    ids.push_back(Vocab::kEos);
    return ids;
}

HoldoutSplit split_sequences(const Vocab& vocab, const corpus::StyleCorpus& corpus, double holdout_fraction,
                             std::uint64_t seed) {
    std::vector<std::size_t> order(corpus.entries.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    const auto n_hold = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(order.size()))));
    HoldoutSplit split;
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto ids = training_ids(vocab, corpus.entries[order[i]]);
        (i < n_hold ? split.heldout : split.train).push_back(std::move(ids));
    }
    return split;
}

double unigram_entropy(const std::vector<std::vector<int>>& sequences, int vocab_size) {
    std::vector<double> counts(static_cast<std::size_t>(vocab_size), 0.0);
    double n = 0.0;
    for (const auto& s : sequences)
        for (std::size_t t = 1; t < s.size(); ++t) {
            counts[static_cast<std::size_t>(s[t])] += 1.0;
            n += 1.0;
        }
    double h = 0.0;
    for (double c : counts)
        if (c > 0.0) h -= (c / n) * std::log(c / n);
    return h;
}

Checkpoint train(const corpus::StyleCorpus& corpus, ModelConfig config, std::uint64_t seed,
                 const TrainOptions& options) {
    if (corpus.entries.empty()) throw Error(ErrorCode::EmptyCorpus, kModule, "cannot train on an empty corpus");
    std::vector<abc::TokenSequence> seqs;
    seqs.reserve(corpus.entries.size());
    for (const auto& e : corpus.entries) seqs.push_back(corpus::concat(e.prompt, e.piece));
    Checkpoint ck(config, Vocab::from_sequences(seqs));
    const auto& cfg = ck.config();

    auto split = split_sequences(ck.vocab(), corpus, cfg.holdout_fraction, derive_seed(seed, 0));
    if (split.train.empty()) throw Error(ErrorCode::EmptyCorpus, kModule, "no training sequences after split");
    for (const auto* part : {&split.train, &split.heldout})
        for (const auto& s : *part)
            if (static_cast<int>(s.size()) > cfg.context_len)
                throw Error(ErrorCode::ContextOverflow, kModule,
                            "sequence of " + std::to_string(s.size()) + " tokens exceeds context_len");

    ck.init_random(derive_seed(seed, 1));
    ck.meta.seed = seed;

    std::vector<double> m(ck.params().size(), 0.0);
    std::vector<double> v(ck.params().size(), 0.0);
    std::vector<double> grad;
    Rng rng(derive_seed(seed, 2));
    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<int>> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(split.train[order[cursor++]]);
        }
        const double loss = loss_and_grad(ck, batch, &grad);
        if (!std::isfinite(loss))
            throw Error(ErrorCode::DivergenceDetected, kModule, "loss became non-finite at step " + std::to_string(step));
        ck.meta.loss_curve.push_back(loss);
        if (options.on_step) options.on_step(step, loss);

        double norm2 = 0.0;
        for (double g : grad) norm2 += g * g;
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm))
            throw Error(ErrorCode::DivergenceDetected, kModule, "gradient became non-finite at step " + std::to_string(step));
        const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

        double lr = cfg.learning_rate;
        if (step < cfg.warmup_steps) {
            lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
        } else {
            const double span = std::max(1, cfg.steps - cfg.warmup_steps);
            const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
            lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
        }
        const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1);
        const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
        auto params = ck.params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grad[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
            params[i] -= lr * (update + cfg.weight_decay * params[i]);
        }
    }

    ck.round_to_float();
    ck.meta.heldout_loss = loss_and_grad(ck, split.heldout, nullptr);
    ck.meta.unigram_loss = unigram_entropy(split.heldout, cfg.vocab_size);
    if (!std::isfinite(ck.meta.heldout_loss))
        throw Error(ErrorCode::DivergenceDetected, kModule, "held-out loss is non-finite");
    return ck;
}

GradCheckResult grad_check(const ModelConfig& config, std::uint64_t seed, int n_samples, double step,
                           std::optional<std::size_t> corrupt_index) {
    Checkpoint ck(config, Vocab::placeholder(config.vocab_size));
    ck.init_random(derive_seed(seed, 0));
    Rng rng(derive_seed(seed, 1));
    const auto& cfg = ck.config();

    std::vector<std::vector<int>> batch(2);
    for (auto& s : batch)
        for (int t = 0; t < cfg.context_len; ++t)
            s.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(cfg.vocab_size))));

    std::vector<double> grad;
    loss_and_grad(ck, batch, &grad);
    if (corrupt_index) grad.at(*corrupt_index) = 2.0 * grad[*corrupt_index] + 1e-3;

    std::vector<std::size_t> coords;
    if (corrupt_index) coords.push_back(*corrupt_index);
    while (static_cast<int>(coords.size()) < n_samples) coords.push_back(rng.below(ck.params().size()));

    GradCheckResult result;
    result.n_params = ck.params().size();
    result.n_samples = static_cast<int>(coords.size());
    for (std::size_t i : coords) {
        const double saved = ck.params()[i];
        ck.params()[i] = saved + step;
        const double up = loss_and_grad(ck, batch, nullptr);
        ck.params()[i] = saved - step;
        const double down = loss_and_grad(ck, batch, nullptr);
        ck.params()[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double rel = std::abs(grad[i] - numeric) / (std::abs(numeric) + 1e-8);
        result.max_rel_error = std::max(result.max_rel_error, rel);
    }
    return result;
}

} // namespace cvsteer::lm
