#pragma once

#include "cvsteer/tinylm.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace cvsteer::lm::detail {

using RowVec = Eigen::RowVectorXd;
using CMapMat = Eigen::Map<const Mat>;
using CMapRow = Eigen::Map<const RowVec>;

constexpr double kLnEps = 1e-5;

// Offsets of one block's tensors inside the flat parameter array.
struct BlockOffsets {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, fc2_w, fc2_b;
};

struct ModelOffsets {
    std::size_t wte, wpe, lnf_g, lnf_b;
    std::vector<BlockOffsets> blocks;
};

inline ModelOffsets model_offsets(const Checkpoint& ck) {
    ModelOffsets m{};
    m.wte = ck.entry("wte").offset;
    m.wpe = ck.entry("wpe").offset;
    m.lnf_g = ck.entry("lnf.weight").offset;
    m.lnf_b = ck.entry("lnf.bias").offset;
    for (int l = 0; l < ck.config().n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        auto off = [&](const char* n) { return ck.entry(p + n).offset; };
        m.blocks.push_back(BlockOffsets{off("ln1.weight"), off("ln1.bias"), off("attn.qkv.weight"),
                                        off("attn.qkv.bias"), off("attn.proj.weight"), off("attn.proj.bias"),
                                        off("ln2.weight"), off("ln2.bias"), off("mlp.fc.weight"),
                                        off("mlp.fc.bias"), off("mlp.proj.weight"), off("mlp.proj.bias")});
    }
    return m;
}

inline double gelu(double x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
    constexpr double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LnCache {
    Mat xhat;
    Eigen::VectorXd rstd;
};

// Row-wise layer norm; fills `cache` for the backward pass when non-null.
inline Mat layer_norm(const Mat& x, const double* g, const double* b, LnCache* cache) {
    const auto d = x.cols();
    const CMapRow gain(g, d);
    const CMapRow bias(b, d);
    Mat y(x.rows(), d);
    if (cache) {
        cache->xhat.resize(x.rows(), d);
        cache->rstd.resize(x.rows());
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).mean();
        const RowVec xc = x.row(i).array() - mean;
        const double var = xc.squaredNorm() / static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        const RowVec xhat = xc * rstd;
        y.row(i) = xhat.cwiseProduct(gain) + bias;
        if (cache) {
            cache->xhat.row(i) = xhat;
            cache->rstd(i) = rstd;
        }
    }
    return y;
}

} // namespace cvsteer::lm::detail
