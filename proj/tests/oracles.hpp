#pragma once

// Brute-force reference implementations used as test oracles. They are
// written from the metric definitions directly, with loops instead of the
// library's sorting and matrix code.

#include "cvsteer/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <vector>

namespace oracle {

inline double dist(const Eigen::MatrixXd& X, long i, long j) {
    double s = 0.0;
    for (long c = 0; c < X.cols(); ++c) s += (X(i, c) - X(j, c)) * (X(i, c) - X(j, c));
    return std::sqrt(s);
}

// j is among the k nearest of i when fewer than k other points are strictly
// closer, counting an equal distance at a lower index as closer.
inline double knn_purity(const Eigen::MatrixXd& X, const std::vector<int>& y, int k) {
    const long n = X.rows();
    double total = 0.0;
    for (long i = 0; i < n; ++i) {
        int same = 0;
        for (long j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dj = dist(X, i, j);
            int closer = 0;
            for (long m = 0; m < n; ++m) {
                if (m == i || m == j) continue;
                const double dm = dist(X, i, m);
                if (dm < dj || (dm == dj && m < j)) ++closer;
            }
            if (closer < k && y[i] == y[j]) ++same;
        }
        total += static_cast<double>(same) / k;
    }
    return total / static_cast<double>(n);
}

struct Clusters {
    std::vector<int> ids;
    std::vector<Eigen::VectorXd> centroid;
    std::vector<double> scatter; // mean distance of members to their centroid
};

inline Clusters clusters(const Eigen::MatrixXd& X, const std::vector<int>& y) {
    std::map<int, std::vector<long>> members;
    for (long i = 0; i < X.rows(); ++i) members[y[i]].push_back(i);
    Clusters c;
    for (const auto& [id, idx] : members) {
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(X.cols());
        for (long i : idx)
            for (long d = 0; d < X.cols(); ++d) mu(d) += X(i, d);
        mu /= static_cast<double>(idx.size());
        double s = 0.0;
        for (long i : idx) {
            double q = 0.0;
            for (long d = 0; d < X.cols(); ++d) q += (X(i, d) - mu(d)) * (X(i, d) - mu(d));
            s += std::sqrt(q);
        }
        c.ids.push_back(id);
        c.centroid.push_back(mu);
        c.scatter.push_back(s / static_cast<double>(idx.size()));
    }
    return c;
}

inline double vdist(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double s = 0.0;
    for (long d = 0; d < a.size(); ++d) s += (a(d) - b(d)) * (a(d) - b(d));
    return std::sqrt(s);
}

inline double neg_davies_bouldin(const Eigen::MatrixXd& X, const std::vector<int>& y) {
    const auto c = clusters(X, y);
    const std::size_t K = c.ids.size();
    double sum = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
        double worst = -1.0;
        for (std::size_t j = 0; j < K; ++j)
            if (j != i) worst = std::max(worst, (c.scatter[i] + c.scatter[j]) / vdist(c.centroid[i], c.centroid[j]));
        sum += worst;
    }
    return -sum / static_cast<double>(K);
}

inline double separation_ratio(const Eigen::MatrixXd& X, const std::vector<int>& y) {
    const auto c = clusters(X, y);
    double inter = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < c.ids.size(); ++i)
        for (std::size_t j = i + 1; j < c.ids.size(); ++j) {
            inter += vdist(c.centroid[i], c.centroid[j]);
            ++pairs;
        }
    inter /= pairs;
    double intra = 0.0;
    for (long i = 0; i < X.rows(); ++i) {
        std::size_t slot = 0;
        while (c.ids[slot] != y[i]) ++slot;
        intra += vdist(X.row(i).transpose(), c.centroid[slot]);
    }
    intra /= static_cast<double>(X.rows());
    return inter / intra;
}

// Average rank by counting: 1 + #smaller + (#equal others) / 2.
inline std::vector<double> count_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double smaller = 0, equal = 0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (j == i) continue;
            if (v[j] < v[i]) ++smaller;
            else if (v[j] == v[i]) ++equal;
        }
        r[i] = 1.0 + smaller + equal / 2.0;
    }
    return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    const auto rx = count_ranks(x), ry = count_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += rx[i] / n;
        my += ry[i] / n;
    }
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

// Random labelled point cloud: n points, d dims, K labels (each used at
// least once), cluster offsets so metrics are not all degenerate.
struct Instance {
    Eigen::MatrixXd X;
    std::vector<int> y;
};

inline Instance random_instance(cvsteer::Rng& rng, int n_min, int n_max, int K) {
    const int n = n_min + static_cast<int>(rng.below(static_cast<std::size_t>(n_max - n_min + 1)));
    const int d = 1 + static_cast<int>(rng.below(6));
    Instance inst;
    inst.X.resize(n, d);
    inst.y.resize(static_cast<std::size_t>(n));
    std::vector<Eigen::VectorXd> offsets;
    for (int k = 0; k < K; ++k) {
        Eigen::VectorXd o(d);
        for (int c = 0; c < d; ++c) o(c) = 3.0 * rng.normal();
        offsets.push_back(o);
    }
    for (int i = 0; i < n; ++i) {
        const int label = i < K ? i : static_cast<int>(rng.below(static_cast<std::size_t>(K)));
        inst.y[static_cast<std::size_t>(i)] = label;
        for (int c = 0; c < d; ++c) inst.X(i, c) = offsets[static_cast<std::size_t>(label)](c) + rng.normal();
    }
    return inst;
}

} // namespace oracle
