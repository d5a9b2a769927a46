#pragma once

// Layer-wise feature statistics: inter-sample representational distance,
// alignment with depth geometry, and per-sample linear depth predictability.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfr/backbone.hpp"
#include "lfr/tensor.hpp"

namespace lfr {

struct DepthMap {
    int h = 0;
    int w = 0;
    std::vector<double> depth;        // positive scene units
    std::vector<std::uint8_t> valid;  // empty means all valid

    bool is_valid(int i) const { return valid.empty() || valid[static_cast<size_t>(i)] != 0; }
    int size() const { return h * w; }
};

struct RDM {
    int layer = 0;
    int samples = 0;
    std::vector<double> dist;  // SxS row-major
    double at(int i, int j) const { return dist[static_cast<size_t>(i) * samples + j]; }
};

using DDM = RDM;

struct LayerStats {
    int layer = 0;
    double mean_rdm = 0.0;
    double rdm_ci_lo = 0.0, rdm_ci_hi = 0.0;
    double spearman_to_depth = 0.0;
    double mean_r2 = 0.0;
    double r2_ci_lo = 0.0, r2_ci_hi = 0.0;
};

namespace analysis {

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw DomainError("pearson: need equal lengths >= 2, got " + std::to_string(x.size()) + " and " +
                          std::to_string(y.size()));
    const size_t n = x.size();
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DomainError("pearson: constant vector, correlation undefined");
    return sxy / std::sqrt(sxx * syy);
}

inline double pearson_distance(const std::vector<double>& x, const std::vector<double>& y) {
    return 1.0 - pearson(x, y);
}

// mean over the N image tokens -> C-vector
inline std::vector<double> mean_token(const Tensor& tokens) {
    const int n = tokens.rows(), c = tokens.cols();
    std::vector<double> m(static_cast<size_t>(c), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) m[static_cast<size_t>(j)] += tokens.at(i, j);
    for (auto& v : m) v /= n;
    return m;
}

inline RDM build_rdm(const std::vector<FeatureStack>& stacks, int layer) {
    const int s = static_cast<int>(stacks.size());
    if (s < 3) throw DomainError("build_rdm: need at least 3 samples, got " + std::to_string(s));
    std::vector<std::vector<double>> means;
    means.reserve(static_cast<size_t>(s));
    for (const auto& st : stacks) means.push_back(mean_token(st.tokens.at(static_cast<size_t>(layer))));
    RDM rdm;
    rdm.layer = layer;
    rdm.samples = s;
    rdm.dist.assign(static_cast<size_t>(s) * s, 0.0);
    for (int i = 0; i < s; ++i)
        for (int j = i + 1; j < s; ++j) {
            double d;
            try {
                d = pearson_distance(means[static_cast<size_t>(i)], means[static_cast<size_t>(j)]);
            } catch (const DomainError& e) {
                throw DomainError("build_rdm: samples " + std::to_string(i) + "," + std::to_string(j) +
                                  ": " + e.what());
            }
            rdm.dist[static_cast<size_t>(i) * s + j] = d;
            rdm.dist[static_cast<size_t>(j) * s + i] = d;
        }
    return rdm;
}

inline DDM build_ddm(const std::vector<DepthMap>& depths) {
    const int s = static_cast<int>(depths.size());
    if (s < 3) throw DomainError("build_ddm: need at least 3 maps");
    for (int i = 1; i < s; ++i)
        if (depths[static_cast<size_t>(i)].h != depths[0].h || depths[static_cast<size_t>(i)].w != depths[0].w)
            throw DimensionError("build_ddm: resolution mismatch at map " + std::to_string(i));
    DDM ddm;
    ddm.samples = s;
    ddm.dist.assign(static_cast<size_t>(s) * s, 0.0);
    for (int i = 0; i < s; ++i)
        for (int j = i + 1; j < s; ++j) {
            const double d =
                pearson_distance(depths[static_cast<size_t>(i)].depth, depths[static_cast<size_t>(j)].depth);
            ddm.dist[static_cast<size_t>(i) * s + j] = d;
            ddm.dist[static_cast<size_t>(j) * s + i] = d;
        }
    return ddm;
}

// average ranks with tie handling
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 3)
        throw DomainError("spearman: need equal lengths >= 3, got " + std::to_string(a.size()));
    return pearson(average_ranks(a), average_ranks(b));
}

inline std::vector<double> upper_triangle(const RDM& m) {
    std::vector<double> v;
    v.reserve(static_cast<size_t>(m.samples) * (m.samples - 1) / 2);
    for (int i = 0; i < m.samples; ++i)
        for (int j = i + 1; j < m.samples; ++j) v.push_back(m.at(i, j));
    return v;
}

inline double spearman_rdm_ddm(const RDM& a, const DDM& b) {
    if (a.samples != b.samples) throw DimensionError("spearman: RDM/DDM sample counts differ");
    return spearman(upper_triangle(a), upper_triangle(b));
}

// align-corners-false bilinear sampling at target cell centers
inline std::vector<double> bilinear_downsample(const std::vector<double>& src, int h, int w, int th, int tw) {
    if (th <= 0 || tw <= 0) throw DomainError("bilinear_downsample: zero target extent");
    if (th > h || tw > w) throw DomainError("bilinear_downsample: target exceeds source");
    std::vector<double> out(static_cast<size_t>(th) * tw);
    const double sy = static_cast<double>(h) / th, sx = static_cast<double>(w) / tw;
    for (int i = 0; i < th; ++i)
        for (int j = 0; j < tw; ++j) {
            double fy = (i + 0.5) * sy - 0.5;
            double fx = (j + 0.5) * sx - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
            fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double wy = fy - y0, wx = fx - x0;
            out[static_cast<size_t>(i) * tw + j] =
                (1 - wy) * ((1 - wx) * src[static_cast<size_t>(y0) * w + x0] +
                            wx * src[static_cast<size_t>(y0) * w + x1]) +
                wy * ((1 - wx) * src[static_cast<size_t>(y1) * w + x0] +
                      wx * src[static_cast<size_t>(y1) * w + x1]);
        }
    return out;
}

// In-sample linear-regression R^2 of the token-grid depth on token channels.
inline double depth_r2(const Tensor& tokens, const DepthMap& depth, int grid_rows, int grid_cols,
                       bool* rank_deficient = nullptr) {
    const int n = tokens.rows(), c = tokens.cols();
    if (grid_rows * grid_cols != n) throw DimensionError("depth_r2: grid does not match token count");
    if (n <= c) throw DomainError("depth_r2: ill-posed, tokens " + std::to_string(n) + " <= channels " +
                                  std::to_string(c));
    std::vector<double> target = bilinear_downsample(depth.depth, depth.h, depth.w, grid_rows, grid_cols);
    Eigen::MatrixXd x(n, c + 1);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) x(i, j) = tokens.at(i, j);
        x(i, c) = 1.0;
        y(i) = target[static_cast<size_t>(i)];
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(x);
    if (rank_deficient) *rank_deficient = cod.rank() < c + 1;
    Eigen::VectorXd beta = cod.solve(y);
    const Eigen::VectorXd resid = y - x * beta;
    const double ss_res = resid.squaredNorm();
    const double mean_y = y.mean();
    const double ss_tot = (y.array() - mean_y).square().sum();
    if (ss_tot == 0.0) throw DomainError("depth_r2: constant depth target");
    return 1.0 - ss_res / ss_tot;
}

// cosine similarity of one token to all tokens, on the patch grid
inline std::vector<double> anchor_similarity_map(const Tensor& tokens, int anchor, int grid_rows,
                                                 int grid_cols) {
    const int n = tokens.rows(), c = tokens.cols();
    if (anchor < 0 || anchor >= n) throw DomainError("anchor_similarity_map: anchor out of range");
    if (grid_rows * grid_cols != n) throw DimensionError("anchor_similarity_map: grid mismatch");
    std::vector<double> out(static_cast<size_t>(n));
    double na = 0.0;
    for (int j = 0; j < c; ++j) na += tokens.at(anchor, j) * tokens.at(anchor, j);
    na = std::sqrt(na);
    if (na == 0.0) throw DomainError("anchor_similarity_map: zero-norm anchor token");
    for (int i = 0; i < n; ++i) {
        if (i == anchor) {
            out[static_cast<size_t>(i)] = 1.0;
            continue;
        }
        double dot = 0.0, nb = 0.0;
        for (int j = 0; j < c; ++j) {
            dot += tokens.at(anchor, j) * tokens.at(i, j);
            nb += tokens.at(i, j) * tokens.at(i, j);
        }
        nb = std::sqrt(nb);
        if (nb == 0.0) throw DomainError("anchor_similarity_map: zero-norm token " + std::to_string(i));
        out[static_cast<size_t>(i)] = dot / (na * nb);
    }
    return out;
}

struct MeanCi {
    double mean = 0.0, lo = 0.0, hi = 0.0;
};

inline MeanCi mean_ci95(const std::vector<double>& v) {
    MeanCi r;
    const double n = static_cast<double>(v.size());
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    if (v.size() < 2) {
        r.lo = r.hi = r.mean;
        return r;
    }
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    const double stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    r.lo = r.mean - 1.96 * stderr_;
    r.hi = r.mean + 1.96 * stderr_;
    return r;
}

struct LayerReport {
    std::vector<LayerStats> layers;
    double r2_trend_spearman = 0.0;
};

inline LayerReport layer_report(const std::vector<FeatureStack>& stacks,
                                const std::vector<DepthMap>& depths) {
    if (stacks.size() < 3 || stacks.size() != depths.size())
        throw DomainError("layer_report: need >= 3 matched samples");
    const int L = stacks[0].layers();
    DDM ddm = build_ddm(depths);
    LayerReport report;
    std::vector<double> layer_idx, mean_r2s;
    for (int l = 0; l < L; ++l) {
        LayerStats st;
        st.layer = l + 1;
        RDM rdm = build_rdm(stacks, l);
        auto pairs = upper_triangle(rdm);
        auto ci = mean_ci95(pairs);
        st.mean_rdm = ci.mean;
        st.rdm_ci_lo = ci.lo;
        st.rdm_ci_hi = ci.hi;
        st.spearman_to_depth = spearman_rdm_ddm(rdm, ddm);
        std::vector<double> r2s;
        for (size_t s = 0; s < stacks.size(); ++s)
            r2s.push_back(depth_r2(stacks[s].tokens[static_cast<size_t>(l)], depths[s],
                                   stacks[s].grid_rows, stacks[s].grid_cols));
        auto rci = mean_ci95(r2s);
        st.mean_r2 = rci.mean;
        st.r2_ci_lo = rci.lo;
        st.r2_ci_hi = rci.hi;
        layer_idx.push_back(static_cast<double>(st.layer));
        mean_r2s.push_back(st.mean_r2);
        report.layers.push_back(st);
    }
    // a perfectly flat R^2 profile has no rank trend; report 0 instead of
    // letting the constant-vector correlation throw
    const auto [mn, mx] = std::minmax_element(mean_r2s.begin(), mean_r2s.end());
    report.r2_trend_spearman = (*mn == *mx) ? 0.0 : spearman(layer_idx, mean_r2s);
    return report;
}

inline nlohmann::json report_to_json(const LayerReport& report) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& st : report.layers) {
        arr.push_back({{"layer", st.layer},
                       {"mean_rdm", st.mean_rdm},
                       {"rdm_ci", {st.rdm_ci_lo, st.rdm_ci_hi}},
                       {"spearman_to_depth", st.spearman_to_depth},
                       {"mean_r2", st.mean_r2},
                       {"r2_ci", {st.r2_ci_lo, st.r2_ci_hi}}});
    }
    arr.push_back({{"r2_trend_spearman", report.r2_trend_spearman}});
    return arr;
}

}  // namespace analysis
}  // namespace lfr
