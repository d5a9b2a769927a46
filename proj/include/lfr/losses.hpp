#pragma once

// Training losses (scale-invariant log + hierarchical normalization) and
// the standard depth evaluation metrics.

#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfr/analysis.hpp"
#include "lfr/tensor.hpp"

namespace lfr {

struct LossConfig {
    double lambda = 0.85;
    std::vector<int> hn_scales = {1, 4, 8};
    double epsilon = 1e-6;
    bool hn_log_depth = false;  // normalize log depth instead of metric depth

    void validate() const {
        if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must lie in [0,1]");
        for (int m : hn_scales)
            if (m < 1) throw ConfigError("hn scales must be positive");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    }
};

namespace losses {

inline void check_positive(const std::vector<double>& depth, const DepthMap& gt, const char* what) {
    for (int i = 0; i < gt.size(); ++i) {
        if (!gt.is_valid(i)) continue;
        if (!(depth[static_cast<size_t>(i)] > 0.0))
            throw DomainError(std::string(what) + ": non-positive depth " +
                              std::to_string(depth[static_cast<size_t>(i)]) + " at valid pixel " +
                              std::to_string(i));
    }
}

// sqrt( mean g^2 - lambda * (mean g)^2 ), g = log pred - log gt over valid pixels
inline Tensor silog_loss(const Tensor& pred, const DepthMap& gt, double lambda) {
    if (pred.numel() != gt.size()) throw DimensionError("silog_loss: prediction/gt resolution mismatch");
    check_positive(pred.data(), gt, "silog pred");
    check_positive(gt.depth, gt, "silog gt");
    std::vector<int> valid;
    for (int i = 0; i < gt.size(); ++i)
        if (gt.is_valid(i)) valid.push_back(i);
    if (valid.empty()) throw DomainError("silog_loss: no valid pixels");
    const double nv = static_cast<double>(valid.size());
    double sum_g = 0.0, sum_g2 = 0.0;
    for (int i : valid) {
        const double g = std::log(pred.data()[static_cast<size_t>(i)]) -
                         std::log(gt.depth[static_cast<size_t>(i)]);
        sum_g += g;
        sum_g2 += g * g;
    }
    const double mean_g = sum_g / nv;
    double radicand = sum_g2 / nv - lambda * mean_g * mean_g;
    if (radicand < 0.0) {
        if (radicand < -1e-12)
            throw NumericError("silog_loss: negative radicand " + std::to_string(radicand));
        radicand = 0.0;
    }
    const double loss = std::sqrt(radicand);
    auto vld = std::make_shared<std::vector<int>>(std::move(valid));
    auto gt_depth = std::make_shared<std::vector<double>>(gt.depth);
    return detail::make_op({1}, {loss}, {pred.node()}, [vld, gt_depth, lambda, mean_g, loss, nv](Node& nd) {
        Node& p = *nd.inputs[0];
        p.ensure_grad();
        if (loss <= 0.0) return;  // flat at the exact minimum
        const double g0 = nd.grad[0];
        for (int i : *vld) {
            const double pv = p.value[static_cast<size_t>(i)];
            const double g = std::log(pv) - std::log((*gt_depth)[static_cast<size_t>(i)]);
            const double dg = (g - lambda * mean_g) / (nv * loss);
            p.grad[static_cast<size_t>(i)] += g0 * dg / pv;
        }
    });
}

// (v - mean) / (mad + eps), mad = mean absolute deviation about the mean
inline std::vector<double> hn_patch_normalize(const std::vector<double>& values, double eps) {
    if (values.empty()) throw DomainError("hn_patch_normalize: empty patch");
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= n;
    double mad = 0.0;
    for (double v : values) mad += std::abs(v - mean);
    mad /= n;
    std::vector<double> out(values.size());
    for (size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean) / (mad + eps);
    return out;
}

namespace detail_hn {

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

struct PatchGrad {
    // coefficients of dL/dp for the pixels of one patch
    std::vector<int> pix;
    std::vector<double> coeff;
};

}  // namespace detail_hn

// Eqs "per-patch normalize, L1, average over covering patches and valid
// pixels". Scale M partitions the map into an MxM patch grid.
inline Tensor hn_loss(const Tensor& pred, const DepthMap& gt, const LossConfig& cfg) {
    cfg.validate();
    if (pred.numel() != gt.size()) throw DimensionError("hn_loss: prediction/gt resolution mismatch");
    const int H = gt.h, W = gt.w;
    int nv = 0;
    for (int i = 0; i < gt.size(); ++i)
        if (gt.is_valid(i)) ++nv;
    if (nv == 0) throw DomainError("hn_loss: no valid pixels");
    const double pixel_w = 1.0 / (static_cast<double>(nv) * cfg.hn_scales.size());
    const double eps = cfg.epsilon;
    const bool use_log = cfg.hn_log_depth;
    if (use_log) {
        check_positive(pred.data(), gt, "hn pred");
        check_positive(gt.depth, gt, "hn gt");
    }

    auto value_of = [&](double d) { return use_log ? std::log(d) : d; };

    double loss = 0.0;
    auto grads = std::make_shared<std::vector<detail_hn::PatchGrad>>();
    for (int m : cfg.hn_scales) {
        for (int pi = 0; pi < m; ++pi)
            for (int pj = 0; pj < m; ++pj) {
                const int r0 = pi * H / m, r1 = (pi + 1) * H / m;
                const int c0 = pj * W / m, c1 = (pj + 1) * W / m;
                std::vector<int> pix;
                for (int r = r0; r < r1; ++r)
                    for (int c = c0; c < c1; ++c) {
                        const int idx = r * W + c;
                        if (gt.is_valid(idx)) pix.push_back(idx);
                    }
                if (pix.empty()) continue;
                const double n = static_cast<double>(pix.size());
                double mp = 0.0, mg = 0.0;
                for (int i : pix) {
                    mp += value_of(pred.data()[static_cast<size_t>(i)]);
                    mg += value_of(gt.depth[static_cast<size_t>(i)]);
                }
                mp /= n;
                mg /= n;
                double ap = 0.0, ag = 0.0;
                for (int i : pix) {
                    ap += std::abs(value_of(pred.data()[static_cast<size_t>(i)]) - mp);
                    ag += std::abs(value_of(gt.depth[static_cast<size_t>(i)]) - mg);
                }
                ap /= n;
                ag /= n;
                const double denom_p = ap + eps, denom_g = ag + eps;

                // forward plus the coefficients needed for backward
                double sum_c = 0.0, sum_ct = 0.0, mean_s = 0.0;
                std::vector<double> cvec(pix.size()), tvec(pix.size()), svec(pix.size());
                for (size_t q = 0; q < pix.size(); ++q) {
                    const double pv = value_of(pred.data()[static_cast<size_t>(pix[q])]);
                    const double gv = value_of(gt.depth[static_cast<size_t>(pix[q])]);
                    const double t = (pv - mp) / denom_p;
                    const double u = (gv - mg) / denom_g;
                    loss += pixel_w * std::abs(u - t);
                    const double c = -pixel_w * detail_hn::sgn(u - t);
                    cvec[q] = c;
                    tvec[q] = t;
                    svec[q] = detail_hn::sgn(pv - mp);
                    sum_c += c;
                    sum_ct += c * t;
                    mean_s += svec[q];
                }
                mean_s /= n;
                detail_hn::PatchGrad pg;
                pg.pix = pix;
                pg.coeff.resize(pix.size());
                const double st = sum_ct / denom_p;
                for (size_t q = 0; q < pix.size(); ++q)
                    pg.coeff[q] = cvec[q] / denom_p - sum_c / (n * denom_p) - st * (svec[q] - mean_s) / n;
                grads->push_back(std::move(pg));
            }
    }
    auto pred_vals = std::make_shared<std::vector<double>>(pred.data());
    return detail::make_op({1}, {loss}, {pred.node()}, [grads, use_log, pred_vals](Node& nd) {
        Node& p = *nd.inputs[0];
        p.ensure_grad();
        const double g0 = nd.grad[0];
        for (const auto& pg : *grads)
            for (size_t q = 0; q < pg.pix.size(); ++q) {
                double d = pg.coeff[q];
                if (use_log) d /= (*pred_vals)[static_cast<size_t>(pg.pix[q])];
                p.grad[static_cast<size_t>(pg.pix[q])] += g0 * d;
            }
    });
}

inline Tensor total_loss(const Tensor& pred, const DepthMap& gt, const LossConfig& cfg) {
    return add(silog_loss(pred, gt, cfg.lambda), hn_loss(pred, gt, cfg));
}

}  // namespace losses

struct MetricReport {
    double abs_rel = 0.0, sq_rel = 0.0, rmse = 0.0, rmse_log = 0.0, log10 = 0.0, silog = 0.0;
    double d1 = 0.0, d2 = 0.0, d3 = 0.0;
    int n_valid = 0;

    nlohmann::json to_json() const {
        return {{"abs_rel", abs_rel}, {"sq_rel", sq_rel}, {"rmse", rmse},  {"rmse_log", rmse_log},
                {"log10", log10},     {"silog", silog},   {"d1", d1},      {"d2", d2},
                {"d3", d3},           {"n_valid", n_valid}};
    }
};

inline MetricReport eval_metrics(const std::vector<double>& pred, const DepthMap& gt, double min_depth = 1e-3,
                                 double max_depth = 10.0) {
    if (static_cast<int>(pred.size()) != gt.size())
        throw DimensionError("eval_metrics: resolution mismatch");
    MetricReport r;
    double sum_abs = 0.0, sum_sq = 0.0, sum_se = 0.0, sum_le = 0.0, sum_l10 = 0.0;
    double sum_g = 0.0, sum_g2 = 0.0;
    int c1 = 0, c2 = 0, c3 = 0;
    for (int i = 0; i < gt.size(); ++i) {
        if (!gt.is_valid(i)) continue;
        double p = std::clamp(pred[static_cast<size_t>(i)], min_depth, max_depth);
        double g = std::clamp(gt.depth[static_cast<size_t>(i)], min_depth, max_depth);
        ++r.n_valid;
        sum_abs += std::abs(p - g) / g;
        sum_sq += (p - g) * (p - g) / g;
        sum_se += (p - g) * (p - g);
        const double lg = std::log(p) - std::log(g);
        sum_le += lg * lg;
        sum_g += lg;
        sum_g2 += lg * lg;
        sum_l10 += std::abs(std::log10(p) - std::log10(g));
        const double ratio = std::max(p / g, g / p);
        if (ratio < 1.25) ++c1;
        if (ratio < 1.25 * 1.25) ++c2;
        if (ratio < 1.25 * 1.25 * 1.25) ++c3;
    }
    if (r.n_valid == 0) throw DomainError("eval_metrics: empty valid set");
    const double n = static_cast<double>(r.n_valid);
    r.abs_rel = sum_abs / n;
    r.sq_rel = sum_sq / n;
    r.rmse = std::sqrt(sum_se / n);
    r.rmse_log = std::sqrt(sum_le / n);
    r.log10 = sum_l10 / n;
    const double var_g = std::max(0.0, sum_g2 / n - (sum_g / n) * (sum_g / n));
    r.silog = std::sqrt(var_g);
    r.d1 = c1 / n;
    r.d2 = c2 / n;
    r.d3 = c3 / n;
    return r;
}

}  // namespace lfr
