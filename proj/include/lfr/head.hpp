#pragma once

// Per-level depth decoding plus confidence-weighted aggregation across
// recomposed feature levels.

#include <cmath>
#include <vector>

#include "lfr/lfr_module.hpp"
#include "lfr/params.hpp"
#include "lfr/tensor.hpp"

namespace lfr {

struct LevelDecoder {
    Tensor proj_w;  // C x (4*ch0): per-token 2x2 block of ch0-channel logits
    Tensor proj_b;
    Tensor up1_w;  // {ch1, ch0, 2, 2}
    Tensor up1_b;
    Tensor up2_w;  // {1, ch1, 2, 2}
    Tensor up2_b;
};

struct HeadParams {
    std::vector<LevelDecoder> levels;
    Tensor weight_w;  // C x 1, shared across levels
    Tensor weight_b;  // 1 x 1
    double max_depth = 10.0;
    int ch0 = 8;
    int ch1 = 4;
};

inline HeadParams init_head(int width, int k, ParamRegistry& reg, InitRng& rng, double max_depth = 10.0) {
    HeadParams p;
    p.max_depth = max_depth;
    auto nrm = rng.normal(0.02);
    for (int s = 0; s < k; ++s) {
        const std::string pre = "head.lvl" + std::to_string(s) + ".";
        LevelDecoder d;
        d.proj_w = reg.create(pre + "proj.w", {width, 4 * p.ch0}, nrm);
        d.proj_b = reg.constant(pre + "proj.b", {1, 4 * p.ch0}, 0.0);
        d.up1_w = reg.create(pre + "up1.w", {p.ch1, p.ch0, 2, 2}, nrm);
        d.up1_b = reg.constant(pre + "up1.b", {p.ch1}, 0.0);
        d.up2_w = reg.create(pre + "up2.w", {1, p.ch1, 2, 2}, nrm);
        d.up2_b = reg.constant(pre + "up2.b", {1}, 0.0);
        p.levels.push_back(std::move(d));
    }
    p.weight_w = reg.create("head.weight.w", {width, 1}, nrm);
    p.weight_b = reg.constant("head.weight.b", {1, 1}, 0.0);
    return p;
}

// tokens NxC on a (gr x gc) grid -> depth map {1, 8*gr, 8*gc} in (0, max_depth)
inline Tensor decode_level(const Tensor& tokens, int grid_rows, int grid_cols, const LevelDecoder& dec,
                           const HeadParams& head) {
    const int n = tokens.rows();
    if (grid_rows * grid_cols != n)
        throw DimensionError("decode_level: grid " + std::to_string(grid_rows) + "x" +
                             std::to_string(grid_cols) + " does not cover " + std::to_string(n) + " tokens");
    const int ch0 = head.ch0;
    Tensor proj = add_rowvec(matmul(tokens, dec.proj_w), dec.proj_b);  // N x 4*ch0
    // scatter each token's 2x2 block onto the doubled grid
    const int h0 = 2 * grid_rows, w0 = 2 * grid_cols;
    std::vector<int> map(static_cast<size_t>(ch0) * h0 * w0);
    for (int ch = 0; ch < ch0; ++ch)
        for (int i = 0; i < h0; ++i)
            for (int j = 0; j < w0; ++j) {
                const int t = (i / 2) * grid_cols + (j / 2);
                const int sub = (i % 2) * 2 + (j % 2);
                map[(static_cast<size_t>(ch) * h0 + i) * w0 + j] = t * (4 * ch0) + ch * 4 + sub;
            }
    Tensor grid0 = gather(proj, std::move(map), {ch0, h0, w0});
    Tensor up1 = gelu(tconv2x2(grid0, dec.up1_w, dec.up1_b));
    Tensor up2 = tconv2x2(up1, dec.up2_w, dec.up2_b);
    return scale(sigmoid(up2), head.max_depth);
}

// softmax-normalized per-level weights from the recomposed class tokens;
// scorer_logits, when present, enter additively (learned-scores path).
inline Tensor level_weights(const std::vector<Tensor>& cls, const HeadParams& head,
                            const std::vector<Tensor>& scorer_logits = {}) {
    const int k = static_cast<int>(cls.size());
    if (k < 1) throw DomainError("level_weights: need at least one level");
    Tensor logits;
    for (int s = 0; s < k; ++s) {
        Tensor z = reshape(add_rowvec(matmul(cls[static_cast<size_t>(s)], head.weight_w), head.weight_b),
                           {1});
        if (!scorer_logits.empty()) z = add(z, scorer_logits[static_cast<size_t>(s)]);
        logits = s == 0 ? z : concat_rows(reshape(logits, {s, 1}), reshape(z, {1, 1}));
        if (s > 0) logits = reshape(logits, {s + 1});
    }
    return softmax(logits);  // {K}, positive, sums to 1
}

inline Tensor aggregate(const Tensor& weights, const std::vector<Tensor>& levels) {
    const int k = static_cast<int>(levels.size());
    if (weights.numel() != k) throw DimensionError("aggregate: weight count does not match levels");
    Tensor out;
    for (int s = 0; s < k; ++s) {
        if (levels[static_cast<size_t>(s)].shape() != levels[0].shape())
            throw DimensionError("aggregate: level resolution mismatch");
        Tensor w = gather(weights, {s}, {1});
        Tensor term = scale_by(levels[static_cast<size_t>(s)], w);
        out = s == 0 ? term : add(out, term);
    }
    return out;
}

}  // namespace lfr
