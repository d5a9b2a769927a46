#pragma once

// Last-layer-centric feature recombination: auxiliary-layer selection
// under four strategies and gated bottleneck-adapter fusion.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "lfr/backbone.hpp"
#include "lfr/params.hpp"
#include "lfr/tensor.hpp"

namespace lfr {

enum class SelectionKind { MinimalSimilarity, MaximalSimilarity, NodeDegree, LearnedScores };

inline std::string to_string(SelectionKind k) {
    switch (k) {
        case SelectionKind::MinimalSimilarity: return "minimal_similarity";
        case SelectionKind::MaximalSimilarity: return "maximal_similarity";
        case SelectionKind::NodeDegree: return "node_degree";
        case SelectionKind::LearnedScores: return "learned_scores";
    }
    return "?";
}

inline SelectionKind selection_from_string(const std::string& s) {
    if (s == "minimal_similarity") return SelectionKind::MinimalSimilarity;
    if (s == "maximal_similarity") return SelectionKind::MaximalSimilarity;
    if (s == "node_degree") return SelectionKind::NodeDegree;
    if (s == "learned_scores") return SelectionKind::LearnedScores;
    throw ConfigError("unknown selection strategy: " + s);
}

struct SelectionStrategy {
    SelectionKind kind = SelectionKind::MinimalSimilarity;
    int k = 4;

    void validate(int layers) const {
        if (k < 1 || k > layers - 1)
            throw ConfigError("K=" + std::to_string(k) + " must lie in [1, L-1] with L=" +
                              std::to_string(layers));
    }
};

struct AdapterSlot {
    Tensor down_w;  // 2C x Cb
    Tensor down_b;  // 1 x Cb
    Tensor up_w;    // Cb x C
    Tensor up_b;    // 1 x C
    Tensor gate;    // scalar, tanh-squashed in the forward pass
};

struct AdapterParams {
    std::vector<AdapterSlot> slots;
    Tensor scorer_w;  // C x 1, learned-scores strategy
    Tensor scorer_b;  // 1 x 1
    int bottleneck = 0;
    Pointwise activation = Pointwise::Gelu;
};

inline AdapterParams init_adapters(int width, int k, ParamRegistry& reg, InitRng& rng, int bottleneck = 0,
                                   Pointwise activation = Pointwise::Gelu) {
    AdapterParams p;
    p.bottleneck = bottleneck > 0 ? bottleneck : width / 2;
    p.activation = activation;
    auto nrm = rng.normal(0.02);
    for (int s = 0; s < k; ++s) {
        const std::string pre = "adapter" + std::to_string(s) + ".";
        AdapterSlot slot;
        slot.down_w = reg.create(pre + "down.w", {2 * width, p.bottleneck}, nrm);
        slot.down_b = reg.constant(pre + "down.b", {1, p.bottleneck}, 0.0);
        slot.up_w = reg.create(pre + "up.w", {p.bottleneck, width}, nrm);
        slot.up_b = reg.constant(pre + "up.b", {1, width}, 0.0);
        // gates start at zero: training begins at the last-layer-only baseline
        slot.gate = reg.constant(pre + "gate", {1}, 0.0);
        p.slots.push_back(std::move(slot));
    }
    p.scorer_w = reg.create("scorer.w", {width, 1}, nrm);
    p.scorer_b = reg.constant("scorer.b", {1, 1}, 0.0);
    return p;
}

struct RecombinedSet {
    std::vector<Tensor> tokens;        // K entries, NxC
    std::vector<Tensor> cls;           // K entries, 1xC
    std::vector<int> selected;         // ascending source layer indices (0-based)
    std::vector<double> gates;         // effective tanh(g) per slot
    std::vector<Tensor> scorer_logits; // learned-scores auxiliary path, K scalars (may be empty)
};

namespace detail_lfr {

inline double cosine(const double* a, const double* b, int c, const std::string& what) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int j = 0; j < c; ++j) {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    if (na == 0.0 || nb == 0.0) throw DomainError("cosine: zero-norm vector in " + what);
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail_lfr

// mean cosine similarity between the final class token and layer l's image tokens
inline double avg_cls_similarity(const FeatureStack& stack, int layer) {
    const int L = stack.layers();
    if (layer < 0 || layer >= L - 1) throw DomainError("avg_cls_similarity: layer must precede the last");
    const Tensor& cls_last = stack.cls.back();
    const Tensor& tok = stack.tokens[static_cast<size_t>(layer)];
    const int n = tok.rows(), c = tok.cols();
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        acc += detail_lfr::cosine(cls_last.data().data(), &tok.data()[static_cast<size_t>(i) * c], c,
                                  "layer " + std::to_string(layer) + " token " + std::to_string(i));
    return acc / n;
}

// mean cosine similarity of a layer's own class token to its image tokens
inline double node_degree(const FeatureStack& stack, int layer) {
    const Tensor& cls = stack.cls[static_cast<size_t>(layer)];
    const Tensor& tok = stack.tokens[static_cast<size_t>(layer)];
    const int n = tok.rows(), c = tok.cols();
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        acc += detail_lfr::cosine(cls.data().data(), &tok.data()[static_cast<size_t>(i) * c], c,
                                  "layer " + std::to_string(layer) + " token " + std::to_string(i));
    return acc / n;
}

// Top-K over eligible layers 0..L-2 (0-based), ties broken toward the
// deeper layer, output ascending.
inline std::vector<int> select_layers(const FeatureStack& stack, const SelectionStrategy& strategy,
                                      const AdapterParams* params = nullptr) {
    const int L = stack.layers();
    strategy.validate(L);
    const int eligible = L - 1;
    std::vector<double> score(static_cast<size_t>(eligible));
    bool pick_largest = false;
    switch (strategy.kind) {
        case SelectionKind::MinimalSimilarity:
            for (int l = 0; l < eligible; ++l) score[static_cast<size_t>(l)] = avg_cls_similarity(stack, l);
            break;
        case SelectionKind::MaximalSimilarity:
            for (int l = 0; l < eligible; ++l) score[static_cast<size_t>(l)] = avg_cls_similarity(stack, l);
            pick_largest = true;
            break;
        case SelectionKind::NodeDegree:
            for (int l = 0; l < eligible; ++l) score[static_cast<size_t>(l)] = node_degree(stack, l);
            break;
        case SelectionKind::LearnedScores: {
            if (!params) throw ConfigError("learned_scores selection requires scorer parameters");
            const int c = stack.width();
            for (int l = 0; l < eligible; ++l) {
                const auto& cls = stack.cls[static_cast<size_t>(l)].data();
                double s = params->scorer_b.data()[0];
                for (int j = 0; j < c; ++j) s += cls[static_cast<size_t>(j)] * params->scorer_w.data()[static_cast<size_t>(j)];
                score[static_cast<size_t>(l)] = s;
            }
            pick_largest = true;
            break;
        }
    }
    std::vector<int> idx(static_cast<size_t>(eligible));
    for (int l = 0; l < eligible; ++l) idx[static_cast<size_t>(l)] = l;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        const double sa = score[static_cast<size_t>(a)], sb = score[static_cast<size_t>(b)];
        if (sa != sb) return pick_largest ? sa > sb : sa < sb;
        return a > b;  // tie toward the deeper layer
    });
    idx.resize(static_cast<size_t>(strategy.k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Eq-style gated fusion; the same adapter and gate process tokens and class token.
inline std::pair<Tensor, Tensor> recombine(const Tensor& f_aux, const Tensor& cls_aux, const Tensor& f_last,
                                           const Tensor& cls_last, const AdapterSlot& slot,
                                           Pointwise activation) {
    if (f_aux.cols() != f_last.cols() || 2 * f_last.cols() != slot.down_w.rows())
        throw DimensionError("recombine: width mismatch between features " + shape_str(f_aux.shape()) +
                             " and adapter " + shape_str(slot.down_w.shape()));
    Tensor g = tanh_t(slot.gate);
    auto fuse = [&](const Tensor& aux, const Tensor& last) {
        Tensor cat = concat_cols(aux, last);
        Tensor mid = pointwise(activation, add_rowvec(matmul(cat, slot.down_w), slot.down_b));
        Tensor out = add_rowvec(matmul(mid, slot.up_w), slot.up_b);
        return add(scale_by(out, g), last);
    };
    return {fuse(f_aux, f_last), fuse(cls_aux, cls_last)};
}

inline RecombinedSet run_lfr(const FeatureStack& stack, const SelectionStrategy& strategy,
                             const AdapterParams& params) {
    if (static_cast<int>(params.slots.size()) != strategy.k)
        throw ConfigError("adapter slot count does not match K");
    RecombinedSet out;
    out.selected = select_layers(stack, strategy, &params);
    const Tensor& f_last = stack.tokens.back();
    const Tensor& cls_last = stack.cls.back();
    for (int s = 0; s < strategy.k; ++s) {
        const int src = out.selected[static_cast<size_t>(s)];
        const auto& slot = params.slots[static_cast<size_t>(s)];
        auto [f_r, cls_r] = recombine(stack.tokens[static_cast<size_t>(src)],
                                      stack.cls[static_cast<size_t>(src)], f_last, cls_last, slot,
                                      params.activation);
        out.tokens.push_back(f_r);
        out.cls.push_back(cls_r);
        out.gates.push_back(std::tanh(slot.gate.data()[0]));
        if (strategy.kind == SelectionKind::LearnedScores) {
            Tensor logit = add_rowvec(matmul(stack.cls[static_cast<size_t>(src)], params.scorer_w),
                                      params.scorer_b);
            out.scorer_logits.push_back(reshape(logit, {1}));
        }
    }
    return out;
}

// Last-layer-only ablation: every slot carries F_L with gates pinned at zero.
inline RecombinedSet run_last_only(const FeatureStack& stack, int k) {
    RecombinedSet out;
    const int L = stack.layers();
    for (int s = 0; s < k; ++s) {
        out.tokens.push_back(stack.tokens.back());
        out.cls.push_back(stack.cls.back());
        out.selected.push_back(L - 1);
        out.gates.push_back(0.0);
    }
    return out;
}

// Uniform-sampling baseline: K equidistant layers ending at the last
// (toy analogue of layers 3/6/9/12 in ViT-B).
inline std::vector<int> uniform_layers(int layers, int k) {
    std::vector<int> out;
    const int stride = layers / k;
    if (stride < 1) throw ConfigError("uniform_layers: L must be >= K");
    for (int s = 1; s <= k; ++s) out.push_back(s * stride - 1);
    out.back() = layers - 1;
    return out;
}

inline RecombinedSet run_uniform_baseline(const FeatureStack& stack, int k) {
    RecombinedSet out;
    out.selected = uniform_layers(stack.layers(), k);
    for (int src : out.selected) {
        out.tokens.push_back(stack.tokens[static_cast<size_t>(src)]);
        out.cls.push_back(stack.cls[static_cast<size_t>(src)]);
        out.gates.push_back(0.0);
    }
    return out;
}

}  // namespace lfr
