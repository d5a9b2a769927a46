#pragma once

// Full pipeline: backbone -> recombination -> per-level decoding ->
// weighted aggregation, with the ablation modes of the training harness.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfr/backbone.hpp"
#include "lfr/head.hpp"
#include "lfr/lfr_module.hpp"
#include "lfr/losses.hpp"

namespace lfr {

enum class Mode { UniformBaseline, LastOnly, Lfr };

inline std::string to_string(Mode m) {
    switch (m) {
        case Mode::UniformBaseline: return "uniform-baseline";
        case Mode::LastOnly: return "last-only";
        case Mode::Lfr: return "lfr";
    }
    return "?";
}

inline Mode mode_from_string(const std::string& s) {
    if (s == "uniform-baseline") return Mode::UniformBaseline;
    if (s == "last-only") return Mode::LastOnly;
    if (s == "lfr") return Mode::Lfr;
    throw ConfigError("unknown mode: " + s);
}

struct RunConfig {
    BackboneConfig backbone;
    SelectionStrategy strategy;
    double max_depth = 10.0;
    LossConfig loss;
    Mode mode = Mode::Lfr;
    bool use_hn = true;
    bool multilevel = true;

    double lr_head = 1e-2;  // backbone rate is this / 10
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    int batch_size = 4;
    int epochs = 30;
    double warmup_frac = 0.10;
    std::uint64_t seed = 0;
    std::string manifest;
    std::string out_dir = "runs/default";

    double lr_backbone() const { return lr_head / 10.0; }
    int freeze_epoch() const { return (2 * epochs + 2) / 3; }  // ceil(2/3 * epochs)

    void validate() const {
        backbone.validate();
        loss.validate();
        if (warmup_frac < 0.0 || warmup_frac >= 1.0) throw ConfigError("warmup_frac must lie in [0,1)");
        if (epochs < 1 || batch_size < 1) throw ConfigError("epochs and batch size must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"backbone",
                 {{"image_h", backbone.image_h},
                  {"image_w", backbone.image_w},
                  {"patch_size", backbone.patch_size},
                  {"depth", backbone.depth},
                  {"width", backbone.width},
                  {"heads", backbone.heads},
                  {"mlp_ratio", backbone.mlp_ratio}}},
                {"strategy", to_string(strategy.kind)},
                {"k", strategy.k},
                {"max_depth", max_depth},
                {"loss",
                 {{"lambda", loss.lambda},
                  {"hn_scales", loss.hn_scales},
                  {"epsilon", loss.epsilon},
                  {"hn_log_depth", loss.hn_log_depth}}},
                {"mode", to_string(mode)},
                {"use_hn", use_hn},
                {"multilevel", multilevel},
                {"lr_head", lr_head},
                {"beta1", beta1},
                {"beta2", beta2},
                {"weight_decay", weight_decay},
                {"batch_size", batch_size},
                {"epochs", epochs},
                {"warmup_frac", warmup_frac},
                {"seed", seed},
                {"manifest", manifest},
                {"out_dir", out_dir}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            if (b.contains("image_h")) c.backbone.image_h = b.at("image_h").get<int>();
            if (b.contains("image_w")) c.backbone.image_w = b.at("image_w").get<int>();
            if (b.contains("patch_size")) c.backbone.patch_size = b.at("patch_size").get<int>();
            if (b.contains("depth")) c.backbone.depth = b.at("depth").get<int>();
            if (b.contains("width")) c.backbone.width = b.at("width").get<int>();
            if (b.contains("heads")) c.backbone.heads = b.at("heads").get<int>();
            if (b.contains("mlp_ratio")) c.backbone.mlp_ratio = b.at("mlp_ratio").get<double>();
        }
        if (j.contains("strategy")) c.strategy.kind = selection_from_string(j.at("strategy").get<std::string>());
        if (j.contains("k")) c.strategy.k = j.at("k").get<int>();
        if (j.contains("max_depth")) c.max_depth = j.at("max_depth").get<double>();
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            if (l.contains("lambda")) c.loss.lambda = l.at("lambda").get<double>();
            if (l.contains("hn_scales")) c.loss.hn_scales = l.at("hn_scales").get<std::vector<int>>();
            if (l.contains("epsilon")) c.loss.epsilon = l.at("epsilon").get<double>();
            if (l.contains("hn_log_depth")) c.loss.hn_log_depth = l.at("hn_log_depth").get<bool>();
        }
        if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
        if (j.contains("use_hn")) c.use_hn = j.at("use_hn").get<bool>();
        if (j.contains("multilevel")) c.multilevel = j.at("multilevel").get<bool>();
        if (j.contains("lr_head")) c.lr_head = j.at("lr_head").get<double>();
        if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
        if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
        if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
        if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
        if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
        if (j.contains("warmup_frac")) c.warmup_frac = j.at("warmup_frac").get<double>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
        if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
        return c;
    }
};

struct Model {
    RunConfig cfg;
    ParamRegistry params;
    BackboneParams backbone;
    AdapterParams adapters;
    HeadParams head;

    static Model build(const RunConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        InitRng rng(cfg.seed);
        m.backbone = init_backbone(cfg.backbone, m.params, rng);
        m.adapters = init_adapters(cfg.backbone.width, cfg.strategy.k, m.params, rng);
        m.head = init_head(cfg.backbone.width, cfg.strategy.k, m.params, rng, cfg.max_depth);
        return m;
    }
};

struct ForwardResult {
    Tensor depth;                 // {H, W}
    std::vector<double> weights;  // per-level, sums to 1
    std::vector<int> selected;    // source layer indices (0-based)
    Tensor weights_t;
};

inline ForwardResult model_forward(const Model& m, const std::vector<double>& image) {
    const auto& cfg = m.cfg;
    FeatureStack stack = run_backbone(image, cfg.backbone, m.backbone);
    RecombinedSet rec;
    switch (cfg.mode) {
        case Mode::UniformBaseline: rec = run_uniform_baseline(stack, cfg.strategy.k); break;
        case Mode::LastOnly: rec = run_last_only(stack, cfg.strategy.k); break;
        case Mode::Lfr: rec = run_lfr(stack, cfg.strategy, m.adapters); break;
    }
    const int k = cfg.strategy.k;
    std::vector<Tensor> levels;
    levels.reserve(static_cast<size_t>(k));
    for (int s = 0; s < k; ++s)
        levels.push_back(decode_level(rec.tokens[static_cast<size_t>(s)], stack.grid_rows, stack.grid_cols,
                                      m.head.levels[static_cast<size_t>(s)], m.head));
    Tensor weights = cfg.multilevel ? level_weights(rec.cls, m.head, rec.scorer_logits)
                                    : Tensor::full({k}, 1.0 / k);
    Tensor agg = aggregate(weights, levels);
    ForwardResult out;
    out.depth = reshape(agg, {cfg.backbone.image_h, cfg.backbone.image_w});
    out.weights = weights.data();
    out.weights_t = weights;
    out.selected = rec.selected;
    return out;
}

inline Tensor model_loss(const Model& m, const Tensor& pred, const DepthMap& gt) {
    Tensor l = losses::silog_loss(pred, gt, m.cfg.loss.lambda);
    if (m.cfg.use_hn) l = add(l, losses::hn_loss(pred, gt, m.cfg.loss));
    return l;
}

}  // namespace lfr
