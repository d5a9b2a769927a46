#pragma once

// Training driver: AdamW with warmup+cosine schedule, backbone freezing,
// JSON-lines logging, and bit-stable checkpoints.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfr/io.hpp"
#include "lfr/model.hpp"
#include "lfr/synth.hpp"

namespace lfr {

struct Sample {
    std::vector<double> rgb;
    DepthMap depth;
};

inline Sample load_sample(const synth::Manifest& m, int index) {
    Sample s;
    int h = 0, w = 0;
    s.rgb = io::read_ppm(m.rgb_path(index), h, w);
    s.depth.depth = io::read_depth_raw(m.depth_path(index), s.depth.h, s.depth.w);
    return s;
}

inline std::vector<Sample> load_split(const synth::Manifest& m, const std::vector<int>& indices) {
    std::vector<Sample> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(load_sample(m, i));
    return out;
}

// ---- optimizer ----

class AdamW {
public:
    AdamW(ParamRegistry& params, const RunConfig& cfg) : params_(params), cfg_(cfg) {
        for (const auto& [name, t] : params.items()) {
            m_.emplace_back(t.numel(), 0.0);
            v_.emplace_back(t.numel(), 0.0);
        }
    }

    // lr_scale in [0,1] from the schedule; backbone_frozen zeroes backbone updates
    void step(double lr_scale, bool backbone_frozen) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        auto& items = params_.items();
        for (size_t p = 0; p < items.size(); ++p) {
            auto& [name, tensor] = items[p];
            const bool is_backbone = name.rfind("backbone.", 0) == 0;
            if (is_backbone && backbone_frozen) continue;
            const double lr = lr_scale * (is_backbone ? cfg_.lr_backbone() : cfg_.lr_head);
            const bool decay = name.find("gate") == std::string::npos;
            const auto& g = tensor.grad();
            if (g.empty()) continue;
            auto& data = tensor.mutable_data();
            for (size_t i = 0; i < data.size(); ++i) {
                m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
                v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mh = m_[p][i] / bc1;
                const double vh = v_[p][i] / bc2;
                data[i] -= lr * (mh / (std::sqrt(vh) + 1e-8));
                if (decay) data[i] -= lr * cfg_.weight_decay * data[i];
            }
        }
    }

    std::vector<std::vector<double>>& moments_m() { return m_; }
    std::vector<std::vector<double>>& moments_v() { return v_; }
    std::int64_t& steps() { return t_; }

private:
    ParamRegistry& params_;
    RunConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

inline double lr_schedule(std::int64_t step, std::int64_t total_steps, double warmup_frac) {
    const auto warmup = static_cast<std::int64_t>(warmup_frac * static_cast<double>(total_steps));
    if (warmup > 0 && step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total_steps <= warmup) return 1.0;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---- checkpoints ----

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, AdamW& opt, int epoch) {
    auto os = io::open_out(path);
    os.write("LFRC", 4);
    io::write_u32(os, 1);
    const std::string cfg = model.cfg.to_json().dump();
    io::write_u32(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    io::write_u32(os, static_cast<std::uint32_t>(epoch));
    io::write_u32(os, static_cast<std::uint32_t>(opt.steps()));
    io::write_u32(os, static_cast<std::uint32_t>(model.params.items().size()));
    const auto& items = model.params.items();
    for (size_t p = 0; p < items.size(); ++p) {
        const auto& [name, t] = items[p];
        io::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
        for (double v : t.data()) io::write_f64(os, v);
        for (double v : opt.moments_m()[p]) io::write_f64(os, v);
        for (double v : opt.moments_v()[p]) io::write_f64(os, v);
    }
}

struct LoadedCheckpoint {
    Model model;
    int epoch = 0;
    std::int64_t steps = 0;
    std::vector<std::vector<double>> m, v;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "LFRC") throw FormatError("bad magic in checkpoint: " + path.string());
    if (io::read_u32(is) != 1) throw FormatError("unsupported checkpoint version");
    const auto cfg_len = io::read_u32(is);
    std::string cfg_str(cfg_len, '\0');
    is.read(cfg_str.data(), cfg_len);
    if (!is) throw FormatError("truncated checkpoint config");
    LoadedCheckpoint out;
    out.model = Model::build(RunConfig::from_json(nlohmann::json::parse(cfg_str)));
    out.epoch = static_cast<int>(io::read_u32(is));
    out.steps = io::read_u32(is);
    const auto n = io::read_u32(is);
    if (n != out.model.params.items().size()) throw FormatError("checkpoint parameter count mismatch");
    for (auto& [name, t] : out.model.params.items()) {
        const auto len = io::read_u32(is);
        std::string nm(len, '\0');
        is.read(nm.data(), len);
        if (nm != name) throw FormatError("checkpoint parameter order mismatch: " + nm + " vs " + name);
        const auto rank = io::read_u32(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(io::read_u32(is));
        if (shape != t.shape()) throw FormatError("checkpoint shape mismatch for " + name);
        for (auto& v : t.mutable_data()) v = io::read_f64(is);
        std::vector<double> mm(t.data().size()), vv(t.data().size());
        for (auto& v : mm) v = io::read_f64(is);
        for (auto& v : vv) v = io::read_f64(is);
        out.m.push_back(std::move(mm));
        out.v.push_back(std::move(vv));
    }
    return out;
}

// ---- trainer ----

struct EpochRecord {
    int epoch = 0;
    double lr_scale = 0.0;
    double train_loss = 0.0;
    MetricReport val;
};

struct TrainResult {
    std::vector<EpochRecord> log;
    MetricReport final_val;
    double first_step_loss = 0.0;
};

inline MetricReport eval_split(const Model& model, const std::vector<Sample>& samples,
                               double min_depth = 1e-3) {
    // aggregate metrics over the pooled pixels of the split
    DepthMap pooled;
    std::vector<double> pred_all;
    for (const auto& s : samples) {
        ForwardResult fw = model_forward(model, s.rgb);
        pred_all.insert(pred_all.end(), fw.depth.data().begin(), fw.depth.data().end());
        pooled.depth.insert(pooled.depth.end(), s.depth.depth.begin(), s.depth.depth.end());
    }
    pooled.h = 1;
    pooled.w = static_cast<int>(pooled.depth.size());
    return eval_metrics(pred_all, pooled, min_depth, model.cfg.max_depth);
}

inline TrainResult train(Model& model, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, std::ostream* log_stream = nullptr,
                         const std::filesystem::path& ckpt_dir = {}) {
    const RunConfig& cfg = model.cfg;
    AdamW opt(model.params, cfg);
    const int steps_per_epoch =
        (static_cast<int>(train_set.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;
    synth::Rng shuffle_rng(synth::mix64(cfg.seed ^ 0x5eedULL));
    TrainResult result;
    double best_abs_rel = 1e30;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool frozen = epoch >= cfg.freeze_epoch();
        std::vector<int> order(train_set.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next() % i]);
        double epoch_loss = 0.0;
        double lr_scale = 0.0;
        for (int b = 0; b < steps_per_epoch; ++b) {
            model.params.zero_grads();
            const int lo = b * cfg.batch_size;
            const int hi = std::min<int>(lo + cfg.batch_size, static_cast<int>(train_set.size()));
            double batch_loss = 0.0;
            for (int s = lo; s < hi; ++s) {
                const Sample& sample = train_set[static_cast<size_t>(order[static_cast<size_t>(s)])];
                // seeded brightness jitter, +-10%
                std::vector<double> rgb = sample.rgb;
                const double gain = 0.9 + 0.2 * shuffle_rng.uniform();
                for (auto& v : rgb) v = std::clamp(v * gain, 0.0, 1.0);
                ForwardResult fw = model_forward(model, rgb);
                Tensor loss = model_loss(model, fw.depth, sample.depth);
                if (!std::isfinite(loss.item()))
                    throw NumericError("NaN/Inf loss at epoch " + std::to_string(epoch) + " step " +
                                       std::to_string(step) + " (total objective)");
                loss = scale(loss, 1.0 / (hi - lo));
                loss.backward();
                batch_loss += loss.item();
                if (step == 0 && s == lo) result.first_step_loss = loss.item() * (hi - lo);
            }
            lr_scale = lr_schedule(step, total_steps, cfg.warmup_frac);
            opt.step(lr_scale, frozen);
            epoch_loss += batch_loss;
            ++step;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr_scale = lr_scale;
        rec.train_loss = epoch_loss / steps_per_epoch;
        rec.val = eval_split(model, val_set);
        if (log_stream) {
            nlohmann::json j = {{"epoch", rec.epoch},
                                {"lr_scale", rec.lr_scale},
                                {"train_loss", rec.train_loss},
                                {"val", rec.val.to_json()}};
            (*log_stream) << j.dump() << "\n";
        }
        if (!ckpt_dir.empty() && rec.val.abs_rel < best_abs_rel) {
            best_abs_rel = rec.val.abs_rel;
            save_checkpoint(ckpt_dir / "best.ckpt", model, opt, epoch);
        }
        result.log.push_back(std::move(rec));
    }
    if (!ckpt_dir.empty()) save_checkpoint(ckpt_dir / "final.ckpt", model, opt, cfg.epochs);
    result.final_val = result.log.empty() ? MetricReport{} : result.log.back().val;
    return result;
}

// per-layer selection frequencies over a set of samples
inline nlohmann::json selection_histogram(const Model& model, const std::vector<Sample>& samples) {
    const int L = model.cfg.backbone.depth;
    std::vector<double> freq(static_cast<size_t>(L), 0.0);
    for (const auto& s : samples) {
        FeatureStack stack = run_backbone(s.rgb, model.cfg.backbone, model.backbone);
        for (int l : select_layers(stack, model.cfg.strategy, &model.adapters))
            freq[static_cast<size_t>(l)] += 1.0;
    }
    for (auto& f : freq) f /= static_cast<double>(samples.empty() ? 1 : samples.size());
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l < L; ++l) layers.push_back({{"layer", l + 1}, {"fraction", freq[static_cast<size_t>(l)]}});
    return {{"strategy", to_string(model.cfg.strategy.kind)},
            {"k", model.cfg.strategy.k},
            {"layers", layers}};
}

}  // namespace lfr
