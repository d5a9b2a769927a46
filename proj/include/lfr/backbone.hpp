#pragma once

// Toy pre-norm ViT encoder. Emits the token matrix and class token of
// every layer; the recorded features are post-block (no final norm).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lfr/io.hpp"
#include "lfr/params.hpp"
#include "lfr/tensor.hpp"

namespace lfr {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct BackboneConfig {
    int image_h = 64;
    int image_w = 64;
    int patch_size = 8;
    int depth = 8;   // L
    int width = 32;  // C
    int heads = 4;
    double mlp_ratio = 4.0;
    std::uint64_t seed = 0;

    int grid_rows() const { return image_h / patch_size; }
    int grid_cols() const { return image_w / patch_size; }
    int num_tokens() const { return grid_rows() * grid_cols(); }
    int head_dim() const { return width / heads; }
    int mlp_hidden() const { return static_cast<int>(width * mlp_ratio); }

    void validate() const {
        if (image_h % patch_size != 0 || image_w % patch_size != 0)
            throw ConfigError("image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                              " not divisible by patch size " + std::to_string(patch_size));
        if (width % heads != 0) throw ConfigError("width must be divisible by head count");
        if (depth < 2) throw ConfigError("depth must be >= 2");
    }
};

struct FeatureStack {
    std::vector<Tensor> tokens;  // L entries, each NxC
    std::vector<Tensor> cls;     // L entries, each 1xC
    int grid_rows = 0;
    int grid_cols = 0;

    int layers() const { return static_cast<int>(tokens.size()); }
    int num_tokens() const { return tokens.empty() ? 0 : tokens[0].rows(); }
    int width() const { return tokens.empty() ? 0 : tokens[0].cols(); }
};

struct BlockParams {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor w1, b1, w2, b2;
};

struct BackboneParams {
    Tensor patch_w;  // (P*P*3) x C
    Tensor patch_b;  // 1 x C
    Tensor cls_tok;  // 1 x C
    Tensor pos;      // (N+1) x C
    std::vector<BlockParams> blocks;
};

inline BackboneParams init_backbone(const BackboneConfig& cfg, ParamRegistry& reg, InitRng& rng) {
    cfg.validate();
    BackboneParams p;
    const int C = cfg.width;
    const int pd = cfg.patch_size * cfg.patch_size * 3;
    auto nrm = rng.normal(0.02);
    p.patch_w = reg.create("backbone.patch.w", {pd, C}, nrm);
    p.patch_b = reg.constant("backbone.patch.b", {1, C}, 0.0);
    p.cls_tok = reg.create("backbone.cls", {1, C}, nrm);
    p.pos = reg.create("backbone.pos", {cfg.num_tokens() + 1, C}, nrm);
    for (int l = 0; l < cfg.depth; ++l) {
        const std::string pre = "backbone.blk" + std::to_string(l) + ".";
        BlockParams b;
        b.ln1_g = reg.constant(pre + "ln1.g", {1, C}, 1.0);
        b.ln1_b = reg.constant(pre + "ln1.b", {1, C}, 0.0);
        b.ln2_g = reg.constant(pre + "ln2.g", {1, C}, 1.0);
        b.ln2_b = reg.constant(pre + "ln2.b", {1, C}, 0.0);
        b.wq = reg.create(pre + "attn.wq", {C, C}, nrm);
        b.bq = reg.constant(pre + "attn.bq", {1, C}, 0.0);
        b.wk = reg.create(pre + "attn.wk", {C, C}, nrm);
        b.bk = reg.constant(pre + "attn.bk", {1, C}, 0.0);
        b.wv = reg.create(pre + "attn.wv", {C, C}, nrm);
        b.bv = reg.constant(pre + "attn.bv", {1, C}, 0.0);
        b.wo = reg.create(pre + "attn.wo", {C, C}, nrm);
        b.bo = reg.constant(pre + "attn.bo", {1, C}, 0.0);
        b.w1 = reg.create(pre + "mlp.w1", {C, cfg.mlp_hidden()}, nrm);
        b.b1 = reg.constant(pre + "mlp.b1", {1, cfg.mlp_hidden()}, 0.0);
        b.w2 = reg.create(pre + "mlp.w2", {cfg.mlp_hidden(), C}, nrm);
        b.b2 = reg.constant(pre + "mlp.b2", {1, C}, 0.0);
        p.blocks.push_back(std::move(b));
    }
    return p;
}

// image: H*W*3 row-major RGB in [0,1]. Returns the (N+1)xC sequence with
// the class token at row 0 and position encodings applied.
inline Tensor patch_embed(const std::vector<double>& image, const BackboneConfig& cfg,
                          const BackboneParams& params) {
    cfg.validate();
    const int H = cfg.image_h, W = cfg.image_w, P = cfg.patch_size;
    if (static_cast<int>(image.size()) != H * W * 3)
        throw ConfigError("image has " + std::to_string(image.size()) + " values, config expects " +
                          std::to_string(H * W * 3));
    const int gr = cfg.grid_rows(), gc = cfg.grid_cols(), N = gr * gc, pd = P * P * 3;
    std::vector<double> patches(static_cast<size_t>(N) * pd);
    for (int pr = 0; pr < gr; ++pr)
        for (int pc = 0; pc < gc; ++pc) {
            double* dst = &patches[static_cast<size_t>(pr * gc + pc) * pd];
            for (int i = 0; i < P; ++i)
                for (int j = 0; j < P; ++j)
                    for (int c = 0; c < 3; ++c)
                        dst[(i * P + j) * 3 + c] =
                            image[(static_cast<size_t>(pr * P + i) * W + (pc * P + j)) * 3 + c];
        }
    Tensor patch_mat = Tensor::leaf({N, pd}, std::move(patches));
    Tensor tokens = add_rowvec(matmul(patch_mat, params.patch_w), params.patch_b);
    Tensor seq = concat_rows(params.cls_tok, tokens);
    return add(seq, params.pos);
}

// Optional recorder for attention probabilities (one (N+1)x(N+1) matrix
// per layer per head), used by tests.
struct AttentionRecorder {
    std::vector<std::vector<std::vector<double>>> probs;  // [layer][head] row-major
};

inline Tensor vit_block(const Tensor& seq, const BlockParams& b, const BackboneConfig& cfg,
                        std::vector<std::vector<double>>* rec = nullptr) {
    const int dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor x = layernorm_rows(seq, b.ln1_g, b.ln1_b);
    Tensor q = add_rowvec(matmul(x, b.wq), b.bq);
    Tensor k = add_rowvec(matmul(x, b.wk), b.bk);
    Tensor v = add_rowvec(matmul(x, b.wv), b.bv);
    Tensor heads_out;
    for (int h = 0; h < cfg.heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
        if (rec) rec->push_back(attn.data());
        Tensor oh = matmul(attn, vh);
        heads_out = h == 0 ? oh : concat_cols(heads_out, oh);
    }
    Tensor attn_out = add_rowvec(matmul(heads_out, b.wo), b.bo);
    Tensor h1 = add(seq, attn_out);
    Tensor y = layernorm_rows(h1, b.ln2_g, b.ln2_b);
    Tensor mlp = add_rowvec(matmul(gelu(add_rowvec(matmul(y, b.w1), b.b1)), b.w2), b.b2);
    return add(h1, mlp);
}

inline FeatureStack encode(const Tensor& embedded, const BackboneConfig& cfg, const BackboneParams& params,
                           AttentionRecorder* recorder = nullptr) {
    const int N = cfg.num_tokens();
    FeatureStack stack;
    stack.grid_rows = cfg.grid_rows();
    stack.grid_cols = cfg.grid_cols();
    Tensor seq = embedded;
    for (int l = 0; l < cfg.depth; ++l) {
        std::vector<std::vector<double>>* rec = nullptr;
        if (recorder) {
            recorder->probs.emplace_back();
            rec = &recorder->probs.back();
        }
        seq = vit_block(seq, params.blocks[static_cast<size_t>(l)], cfg, rec);
        stack.cls.push_back(slice_rows(seq, 0, 1));
        stack.tokens.push_back(slice_rows(seq, 1, N + 1));
    }
    return stack;
}

inline FeatureStack run_backbone(const std::vector<double>& image, const BackboneConfig& cfg,
                                 const BackboneParams& params, AttentionRecorder* recorder = nullptr) {
    return encode(patch_embed(image, cfg, params), cfg, params, recorder);
}

// ---- feature dump format "LFRD" ----

inline void dump_features(const FeatureStack& stack, const std::filesystem::path& path) {
    auto os = io::open_out(path);
    os.write("LFRD", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(stack.layers()));
    io::write_u32(os, static_cast<std::uint32_t>(stack.num_tokens()));
    io::write_u32(os, static_cast<std::uint32_t>(stack.width()));
    io::write_u32(os, static_cast<std::uint32_t>(stack.grid_rows));
    io::write_u32(os, static_cast<std::uint32_t>(stack.grid_cols));
    for (int l = 0; l < stack.layers(); ++l) {
        for (double v : stack.tokens[static_cast<size_t>(l)].data())
            io::write_f32(os, static_cast<float>(v));
        for (double v : stack.cls[static_cast<size_t>(l)].data()) io::write_f32(os, static_cast<float>(v));
    }
}

inline FeatureStack load_features(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "LFRD") throw FormatError("bad magic in feature dump: " + path.string());
    const std::uint32_t version = io::read_u32(is);
    if (version != 1) throw FormatError("unsupported feature dump version " + std::to_string(version));
    const int L = static_cast<int>(io::read_u32(is));
    const int N = static_cast<int>(io::read_u32(is));
    const int C = static_cast<int>(io::read_u32(is));
    FeatureStack stack;
    stack.grid_rows = static_cast<int>(io::read_u32(is));
    stack.grid_cols = static_cast<int>(io::read_u32(is));
    for (int l = 0; l < L; ++l) {
        std::vector<double> tok(static_cast<size_t>(N) * C);
        for (auto& v : tok) v = io::read_f32(is);
        std::vector<double> cls(static_cast<size_t>(C));
        for (auto& v : cls) v = io::read_f32(is);
        if (!is) throw FormatError("truncated payload in feature dump: " + path.string());
        stack.tokens.push_back(Tensor::leaf({N, C}, std::move(tok)));
        stack.cls.push_back(Tensor::leaf({1, C}, std::move(cls)));
    }
    return stack;
}

}  // namespace lfr
