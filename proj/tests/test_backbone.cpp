#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <unistd.h>
#include <fstream>
#include <random>

#include "lfr/backbone.hpp"
#include "lfr/synth.hpp"

using namespace lfr;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig cfg;
    cfg.image_h = 32;
    cfg.image_w = 32;
    cfg.patch_size = 8;
    cfg.depth = 3;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    return cfg;
}

std::vector<double> random_image(const BackboneConfig& cfg, std::uint64_t seed) {
    synth::Rng rng(seed);
    std::vector<double> img(static_cast<size_t>(cfg.image_h) * cfg.image_w * 3);
    for (auto& v : img) v = rng.uniform();
    return img;
}

fs::path temp_file(const char* stem) {
    return fs::temp_directory_path() / (std::string(stem) + "_" + std::to_string(::getpid()) + ".bin");
}

}  // namespace

TEST_CASE("token count law") {
    BackboneConfig a;
    a.image_h = 64;
    a.image_w = 64;
    a.patch_size = 8;
    CHECK(a.num_tokens() == 64);

    BackboneConfig b;
    b.image_h = 480;
    b.image_w = 640;
    b.patch_size = 16;
    CHECK(b.num_tokens() == 1200);

    // arbitrary valid combinations obey N == (H/p)*(W/p)
    for (int p : {4, 8, 16})
        for (int h : {32, 64, 128}) {
            BackboneConfig c;
            c.image_h = h;
            c.image_w = 2 * h;
            c.patch_size = p;
            CHECK(c.num_tokens() == (h / p) * (2 * h / p));
        }
}

TEST_CASE("config validation") {
    BackboneConfig cfg = tiny_cfg();
    cfg.patch_size = 7;  // 32 % 7 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_cfg();
    cfg.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_cfg();
    cfg.depth = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    CHECK_NOTHROW(tiny_cfg().validate());
}

TEST_CASE("zero image and zero projection leaves only position encodings") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry reg;
    InitRng rng(3);
    BackboneParams params = init_backbone(cfg, reg, rng);
    for (auto& v : params.patch_w.mutable_data()) v = 0.0;
    for (auto& v : params.cls_tok.mutable_data()) v = 0.0;

    std::vector<double> zero_img(static_cast<size_t>(cfg.image_h) * cfg.image_w * 3, 0.0);
    Tensor seq = patch_embed(zero_img, cfg, params);
    REQUIRE(seq.rows() == cfg.num_tokens() + 1);
    for (int i = 0; i < seq.numel(); ++i) CHECK(seq.data()[i] == params.pos.data()[i]);
}

TEST_CASE("patch_embed rejects wrong image size") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry reg;
    InitRng rng(3);
    BackboneParams params = init_backbone(cfg, reg, rng);
    std::vector<double> short_img(17, 0.5);
    CHECK_THROWS_AS(patch_embed(short_img, cfg, params), ConfigError);
}

TEST_CASE("zeroed residual projections make every block an identity") {
    // with attn.wo and mlp.w2 forced to zero each block reduces to seq + 0 + 0
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry reg;
    InitRng rng(11);
    BackboneParams params = init_backbone(cfg, reg, rng);
    for (auto& blk : params.blocks) {
        for (auto& v : blk.wo.mutable_data()) v = 0.0;
        for (auto& v : blk.w2.mutable_data()) v = 0.0;
    }
    std::vector<double> img = random_image(cfg, 5);
    Tensor embedded = patch_embed(img, cfg, params);
    FeatureStack stack = encode(embedded, cfg, params);

    REQUIRE(stack.layers() == cfg.depth);
    const int N = cfg.num_tokens(), C = cfg.width;
    for (int l = 0; l < cfg.depth; ++l) {
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < C; ++j)
                CHECK(stack.tokens[static_cast<size_t>(l)].at(i, j) == embedded.at(i + 1, j));
        for (int j = 0; j < C; ++j)
            CHECK(stack.cls[static_cast<size_t>(l)].at(0, j) == embedded.at(0, j));
    }
}

TEST_CASE("stack is structurally complete and attention rows are stochastic") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry reg;
    InitRng rng(7);
    BackboneParams params = init_backbone(cfg, reg, rng);
    // make attention non-trivial
    std::mt19937_64 noise(9);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (auto& [name, t] : reg.items())
        for (auto& v : t.mutable_data()) v += nd(noise);

    AttentionRecorder rec;
    FeatureStack stack = run_backbone(random_image(cfg, 8), cfg, params, &rec);
    REQUIRE(stack.layers() == cfg.depth);
    REQUIRE(static_cast<int>(rec.probs.size()) == cfg.depth);

    const int rows = cfg.num_tokens() + 1;
    for (const auto& layer : rec.probs) {
        REQUIRE(static_cast<int>(layer.size()) == cfg.heads);
        for (const auto& head : layer)
            for (int i = 0; i < rows; ++i) {
                double sum = 0.0;
                for (int j = 0; j < rows; ++j) sum += head[static_cast<size_t>(i) * rows + j];
                CHECK(std::abs(sum - 1.0) < 1e-12);
            }
    }
}

TEST_CASE("encoding is deterministic in seed, config, and image") {
    BackboneConfig cfg = tiny_cfg();
    cfg.seed = 21;
    std::vector<double> img = random_image(cfg, 4);

    auto run = [&]() {
        ParamRegistry reg;
        InitRng rng(cfg.seed);
        BackboneParams params = init_backbone(cfg, reg, rng);
        return run_backbone(img, cfg, params);
    };
    FeatureStack a = run();
    FeatureStack b = run();
    for (int l = 0; l < cfg.depth; ++l) {
        CHECK(a.tokens[static_cast<size_t>(l)].data() == b.tokens[static_cast<size_t>(l)].data());
        CHECK(a.cls[static_cast<size_t>(l)].data() == b.cls[static_cast<size_t>(l)].data());
    }
}

TEST_CASE("feature dump round trip") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry reg;
    InitRng rng(13);
    BackboneParams params = init_backbone(cfg, reg, rng);
    FeatureStack stack = run_backbone(random_image(cfg, 6), cfg, params);

    const fs::path p1 = temp_file("lfrd_a");
    const fs::path p2 = temp_file("lfrd_b");
    dump_features(stack, p1);
    FeatureStack loaded = load_features(p1);

    REQUIRE(loaded.layers() == stack.layers());
    CHECK(loaded.grid_rows == stack.grid_rows);
    CHECK(loaded.grid_cols == stack.grid_cols);
    // on-disk precision is f32; loaded values match the rounded originals exactly
    for (int l = 0; l < stack.layers(); ++l)
        for (int i = 0; i < stack.tokens[static_cast<size_t>(l)].numel(); ++i)
            CHECK(loaded.tokens[static_cast<size_t>(l)].data()[i] ==
                  static_cast<double>(static_cast<float>(stack.tokens[static_cast<size_t>(l)].data()[i])));

    // second dump of the loaded stack is byte-identical to the first file
    dump_features(loaded, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("feature dump rejects malformed files") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry reg;
    InitRng rng(17);
    BackboneParams params = init_backbone(cfg, reg, rng);
    FeatureStack stack = run_backbone(random_image(cfg, 2), cfg, params);

    const fs::path p = temp_file("lfrd_bad");
    dump_features(stack, p);

    // corrupt the magic
    {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.write("NOPE", 4);
    }
    try {
        load_features(p);
        FAIL("expected throw");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
    }

    // truncate mid-tensor
    dump_features(stack, p);
    const auto full = fs::file_size(p);
    fs::resize_file(p, full - 7);
    try {
        load_features(p);
        FAIL("expected throw");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
    fs::remove(p);
}
