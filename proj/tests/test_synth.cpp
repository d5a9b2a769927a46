#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "lfr/synth.hpp"

using namespace lfr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* stem) {
    auto p = fs::temp_directory_path() / (std::string(stem) + "_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("scene generation is deterministic") {
    SceneSpec spec;
    spec.seed = 1234;
    spec.height = 32;
    spec.width = 32;
    synth::Scene a = synth::generate_scene(spec, 7);
    synth::Scene b = synth::generate_scene(spec, 7);
    CHECK(a.rgb == b.rgb);
    CHECK(a.depth.depth == b.depth.depth);

    synth::Scene c = synth::generate_scene(spec, 8);
    CHECK(a.rgb != c.rgb);
}

TEST_CASE("depth obeys the configured range") {
    SceneSpec spec;
    spec.seed = 5;
    spec.height = 32;
    spec.width = 32;
    for (int idx = 0; idx < 6; ++idx) {
        synth::Scene sc = synth::generate_scene(spec, idx);
        REQUIRE(static_cast<int>(sc.depth.depth.size()) == 32 * 32);
        for (double d : sc.depth.depth) {
            CHECK(d >= spec.min_depth);
            CHECK(d <= spec.max_depth);
        }
        for (double v : sc.rgb) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("empty scene reduces to the background plane") {
    SceneSpec spec;
    spec.seed = 77;
    spec.height = 24;
    spec.width = 24;
    spec.min_primitives = 0;
    spec.max_primitives = 0;
    spec.max_depth = 40.0;  // keep the tilted plane clear of the clamp
    synth::Scene sc = synth::generate_scene(spec, 0);

    // every depth sample must satisfy a single plane equation
    // z = z0 + ax*x + ay*y, i.e. z is linear in (z*rx, z*ry) where
    // (rx, ry) are the per-pixel ray slopes; fit the three coefficients
    // and verify a near-zero residual everywhere
    const int H = spec.height, W = spec.width;
    Eigen::MatrixXd x(H * W, 3);
    Eigen::VectorXd y(H * W);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const double ry = ((i + 0.5) / H * 2.0 - 1.0) * 0.5;
            const double rx = ((j + 0.5) / W * 2.0 - 1.0) * 0.5;
            const double z = sc.depth.depth[static_cast<size_t>(i) * W + j];
            x(i * W + j, 0) = z * rx;
            x(i * W + j, 1) = z * ry;
            x(i * W + j, 2) = 1.0;
            y(i * W + j) = z;
        }
    Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
    const double max_resid = (y - x * beta).cwiseAbs().maxCoeff();
    CHECK(max_resid < 1e-9);
    // the recovered tilt stays within the generator's sampling range
    CHECK(std::abs(beta(0)) <= 0.25);
    CHECK(std::abs(beta(1)) <= 0.25);
    CHECK(beta(2) >= 4.0);
    CHECK(beta(2) <= 9.0);
}

TEST_CASE("scene spec validation") {
    SceneSpec spec;
    spec.min_depth = -1.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = SceneSpec{};
    spec.max_primitives = 1;
    spec.min_primitives = 4;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("split generation and manifest round trip") {
    SceneSpec spec;
    spec.seed = 99;
    spec.height = 16;
    spec.width = 16;
    const fs::path dir = temp_dir("synth_split");

    synth::Manifest m = synth::generate_split(spec, 8, 2, dir);
    CHECK(m.train_indices.size() == 8);
    CHECK(m.val_indices.size() == 2);
    for (int t : m.train_indices)
        for (int v : m.val_indices) CHECK(t != v);
    for (int i : m.train_indices) {
        CHECK(fs::exists(m.rgb_path(i)));
        CHECK(fs::exists(m.depth_path(i)));
    }

    // regeneration is byte-stable
    const std::string rgb0 = slurp(m.rgb_path(0));
    const std::string depth0 = slurp(m.depth_path(0));
    synth::generate_split(spec, 8, 2, dir);
    CHECK(slurp(m.rgb_path(0)) == rgb0);
    CHECK(slurp(m.depth_path(0)) == depth0);

    // val scenes differ from every train scene
    for (int v : m.val_indices) {
        const std::string val_rgb = slurp(m.rgb_path(v));
        for (int t : m.train_indices) CHECK(slurp(m.rgb_path(t)) != val_rgb);
    }

    synth::Manifest loaded = synth::load_manifest(dir / "manifest.json");
    CHECK(loaded.spec.seed == spec.seed);
    CHECK(loaded.spec.height == spec.height);
    CHECK(loaded.train_indices == m.train_indices);
    CHECK(loaded.val_indices == m.val_indices);

    CHECK_THROWS_AS(synth::generate_split(spec, 0, 2, dir), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("image and depth files round trip through their formats") {
    SceneSpec spec;
    spec.seed = 3;
    spec.height = 16;
    spec.width = 16;
    synth::Scene sc = synth::generate_scene(spec, 0);
    const fs::path dir = temp_dir("synth_io");

    io::write_ppm(dir / "img.ppm", 16, 16, sc.rgb);
    int h = 0, w = 0;
    auto rgb = io::read_ppm(dir / "img.ppm", h, w);
    REQUIRE(h == 16);
    REQUIRE(w == 16);
    // 8-bit quantization: half-step agreement
    for (size_t i = 0; i < rgb.size(); ++i) CHECK(std::abs(rgb[i] - sc.rgb[i]) <= 0.5 / 255.0 + 1e-12);

    io::write_depth_raw(dir / "d.raw", 16, 16, sc.depth.depth);
    auto depth = io::read_depth_raw(dir / "d.raw", h, w);
    REQUIRE(h == 16);
    for (size_t i = 0; i < depth.size(); ++i)
        CHECK(depth[i] == static_cast<double>(static_cast<float>(sc.depth.depth[i])));

    CHECK_THROWS_AS(io::open_in(dir / "missing.bin"), PathError);
    fs::remove_all(dir);
}
