#pragma once

// Deterministic ray-cast RGB-D scenes: spheres, boxes, and bounded planes
// in front of a tilted background plane, Lambertian shaded.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfr/analysis.hpp"
#include "lfr/io.hpp"

namespace lfr {

struct SceneSpec {
    std::uint64_t seed = 0;
    int height = 64;
    int width = 64;
    int min_primitives = 3;
    int max_primitives = 8;
    double min_depth = 0.5;
    double max_depth = 10.0;
    std::array<double, 3> light = {0.408248, 0.408248, -0.816497};  // unit

    void validate() const {
        if (!(min_depth > 0.0 && min_depth < max_depth)) throw ConfigError("bad depth range");
        if (min_primitives < 0 || max_primitives < min_primitives) throw ConfigError("bad primitive range");
    }
};

namespace synth {

// splitmix64; portable across standard libraries unlike <random> distributions
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next() {
        state_ = mix64(state_ ^ 0xd1b54a32d192ed03ULL) + 0x2545f4914f6cdd1dULL;
        return mix64(state_);
    }
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi) {  // inclusive
        return lo + static_cast<int>(next() % static_cast<std::uint64_t>(hi - lo + 1));
    }
    // Box-Muller, one value per call
    double normal() {
        const double u1 = std::max(uniform(), 1e-300);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    std::uint64_t state_;
};

using Vec3 = std::array<double, 3>;

inline Vec3 normalize(Vec3 v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

enum class PrimKind { Plane, Sphere, Box };

struct Primitive {
    PrimKind kind;
    Vec3 center{};
    Vec3 half{};    // box half-extents / plane in-plane extents (x,y)
    double radius = 0.0;
    Vec3 normal{};  // plane normal
    Vec3 albedo{};
};

struct Hit {
    double t = -1.0;
    Vec3 normal{};
    const Primitive* prim = nullptr;
    bool ok() const { return t > 0.0; }
};

inline Hit intersect_sphere(const Vec3& dir, const Primitive& p) {
    // ray origin at 0: |t*d - c|^2 = r^2
    const double b = dot(dir, p.center);
    const double disc = b * b - (dot(p.center, p.center) - p.radius * p.radius);
    Hit h;
    if (disc < 0.0) return h;
    const double s = std::sqrt(disc);
    double t = b - s;
    if (t <= 1e-6) t = b + s;
    if (t <= 1e-6) return h;
    h.t = t;
    h.normal = normalize({t * dir[0] - p.center[0], t * dir[1] - p.center[1], t * dir[2] - p.center[2]});
    h.prim = &p;
    return h;
}

inline Hit intersect_box(const Vec3& dir, const Primitive& p) {
    Hit h;
    double t0 = 1e-6, t1 = 1e30;
    int axis = -1;
    double sign = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double inv = 1.0 / (dir[a] == 0.0 ? 1e-12 : dir[a]);
        double ta = (p.center[a] - p.half[a]) * inv;
        double tb = (p.center[a] + p.half[a]) * inv;
        double sg = -1.0;
        if (ta > tb) {
            std::swap(ta, tb);
            sg = 1.0;
        }
        if (ta > t0) {
            t0 = ta;
            axis = a;
            sign = sg;
        }
        if (tb < t1) t1 = tb;
        if (t0 > t1) return h;
    }
    if (axis < 0) return h;
    h.t = t0;
    h.normal = {0, 0, 0};
    h.normal[axis] = sign;
    h.prim = &p;
    return h;
}

inline Hit intersect_plane(const Vec3& dir, const Primitive& p) {
    Hit h;
    const double denom = dot(dir, p.normal);
    if (std::abs(denom) < 1e-9) return h;
    const double t = dot(p.center, p.normal) / denom;
    if (t <= 1e-6) return h;
    // bounded rectangle: check offset from center along in-plane axes
    const Vec3 hp = {t * dir[0] - p.center[0], t * dir[1] - p.center[1], t * dir[2] - p.center[2]};
    Vec3 u = normalize({p.normal[2], 0.0, -p.normal[0]});
    if (std::abs(p.normal[0]) < 1e-9 && std::abs(p.normal[2]) < 1e-9) u = {1, 0, 0};
    const Vec3 v = {p.normal[1] * u[2] - p.normal[2] * u[1], p.normal[2] * u[0] - p.normal[0] * u[2],
                    p.normal[0] * u[1] - p.normal[1] * u[0]};
    if (std::abs(dot(hp, u)) > p.half[0] || std::abs(dot(hp, v)) > p.half[1]) return h;
    h.t = t;
    h.normal = denom < 0.0 ? p.normal : Vec3{-p.normal[0], -p.normal[1], -p.normal[2]};
    h.prim = &p;
    return h;
}

struct Scene {
    std::vector<double> rgb;  // H*W*3 in [0,1]
    DepthMap depth;
};

inline Scene generate_scene(const SceneSpec& spec, int index) {
    spec.validate();
    Rng rng(mix64(spec.seed) ^ mix64(static_cast<std::uint64_t>(index) * 0x9e3779b97f4a7c15ULL + 1));
    const int H = spec.height, W = spec.width;

    // tilted background plane: z = z0 + ax*x + ay*y, never globally constant
    const double bg_z0 = rng.uniform(4.0, 9.0);
    const double bg_ax = rng.uniform(-0.25, 0.25);
    const double bg_ay = rng.uniform(-0.25, 0.25);
    const Vec3 bg_albedo = {rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9)};
    const Vec3 bg_normal = normalize({-bg_ax, -bg_ay, 1.0});

    std::vector<Primitive> prims;
    const int count = rng.uniform_int(spec.min_primitives, spec.max_primitives);
    for (int i = 0; i < count; ++i) {
        Primitive p;
        const int kind = rng.uniform_int(0, 2);
        p.kind = kind == 0 ? PrimKind::Sphere : (kind == 1 ? PrimKind::Box : PrimKind::Plane);
        const double z = rng.uniform(1.5, 6.0);
        p.center = {rng.uniform(-0.6, 0.6) * z, rng.uniform(-0.6, 0.6) * z, z};
        p.albedo = {rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95)};
        switch (p.kind) {
            case PrimKind::Sphere: p.radius = rng.uniform(0.2, 0.8); break;
            case PrimKind::Box:
                p.half = {rng.uniform(0.2, 0.7), rng.uniform(0.2, 0.7), rng.uniform(0.2, 0.7)};
                break;
            case PrimKind::Plane:
                p.normal = normalize({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0});
                p.half = {rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)};
                break;
        }
        prims.push_back(p);
    }

    Scene scene;
    scene.rgb.resize(static_cast<size_t>(H) * W * 3);
    scene.depth.h = H;
    scene.depth.w = W;
    scene.depth.depth.resize(static_cast<size_t>(H) * W);
    const double tan_fov = 0.5;
    // per-scene light direction jittered around the configured base: local
    // shading alone is then ambiguous, so depth has to be inferred jointly
    // with a global illumination estimate
    const Vec3 light = normalize({spec.light[0] + rng.uniform(-0.8, 0.8),
                                  spec.light[1] + rng.uniform(-0.8, 0.8),
                                  spec.light[2] * rng.uniform(0.7, 1.3)});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const double v = ((i + 0.5) / H * 2.0 - 1.0) * tan_fov;
            const double u = ((j + 0.5) / W * 2.0 - 1.0) * tan_fov;
            const Vec3 dir = normalize({u, v, 1.0});

            // background
            const double denom = dir[2] - bg_ax * dir[0] - bg_ay * dir[1];
            Hit best;
            best.t = bg_z0 / denom;
            best.normal = bg_normal;
            best.prim = nullptr;

            for (const auto& p : prims) {
                Hit h;
                switch (p.kind) {
                    case PrimKind::Sphere: h = intersect_sphere(dir, p); break;
                    case PrimKind::Box: h = intersect_box(dir, p); break;
                    case PrimKind::Plane: h = intersect_plane(dir, p); break;
                }
                if (h.ok() && h.t < best.t) best = h;
            }

            double depth = best.t * dir[2];  // z-depth
            depth = std::clamp(depth, spec.min_depth, spec.max_depth);
            scene.depth.depth[static_cast<size_t>(i) * W + j] = depth;

            const Vec3& albedo = best.prim ? best.prim->albedo : bg_albedo;
            const double lambert = std::max(0.0, -dot(best.normal, light));
            // atmospheric perspective: haze mixes in with distance, so a
            // single patch cannot separate albedo from depth — resolving the
            // ambiguity requires scene-level context
            const double fog = 1.0 - std::exp(-depth / 7.0);
            for (int c = 0; c < 3; ++c) {
                double val = albedo[static_cast<size_t>(c)] * (0.25 + 0.75 * lambert);
                val = val * (1.0 - fog) + 0.75 * fog;
                val += 0.01 * rng.normal();  // seeded sensor noise
                scene.rgb[(static_cast<size_t>(i) * W + j) * 3 + c] = std::clamp(val, 0.0, 1.0);
            }
        }
    return scene;
}

struct Manifest {
    SceneSpec spec;
    std::vector<int> train_indices;
    std::vector<int> val_indices;
    std::filesystem::path dir;

    std::filesystem::path rgb_path(int index) const {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene_%05d.ppm", index);
        return dir / buf;
    }
    std::filesystem::path depth_path(int index) const {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene_%05d.depth", index);
        return dir / buf;
    }
};

inline Manifest generate_split(const SceneSpec& spec, int n_train, int n_val,
                               const std::filesystem::path& dir) {
    if (n_train < 1 || n_val < 1) throw ConfigError("split counts must be >= 1");
    std::filesystem::create_directories(dir);
    Manifest m;
    m.spec = spec;
    m.dir = dir;
    for (int i = 0; i < n_train; ++i) m.train_indices.push_back(i);
    for (int i = 0; i < n_val; ++i) m.val_indices.push_back(n_train + i);
    nlohmann::json scenes = nlohmann::json::array();
    auto emit = [&](int index, const char* split) {
        Scene sc = generate_scene(spec, index);
        io::write_ppm(m.rgb_path(index), spec.height, spec.width, sc.rgb);
        io::write_depth_raw(m.depth_path(index), spec.height, spec.width, sc.depth.depth);
        scenes.push_back({{"index", index},
                          {"split", split},
                          {"rgb", m.rgb_path(index).filename().string()},
                          {"depth", m.depth_path(index).filename().string()}});
    };
    for (int i : m.train_indices) emit(i, "train");
    for (int i : m.val_indices) emit(i, "val");
    nlohmann::json j = {{"seed", spec.seed},
                        {"height", spec.height},
                        {"width", spec.width},
                        {"min_primitives", spec.min_primitives},
                        {"max_primitives", spec.max_primitives},
                        {"min_depth", spec.min_depth},
                        {"max_depth", spec.max_depth},
                        {"n_train", n_train},
                        {"n_val", n_val},
                        {"scenes", scenes}};
    auto os = io::open_out(dir / "manifest.json");
    os << j.dump(2) << "\n";
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    nlohmann::json j;
    is >> j;
    Manifest m;
    m.dir = path.parent_path();
    m.spec.seed = j.at("seed").get<std::uint64_t>();
    m.spec.height = j.at("height").get<int>();
    m.spec.width = j.at("width").get<int>();
    m.spec.min_primitives = j.at("min_primitives").get<int>();
    m.spec.max_primitives = j.at("max_primitives").get<int>();
    m.spec.min_depth = j.at("min_depth").get<double>();
    m.spec.max_depth = j.at("max_depth").get<double>();
    for (const auto& s : j.at("scenes")) {
        const int idx = s.at("index").get<int>();
        if (s.at("split").get<std::string>() == "train")
            m.train_indices.push_back(idx);
        else
            m.val_indices.push_back(idx);
    }
    return m;
}

}  // namespace synth
}  // namespace lfr
