#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lfr/grad_check.hpp"
#include "lfr/lfr_module.hpp"
#include "lfr/synth.hpp"

using namespace lfr;

namespace {

std::vector<double> rand_vec(int n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    synth::Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// stack whose eligible layers have prescribed mean cosine to the final class
// token: one token per layer at the requested angle in the (e1, e2) plane
FeatureStack stack_with_similarities(const std::vector<double>& sims) {
    FeatureStack st;
    const int c = 2;
    for (double s : sims) {
        const double ortho = std::sqrt(std::max(0.0, 1.0 - s * s));
        st.tokens.push_back(Tensor::leaf({1, c}, {s, ortho}));
        st.cls.push_back(Tensor::leaf({1, c}, {1.0, 0.0}));
    }
    // final layer: class token along e1
    st.tokens.push_back(Tensor::leaf({1, c}, {1.0, 0.0}));
    st.cls.push_back(Tensor::leaf({1, c}, {1.0, 0.0}));
    st.grid_rows = 1;
    st.grid_cols = 1;
    return st;
}

FeatureStack random_stack(int layers, int n, int c, std::uint64_t seed) {
    FeatureStack st;
    for (int l = 0; l < layers; ++l) {
        st.tokens.push_back(
            Tensor::leaf({n, c}, rand_vec(n * c, seed * 100 + static_cast<std::uint64_t>(l))));
        st.cls.push_back(
            Tensor::leaf({1, c}, rand_vec(c, seed * 100 + 50 + static_cast<std::uint64_t>(l))));
    }
    st.grid_rows = 1;
    st.grid_cols = n;
    return st;
}

AdapterParams make_adapters(int width, int k, std::uint64_t seed) {
    ParamRegistry reg;
    InitRng rng(seed);
    return init_adapters(width, k, reg, rng);
}

}  // namespace

TEST_CASE("avg_cls_similarity hand cases") {
    FeatureStack st;
    const int c = 3;
    Tensor cls = Tensor::leaf({1, c}, {2.0, 0.0, 0.0});

    // layer 0: every token equals the final class token (up to positive scale)
    st.tokens.push_back(Tensor::leaf({2, c}, {4, 0, 0, 1, 0, 0}));
    st.cls.push_back(cls);
    // layer 1: orthogonal tokens
    st.tokens.push_back(Tensor::leaf({2, c}, {0, 1, 0, 0, 0, 3}));
    st.cls.push_back(cls);
    // layer 2: cosines {1, 0, -1} average to zero
    st.tokens.push_back(Tensor::leaf({3, c}, {5, 0, 0, 0, 2, 0, -1, 0, 0}));
    st.cls.push_back(cls);
    // final layer
    st.tokens.push_back(Tensor::leaf({2, c}, {1, 1, 1, 2, 2, 2}));
    st.cls.push_back(cls);

    CHECK(avg_cls_similarity(st, 0) == Catch::Approx(1.0).margin(1e-14));
    CHECK(avg_cls_similarity(st, 1) == Catch::Approx(0.0).margin(1e-14));
    CHECK(avg_cls_similarity(st, 2) == Catch::Approx(0.0).margin(1e-14));
    CHECK_THROWS_AS(avg_cls_similarity(st, 3), DomainError);  // the last layer is not eligible

    st.tokens[0] = Tensor::leaf({2, c}, {0, 0, 0, 1, 0, 0});
    CHECK_THROWS_AS(avg_cls_similarity(st, 0), DomainError);  // zero-norm token
}

TEST_CASE("select_layers forced and constructed orderings") {
    SelectionStrategy strat;
    strat.k = 2;

    FeatureStack forced = random_stack(3, 4, 6, 31);
    for (auto kind : {SelectionKind::MinimalSimilarity, SelectionKind::MaximalSimilarity,
                      SelectionKind::NodeDegree}) {
        strat.kind = kind;
        CHECK(select_layers(forced, strat) == std::vector<int>{0, 1});
    }

    FeatureStack ordered = stack_with_similarities({0.9, 0.1, 0.5, 0.2});
    strat.kind = SelectionKind::MinimalSimilarity;
    CHECK(select_layers(ordered, strat) == std::vector<int>{1, 3});
    strat.kind = SelectionKind::MaximalSimilarity;
    CHECK(select_layers(ordered, strat) == std::vector<int>{0, 2});

    // ties resolve toward the deeper layer
    FeatureStack tied = stack_with_similarities({0.4, 0.4, 0.4, 0.9});
    strat.k = 1;
    strat.kind = SelectionKind::MinimalSimilarity;
    CHECK(select_layers(tied, strat) == std::vector<int>{2});

    strat.k = 9;
    CHECK_THROWS_AS(select_layers(ordered, strat), ConfigError);

    strat.k = 2;
    strat.kind = SelectionKind::LearnedScores;
    CHECK_THROWS_AS(select_layers(ordered, strat, nullptr), ConfigError);
}

TEST_CASE("selection is invariant to positive token rescaling") {
    SelectionStrategy strat;
    strat.k = 3;
    for (std::uint64_t s = 0; s < 12; ++s) {
        FeatureStack st = random_stack(6, 5, 4, 700 + s);
        synth::Rng rng(800 + s);
        FeatureStack scaled;
        scaled.grid_rows = st.grid_rows;
        scaled.grid_cols = st.grid_cols;
        for (int l = 0; l < st.layers(); ++l) {
            std::vector<double> tok = st.tokens[static_cast<size_t>(l)].data();
            const int n = st.tokens[static_cast<size_t>(l)].rows(), c = st.width();
            for (int i = 0; i < n; ++i) {
                const double f = rng.uniform(0.05, 20.0);
                for (int j = 0; j < c; ++j) tok[static_cast<size_t>(i) * c + j] *= f;
            }
            std::vector<double> cls = st.cls[static_cast<size_t>(l)].data();
            const double fc = rng.uniform(0.05, 20.0);
            for (auto& v : cls) v *= fc;
            scaled.tokens.push_back(Tensor::leaf({n, c}, std::move(tok)));
            scaled.cls.push_back(Tensor::leaf({1, c}, std::move(cls)));
        }
        for (auto kind : {SelectionKind::MinimalSimilarity, SelectionKind::MaximalSimilarity,
                          SelectionKind::NodeDegree}) {
            strat.kind = kind;
            CHECK(select_layers(st, strat) == select_layers(scaled, strat));
        }
    }
}

TEST_CASE("recombine identities") {
    const int n = 3, c = 4;
    Tensor f_aux = Tensor::leaf({n, c}, rand_vec(n * c, 1));
    Tensor cls_aux = Tensor::leaf({1, c}, rand_vec(c, 2));
    Tensor f_last = Tensor::leaf({n, c}, rand_vec(n * c, 3));
    Tensor cls_last = Tensor::leaf({1, c}, rand_vec(c, 4));

    AdapterParams params = make_adapters(c, 1, 5);
    AdapterSlot& slot = params.slots[0];

    SECTION("zero gate is a bitwise identity") {
        auto [f_r, cls_r] = recombine(f_aux, cls_aux, f_last, cls_last, slot, params.activation);
        CHECK(f_r.data() == f_last.data());
        CHECK(cls_r.data() == cls_last.data());
    }

    SECTION("zero up-projection is an identity for any gate") {
        slot.gate.mutable_data()[0] = 1.7;
        for (auto& v : slot.up_w.mutable_data()) v = 0.0;
        auto [f_r, cls_r] = recombine(f_aux, cls_aux, f_last, cls_last, slot, params.activation);
        CHECK(f_r.data() == f_last.data());
        CHECK(cls_r.data() == cls_last.data());
    }

    SECTION("output is linear in tanh(gate)") {
        auto delta_at = [&](double g) {
            slot.gate.mutable_data()[0] = g;
            auto [f_r, cls_r] = recombine(f_aux, cls_aux, f_last, cls_last, slot, params.activation);
            std::vector<double> d(f_r.data());
            for (int i = 0; i < f_r.numel(); ++i) d[static_cast<size_t>(i)] -= f_last.data()[i];
            return d;
        };
        auto d1 = delta_at(0.3);
        auto d2 = delta_at(1.1);
        const double ratio = std::tanh(1.1) / std::tanh(0.3);
        for (size_t i = 0; i < d1.size(); ++i) CHECK(d2[i] == Catch::Approx(ratio * d1[i]).epsilon(1e-10));
    }

    SECTION("width mismatch is rejected") {
        Tensor narrow = Tensor::leaf({n, c - 1}, rand_vec(n * (c - 1), 6));
        CHECK_THROWS_AS(recombine(narrow, cls_aux, f_last, cls_last, slot, params.activation),
                        DimensionError);
    }
}

TEST_CASE("recombine gradients vs finite differences") {
    const int n = 2, c = 4;
    ParamRegistry reg;
    InitRng irng(9);
    AdapterParams params = init_adapters(c, 1, reg, irng);
    params.slots[0].gate.mutable_data()[0] = 0.4;

    Tensor f_aux = Tensor::leaf({n, c}, rand_vec(n * c, 11), true);
    Tensor f_last = Tensor::leaf({n, c}, rand_vec(n * c, 12), true);
    Tensor cls_aux = Tensor::leaf({1, c}, rand_vec(c, 13));
    Tensor cls_last = Tensor::leaf({1, c}, rand_vec(c, 14));

    std::vector<Tensor> inputs = {f_aux,
                                  f_last,
                                  params.slots[0].gate,
                                  params.slots[0].down_w,
                                  params.slots[0].down_b,
                                  params.slots[0].up_w,
                                  params.slots[0].up_b};
    auto f = [&](const std::vector<Tensor>& in) {
        auto [f_r, cls_r] = recombine(in[0], cls_aux, in[1], cls_last, params.slots[0], params.activation);
        return sum_all(f_r);
    };
    auto rep = grad_check(f, inputs, 1e-5);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("run_lfr assembles the recombined set") {
    const int L = 6, n = 4, c = 6, k = 3;
    FeatureStack st = random_stack(L, n, c, 42);
    SelectionStrategy strat;
    strat.k = k;
    strat.kind = SelectionKind::MinimalSimilarity;
    AdapterParams params = make_adapters(c, k, 43);
    for (auto& slot : params.slots) slot.gate.mutable_data()[0] = 0.2;

    RecombinedSet rec = run_lfr(st, strat, params);
    REQUIRE(static_cast<int>(rec.tokens.size()) == k);
    REQUIRE(static_cast<int>(rec.selected.size()) == k);
    for (int s = 1; s < k; ++s) CHECK(rec.selected[static_cast<size_t>(s - 1)] < rec.selected[static_cast<size_t>(s)]);
    for (int src : rec.selected) CHECK(src < L - 1);
    for (int s = 0; s < k; ++s)
        CHECK(rec.gates[static_cast<size_t>(s)] == std::tanh(params.slots[static_cast<size_t>(s)].gate.data()[0]));

    RecombinedSet again = run_lfr(st, strat, params);
    CHECK(again.selected == rec.selected);
    for (int s = 0; s < k; ++s)
        CHECK(again.tokens[static_cast<size_t>(s)].data() == rec.tokens[static_cast<size_t>(s)].data());

    AdapterParams wrong = make_adapters(c, k - 1, 44);
    CHECK_THROWS_AS(run_lfr(st, strat, wrong), ConfigError);

    // gate-zero set collapses onto the last layer
    for (auto& slot : params.slots) slot.gate.mutable_data()[0] = 0.0;
    RecombinedSet zero = run_lfr(st, strat, params);
    for (int s = 0; s < k; ++s) {
        CHECK(zero.tokens[static_cast<size_t>(s)].data() == st.tokens.back().data());
        CHECK(zero.cls[static_cast<size_t>(s)].data() == st.cls.back().data());
    }
}

TEST_CASE("learned scores carry an auxiliary logit per slot") {
    const int L = 5, c = 4, k = 2;
    FeatureStack st = random_stack(L, 3, c, 77);
    SelectionStrategy strat;
    strat.k = k;
    strat.kind = SelectionKind::LearnedScores;
    AdapterParams params = make_adapters(c, k, 78);

    RecombinedSet rec = run_lfr(st, strat, params);
    REQUIRE(static_cast<int>(rec.scorer_logits.size()) == k);
    for (int s = 0; s < k; ++s) {
        const int src = rec.selected[static_cast<size_t>(s)];
        double want = params.scorer_b.data()[0];
        for (int j = 0; j < c; ++j)
            want += st.cls[static_cast<size_t>(src)].data()[static_cast<size_t>(j)] *
                    params.scorer_w.data()[static_cast<size_t>(j)];
        CHECK(rec.scorer_logits[static_cast<size_t>(s)].item() == Catch::Approx(want).margin(1e-14));
    }
}

TEST_CASE("last-only and uniform baselines") {
    const int L = 8, k = 4;
    FeatureStack st = random_stack(L, 4, 6, 51);

    RecombinedSet last = run_last_only(st, k);
    for (int s = 0; s < k; ++s) {
        CHECK(last.tokens[static_cast<size_t>(s)].data() == st.tokens.back().data());
        CHECK(last.gates[static_cast<size_t>(s)] == 0.0);
        CHECK(last.selected[static_cast<size_t>(s)] == L - 1);
    }

    CHECK(uniform_layers(8, 4) == std::vector<int>{1, 3, 5, 7});
    CHECK(uniform_layers(12, 4) == std::vector<int>{2, 5, 8, 11});

    RecombinedSet uni = run_uniform_baseline(st, k);
    CHECK(uni.selected == std::vector<int>{1, 3, 5, 7});
    for (int s = 0; s < k; ++s)
        CHECK(uni.tokens[static_cast<size_t>(s)].data() ==
              st.tokens[static_cast<size_t>(uni.selected[static_cast<size_t>(s)])].data());
}
