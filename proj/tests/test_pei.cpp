#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <memory>

#include "mdepth/pei.hpp"
#include "test_util.hpp"

using namespace mdepth;
namespace tu = mdepth::testutil;

namespace {

struct Rig {
    std::unique_ptr<ParamStore<double>> store;
    std::unique_ptr<Enhancer<double>> enhancer;
    std::unique_ptr<PeiModule<double>> pei;
    std::vector<std::int64_t> channels{2, 4, 6, 8};

    explicit Rig(PeiToggles toggles = PeiToggles{}, std::int64_t n = 3, std::uint64_t seed = 40) {
        EnhancerConfig cfg;
        cfg.patch = 8;
        cfg.width = 16;
        cfg.heads = 2;
        cfg.layers = 4;
        store = std::make_unique<ParamStore<double>>(seed);
        enhancer = std::make_unique<Enhancer<double>>(*store, "enhancer", cfg, 4, 4);
        pei = std::make_unique<PeiModule<double>>(*store, "pei", n, channels, enhancer.get(),
                                                  toggles);
    }

    // Pyramid for a 32x32 image.
    PyramidFeatures<double> pyramid(std::uint64_t seed) const {
        PyramidFeatures<double> pyr;
        std::int64_t size = 8;
        for (int l = 0; l < 4; ++l) {
            pyr.levels[l] = tu::random_tensor<double>({channels[l], size, size}, seed + l);
            size /= 2;
        }
        return pyr;
    }

    Tensor<double> image(std::uint64_t seed) const {
        CounterRng rng(seed);
        std::vector<double> d(3 * 32 * 32);
        for (auto& v : d) v = rng.next_unit();
        return Tensor<double>({3, 32, 32}, std::move(d));
    }
};

}  // namespace

TEST_CASE("build_mask follows the pattern-isolation rule") {
    SUBCASE("N=2 M=3 exact rows") {
        Mask m = build_mask(2, 3);
        const std::uint8_t want[5][5] = {{1, 0, 1, 1, 1},
                                         {0, 1, 1, 1, 1},
                                         {1, 1, 1, 1, 1},
                                         {1, 1, 1, 1, 1},
                                         {1, 1, 1, 1, 1}};
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) CHECK(m.at(i, j) == (want[i][j] != 0));
    }
    SUBCASE("N=0 degenerates to all-true") {
        Mask m = build_mask(0, 4);
        for (std::int64_t i = 0; i < 4; ++i)
            for (std::int64_t j = 0; j < 4; ++j) CHECK(m.at(i, j));
    }
    SUBCASE("every row keeps at least one attendable column") {
        for (std::int64_t n : {0, 1, 5, 17}) {
            for (std::int64_t mm : {1, 3, 9}) {
                Mask m = build_mask(n, mm);
                for (std::int64_t i = 0; i < n + mm; ++i) {
                    bool any = false;
                    for (std::int64_t j = 0; j < n + mm && !any; ++j) any = m.at(i, j);
                    CHECK(any);
                }
            }
        }
    }
    SUBCASE("image tokens are mandatory") { CHECK_THROWS_AS(build_mask(2, 0), UsageError); }
    SUBCASE("pattern-to-pattern entries are false for all sizes") {
        Mask m = build_mask(5, 7);
        for (std::int64_t i = 0; i < 5; ++i)
            for (std::int64_t j = 0; j < 5; ++j) CHECK(m.at(i, j) == (i == j));
    }
}

TEST_CASE("partition handles the degenerate cases") {
    Rig rig;
    SUBCASE("constant feature map collapses every pattern to the same row") {
        Tensor<double> constant = Tensor<double>::full({2, 8, 8}, 0.625);
        Tensor<double> queries = tu::random_tensor<double>({3, 16}, 41);
        Tensor<double> p = rig.pei->partition(1, constant, queries);
        CHECK(p.shape() == Shape{3, 16});
        for (std::int64_t i = 1; i < 3; ++i)
            for (std::int64_t j = 0; j < 16; ++j)
                CHECK(p.data()[i * 16 + j] == doctest::Approx(p.data()[j]).epsilon(1e-9));
    }
    SUBCASE("single pattern runs through the self-attention identity path") {
        Rig one(PeiToggles{}, 1, 44);
        Tensor<double> p = one.pei->partition(2, one.pyramid(45).level(2),
                                              tu::random_tensor<double>({1, 16}, 46));
        CHECK(p.shape() == Shape{1, 16});
    }
    SUBCASE("query shape is validated") {
        CHECK_THROWS_AS(rig.pei->partition(1, rig.pyramid(47).level(1),
                                           tu::random_tensor<double>({2, 16}, 48)),
                        UsageError);
    }
    SUBCASE("pattern count below one is rejected at construction") {
        CHECK_THROWS_AS(Rig(PeiToggles{}, 0, 49), UsageError);
    }
}

TEST_CASE("partition gradient w.r.t. queries and features matches differences") {
    Rig rig;
    Tensor<double> f = rig.pyramid(50).level(2);
    Tensor<double> q = tu::random_tensor<double>({3, 16}, 51);
    GradReport wrt_q = grad_check(
        [&](const Tensor<double>& t) { return tu::weighted_sum(rig.pei->partition(2, f, t), 52); },
        q, 1e-5);
    CHECK(wrt_q.max_rel_err <= 1e-6);
    GradReport wrt_f = grad_check(
        [&](const Tensor<double>& t) { return tu::weighted_sum(rig.pei->partition(2, t, q), 53); },
        f, 1e-5);
    CHECK(wrt_f.max_rel_err <= 1e-6);
}

TEST_CASE("enhance splits exactly what run_block produced") {
    Rig rig;
    Tensor<double> patterns = tu::random_tensor<double>({3, 16}, 54);
    TokenStream<double> ts = rig.enhancer->patch_embed(rig.image(55));
    auto [enhanced, next] = rig.pei->enhance(1, patterns, ts);

    Tensor<double> combined = ops::concat_rows(patterns, ts.tokens);
    Mask mask = build_mask(3, ts.count());
    Tensor<double> direct = rig.enhancer->run_block(1, combined, mask);
    CHECK(tu::bitwise_equal(enhanced, ops::slice_rows(direct, 0, 3)));
    CHECK(tu::bitwise_equal(next.tokens, ops::slice_rows(direct, 3, 3 + ts.count())));
    CHECK(next.level == 2);

    SUBCASE("re-concatenating reproduces the block output") {
        CHECK(tu::bitwise_equal(ops::concat_rows(enhanced, next.tokens), direct));
    }
}

TEST_CASE("enhance bypass keeps both inputs untouched") {
    PeiToggles t;
    t.enhance = false;
    Rig rig(t);
    Tensor<double> patterns = tu::random_tensor<double>({3, 16}, 56);
    TokenStream<double> ts = rig.enhancer->patch_embed(rig.image(57));
    auto [enhanced, next] = rig.pei->enhance(2, patterns, ts);
    CHECK(enhanced.same_node(patterns));
    CHECK(next.tokens.same_node(ts.tokens));
    CHECK(next.level == ts.level + 1);
}

TEST_CASE("chain is exactly element-wise addition") {
    Rig rig;
    SUBCASE("zero enhanced gives the identity embedding") {
        Tensor<double> identity = tu::random_tensor<double>({3, 16}, 58);
        Tensor<double> out = PeiModule<double>::chain(Tensor<double>::zeros({3, 16}), identity);
        CHECK(tu::bitwise_equal(out, identity));
    }
    SUBCASE("zero identity gives the enhanced patterns") {
        Tensor<double> enhanced = tu::random_tensor<double>({3, 16}, 59);
        Tensor<double> out = PeiModule<double>::chain(enhanced, Tensor<double>::zeros({3, 16}));
        CHECK(tu::bitwise_equal(out, enhanced));
    }
    SUBCASE("random inputs match the scalar oracle") {
        Tensor<double> a = tu::random_tensor<double>({3, 16}, 60);
        Tensor<double> b = tu::random_tensor<double>({3, 16}, 61);
        Tensor<double> out = PeiModule<double>::chain(a, b);
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] == a.data()[i] + b.data()[i]);
        }
    }
    SUBCASE("shape mismatch is a usage error") {
        CHECK_THROWS_AS(PeiModule<double>::chain(Tensor<double>::zeros({3, 16}),
                                                 Tensor<double>::zeros({2, 16})),
                        UsageError);
    }
}

TEST_CASE("inject_patterns residual behaviour") {
    Rig rig;
    Tensor<double> f = rig.pyramid(62).level(1);
    Tensor<double> pbar = tu::random_tensor<double>({3, 16}, 63);

    SUBCASE("zero value projection forces the identity") {
        Tensor<double>* vw = rig.store->find("pei.l1.inject_pt.cross.v.weight");
        REQUIRE(vw != nullptr);
        std::fill(vw->mut_data(), vw->mut_data() + vw->numel(), 0.0);
        Tensor<double> out = rig.pei->inject_patterns(1, f, pbar);
        CHECK(tu::bitwise_equal(out, f));
    }
    SUBCASE("toggle off is the identity") {
        PeiToggles t;
        t.inject_patterns = false;
        Rig off(t);
        Tensor<double> out = off.pei->inject_patterns(1, f, pbar);
        CHECK(out.same_node(f));
    }
    SUBCASE("gradients match finite differences") {
        GradReport wrt_f = grad_check(
            [&](const Tensor<double>& t) {
                return tu::weighted_sum(rig.pei->inject_patterns(1, t, pbar), 64);
            },
            f, 1e-5);
        CHECK(wrt_f.max_rel_err <= 1e-6);
        GradReport wrt_p = grad_check(
            [&](const Tensor<double>& t) {
                return tu::weighted_sum(rig.pei->inject_patterns(1, f, t), 65);
            },
            pbar, 1e-5);
        CHECK(wrt_p.max_rel_err <= 1e-6);
    }
}

TEST_CASE("inject_image_tokens residual behaviour") {
    Rig rig;
    Tensor<double> fbar = rig.pyramid(66).level(2);

    TokenStream<double> fin;
    fin.tokens = tu::random_tensor<double>({16, 16}, 67);
    fin.grid_h = 4;
    fin.grid_w = 4;
    fin.level = 5;
    fin.final_tag = true;

    SUBCASE("zero tokens leave the map unchanged") {
        TokenStream<double> zero = fin;
        zero.tokens = Tensor<double>::zeros({16, 16});
        Tensor<double> out = rig.pei->inject_image_tokens(2, fbar, zero);
        // Projection bias is zero-initialized, so the branch adds exactly 0.
        CHECK(tu::bitwise_equal(out, fbar));
    }
    SUBCASE("spatially constant tokens add a per-channel constant") {
        TokenStream<double> constant = fin;
        std::vector<double> d(16 * 16);
        CounterRng rng(68);
        for (std::int64_t j = 0; j < 16; ++j) {
            const double v = rng.next_range(-1, 1);
            for (std::int64_t r = 0; r < 16; ++r) d[r * 16 + j] = v;
        }
        constant.tokens = Tensor<double>({16, 16}, std::move(d));
        Tensor<double> out = rig.pei->inject_image_tokens(2, fbar, constant);
        Tensor<double> delta = ops::sub(out, fbar);
        const std::int64_t hw = 4 * 4;
        for (std::int64_t c = 0; c < 4; ++c) {
            for (std::int64_t i = 1; i < hw; ++i) {
                CHECK(delta.data()[c * hw + i] ==
                      doctest::Approx(delta.data()[c * hw]).epsilon(1e-9));
            }
        }
    }
    SUBCASE("missing grid metadata is a usage error") {
        TokenStream<double> broken = fin;
        broken.grid_h = 0;
        CHECK_THROWS_AS(rig.pei->inject_image_tokens(2, fbar, broken), UsageError);
        TokenStream<double> not_final = fin;
        not_final.final_tag = false;
        CHECK_THROWS_AS(rig.pei->inject_image_tokens(2, fbar, not_final), UsageError);
    }
    SUBCASE("toggle off is the identity") {
        PeiToggles t;
        t.inject_image = false;
        Rig off(t);
        CHECK(off.pei->inject_image_tokens(2, fbar, fin).same_node(fbar));
    }
}

TEST_CASE("pei_forward composes the stages") {
    SUBCASE("all toggles off is the identity on the pyramid") {
        PeiToggles t{false, false, false, false};
        Rig rig(t);
        PyramidFeatures<double> pyr = rig.pyramid(70);
        PyramidFeatures<double> out = rig.pei->forward(pyr, rig.image(71));
        for (int l = 1; l <= 4; ++l) CHECK(out.level(l).same_node(pyr.level(l)));
    }
    SUBCASE("output shapes equal input shapes for every toggle combination") {
        for (int bits = 0; bits < 16; ++bits) {
            PeiToggles t;
            t.partition = bits & 1;
            t.enhance = bits & 2;
            t.inject_patterns = bits & 4;
            t.inject_image = bits & 8;
            Rig rig(t, 3, 80 + static_cast<std::uint64_t>(bits));
            PyramidFeatures<double> pyr = rig.pyramid(72);
            PyramidFeatures<double> out = rig.pei->forward(pyr, rig.image(73));
            for (int l = 1; l <= 4; ++l) CHECK(out.level(l).shape() == pyr.level(l).shape());
        }
    }
    SUBCASE("semantic chaining holds exactly") {
        Rig rig;
        std::array<PatternState<double>, 4> trace;
        rig.pei->forward(rig.pyramid(74), rig.image(75), &trace);
        // S^1 is exactly zero.
        for (std::int64_t i = 0; i < trace[0].semantic.numel(); ++i) {
            CHECK(trace[0].semantic.data()[i] == 0.0);
        }
        // Pri^1 = I^1.
        CHECK(tu::bitwise_equal(trace[0].queries, trace[0].identity));
        // Pri^{l+1} = P_bar^l + I^{l+1}, element by element.
        for (int l = 1; l < 4; ++l) {
            CHECK(tu::bitwise_equal(trace[l].semantic, trace[l - 1].enhanced));
            for (std::int64_t i = 0; i < trace[l].queries.numel(); ++i) {
                CHECK(trace[l].queries.data()[i] ==
                      trace[l - 1].enhanced.data()[i] + trace[l].identity.data()[i]);
            }
        }
    }
    SUBCASE("partition off feeds the queries straight through") {
        PeiToggles t;
        t.partition = false;
        Rig rig(t);
        std::array<PatternState<double>, 4> trace;
        rig.pei->forward(rig.pyramid(76), rig.image(77), &trace);
        for (int l = 0; l < 4; ++l) {
            CHECK(tu::bitwise_equal(trace[l].conditional, trace[l].queries));
        }
    }
    SUBCASE("enhance off with pattern injection keeps patterns from the queries") {
        PeiToggles t;
        t.enhance = false;
        t.inject_image = false;
        Rig rig(t);
        std::array<PatternState<double>, 4> trace;
        PyramidFeatures<double> pyr = rig.pyramid(78);
        rig.pei->forward(pyr, rig.image(79), &trace);
        for (int l = 0; l < 4; ++l) {
            CHECK(tu::bitwise_equal(trace[l].enhanced, trace[l].conditional));
        }
    }
}

TEST_CASE("identity embeddings receive gradient through the full pass") {
    Rig rig;
    PyramidFeatures<double> pyr = rig.pyramid(90);
    for (auto& level : pyr.levels) level.set_requires_grad(true);
    PyramidFeatures<double> out = rig.pei->forward(pyr, rig.image(91));
    Tensor<double> loss = ops::sum_all(out.level(1));
    for (int l = 2; l <= 4; ++l) loss = ops::add(loss, ops::sum_all(out.level(l)));
    loss.backward();
    for (int l = 1; l <= 4; ++l) {
        CAPTURE(l);
        CHECK(rig.pei->identity_embedding(l).has_grad());
        CHECK(pyr.level(l).has_grad());
    }
    for (const auto& [name, t] : rig.enhancer->parameters()) CHECK_FALSE(t.has_grad());
}
