#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mdepth/decoder.hpp"
#include "test_util.hpp"

using namespace mdepth;
namespace tu = mdepth::testutil;

namespace {

PyramidFeatures<double> random_pyramid(const std::vector<std::int64_t>& channels,
                                       std::int64_t base, std::uint64_t seed) {
    PyramidFeatures<double> pyr;
    std::int64_t size = base / 4;
    for (int l = 0; l < 4; ++l) {
        pyr.levels[l] = tu::random_tensor<double>({channels[l], size, size}, seed + l);
        size /= 2;
    }
    return pyr;
}

}  // namespace

TEST_CASE("identical per-level maps average to themselves") {
    ParamStore<double> store(101);
    Decoder<double> dec(store, "decoder", {4, 4, 4, 4}, 6, 0.1, 10.0);
    // Same parameters for all four heads and the same feature map at every
    // level: the four per-scale maps coincide, so the mean equals any one.
    for (int l = 2; l <= 4; ++l) {
        for (const char* leaf : {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"}) {
            Tensor<double>* src = store.find(std::string("decoder.l1.") + leaf);
            Tensor<double>* dst = store.find("decoder.l" + std::to_string(l) + "." + leaf);
            REQUIRE(src != nullptr);
            REQUIRE(dst != nullptr);
            std::copy(src->data(), src->data() + src->numel(), dst->mut_data());
        }
    }
    Tensor<double> f = tu::random_tensor<double>({4, 8, 8}, 102);
    PyramidFeatures<double> pyr;
    for (int l = 0; l < 4; ++l) pyr.levels[l] = f;

    DepthMap<double> out = dec.decode(pyr);

    // One head computed by hand from the shared parameters.
    Tensor<double> x = ops::gelu(ops::add_channel_bias(
        ops::conv2d(f, *store.find("decoder.l1.conv1.weight"), 1, 1),
        *store.find("decoder.l1.conv1.bias")));
    Tensor<double> logits = ops::add_channel_bias(
        ops::conv2d(x, *store.find("decoder.l1.conv2.weight"), 1, 1),
        *store.find("decoder.l1.conv2.bias"));
    Tensor<double> one = ops::add_const(
        ops::scale(ops::sigmoid(ops::bilinear_resize(logits, 32, 32)), 9.9), 0.1);

    CHECK(out.values.shape() == Shape{1, 32, 32});
    CHECK(tu::all_close(out.values, one, 1e-12));
}

TEST_CASE("sigmoid limits clamp to the depth range") {
    ParamStore<double> store(103);
    Decoder<double> dec(store, "decoder", {2, 4, 6, 8}, 4, 0.5, 8.0);
    PyramidFeatures<double> pyr = random_pyramid({2, 4, 6, 8}, 32, 104);

    SUBCASE("large positive logits saturate at d_max") {
        for (int l = 1; l <= 4; ++l) {
            Tensor<double>* b = store.find("decoder.l" + std::to_string(l) + ".conv2.bias");
            b->mut_data()[0] = 1e4;
        }
        DepthMap<double> out = dec.decode(pyr);
        for (std::int64_t i = 0; i < out.values.numel(); ++i) {
            CHECK(out.values.data()[i] == doctest::Approx(8.0).epsilon(1e-12));
        }
    }
    SUBCASE("large negative logits saturate at d_min") {
        for (int l = 1; l <= 4; ++l) {
            Tensor<double>* b = store.find("decoder.l" + std::to_string(l) + ".conv2.bias");
            b->mut_data()[0] = -1e4;
        }
        DepthMap<double> out = dec.decode(pyr);
        for (std::int64_t i = 0; i < out.values.numel(); ++i) {
            CHECK(out.values.data()[i] == doctest::Approx(0.5).epsilon(1e-12));
        }
    }
}

TEST_CASE("decode output stays within range for random weights") {
    for (std::uint64_t seed : {200u, 201u, 202u}) {
        ParamStore<double> store(seed);
        Decoder<double> dec(store, "decoder", {2, 4, 6, 8}, 4, 0.1, 10.0);
        PyramidFeatures<double> pyr = random_pyramid({2, 4, 6, 8}, 64, seed * 7);
        DepthMap<double> out = dec.decode(pyr);
        CHECK(out.values.shape() == Shape{1, 64, 64});
        for (std::int64_t i = 0; i < out.values.numel(); ++i) {
            CHECK(out.values.data()[i] >= 0.1);
            CHECK(out.values.data()[i] <= 10.0);
        }
    }
}

TEST_CASE("decode is differentiable end to end") {
    ParamStore<double> store(105);
    Decoder<double> dec(store, "decoder", {2, 4, 6, 8}, 4, 0.1, 10.0);
    PyramidFeatures<double> pyr = random_pyramid({2, 4, 6, 8}, 32, 106);
    Tensor<double> level1 = pyr.level(1);
    GradReport r = grad_check(
        [&](const Tensor<double>& t) {
            PyramidFeatures<double> probe = pyr;
            probe.levels[0] = t;
            return tu::weighted_sum(dec.decode(probe).values, 107);
        },
        level1, 1e-5);
    CHECK(r.max_rel_err <= 1e-6);
}

TEST_CASE("decoder configuration errors") {
    ParamStore<double> store(108);
    CHECK_THROWS_AS(Decoder<double>(store, "d", {2, 4, 6, 8}, 4, -1.0, 10.0), ConfigError);
    CHECK_THROWS_AS(Decoder<double>(store, "d2", {2, 4, 6, 8}, 4, 2.0, 1.0), ConfigError);
    CHECK_THROWS_AS(Decoder<double>(store, "d3", {2, 4, 6}, 4, 0.1, 10.0), ConfigError);
}
