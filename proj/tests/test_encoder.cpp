#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mdepth/encoder.hpp"
#include "test_util.hpp"

using namespace mdepth;
namespace tu = mdepth::testutil;

namespace {

Tensor<double> unit_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> data(static_cast<std::size_t>(3 * h * w));
    for (auto& v : data) v = rng.next_unit();
    return Tensor<double>({3, h, w}, std::move(data));
}

}  // namespace

TEST_CASE("encoder produces the 1/4..1/32 pyramid") {
    ParamStore<double> store(5);
    Encoder<double> enc(store, "encoder", {32, 64, 128, 256});
    PyramidFeatures<double> pyr = enc.encode(unit_image(224, 224, 1));
    CHECK(pyr.level(1).shape() == Shape{32, 56, 56});
    CHECK(pyr.level(2).shape() == Shape{64, 28, 28});
    CHECK(pyr.level(3).shape() == Shape{128, 14, 14});
    CHECK(pyr.level(4).shape() == Shape{256, 7, 7});
}

TEST_CASE("encoder rejects sizes not divisible by 32") {
    ParamStore<double> store(6);
    Encoder<double> enc(store, "encoder", {4, 6, 8, 10});
    try {
        enc.encode(unit_image(112, 112, 2));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("32") != std::string::npos);
    }
}

TEST_CASE("encoder input domain checks") {
    ParamStore<double> store(7);
    Encoder<double> enc(store, "encoder", {4, 6, 8, 10});
    Tensor<double> out_of_range = Tensor<double>::full({3, 32, 32}, 1.5);
    CHECK_THROWS_AS(enc.encode(out_of_range), ConfigError);
    CHECK_THROWS_AS(enc.encode(Tensor<double>::zeros({1, 32, 32})), ConfigError);
}

TEST_CASE("channel widths must be strictly increasing") {
    ParamStore<double> store(8);
    CHECK_THROWS_AS(Encoder<double>(store, "encoder", {8, 8, 16, 32}), ConfigError);
    CHECK_THROWS_AS(Encoder<double>(store, "e2", {8, 16, 32}), ConfigError);
}

TEST_CASE("constant image yields spatially constant maps") {
    ParamStore<double> store(9);
    Encoder<double> enc(store, "encoder", {4, 6, 8, 10});
    PyramidFeatures<double> pyr = enc.encode(Tensor<double>::full({3, 64, 64}, 0.25));
    for (int l = 1; l <= 4; ++l) {
        const Tensor<double>& f = pyr.level(l);
        const std::int64_t hw = f.extent(1) * f.extent(2);
        for (std::int64_t c = 0; c < f.extent(0); ++c) {
            for (std::int64_t i = 1; i < hw; ++i) {
                CHECK(f.data()[c * hw + i] == doctest::Approx(f.data()[c * hw]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("every encoder parameter is trainable and receives gradient") {
    ParamStore<double> store(10);
    Encoder<double> enc(store, "encoder", {4, 6, 8, 10});
    for (const auto& [name, t] : store.named()) {
        CAPTURE(name);
        CHECK(t.requires_grad());
    }
    PyramidFeatures<double> pyr = enc.encode(unit_image(32, 32, 3));
    Tensor<double> loss = ops::sum_all(pyr.level(1));
    for (int l = 2; l <= 4; ++l) loss = ops::add(loss, ops::sum_all(pyr.level(l)));
    loss.backward();
    for (const auto& [name, t] : store.named()) {
        CAPTURE(name);
        CHECK(t.has_grad());
    }
}

TEST_CASE("shape contract holds across valid input sizes") {
    ParamStore<double> store(11);
    Encoder<double> enc(store, "encoder", {4, 6, 8, 10});
    for (std::int64_t size : {32, 64, 96}) {
        PyramidFeatures<double> pyr = enc.encode(unit_image(size, size, 100 + size));
        for (int l = 1; l <= 4; ++l) {
            const std::int64_t want = size / (4ll << (l - 1));
            CHECK(pyr.level(l).extent(1) == want);
            CHECK(pyr.level(l).extent(2) == want);
        }
    }
}
