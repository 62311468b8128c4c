#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mdepth/gradcheck.hpp"
#include "mdepth/ops.hpp"
#include "test_util.hpp"

// Every differentiable primitive against central differences (f64, eps 1e-5,
// rel <= 1e-6) on fixed-seed random inputs.

using namespace mdepth;
namespace tu = mdepth::testutil;

namespace {

void expect_grad_ok(const ScalarFn& f, const Tensor<double>& x, double tol = 1e-6) {
    const GradReport r = grad_check(f, x, 1e-5);
    CAPTURE(r.max_rel_err);
    CAPTURE(r.worst_index);
    CAPTURE(r.analytic);
    CAPTURE(r.numeric);
    CHECK(r.max_rel_err <= tol);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    Tensor<double> a = tu::random_tensor<double>({3, 4}, 101);
    Tensor<double> b = tu::random_tensor<double>({3, 4}, 102);

    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::add(x, b), 1); }, a);
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::sub(b, x), 2); }, a);
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::mul(x, b), 3); }, a);
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::scale(x, -1.7), 4); },
                   a);
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::sigmoid(x), 5); }, a);
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::gelu(x), 6); }, a);

    // log needs strictly positive input.
    Tensor<double> pos = a.clone();
    for (std::int64_t i = 0; i < pos.numel(); ++i)
        pos.mut_data()[i] = std::abs(pos.data()[i]) + 0.5;
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::log(x), 7); }, pos);

    // relu checked away from the kink.
    Tensor<double> off = a.clone();
    for (std::int64_t i = 0; i < off.numel(); ++i) {
        const double v = off.data()[i];
        off.mut_data()[i] = v + (v >= 0 ? 0.2 : -0.2);
    }
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::relu(x), 8); }, off);
}

TEST_CASE("matmul gradients, plain and batched") {
    Tensor<double> a = tu::random_tensor<double>({3, 4}, 111);
    Tensor<double> b = tu::random_tensor<double>({4, 5}, 112);
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::matmul(x, b), 11); },
                   a);
    expect_grad_ok([&](const Tensor<double>& x) { return tu::weighted_sum(ops::matmul(a, x), 12); },
                   b);

    Tensor<double> batch = tu::random_tensor<double>({2, 3, 4}, 113);
    expect_grad_ok(
        [&](const Tensor<double>& x) { return tu::weighted_sum(ops::matmul(batch, x), 13); }, b);
    expect_grad_ok(
        [&](const Tensor<double>& x) { return tu::weighted_sum(ops::matmul(x, b), 14); }, batch);
}

TEST_CASE("bias add gradients") {
    Tensor<double> x = tu::random_tensor<double>({5, 3}, 121);
    Tensor<double> rb = tu::random_tensor<double>({3}, 122);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::add_row_bias(t, rb), 21); }, x);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::add_row_bias(x, t), 22); }, rb);

    Tensor<double> map = tu::random_tensor<double>({3, 4, 4}, 123);
    Tensor<double> cb = tu::random_tensor<double>({3}, 124);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::add_channel_bias(t, cb), 23); },
        map);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::add_channel_bias(map, t), 24); },
        cb);
}

TEST_CASE("softmax gradient") {
    Tensor<double> x = tu::random_tensor<double>({4, 6}, 131, 2.0);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::softmax_lastdim(t), 31); }, x);
}

TEST_CASE("conv2d gradients") {
    Tensor<double> x = tu::random_tensor<double>({2, 6, 5}, 141);
    Tensor<double> k = tu::random_tensor<double>({3, 2, 3, 3}, 142);
    for (std::int64_t stride : {1, 2}) {
        for (std::int64_t pad : {0, 1}) {
            expect_grad_ok(
                [&, stride, pad](const Tensor<double>& t) {
                    return tu::weighted_sum(ops::conv2d(t, k, stride, pad), 41 + stride + pad);
                },
                x);
            expect_grad_ok(
                [&, stride, pad](const Tensor<double>& t) {
                    return tu::weighted_sum(ops::conv2d(x, t, stride, pad), 45 + stride + pad);
                },
                k);
        }
    }
}

TEST_CASE("bilinear resize gradient, up and down") {
    Tensor<double> x = tu::random_tensor<double>({2, 4, 5}, 151);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::bilinear_resize(t, 7, 9), 51); },
        x);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::bilinear_resize(t, 2, 3), 52); },
        x);
}

TEST_CASE("masked attention gradients") {
    const std::int64_t mq = 3, mk = 5, d = 8;
    Mask mask(mq, mk, true);
    mask.set(0, 1, false);
    mask.set(2, 3, false);
    mask.set(2, 4, false);
    Tensor<double> q = tu::random_tensor<double>({mq, d}, 161);
    Tensor<double> k = tu::random_tensor<double>({mk, d}, 162);
    Tensor<double> v = tu::random_tensor<double>({mk, d}, 163);
    Tensor<double> wo = tu::random_tensor<double>({d, d}, 164, 0.5);
    Tensor<double> bo = tu::random_tensor<double>({d}, 165, 0.1);

    auto attn = [&](const Tensor<double>& qq, const Tensor<double>& kk, const Tensor<double>& vv,
                    const Tensor<double>& ww, const Tensor<double>& bb) {
        return ops::masked_attention(qq, kk, vv, &mask, 2, ww, bb);
    };
    expect_grad_ok([&](const Tensor<double>& t) { return tu::weighted_sum(attn(t, k, v, wo, bo), 61); }, q);
    expect_grad_ok([&](const Tensor<double>& t) { return tu::weighted_sum(attn(q, t, v, wo, bo), 62); }, k);
    expect_grad_ok([&](const Tensor<double>& t) { return tu::weighted_sum(attn(q, k, t, wo, bo), 63); }, v);
    expect_grad_ok([&](const Tensor<double>& t) { return tu::weighted_sum(attn(q, k, v, t, bo), 64); }, wo);
    expect_grad_ok([&](const Tensor<double>& t) { return tu::weighted_sum(attn(q, k, v, wo, t), 65); }, bo);

    SUBCASE("self attention shares one node three ways") {
        Tensor<double> x = tu::random_tensor<double>({mk, d}, 166);
        Mask self_mask(mk, mk, true);
        self_mask.set(1, 2, false);
        expect_grad_ok(
            [&](const Tensor<double>& t) {
                return tu::weighted_sum(ops::masked_attention(t, t, t, &self_mask, 2, wo, bo), 66);
            },
            x);
    }
}

TEST_CASE("normalization gradients") {
    Tensor<double> x = tu::random_tensor<double>({4, 6}, 171);
    Tensor<double> gamma = tu::random_tensor<double>({6}, 172, 0.5);
    Tensor<double> beta = tu::random_tensor<double>({6}, 173, 0.5);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::layer_norm(t, gamma, beta), 71); },
        x);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::layer_norm(x, t, beta), 72); },
        gamma);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::layer_norm(x, gamma, t), 73); },
        beta);

    Tensor<double> map = tu::random_tensor<double>({3, 4, 5}, 174);
    Tensor<double> cg = tu::random_tensor<double>({3}, 175, 0.5);
    Tensor<double> cb = tu::random_tensor<double>({3}, 176, 0.5);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::channel_norm(t, cg, cb), 74); },
        map);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::channel_norm(map, t, cb), 75); },
        cg);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::channel_norm(map, cg, t), 76); },
        cb);
}

TEST_CASE("layout op gradients") {
    Tensor<double> x = tu::random_tensor<double>({4, 6}, 181);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::transpose2d(t), 81); }, x);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::reshape(t, {2, 12}), 82); }, x);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::slice_rows(t, 1, 3), 83); }, x);

    Tensor<double> y = tu::random_tensor<double>({2, 6}, 182);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::concat_rows(t, y), 84); }, x);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::concat_rows(x, t), 85); }, y);

    Tensor<double> map = tu::random_tensor<double>({3, 2, 4}, 183);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::map_to_tokens(t), 86); }, map);
    Tensor<double> tokens = tu::random_tensor<double>({8, 3}, 184);
    expect_grad_ok(
        [&](const Tensor<double>& t) { return tu::weighted_sum(ops::tokens_to_map(t, 2, 4), 87); },
        tokens);
}
