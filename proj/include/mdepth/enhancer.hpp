#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mdepth/nn.hpp"
#include "mdepth/ops.hpp"
#include "mdepth/tensor_io.hpp"

namespace mdepth {

// Image tokens at one point of the enhancer pipeline. level runs 1..4 while
// blocks remain; 5 marks the stream after block 4, which final_tokens()
// converts into the `final` stream used for injection.
template <class T>
struct TokenStream {
    Tensor<T> tokens;  // M x D
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;
    int level = 1;
    bool final_tag = false;

    std::int64_t count() const { return grid_h * grid_w; }
};

struct EnhancerConfig {
    std::int64_t patch = 14;
    std::int64_t width = 64;
    std::int64_t heads = 4;
    std::int64_t layers = 8;

    void validate() const {
        if (patch < 1) throw ConfigError("enhancer patch size must be >= 1");
        if (width < 1 || heads < 1 || width % heads != 0) {
            throw ConfigError("enhancer width " + std::to_string(width) +
                              " must be divisible by heads " + std::to_string(heads));
        }
        if (layers < 4) throw ConfigError("enhancer needs at least 4 layers to form 4 blocks");
    }

    // Four contiguous groups covering 1..layers in order, sizes differing by
    // at most one (earlier blocks take the remainder).
    std::array<std::pair<std::int64_t, std::int64_t>, 4> block_ranges() const {
        std::array<std::pair<std::int64_t, std::int64_t>, 4> r;
        const std::int64_t base = layers / 4, rem = layers % 4;
        std::int64_t at = 0;
        for (int b = 0; b < 4; ++b) {
            const std::int64_t size = base + (b < rem ? 1 : 0);
            r[static_cast<std::size_t>(b)] = {at, at + size};
            at += size;
        }
        return r;
    }
};

// One pre-norm transformer layer: x + Attn(LN(x)) then x + MLP(LN(x)).
template <class T>
class TransformerLayer {
public:
    TransformerLayer() = default;

    TransformerLayer(ParamStore<T>& store, const std::string& prefix, std::int64_t width,
                     std::int64_t heads, bool trainable, double stddev)
        : norm1_(store, prefix + ".norm1", width, trainable),
          attn_(store, prefix + ".attn", width, width, width, heads, trainable, stddev),
          norm2_(store, prefix + ".norm2", width, trainable),
          fc1_(store, prefix + ".mlp.fc1", width, 4 * width, trainable, stddev),
          fc2_(store, prefix + ".mlp.fc2", 4 * width, width, trainable, stddev) {}

    Tensor<T> apply(const Tensor<T>& x, const Mask* mask) const {
        Tensor<T> normed = ops::layer_norm(x, norm1_.gamma, norm1_.beta);
        Tensor<T> h = ops::add(x, attn_.apply(normed, normed, mask));
        Tensor<T> normed2 = ops::layer_norm(h, norm2_.gamma, norm2_.beta);
        return ops::add(h, fc2_.apply(ops::gelu(fc1_.apply(normed2))));
    }

    // Attention sublayer only (x + Attn(LN(x))); the granularity at which
    // mask isolation is exact.
    Tensor<T> apply_attention_sublayer(const Tensor<T>& x, const Mask* mask) const {
        Tensor<T> normed = ops::layer_norm(x, norm1_.gamma, norm1_.beta);
        return ops::add(x, attn_.apply(normed, normed, mask));
    }

private:
    NormParams<T> norm1_;
    MultiheadAttention<T> attn_;
    NormParams<T> norm2_;
    Linear<T> fc1_, fc2_;
};

// The frozen ViT-style branch: patch embedding plus a layer stack partitioned
// into four blocks. Weights are random at construction (a stand-in for a
// pretrained backbone), may be replaced from a WTNS1 manifest, and never
// receive gradients; gradients still flow through them to the inputs.
template <class T>
class Enhancer {
public:
    Enhancer() = default;

    Enhancer(ParamStore<T>& store, const std::string& prefix, const EnhancerConfig& cfg,
             std::int64_t base_grid_h, std::int64_t base_grid_w)
        : cfg_(cfg), base_grid_h_(base_grid_h), base_grid_w_(base_grid_w) {
        cfg_.validate();
        const std::size_t first = store.named().size();
        const double stddev = 0.02;

        patch_kernel_ = store.create(prefix + ".patch.weight",
                                     {cfg_.width, 3, cfg_.patch, cfg_.patch},
                                     std::sqrt(1.0 / static_cast<double>(3 * cfg_.patch * cfg_.patch)),
                                     false);
        patch_bias_ = store.create(prefix + ".patch.bias", {cfg_.width}, 0.0, false);
        pos_embed_ = store.create(prefix + ".pos_embed", {base_grid_h * base_grid_w, cfg_.width},
                                  stddev, false);
        layers_.reserve(static_cast<std::size_t>(cfg_.layers));
        for (std::int64_t i = 0; i < cfg_.layers; ++i) {
            layers_.emplace_back(store, prefix + ".layer" + std::to_string(i), cfg_.width,
                                 cfg_.heads, false, stddev);
        }
        // Keep our own (name, tensor) view for checksumming and loading.
        for (std::size_t i = first; i < store.named().size(); ++i) params_.push_back(store.named()[i]);
    }

    const EnhancerConfig& config() const { return cfg_; }

    TokenStream<T> patch_embed(const Tensor<T>& image) const {
        if (image.rank() != 3 || image.extent(0) != 3) {
            throw ConfigError("patch_embed input must be 3xHxW, got " + shape_str(image.shape()));
        }
        const std::int64_t h = image.extent(1), w = image.extent(2);
        if (h % cfg_.patch != 0 || w % cfg_.patch != 0) {
            throw ConfigError("patch_embed input " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by patch size " + std::to_string(cfg_.patch));
        }
        const std::int64_t gh = h / cfg_.patch, gw = w / cfg_.patch;
        Tensor<T> grid = ops::conv2d(image, patch_kernel_, cfg_.patch, 0);
        grid = ops::add_channel_bias(grid, patch_bias_);
        Tensor<T> tokens = ops::map_to_tokens(grid);
        tokens = ops::add(tokens, positional_for(gh, gw));
        TokenStream<T> ts;
        ts.tokens = tokens;
        ts.grid_h = gh;
        ts.grid_w = gw;
        ts.level = 1;
        return ts;
    }

    // Runs block l (1..4) over a combined (patterns ++ image tokens) sequence
    // under the given mask; returns the full sequence in the same order.
    Tensor<T> run_block(int l, const Tensor<T>& combined, const Mask& mask) const {
        if (l < 1 || l > 4) throw UsageError("run_block: block index must be 1..4");
        if (combined.rank() != 2 || combined.extent(1) != cfg_.width) {
            throw UsageError("run_block: sequence width " + shape_str(combined.shape()) +
                             " does not match enhancer width " + std::to_string(cfg_.width));
        }
        const auto range = cfg_.block_ranges()[static_cast<std::size_t>(l - 1)];
        Tensor<T> x = combined;
        for (std::int64_t i = range.first; i < range.second; ++i) {
            x = layers_[static_cast<std::size_t>(i)].apply(x, &mask);
        }
        return x;
    }

    const TransformerLayer<T>& layer(std::int64_t i) const {
        return layers_[static_cast<std::size_t>(i)];
    }

    // The image-token stream after block 4, retagged as the final extraction
    // point. Pattern rows are split off by the caller as part of running each
    // block, so the stream already holds exactly the M image tokens.
    TokenStream<T> final_tokens(const TokenStream<T>& stream) const {
        if (stream.level != 5) {
            throw UsageError("final_tokens requested before block 4 completed (stream at level " +
                             std::to_string(stream.level) + ")");
        }
        TokenStream<T> out = stream;
        out.final_tag = true;
        return out;
    }

    // Deterministic digest over every frozen buffer (names, shapes, payload).
    std::uint64_t frozen_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : params_) {
            h = fnv1a64(name, h);
            h = wtns_digest(t, h);
        }
        return h;
    }

    // Replaces every frozen tensor from a directory of WTNS1 files described
    // by manifest entries (name, file, shape). Names and shapes must cover
    // the frozen set exactly.
    void load_weights(const std::filesystem::path& dir);
    void save_weights(const std::filesystem::path& dir) const;

    const std::vector<std::pair<std::string, Tensor<T>>>& parameters() const { return params_; }

private:
    Tensor<T> positional_for(std::int64_t gh, std::int64_t gw) const {
        if (gh == base_grid_h_ && gw == base_grid_w_) return pos_embed_;
        // Grids other than the configured base interpolate the stored table.
        Tensor<T> as_map = ops::tokens_to_map(pos_embed_, base_grid_h_, base_grid_w_);
        return ops::map_to_tokens(ops::bilinear_resize(as_map, gh, gw));
    }

    EnhancerConfig cfg_;
    std::int64_t base_grid_h_ = 0, base_grid_w_ = 0;
    Tensor<T> patch_kernel_, patch_bias_, pos_embed_;
    std::vector<TransformerLayer<T>> layers_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
};

}  // namespace mdepth
