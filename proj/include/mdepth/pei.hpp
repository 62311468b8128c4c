#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mdepth/encoder.hpp"
#include "mdepth/enhancer.hpp"
#include "mdepth/nn.hpp"
#include "mdepth/ops.hpp"

namespace mdepth {

// Stage switches mirroring the four ablation axes: query extraction from
// features (partition), the frozen-block pass (enhance), pattern-token
// injection and image-token injection. Every disabled stage is an exact
// identity on its tensor.
struct PeiToggles {
    bool partition = true;
    bool enhance = true;
    bool inject_patterns = true;
    bool inject_image = true;

    bool any() const { return partition || enhance || inject_patterns || inject_image; }
};

// Per-level pattern machinery captured during a forward pass: identity
// embeddings, chained semantics, the queries they sum to, conditional
// patterns, and the block-enhanced patterns.
template <class T>
struct PatternState {
    Tensor<T> identity;
    Tensor<T> semantic;
    Tensor<T> queries;
    Tensor<T> conditional;
    Tensor<T> enhanced;
};

// Attend/block matrix over a (patterns ++ image tokens) sequence: image rows
// attend everywhere, pattern row i attends to itself and to every image
// column, never to another pattern.
inline Mask build_mask(std::int64_t n_patterns, std::int64_t n_tokens) {
    if (n_tokens < 1) throw UsageError("build_mask: image tokens are mandatory (M >= 1)");
    if (n_patterns < 0) throw UsageError("build_mask: pattern count must be >= 0");
    const std::int64_t total = n_patterns + n_tokens;
    Mask mask(total, total, true);
    for (std::int64_t i = 0; i < n_patterns; ++i) {
        for (std::int64_t j = 0; j < n_patterns; ++j) {
            if (i != j) mask.set(i, j, false);
        }
    }
    return mask;
}

// Partition-Enhance-Inject: extracts conditional patterns from each pyramid
// level, co-processes them with image tokens through the frozen blocks, and
// injects both enhanced token kinds back into the pyramid. Pattern arrays
// live in the enhancer width D; each level has learned projections between
// its channel width and D.
template <class T>
class PeiModule {
public:
    PeiModule() = default;

    PeiModule(ParamStore<T>& store, const std::string& prefix, std::int64_t n_patterns,
              std::vector<std::int64_t> channels, const Enhancer<T>* enhancer, PeiToggles toggles)
        : n_(n_patterns),
          channels_(std::move(channels)),
          enhancer_(enhancer),
          toggles_(toggles) {
        if (n_ < 1) throw UsageError("pattern count must be >= 1 (stages are disabled via toggles, not N=0)");
        if (channels_.size() != 4) throw ConfigError("pei needs 4 channel widths");
        const auto& cfg = enhancer_->config();
        d_ = cfg.width;
        heads_ = cfg.heads;
        for (int l = 0; l < 4; ++l) {
            const std::int64_t c = channels_[static_cast<std::size_t>(l)];
            if (c % heads_ != 0) {
                throw ConfigError("pyramid channel width " + std::to_string(c) +
                                  " must be divisible by attention heads " + std::to_string(heads_));
            }
            const std::string lp = prefix + ".l" + std::to_string(l + 1);
            identity_[l] = store.create(lp + ".identity", {n_, d_}, 0.02, true);
            part_cross_[l] = MultiheadAttention<T>(store, lp + ".partition.cross", d_, c, d_, heads_, true);
            part_self_[l] = MultiheadAttention<T>(store, lp + ".partition.self", d_, d_, d_, heads_, true);
            part_liner_[l] = Linear<T>(store, lp + ".partition.liner", d_, d_, true);
            injp_liner_[l] = Linear<T>(store, lp + ".inject_pt.liner", d_, c, true);
            injp_self_[l] = MultiheadAttention<T>(store, lp + ".inject_pt.self", c, c, c, heads_, true);
            injp_cross_[l] = MultiheadAttention<T>(store, lp + ".inject_pt.cross", c, c, c, heads_, true);
            inji_proj_[l] = Linear<T>(store, lp + ".inject_it.proj", d_, c, true);
        }
    }

    std::int64_t pattern_count() const { return n_; }
    std::int64_t width() const { return d_; }
    const PeiToggles& toggles() const { return toggles_; }
    void set_toggles(PeiToggles t) { toggles_ = t; }
    const Tensor<T>& identity_embedding(int l) const { return identity_[l - 1]; }

    // Conditional patterns from one feature map: cross-attention with the
    // queries against the (projected) flattened features, self-attention
    // across the N patterns, then a linear projection.
    Tensor<T> partition(int l, const Tensor<T>& feature_map, const Tensor<T>& queries) const {
        check_level(l);
        if (queries.rank() != 2 || queries.extent(0) != n_ || queries.extent(1) != d_) {
            throw UsageError("partition: queries must be " + std::to_string(n_) + "x" +
                             std::to_string(d_) + ", got " + shape_str(queries.shape()));
        }
        Tensor<T> kv = ops::map_to_tokens(feature_map);
        Tensor<T> crossed = part_cross_[l - 1].apply(queries, kv);
        Tensor<T> selfed = part_self_[l - 1].apply(crossed, crossed);
        return part_liner_[l - 1].apply(selfed);
    }

    // Concatenates patterns ahead of the image tokens, runs the level's
    // frozen block under the pattern-isolation mask, and splits the result.
    // With the enhance stage off both inputs pass through unchanged (the
    // stream still advances a level).
    std::pair<Tensor<T>, TokenStream<T>> enhance(int l, const Tensor<T>& patterns,
                                                 const TokenStream<T>& stream) const {
        check_level(l);
        TokenStream<T> next = stream;
        next.level = stream.level + 1;
        if (!toggles_.enhance) {
            return {patterns, next};
        }
        const std::int64_t m = stream.count();
        Tensor<T> combined = ops::concat_rows(patterns, stream.tokens);
        Mask mask = build_mask(n_, m);
        Tensor<T> out = enhancer_->run_block(l, combined, mask);
        Tensor<T> enhanced = ops::slice_rows(out, 0, n_);
        next.tokens = ops::slice_rows(out, n_, n_ + m);
        return {enhanced, next};
    }

    // Queries for the next level: enhanced patterns plus the next identity.
    static Tensor<T> chain(const Tensor<T>& enhanced, const Tensor<T>& identity) {
        if (enhanced.shape() != identity.shape()) {
            throw UsageError("chain: shape mismatch " + shape_str(enhanced.shape()) + " vs " +
                             shape_str(identity.shape()));
        }
        return ops::add(enhanced, identity);
    }

    // Residual pattern injection: project the enhanced patterns into the
    // level width, self-attend, then cross-attend with the flattened feature
    // map as queries and add the result back onto the map.
    Tensor<T> inject_patterns(int l, const Tensor<T>& feature_map, const Tensor<T>& enhanced) const {
        check_level(l);
        if (!toggles_.inject_patterns) return feature_map;
        if (enhanced.rank() != 2 || enhanced.extent(1) != d_) {
            throw UsageError("inject_patterns: patterns must be NxD, got " +
                             shape_str(enhanced.shape()));
        }
        Tensor<T> proj = injp_liner_[l - 1].apply(enhanced);
        Tensor<T> selfed = injp_self_[l - 1].apply(proj, proj);
        Tensor<T> feature_tokens = ops::map_to_tokens(feature_map);
        Tensor<T> crossed = injp_cross_[l - 1].apply(feature_tokens, selfed);
        Tensor<T> as_map = ops::tokens_to_map(crossed, feature_map.extent(1), feature_map.extent(2));
        return ops::add(feature_map, as_map);
    }

    // Residual image-token injection: final tokens back on their grid,
    // projected to the level width, resized to the level extents, added.
    Tensor<T> inject_image_tokens(int l, const Tensor<T>& fbar, const TokenStream<T>& final_stream) const {
        check_level(l);
        if (!toggles_.inject_image) return fbar;
        if (!final_stream.final_tag) {
            throw UsageError("inject_image_tokens requires the final token stream");
        }
        if (final_stream.grid_h < 1 || final_stream.grid_w < 1 ||
            final_stream.count() != final_stream.tokens.extent(0)) {
            throw UsageError("inject_image_tokens: token grid metadata missing or inconsistent");
        }
        Tensor<T> proj = inji_proj_[l - 1].apply(final_stream.tokens);
        Tensor<T> grid = ops::tokens_to_map(proj, final_stream.grid_h, final_stream.grid_w);
        Tensor<T> resized = ops::bilinear_resize(grid, fbar.extent(1), fbar.extent(2));
        return ops::add(fbar, resized);
    }

    // Full pass: per level partition -> enhance -> chain, then final token
    // extraction, then both injections per level. Disabled stages leave their
    // tensors untouched, so the all-off configuration is the identity.
    PyramidFeatures<T> forward(const PyramidFeatures<T>& pyramid, const Tensor<T>& image,
                               std::array<PatternState<T>, 4>* trace = nullptr) const {
        const bool need_patterns = toggles_.enhance || toggles_.inject_patterns;
        const bool need_stream = toggles_.enhance || toggles_.inject_image;
        if (!need_patterns && !need_stream) return pyramid;

        std::array<Tensor<T>, 4> enhanced_patterns;
        TokenStream<T> stream;
        if (need_stream) stream = enhancer_->patch_embed(image);

        if (need_patterns) {
            Tensor<T> semantic = Tensor<T>::zeros({n_, d_});
            for (int l = 1; l <= 4; ++l) {
                Tensor<T> queries = chain(semantic, identity_[l - 1]);
                Tensor<T> patterns =
                    toggles_.partition ? partition(l, pyramid.level(l), queries) : queries;
                Tensor<T> enhanced;
                if (need_stream) {
                    auto [p_bar, next] = enhance(l, patterns, stream);
                    enhanced = p_bar;
                    stream = next;
                } else {
                    // Enhance is off and no stream is carried; the bypass
                    // keeps the patterns as they are.
                    enhanced = patterns;
                }
                if (trace) {
                    auto& slot = (*trace)[static_cast<std::size_t>(l - 1)];
                    slot.identity = identity_[l - 1];
                    slot.semantic = semantic;
                    slot.queries = queries;
                    slot.conditional = patterns;
                    slot.enhanced = enhanced;
                }
                enhanced_patterns[static_cast<std::size_t>(l - 1)] = enhanced;
                semantic = enhanced;
            }
        } else if (need_stream) {
            // Image-token injection with the enhance stage off: the stream
            // bypasses the blocks and only advances to the extraction point.
            stream.level = 5;
        }

        TokenStream<T> final_stream;
        if (need_stream && toggles_.inject_image) final_stream = enhancer_->final_tokens(stream);

        PyramidFeatures<T> out;
        for (int l = 1; l <= 4; ++l) {
            Tensor<T> fbar = toggles_.inject_patterns
                                 ? inject_patterns(l, pyramid.level(l),
                                                   enhanced_patterns[static_cast<std::size_t>(l - 1)])
                                 : pyramid.level(l);
            out.level(l) = toggles_.inject_image ? inject_image_tokens(l, fbar, final_stream) : fbar;
        }
        return out;
    }

private:
    static void check_level(int l) {
        if (l < 1 || l > 4) throw UsageError("pei level must be 1..4");
    }

    std::int64_t n_ = 0;
    std::int64_t d_ = 0;
    std::int64_t heads_ = 0;
    std::vector<std::int64_t> channels_;
    const Enhancer<T>* enhancer_ = nullptr;
    PeiToggles toggles_;

    std::array<Tensor<T>, 4> identity_;
    std::array<MultiheadAttention<T>, 4> part_cross_;
    std::array<MultiheadAttention<T>, 4> part_self_;
    std::array<Linear<T>, 4> part_liner_;
    std::array<Linear<T>, 4> injp_liner_;
    std::array<MultiheadAttention<T>, 4> injp_self_;
    std::array<MultiheadAttention<T>, 4> injp_cross_;
    std::array<Linear<T>, 4> inji_proj_;
};

}  // namespace mdepth
