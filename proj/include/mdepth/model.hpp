#pragma once

#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mdepth/decoder.hpp"
#include "mdepth/encoder.hpp"
#include "mdepth/enhancer.hpp"
#include "mdepth/pei.hpp"

namespace mdepth {

struct ModelConfig {
    std::int64_t height = 224;
    std::int64_t width = 224;
    std::vector<std::int64_t> encoder_channels = {32, 64, 128, 256};
    EnhancerConfig enhancer;
    std::int64_t n_patterns = 8;
    PeiToggles toggles;
    std::int64_t decoder_mid = 32;
    double d_min = 0.1;
    double d_max = 10.0;

    void validate() const {
        enhancer.validate();
        const std::int64_t divisor = std::lcm<std::int64_t>(32, enhancer.patch);
        if (height < divisor || width < divisor || height % divisor != 0 || width % divisor != 0) {
            throw ConfigError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                              " must be divisible by lcm(32, patch) = " + std::to_string(divisor));
        }
        if (!(d_min > 0.0) || !(d_max > d_min)) {
            throw ConfigError("depth range requires 0 < d_min < d_max");
        }
        if (n_patterns < 1) throw ConfigError("pattern count must be >= 1");
        if (decoder_mid < 1) throw ConfigError("decoder mid width must be >= 1");
    }
};

// The dual-branch depth model: trainable encoder/decoder around the frozen
// enhancer, wired together by the PEI module.
template <class T>
class Model {
public:
    Model(std::uint64_t seed, const ModelConfig& cfg) : cfg_(cfg), store_(seed) {
        cfg_.validate();
        encoder_ = Encoder<T>(store_, "encoder", cfg_.encoder_channels);
        enhancer_ = std::make_unique<Enhancer<T>>(store_, "enhancer", cfg_.enhancer,
                                                  cfg_.height / cfg_.enhancer.patch,
                                                  cfg_.width / cfg_.enhancer.patch);
        pei_ = PeiModule<T>(store_, "pei", cfg_.n_patterns, cfg_.encoder_channels,
                            enhancer_.get(), cfg_.toggles);
        decoder_ = Decoder<T>(store_, "decoder", cfg_.encoder_channels, cfg_.decoder_mid,
                              static_cast<T>(cfg_.d_min), static_cast<T>(cfg_.d_max));
    }

    const ModelConfig& config() const { return cfg_; }

    DepthMap<T> forward(const Tensor<T>& image,
                        std::array<PatternState<T>, 4>* trace = nullptr) const {
        PyramidFeatures<T> pyramid = encoder_.encode(image);
        PyramidFeatures<T> enhanced = pei_.forward(pyramid, image, trace);
        return decoder_.decode(enhanced);
    }

    Encoder<T>& encoder() { return encoder_; }
    Enhancer<T>& enhancer() { return *enhancer_; }
    PeiModule<T>& pei() { return pei_; }
    Decoder<T>& decoder() { return decoder_; }
    const Encoder<T>& encoder() const { return encoder_; }
    const Enhancer<T>& enhancer() const { return *enhancer_; }
    const PeiModule<T>& pei() const { return pei_; }
    const Decoder<T>& decoder() const { return decoder_; }

    ParamStore<T>& store() { return store_; }
    const ParamStore<T>& store() const { return store_; }

    std::vector<Tensor<T>> trainable_parameters() const { return store_.trainable(); }
    std::uint64_t frozen_checksum() const { return enhancer_->frozen_checksum(); }

    void set_toggles(PeiToggles t) {
        cfg_.toggles = t;
        pei_.set_toggles(t);
    }

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    Encoder<T> encoder_;
    std::unique_ptr<Enhancer<T>> enhancer_;  // stable address for the PEI back-pointer
    PeiModule<T> pei_;
    Decoder<T> decoder_;
};

}  // namespace mdepth
