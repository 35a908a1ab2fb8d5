#pragma once

// Float-precision model wrappers behind a single interface the training
// loop, evaluation and experiment protocols drive. Besides the full network
// there are the two reduced variants the ablation protocol needs: a single
// sub-encoder with a pooled linear head, and the transformer block applied
// directly to the raw image.

#include <cstdint>
#include <memory>
#include <string>

#include "cect/checkpoint.hpp"
#include "cect/model.hpp"

namespace cect {

class TrainableModel {
public:
    virtual ~TrainableModel() = default;

    virtual Tensor forward(const Tensor& images) = 0;
    // Stable enumeration order; handles share storage with the model.
    virtual NamedParams<float> parameters() = 0;
    virtual std::uint64_t digest() const = 0;
    virtual int resolution() const = 0;

    void save(const std::string& path) {
        auto p = parameters();
        save_checkpoint(path, digest(), p);
    }
    void load(const std::string& path) {
        auto p = parameters();
        load_checkpoint(path, digest(), p);
    }
};

class CectModel : public TrainableModel {
public:
    CectModel(const CectConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = Rng(seed).split("init");
        params_ = init_cect_params<float>(cfg_, rng);
    }

    Tensor forward(const Tensor& images) override { return cect_forward(images, params_, cfg_); }
    Tensor penultimate(const Tensor& images) {
        return extract_penultimate(images, params_, cfg_);
    }
    NamedParams<float> parameters() override { return named_parameters(params_); }
    std::uint64_t digest() const override { return cfg_.digest(); }
    int resolution() const override { return cfg_.input_resolution; }

    const CectConfig& config() const { return cfg_; }
    CectParams<float>& params() { return params_; }

private:
    CectConfig cfg_;
    CectParams<float> params_;
};

// One sub-encoder (SE1..SE3) + global average pooling + linear head.
class EncoderClassifier : public TrainableModel {
public:
    EncoderClassifier(const CectConfig& cfg, int encoder_index, std::uint64_t seed)
        : cfg_(cfg), index_(encoder_index) {
        if (encoder_index < 0 || encoder_index > 2)
            throw ContractError("EncoderClassifier: encoder index must be 0..2");
        cfg_.validate();
        Rng rng = Rng(seed).split("init");
        const int stage_counts[3] = {3, 2, 1};
        const std::int64_t width = cfg_.encoder_channels[static_cast<std::size_t>(encoder_index)];
        std::int64_t in_ch = cfg_.input_channels;
        for (int s = 0; s < stage_counts[encoder_index]; ++s) {
            EncoderStage<float> st;
            st.conv_a = init_conv<float>(width, in_ch, 3, rng);
            st.conv_b = init_conv<float>(width, width, 3, rng);
            enc_.stages.push_back(std::move(st));
            in_ch = width;
        }
        head_ = init_linear<float>(width, 2, rng);
    }

    Tensor forward(const Tensor& images) override {
        auto f = sub_encoder_forward(images, enc_);
        const std::int64_t N = f.dim(0), C = f.dim(1), hw = f.dim(2) * f.dim(3);
        auto pooled = mean_axis1(permute(reshape(f, {N, C, hw}), {0, 2, 1}));
        return linear(pooled, head_.weight, head_.bias);
    }

    NamedParams<float> parameters() override {
        NamedParams<float> out;
        const std::string base = "encoder" + std::to_string(index_ + 1);
        for (std::size_t s = 0; s < enc_.stages.size(); ++s) {
            collect_conv(out, base + ".stage" + std::to_string(s) + ".conv_a", enc_.stages[s].conv_a);
            collect_conv(out, base + ".stage" + std::to_string(s) + ".conv_b", enc_.stages[s].conv_b);
        }
        collect_linear(out, base + ".head", head_);
        return out;
    }

    std::uint64_t digest() const override {
        return Rng::fnv1a64(cfg_.canonical_string() + ";variant=encoder" + std::to_string(index_ + 1));
    }
    int resolution() const override { return cfg_.input_resolution; }

private:
    CectConfig cfg_;
    int index_;
    SubEncoderParams<float> enc_;
    LinearParams<float> head_;
};

// The transformer classifier alone, patch-embedding the raw image.
class TcbClassifier : public TrainableModel {
public:
    TcbClassifier(const CectConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = Rng(seed).split("init");
        tcb_ = init_tcb<float>(cfg_, cfg_.input_channels, rng);
    }

    Tensor forward(const Tensor& images) override { return tcb_forward(images, tcb_, cfg_); }

    NamedParams<float> parameters() override {
        NamedParams<float> out;
        collect_tcb(out, tcb_);
        return out;
    }

    std::uint64_t digest() const override {
        return Rng::fnv1a64(cfg_.canonical_string() + ";variant=tcb_only");
    }
    int resolution() const override { return cfg_.input_resolution; }

private:
    CectConfig cfg_;
    TcbParams<float> tcb_;
};

} // namespace cect
