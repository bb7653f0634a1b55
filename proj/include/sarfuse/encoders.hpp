#pragma once

#include <map>
#include <memory>
#include <string>

#include "sarfuse/modules.hpp"

namespace sarfuse {

enum class EncoderVariant { ResNet18, ResNet34, ResNet18Attn };

EncoderVariant encoder_variant_from_string(const std::string& s);
std::string to_string(EncoderVariant v);

constexpr int kEncoderInChannels = 14;
constexpr int kEncoderInputSize = 128;
constexpr int kEmbeddingChannels = 512;
constexpr int kEmbeddingSize = 8;

// 14-channel ResNet encoder mapping [B,14,128,128] -> [B,512,8,8].
// Stem: conv7x7 s2 p3 (no bias) + BN + ReLU; four stages of DownBlocks at
// widths 64/128/256/512 with stride 2 entering stages 2-4. The Attn variant
// gates stage-3 and stage-4 outputs through self-attention blocks.
class Encoder : public Module {
public:
    Encoder(EncoderVariant variant, uint64_t seed, BatchNormOpts bn = {});
    Var forward(Tape& t, Var x) override;

    // Per-stage learnable-parameter totals keyed by the table row names
    // (conv1, bn1, layer1..layer4, attn1, attn2).
    std::map<std::string, int64_t> layer_parameter_counts() const;

    EncoderVariant variant() const { return variant_; }
    uint64_t seed() const { return seed_; }

    // Forces attention gates to a value (test hook; no-op for plain variants).
    void set_attention_gates(float value);

private:
    struct Stage {
        std::vector<std::unique_ptr<DownBlock>> blocks;
    };

    EncoderVariant variant_;
    uint64_t seed_;
    std::unique_ptr<Conv2d> stem_conv_;
    std::unique_ptr<BatchNorm2d> stem_bn_;
    Stage stages_[4];
    std::unique_ptr<AttnBlock> attn1_, attn2_;
};

// Four UpBlocks 512->256->128->64->32 (spatial 8 -> 128) followed by a biased
// 1x1 convolution to out_channels.
class DeconvHeader : public Module {
public:
    DeconvHeader(int out_channels, uint64_t seed, BatchNormOpts bn = {});
    Var forward(Tape& t, Var x) override;

    std::map<std::string, int64_t> layer_parameter_counts() const;
    int out_channels() const { return out_channels_; }

private:
    int out_channels_;
    std::vector<std::unique_ptr<UpBlock>> ups_;
    std::unique_ptr<Conv2d> head_;
};

// Encoder plus segmentation header trained end to end.
class SegmentationModel : public Module {
public:
    SegmentationModel(EncoderVariant variant, int num_classes, uint64_t seed, BatchNormOpts bn = {});
    Var forward(Tape& t, Var x) override;

    Encoder& encoder() { return encoder_; }
    DeconvHeader& header() { return header_; }
    std::vector<Parameter*> header_parameters() { return header_.parameters(); }

private:
    Encoder encoder_;
    DeconvHeader header_;
};

std::unique_ptr<Encoder> build_encoder(EncoderVariant variant, uint64_t seed, BatchNormOpts bn = {});
std::unique_ptr<DeconvHeader> build_deconv_header(int out_channels, uint64_t seed, BatchNormOpts bn = {});
std::unique_ptr<AttnBlock> build_attn_block(int channels, uint64_t seed);

int64_t count_parameters(const Module& m);

// Runs the encoder in its current train/eval mode on a [B,14,128,128] batch.
// Throws on shape mismatch or non-finite outputs.
Tensor forward_embed(Encoder& enc, const Tensor& batch);

// Global average over spatial positions: [B,C,H,W] -> [B,C].
Tensor pool_embedding(const Tensor& latent);

} // namespace sarfuse
