#include "sarfuse/encoders.hpp"

#include <array>
#include <stdexcept>

namespace sarfuse {

EncoderVariant encoder_variant_from_string(const std::string& s) {
    if (s == "resnet18") return EncoderVariant::ResNet18;
    if (s == "resnet34") return EncoderVariant::ResNet34;
    if (s == "resnet18attn" || s == "resnet18-attn") return EncoderVariant::ResNet18Attn;
    throw std::invalid_argument("unknown encoder variant: " + s);
}

std::string to_string(EncoderVariant v) {
    switch (v) {
        case EncoderVariant::ResNet18: return "resnet18";
        case EncoderVariant::ResNet34: return "resnet34";
        case EncoderVariant::ResNet18Attn: return "resnet18attn";
    }
    throw std::logic_error("bad variant");
}

namespace {

constexpr int kStageWidths[4] = {64, 128, 256, 512};

std::array<int, 4> blocks_for(EncoderVariant v) {
    if (v == EncoderVariant::ResNet34) return {3, 4, 6, 3};
    return {2, 2, 2, 2};
}

} // namespace

Encoder::Encoder(EncoderVariant variant, uint64_t seed, BatchNormOpts bn)
    : variant_(variant), seed_(seed) {
    Rng rng(derive_seed(seed, 0x656e63));
    stem_conv_ = std::make_unique<Conv2d>(kEncoderInChannels, 64, 7, 2, 3, /*bias=*/false, rng);
    stem_bn_ = std::make_unique<BatchNorm2d>(64, rng, bn);
    register_module("conv1", stem_conv_.get());
    register_module("bn1", stem_bn_.get());

    const auto counts = blocks_for(variant);
    int in_ch = 64;
    for (int s = 0; s < 4; ++s) {
        const int out_ch = kStageWidths[s];
        for (int b = 0; b < counts[size_t(s)]; ++b) {
            const int stride = (s > 0 && b == 0) ? 2 : 1;
            stages_[s].blocks.push_back(std::make_unique<DownBlock>(in_ch, out_ch, stride, rng, bn));
            register_module("layer" + std::to_string(s + 1) + "." + std::to_string(b),
                            stages_[s].blocks.back().get());
            in_ch = out_ch;
        }
    }
    if (variant == EncoderVariant::ResNet18Attn) {
        attn1_ = std::make_unique<AttnBlock>(256, rng);
        attn2_ = std::make_unique<AttnBlock>(512, rng);
        register_module("attn1", attn1_.get());
        register_module("attn2", attn2_.get());
    }
}

Var Encoder::forward(Tape& t, Var x) {
    Var h = t.relu(stem_bn_->forward(t, stem_conv_->forward(t, x)));
    for (int s = 0; s < 4; ++s) {
        for (auto& blk : stages_[s].blocks) h = blk->forward(t, h);
        if (s == 2 && attn1_) h = attn1_->forward(t, h);
        if (s == 3 && attn2_) h = attn2_->forward(t, h);
    }
    return h;
}

std::map<std::string, int64_t> Encoder::layer_parameter_counts() const {
    std::map<std::string, int64_t> out;
    out["conv1"] = stem_conv_->parameter_count();
    out["bn1"] = stem_bn_->parameter_count();
    for (int s = 0; s < 4; ++s) {
        int64_t n = 0;
        for (auto& blk : stages_[s].blocks) n += blk->parameter_count();
        out["layer" + std::to_string(s + 1)] = n;
    }
    if (attn1_) out["attn1"] = attn1_->parameter_count();
    if (attn2_) out["attn2"] = attn2_->parameter_count();
    return out;
}

void Encoder::set_attention_gates(float value) {
    if (attn1_) attn1_->gamma.value.fill(value);
    if (attn2_) attn2_->gamma.value.fill(value);
}

DeconvHeader::DeconvHeader(int out_channels, uint64_t seed, BatchNormOpts bn) : out_channels_(out_channels) {
    if (out_channels < 1) throw std::invalid_argument("DeconvHeader: out_channels must be >= 1");
    Rng rng(derive_seed(seed, 0x686472));
    int ch = kEmbeddingChannels;
    for (int i = 0; i < 4; ++i) {
        ups_.push_back(std::make_unique<UpBlock>(ch, rng, bn));
        register_module("layer" + std::to_string(i + 1), ups_.back().get());
        ch /= 2;
    }
    head_ = std::make_unique<Conv2d>(ch, out_channels, 1, 1, 0, /*bias=*/true, rng);
    register_module("conv1", head_.get());
}

Var DeconvHeader::forward(Tape& t, Var x) {
    Var h = x;
    for (auto& up : ups_) h = up->forward(t, h);
    return head_->forward(t, h);
}

std::map<std::string, int64_t> DeconvHeader::layer_parameter_counts() const {
    std::map<std::string, int64_t> out;
    for (size_t i = 0; i < ups_.size(); ++i)
        out["layer" + std::to_string(i + 1)] = ups_[i]->parameter_count();
    out["conv1"] = head_->parameter_count();
    return out;
}

SegmentationModel::SegmentationModel(EncoderVariant variant, int num_classes, uint64_t seed, BatchNormOpts bn)
    : encoder_(variant, derive_seed(seed, 1), bn), header_(num_classes, derive_seed(seed, 2), bn) {
    register_module("encoder", &encoder_);
    register_module("header", &header_);
}

Var SegmentationModel::forward(Tape& t, Var x) {
    return header_.forward(t, encoder_.forward(t, x));
}

std::unique_ptr<Encoder> build_encoder(EncoderVariant variant, uint64_t seed, BatchNormOpts bn) {
    return std::make_unique<Encoder>(variant, seed, bn);
}

std::unique_ptr<DeconvHeader> build_deconv_header(int out_channels, uint64_t seed, BatchNormOpts bn) {
    return std::make_unique<DeconvHeader>(out_channels, seed, bn);
}

std::unique_ptr<AttnBlock> build_attn_block(int channels, uint64_t seed) {
    Rng rng(derive_seed(seed, 0x61746e));
    return std::make_unique<AttnBlock>(channels, rng);
}

int64_t count_parameters(const Module& m) { return m.parameter_count(); }

Tensor forward_embed(Encoder& enc, const Tensor& batch) {
    const auto& s = batch.shape();
    if (s.size() != 4 || s[1] != kEncoderInChannels || s[2] != kEncoderInputSize || s[3] != kEncoderInputSize)
        throw std::invalid_argument("forward_embed: expected [B,14,128,128], got " + shape_to_string(s));
    Tape t;
    Var out = enc.forward(t, t.constant(batch));
    Tensor result = t.value(out);
    if (!result.all_finite()) throw std::runtime_error("forward_embed: non-finite output");
    return result;
}

Tensor pool_embedding(const Tensor& latent) {
    const auto& s = latent.shape();
    if (s.size() != 4) throw std::invalid_argument("pool_embedding: expected [B,C,H,W]");
    const int b = s[0], c = s[1];
    const int64_t sp = int64_t(s[2]) * s[3];
    Tensor out({b, c});
    for (int n = 0; n < b; ++n)
        for (int ch = 0; ch < c; ++ch) {
            const float* p = latent.data() + (int64_t(n) * c + ch) * sp;
            double sum = 0.0;
            for (int64_t i = 0; i < sp; ++i) sum += double(p[i]);
            out[int64_t(n) * c + ch] = float(sum / double(sp));
        }
    return out;
}

} // namespace sarfuse
