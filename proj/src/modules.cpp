#include "sarfuse/modules.hpp"

#include <cmath>
#include <stdexcept>

namespace sarfuse {

void Module::register_parameter(const std::string& name, Parameter* p) {
    params_.emplace_back(name, p);
}

void Module::register_buffer(const std::string& name, Tensor* b) {
    buffers_.emplace_back(name, b);
}

void Module::register_module(const std::string& name, Module* m) {
    children_.emplace_back(name, m);
}

std::vector<Parameter*> Module::parameters() {
    std::vector<Parameter*> out;
    for (auto& [name, p] : params_) out.push_back(p);
    for (auto& [name, m] : children_) {
        auto sub = m->parameters();
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

int64_t Module::parameter_count() const {
    int64_t n = 0;
    for (auto& [name, p] : params_) n += p->numel();
    for (auto& [name, m] : children_) n += m->parameter_count();
    return n;
}

void Module::set_training(bool on) {
    training_ = on;
    for (auto& [name, m] : children_) m->set_training(on);
}

void Module::zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
}

void Module::visit_tensors(const std::string& prefix,
                           const std::function<void(const std::string&, Tensor&, bool)>& fn) {
    const std::string dot = prefix.empty() ? "" : prefix + ".";
    for (auto& [name, p] : params_) fn(dot + name, p->value, true);
    for (auto& [name, b] : buffers_) fn(dot + name, *b, false);
    for (auto& [name, m] : children_) m->visit_tensors(dot + name, fn);
}

namespace {

Tensor he_normal(const std::vector<int>& shape, int fan_in, Rng& rng) {
    Tensor t(shape);
    const double std = std::sqrt(2.0 / double(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.normal(0.0, std));
    return t;
}

} // namespace

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int pad_, bool with_bias, Rng& rng)
    : weight("weight", he_normal({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng)),
      has_bias(with_bias),
      stride(stride_),
      pad(pad_) {
    register_parameter("weight", &weight);
    if (has_bias) {
        bias = Parameter("bias", Tensor::zeros({out_ch}));
        register_parameter("bias", &bias);
    }
}

Var Conv2d::forward(Tape& t, Var x) {
    return t.conv2d(x, t.param(weight), has_bias ? t.param(bias) : Var{}, stride, pad);
}

ConvTranspose2d::ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride_, bool with_bias, Rng& rng)
    : weight("weight", he_normal({in_ch, out_ch, kernel, kernel}, in_ch * kernel * kernel, rng)),
      has_bias(with_bias),
      stride(stride_) {
    register_parameter("weight", &weight);
    if (has_bias) {
        bias = Parameter("bias", Tensor::zeros({out_ch}));
        register_parameter("bias", &bias);
    }
}

Var ConvTranspose2d::forward(Tape& t, Var x) {
    return t.conv2d_transpose(x, t.param(weight), has_bias ? t.param(bias) : Var{}, stride, 0);
}

BatchNorm2d::BatchNorm2d(int channels, Rng&, BatchNormOpts opts_)
    : gamma("gamma", Tensor::full({channels}, 1.0f)),
      beta("beta", Tensor::zeros({channels})),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0f)),
      opts(opts_) {
    register_parameter("gamma", &gamma);
    register_parameter("beta", &beta);
    register_buffer("running_mean", &running_mean);
    register_buffer("running_var", &running_var);
}

Var BatchNorm2d::forward(Tape& t, Var x) {
    return t.batch_norm(x, t.param(gamma), t.param(beta), running_mean, running_var,
                        training_, opts.eps, opts.momentum);
}

DownBlock::DownBlock(int in_ch, int out_ch, int stride, Rng& rng, BatchNormOpts bn)
    : conv1(in_ch, out_ch, 3, stride, 1, /*bias=*/false, rng),
      bn1(out_ch, rng, bn),
      conv2(out_ch, out_ch, 3, 1, 1, /*bias=*/false, rng),
      bn2(out_ch, rng, bn) {
    register_module("conv1", &conv1);
    register_module("bn1", &bn1);
    register_module("conv2", &conv2);
    register_module("bn2", &bn2);
    if (in_ch != out_ch || stride != 1) {
        shortcut_conv = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, /*bias=*/false, rng);
        shortcut_bn = std::make_unique<BatchNorm2d>(out_ch, rng, bn);
        register_module("shortcut_conv", shortcut_conv.get());
        register_module("shortcut_bn", shortcut_bn.get());
    }
}

Var DownBlock::forward(Tape& t, Var x) {
    Var h = t.relu(bn1.forward(t, conv1.forward(t, x)));
    h = t.relu(bn2.forward(t, conv2.forward(t, h)));
    Var sc = shortcut_conv ? shortcut_bn->forward(t, shortcut_conv->forward(t, x)) : x;
    return t.add(h, sc);
}

UpBlock::UpBlock(int in_ch, Rng& rng, BatchNormOpts bn)
    : deconv(in_ch, in_ch / 2, 2, 2, /*bias=*/true, rng),
      conv1(in_ch / 2, in_ch / 2, 3, 1, 1, /*bias=*/true, rng),
      bn1(in_ch / 2, rng, bn),
      conv2(in_ch / 2, in_ch / 2, 3, 1, 1, /*bias=*/true, rng),
      bn2(in_ch / 2, rng, bn) {
    if (in_ch % 2 != 0) throw std::invalid_argument("UpBlock: in_ch must be even");
    register_module("deconv", &deconv);
    register_module("conv1", &conv1);
    register_module("bn1", &bn1);
    register_module("conv2", &conv2);
    register_module("bn2", &bn2);
}

Var UpBlock::forward(Tape& t, Var x) {
    Var h = deconv.forward(t, x);
    h = t.relu(bn1.forward(t, conv1.forward(t, h)));
    h = t.relu(bn2.forward(t, conv2.forward(t, h)));
    return h;
}

AttnBlock::AttnBlock(int channels_, Rng& rng)
    : query(channels_, channels_ / 8, 1, 1, 0, /*bias=*/true, rng),
      key(channels_, channels_ / 8, 1, 1, 0, /*bias=*/true, rng),
      value(channels_, channels_, 1, 1, 0, /*bias=*/true, rng),
      gamma("gamma", Tensor::zeros({1})),
      channels(channels_) {
    if (channels_ % 8 != 0) throw std::invalid_argument("AttnBlock: channels must be divisible by 8");
    register_module("query", &query);
    register_module("key", &key);
    register_module("value", &value);
    register_parameter("gamma", &gamma);
}

Var AttnBlock::forward(Tape& t, Var x) {
    const auto& shape = t.value(x).shape();
    if (shape.size() != 4 || shape[1] != channels)
        throw std::invalid_argument("AttnBlock: expected [B," + std::to_string(channels) + ",H,W], got " +
                                    shape_to_string(shape));
    const int b = shape[0], h = shape[2], w = shape[3];
    const int n = h * w;
    const int c8 = channels / 8;

    Var q = t.reshape(query.forward(t, x), {b, c8, n});
    Var k = t.reshape(key.forward(t, x), {b, c8, n});
    Var v = t.reshape(value.forward(t, x), {b, channels, n});
    // energy[b,i,j] = q_i . k_j; softmax over key positions j
    Var energy = t.bmm(q, k, /*trans_a=*/true, /*trans_b=*/false);
    Var attn = t.softmax(energy, 2);
    Var out = t.bmm(v, attn, /*trans_a=*/false, /*trans_b=*/true);
    out = t.reshape(out, {b, channels, h, w});
    return t.scale_residual(t.param(gamma), out, x);
}

} // namespace sarfuse
