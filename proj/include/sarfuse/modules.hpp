#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sarfuse/autograd.hpp"
#include "sarfuse/rng.hpp"

namespace sarfuse {

// Base class for network building blocks. Parameters, buffers (non-learnable
// state such as batch-norm running statistics) and children are registered in
// construction order, which fixes initialization, checkpoint layout, and
// optimizer ordering.
class Module {
public:
    virtual ~Module() = default;
    virtual Var forward(Tape& t, Var x) = 0;

    std::vector<Parameter*> parameters();
    int64_t parameter_count() const;
    void set_training(bool on);
    bool training() const { return training_; }
    void zero_grad();

    // Walks every parameter and buffer with a dotted path name.
    // is_param == false marks buffers.
    void visit_tensors(const std::string& prefix,
                       const std::function<void(const std::string&, Tensor&, bool)>& fn);

protected:
    void register_parameter(const std::string& name, Parameter* p);
    void register_buffer(const std::string& name, Tensor* b);
    void register_module(const std::string& name, Module* m);

    bool training_ = true;

private:
    std::vector<std::pair<std::string, Parameter*>> params_;
    std::vector<std::pair<std::string, Tensor*>> buffers_;
    std::vector<std::pair<std::string, Module*>> children_;
};

struct BatchNormOpts {
    float eps = 1e-5f;
    float momentum = 0.1f;
};

class Conv2d : public Module {
public:
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias, Rng& rng);
    Var forward(Tape& t, Var x) override;

    Parameter weight;  // [out,in,k,k]
    Parameter bias;    // [out] when has_bias
    bool has_bias;
    int stride, pad;
};

class ConvTranspose2d : public Module {
public:
    ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, bool bias, Rng& rng);
    Var forward(Tape& t, Var x) override;

    Parameter weight;  // [in,out,k,k]
    Parameter bias;
    bool has_bias;
    int stride;
};

class BatchNorm2d : public Module {
public:
    BatchNorm2d(int channels, Rng& rng, BatchNormOpts opts = {});
    Var forward(Tape& t, Var x) override;

    Parameter gamma, beta;
    Tensor running_mean, running_var;
    BatchNormOpts opts;
};

// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU, summed with the (possibly
// projected) input. Convolutions carry no bias; activation precedes the sum.
class DownBlock : public Module {
public:
    DownBlock(int in_ch, int out_ch, int stride, Rng& rng, BatchNormOpts bn = {});
    Var forward(Tape& t, Var x) override;

    Conv2d conv1;
    BatchNorm2d bn1;
    Conv2d conv2;
    BatchNorm2d bn2;
    std::unique_ptr<Conv2d> shortcut_conv;  // set when in!=out or stride!=1
    std::unique_ptr<BatchNorm2d> shortcut_bn;
};

// transposed conv k2 s2 -> conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU.
// Halves channels and doubles both spatial dims; convolutions carry bias.
class UpBlock : public Module {
public:
    explicit UpBlock(int in_ch, Rng& rng, BatchNormOpts bn = {});
    Var forward(Tape& t, Var x) override;

    ConvTranspose2d deconv;
    Conv2d conv1;
    BatchNorm2d bn1;
    Conv2d conv2;
    BatchNorm2d bn2;
};

// Self-attention over flattened spatial positions with a learnable residual
// gate initialized to zero, so the block starts as the identity map.
class AttnBlock : public Module {
public:
    AttnBlock(int channels, Rng& rng);
    Var forward(Tape& t, Var x) override;

    Conv2d query, key, value;
    Parameter gamma;
    int channels;
};

class ReLULayer : public Module {
public:
    Var forward(Tape& t, Var x) override { return t.relu(x); }
};

} // namespace sarfuse
