#include "sarfuse/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sarfuse {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 1) throw std::invalid_argument("tensor dim must be >= 1, got " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape) : Tensor(std::move(shape), 0.0f) {}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), numel_(shape_numel(shape_)) {
    data_.assign(size_t(numel_), fill);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)), numel_(shape_numel(shape_)) {
    if (int64_t(data_.size()) != numel_)
        throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
}

void Tensor::fill(float v) { data_.assign(data_.size(), v); }

bool Tensor::all_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor softmax_axis(const Tensor& x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax_axis: bad axis");
    const auto& shape = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[size_t(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= shape[size_t(i)];
    const int64_t n = shape[size_t(axis)];

    Tensor out(x.shape());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            float m = x[base];
            for (int64_t k = 1; k < n; ++k) m = std::max(m, x[base + k * inner]);
            double z = 0.0;
            for (int64_t k = 0; k < n; ++k) z += std::exp(double(x[base + k * inner]) - double(m));
            for (int64_t k = 0; k < n; ++k)
                out[base + k * inner] = float(std::exp(double(x[base + k * inner]) - double(m)) / z);
        }
    }
    return out;
}

std::vector<int> conv2d_output_shape(const std::vector<int>& input, int out_channels,
                                     int kernel, int stride, int pad) {
    if (input.size() != 4) throw std::invalid_argument("conv2d_output_shape: input must be [B,C,H,W]");
    if (kernel < 1 || stride < 1) throw std::invalid_argument("conv2d_output_shape: kernel and stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d_output_shape: pad must be >= 0");
    const int h = (input[2] + 2 * pad - kernel) / stride + 1;
    const int w = (input[3] + 2 * pad - kernel) / stride + 1;
    if (input[2] + 2 * pad - kernel < 0 || h < 1 || w < 1)
        throw std::invalid_argument("conv2d_output_shape: non-positive output dims");
    return {input[0], out_channels, h, w};
}

} // namespace sarfuse
