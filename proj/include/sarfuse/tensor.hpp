#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sarfuse {

// Dense float32 array, row-major (C order). Rank is arbitrary; network code
// uses [N, C, H, W] throughout.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, float fill);
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(float v) { return Tensor({1}, v); }

    const std::vector<int>& shape() const { return shape_; }
    int size(int i) const { return shape_[size_t(i)]; }
    int rank() const { return int(shape_.size()); }
    int64_t numel() const { return numel_; }
    bool empty() const { return numel_ == 0; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[size_t(i)]; }
    float operator[](int64_t i) const { return data_[size_t(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    void fill(float v);
    bool all_finite() const;

private:
    std::vector<int> shape_;
    std::vector<float> data_;
    int64_t numel_ = 0;
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// Numerically stable softmax over one axis, value-level (no gradient).
Tensor softmax_axis(const Tensor& x, int axis);

// Output spec of a square-kernel 2D convolution. Throws if a spatial dim
// would be non-positive.
std::vector<int> conv2d_output_shape(const std::vector<int>& input, int out_channels,
                                     int kernel, int stride, int pad);

} // namespace sarfuse
