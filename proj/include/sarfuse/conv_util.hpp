#pragma once

namespace sarfuse {

// im2col for a single image [C,H,W] with a square kernel. col has shape
// [C*k*k, Ho*Wo] in row-major order; out-of-bounds taps read as zero.
void im2col(const float* img, int c, int h, int w, int k, int stride, int pad,
            int ho, int wo, float* col);

// Adjoint of im2col: accumulates col back into img (img must be pre-zeroed
// by the caller when accumulation is not wanted).
void col2im(const float* col, int c, int h, int w, int k, int stride, int pad,
            int ho, int wo, float* img);

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

} // namespace sarfuse
