#include "sarfuse/conv_util.hpp"

#include <cstdint>
#include <cstring>

namespace sarfuse {

void im2col(const float* img, int c, int h, int w, int k, int stride, int pad,
            int ho, int wo, float* col) {
    const int spatial = ho * wo;
    for (int ch = 0; ch < c; ++ch) {
        const float* src = img + int64_t(ch) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* dst = col + (int64_t(ch) * k * k + ky * k + kx) * spatial;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::memset(dst + int64_t(oy) * wo, 0, sizeof(float) * size_t(wo));
                        continue;
                    }
                    const int ix0 = -pad + kx;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ix0 + ox * stride;
                        dst[int64_t(oy) * wo + ox] = (ix >= 0 && ix < w) ? src[int64_t(iy) * w + ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im(const float* col, int c, int h, int w, int k, int stride, int pad,
            int ho, int wo, float* img) {
    const int spatial = ho * wo;
    for (int ch = 0; ch < c; ++ch) {
        float* dst = img + int64_t(ch) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* src = col + (int64_t(ch) * k * k + ky * k + kx) * spatial;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const int ix0 = -pad + kx;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ix0 + ox * stride;
                        if (ix >= 0 && ix < w) dst[int64_t(iy) * w + ix] += src[int64_t(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

} // namespace sarfuse
