#include "sarfuse/optim.hpp"

#include <cmath>

namespace sarfuse {

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter* p : params_) {
        m_.push_back(Tensor::zeros(p->value.shape()));
        v_.push_back(Tensor::zeros(p->value.shape()));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter* p = params_[i];
        float* w = p->value.data();
        const float* g = p->grad.data();
        float* m = m_[i].data();
        float* v = v_[i].data();
        for (int64_t j = 0; j < p->numel(); ++j) {
            m[j] = float(beta1_ * m[j] + (1.0 - beta1_) * g[j]);
            v[j] = float(beta2_ * v[j] + (1.0 - beta2_) * double(g[j]) * double(g[j]));
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] = float(w[j] - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

void Adam::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

} // namespace sarfuse
