#pragma once

#include <vector>

#include "sarfuse/autograd.hpp"

namespace sarfuse {

class Adam {
public:
    Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step();
    void zero_grad();
    double lr() const { return lr_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

} // namespace sarfuse
