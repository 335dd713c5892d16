#pragma once

#include <vector>

#include "rledit/autodiff.hpp"

namespace rledit {

// Adam with decoupled weight decay over leaf tensors, updated in place.
class AdamW {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    AdamW(std::vector<ad::Tensor> params, Options opts);

    void step();
    void zero_grad();
    // Scales gradients so their global L2 norm is at most max_norm. Returns the
    // norm before clipping.
    double clip_grad_norm(double max_norm);
    double grad_norm() const;
    long steps() const noexcept { return t_; }
    const std::vector<ad::Tensor>& params() const noexcept { return params_; }

private:
    std::vector<ad::Tensor> params_;
    Options opts_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<double> clip_scale_;
    long t_ = 0;
};

}  // namespace rledit
