#include "rledit/optim.hpp"

#include <cmath>

#include "rledit/errors.hpp"

namespace rledit {

AdamW::AdamW(std::vector<ad::Tensor> params, Options opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
        if (!p.is_leaf() || !p.requires_grad()) throw ContractError("AdamW: parameters must be trainable leaves");
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
    clip_scale_.assign(params_.size(), 1.0);
}

double AdamW::grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) s += g * g;
    }
    return std::sqrt(s);
}

double AdamW::clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    const double f = (norm > max_norm && norm > 0.0) ? max_norm / norm : 1.0;
    clip_scale_.assign(params_.size(), f);
    return norm;
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.mutable_values();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j] * clip_scale_[i];
            m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * gj;
            v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= opts_.lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * w[j]);
        }
    }
    clip_scale_.assign(params_.size(), 1.0);
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace rledit
