#pragma once

// Bias-corrected Adam over a flat list of parameter tensors, plus global
// gradient-norm clipping. Updates are deterministic given identical inputs.

#include "selecom/tensor.hpp"

namespace selecom {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0f);
            v_.emplace_back(p.size(), 0.0f);
        }
    }

    const std::vector<Tensor>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // Multiplies every gradient by s (e.g. 1/batch to average losses
    // accumulated by repeated backward calls).
    void scale_grads(float s) {
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (float& g : p.grad()) g *= s;
        }
    }

    // Scales all gradients so the global L2 norm is at most max_norm.
    float clip_global_norm(float max_norm) {
        double sq = 0.0;
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (float g : p.grad()) sq += static_cast<double>(g) * g;
        }
        const float norm = static_cast<float>(std::sqrt(sq));
        if (norm > max_norm && norm > 0.0f) {
            const float s = max_norm / norm;
            for (auto& p : params_) {
                if (!p.has_grad()) continue;
                for (float& g : p.grad()) g *= s;
            }
        }
        return norm;
    }

    void step() {
        ++t_;
        const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            auto& g = p.grad();
            for (size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0f - cfg_.beta1) * g[j];
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0f - cfg_.beta2) * g[j] * g[j];
                const float mhat = m_[i][j] / bc1;
                const float vhat = v_[i][j] / bc2;
                p.at(j) -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    int64_t step_count() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace selecom
