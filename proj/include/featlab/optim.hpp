#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace featlab {

// Plain Adam over a flat parameter span.
class Adam {
public:
    Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0f), v_(n, 0.0f) {}

    void step(std::span<float> params, std::span<const float> grad)
    {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        const float a = static_cast<float>(lr_ * std::sqrt(bc2) / bc1);
        const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_), eps = static_cast<float>(eps_);
        float* w = params.data();
        const float* gr = grad.data();
        float* m = m_.data();
        float* v = v_.data();
#pragma omp simd
        for (std::size_t i = 0; i < params.size(); ++i) {
            const float g = gr[i];
            m[i] = b1 * m[i] + (1.0f - b1) * g;
            v[i] = b2 * v[i] + (1.0f - b2) * g * g;
            w[i] -= a * m[i] / (std::sqrt(v[i]) + eps);
        }
    }

    long steps() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::vector<float> m_, v_;
};

} // namespace featlab
