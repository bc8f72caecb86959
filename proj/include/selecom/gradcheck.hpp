#pragma once

// Central finite-difference oracle for the reverse-mode gradients.
// Perturbations and the comparison run in double precision; the kernels
// under test stay in float32.

#include <functional>

#include "selecom/tensor.hpp"

namespace selecom {

// f must map the input tensor to a scalar Tensor built on the tape.
// Returns the maximum componentwise deviation between the tape gradient and
// the central-difference estimate, normalized by the gradient's infinity
// norm. Normalizing per component would amplify float32 roundoff on
// near-zero components into spurious failures.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                         double h = 1e-3, double scale_floor = 1e-2) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor loss = f(x);
    loss.backward();
    std::vector<float> analytic = x.grad();

    std::vector<double> numeric(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = x.at(i);
        x.at(i) = static_cast<float>(orig + h);
        const double up = f(x).scalar();
        x.at(i) = static_cast<float>(orig - h);
        const double down = f(x).scalar();
        x.at(i) = static_cast<float>(orig);
        numeric[i] = (up - down) / (2.0 * h);
    }
    double scale = scale_floor;
    for (size_t i = 0; i < x.size(); ++i)
        scale = std::max({scale, std::abs(numeric[i]), std::abs(double(analytic[i]))});
    double max_rel = 0.0;
    for (size_t i = 0; i < x.size(); ++i)
        max_rel = std::max(max_rel, std::abs(numeric[i] - analytic[i]) / scale);
    return max_rel;
}

// Variant comparing the tape gradient of `tape_f` against central finite
// differences of `ref_f`, an independent double-precision evaluation of the
// same function (flat input buffer -> scalar). The double path keeps the
// difference quotient far above float32 roundoff.
inline double grad_check(const std::function<Tensor(const Tensor&)>& tape_f,
                         const std::function<double(const std::vector<double>&)>& ref_f,
                         Tensor& x, double h = 1e-3, double scale_floor = 1e-2) {
    x.set_requires_grad(true);
    x.zero_grad();
    tape_f(x).backward();
    std::vector<float> analytic = x.grad();

    std::vector<double> xd(x.values().begin(), x.values().end());
    std::vector<double> numeric(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = xd[i];
        xd[i] = orig + h;
        const double up = ref_f(xd);
        xd[i] = orig - h;
        const double down = ref_f(xd);
        xd[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }
    double scale = scale_floor;
    for (size_t i = 0; i < x.size(); ++i)
        scale = std::max({scale, std::abs(numeric[i]), std::abs(double(analytic[i]))});
    double max_rel = 0.0;
    for (size_t i = 0; i < x.size(); ++i)
        max_rel = std::max(max_rel, std::abs(numeric[i] - analytic[i]) / scale);
    return max_rel;
}

}  // namespace selecom
