#pragma once

#include <vector>

namespace kcap {

enum class Activation { relu, gelu };

// E[phi(u) phi(v)] and E[phi'(u) phi'(v)] for (u, v) centered Gaussian with
// covariance [[k11, k12], [k12, k22]].
struct DualResult {
    double value;
    double derivative_value;
};

// ReLU uses the arc-cosine closed forms; GeLU integrates with a tensor-product
// Gauss-Hermite rule of the given order (>= 8). A k12 overshooting the PSD
// boundary by at most 1e-8 (relative to sqrt(k11*k22)) is clamped onto it;
// anything worse, or a negative diagonal, throws NotPsd2x2.
DualResult dual_activation(double k11, double k12, double k22, Activation act, int gh_order = 32);

// Gauss-Hermite nodes/weights for weight exp(-x^2) (physicists' convention),
// exposed for the quadrature self-checks.
struct GaussHermite {
    std::vector<double> nodes;
    std::vector<double> weights;
};
const GaussHermite& gauss_hermite(int order);

double gelu_value(double x);
double gelu_derivative(double x);

// Test hook: shifts the ReLU dual value by eps so consistency suites can prove
// they would catch a wrong constant. Always 0 in normal operation.
void set_dual_perturbation(double eps);

}  // namespace kcap
