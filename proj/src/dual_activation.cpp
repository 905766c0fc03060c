#include "kcap/dual_activation.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include "kcap/error.hpp"

namespace kcap {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;
constexpr double kSqrt2 = 1.41421356237309504880168872420969808;

double g_dual_perturbation = 0.0;

// Newton iteration on the orthonormal Hermite recurrence. Standard
// Golub-Welsch-free construction: good initial guesses per root, then polish.
GaussHermite compute_gauss_hermite(int n) {
    GaussHermite gh;
    gh.nodes.assign(n, 0.0);
    gh.weights.assign(n, 0.0);
    const int half = (n + 1) / 2;
    double z = 0.0, pp = 0.0;
    for (int i = 0; i < half; ++i) {
        if (i == 0) {
            z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -1.0 / 6.0);
        } else if (i == 1) {
            z -= 1.14 * std::pow(n, 0.426) / z;
        } else if (i == 2) {
            z = 1.86 * z - 0.86 * gh.nodes[0];
        } else if (i == 3) {
            z = 1.91 * z - 0.91 * gh.nodes[1];
        } else {
            z = 2.0 * z - gh.nodes[i - 2];
        }
        for (int iter = 0; iter < 100; ++iter) {
            double p1 = std::pow(kPi, -0.25);
            double p2 = 0.0;
            for (int j = 0; j < n; ++j) {
                double p3 = p2;
                p2 = p1;
                p1 = z * std::sqrt(2.0 / (j + 1.0)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1.0)) * p3;
            }
            pp = std::sqrt(2.0 * n) * p2;
            double z1 = z;
            z = z1 - p1 / pp;
            if (std::fabs(z - z1) <= 1e-15 * std::max(1.0, std::fabs(z))) break;
        }
        gh.nodes[i] = z;
        gh.nodes[n - 1 - i] = -z;
        gh.weights[i] = 2.0 / (pp * pp);
        gh.weights[n - 1 - i] = gh.weights[i];
    }
    return gh;
}

}  // namespace

const GaussHermite& gauss_hermite(int order) {
    require(order >= 8, ErrorCode::BadConfig, "gauss_hermite: order must be >= 8");
    static std::mutex mu;
    static std::map<int, GaussHermite> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(order);
    if (it == cache.end()) it = cache.emplace(order, compute_gauss_hermite(order)).first;
    return it->second;
}

double gelu_value(double x) { return 0.5 * x * std::erfc(-x / kSqrt2); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * std::erfc(-x / kSqrt2);
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
    return cdf + x * pdf;
}

void set_dual_perturbation(double eps) { g_dual_perturbation = eps; }

DualResult dual_activation(double k11, double k12, double k22, Activation act, int gh_order) {
    require(std::isfinite(k11) && std::isfinite(k12) && std::isfinite(k22), ErrorCode::NotFinite,
            "dual_activation: non-finite input");
    require(k11 >= 0.0 && k22 >= 0.0, ErrorCode::NotPsd2x2, "dual_activation: negative diagonal");
    const double bound = std::sqrt(k11 * k22);
    if (std::fabs(k12) > bound) {
        // PSD overshoot: tolerate roundoff-scale violations by clamping onto
        // the boundary, reject real ones.
        require(std::fabs(k12) <= bound * (1.0 + 1e-8) + 1e-300, ErrorCode::NotPsd2x2,
                "dual_activation: |k12| exceeds sqrt(k11*k22) beyond tolerance");
        k12 = std::copysign(bound, k12);
    }

    // Correlation; degenerate marginals behave as the rho -> 0 limit.
    const double rho = bound > 0.0 ? std::min(1.0, std::max(-1.0, k12 / bound)) : 0.0;

    if (act == Activation::relu) {
        const double theta = std::acos(rho);
        DualResult out;
        out.value = bound / (2.0 * kPi) * (std::sin(theta) + (kPi - theta) * std::cos(theta)) + g_dual_perturbation;
        out.derivative_value = (kPi - theta) / (2.0 * kPi);
        return out;
    }

    // GeLU: E[f(u) g(v)] over the correlated pair via u = s1*z1,
    // v = s2*(rho*z1 + sqrt(1-rho^2)*z2) with z1, z2 independent standard
    // normals mapped from the exp(-x^2) Hermite weight (x -> sqrt(2) x, w/pi).
    const GaussHermite& gh = gauss_hermite(gh_order);
    const double s1 = std::sqrt(k11), s2 = std::sqrt(k22);
    const double ortho = std::sqrt(std::max(0.0, 1.0 - rho * rho));
    const int n = static_cast<int>(gh.nodes.size());

    double value = 0.0, deriv = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z1 = kSqrt2 * gh.nodes[i];
        const double u = s1 * z1;
        const double fu = gelu_value(u), du = gelu_derivative(u);
        double inner_v = 0.0, inner_d = 0.0;
        for (int j = 0; j < n; ++j) {
            const double z2 = kSqrt2 * gh.nodes[j];
            const double v = s2 * (rho * z1 + ortho * z2);
            inner_v += gh.weights[j] * gelu_value(v);
            inner_d += gh.weights[j] * gelu_derivative(v);
        }
        value += gh.weights[i] * fu * inner_v;
        deriv += gh.weights[i] * du * inner_d;
    }
    const double norm = 1.0 / kPi;  // (1/sqrt(pi))^2 for the two weights
    return {value * norm, deriv * norm};
}

}  // namespace kcap
