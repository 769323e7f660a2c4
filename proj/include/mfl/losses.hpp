#pragma once

// Pointwise losses (square, cross-entropy), empirical risk and its per-sample
// gradient ("residual"), and the smooth risk-truncation profile used to make
// unbounded losses effectively bounded along a flow.

#include "mfl/common.hpp"

#include <string>

namespace mfl {

enum class LossKind { Square, CrossEntropy };

LossKind loss_from_string(const std::string& name);
std::string to_string(LossKind k);

struct LossSpec {
    LossKind kind = LossKind::Square;
    int d_out = 1;
};

// l(z, y); cross-entropy expects a one-hot y and uses stable log-sum-exp.
double loss_value(const LossSpec& spec, const Vec& z, const Vec& y);
// Gradient in z: square -> z - y; cross-entropy -> softmax(z) - y.
Vec loss_grad(const LossSpec& spec, const Vec& z, const Vec& y);

// (1/N) sum_s l(z_s, y_s) over matrix rows.
double risk(const LossSpec& spec, const Mat& predictions, const Mat& labels);
// Row s = grad_z l(z_s, y_s).
Mat risk_residual(const LossSpec& spec, const Mat& predictions, const Mat& labels);

// Smooth clamp: identity on [0, alpha], constant 2*alpha above 2*alpha,
// C^1 monotone cosine blend in between (second derivative bounded by 4/alpha).
struct Truncation {
    double alpha = 1.0;
};

double xi(const Truncation& t, double x);
double xi_prime(const Truncation& t, double x);
double xi_double_prime(const Truncation& t, double x);

}  // namespace mfl
