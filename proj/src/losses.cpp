#include "mfl/losses.hpp"

#include "mfl/models.hpp"

#include <cmath>

namespace mfl {

LossKind loss_from_string(const std::string& name) {
    if (name == "square") return LossKind::Square;
    if (name == "cross-entropy" || name == "xent") return LossKind::CrossEntropy;
    throw ValidationError("unknown loss '" + name + "'");
}

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::Square: return "square";
        case LossKind::CrossEntropy: return "cross-entropy";
    }
    throw ValidationError("unknown loss enum");
}

static void check_pair(const LossSpec& spec, const Vec& z, const Vec& y) {
    if (z.size() != spec.d_out || y.size() != spec.d_out)
        throw ValidationError("loss: dimension mismatch");
    if (!z.allFinite() || !y.allFinite()) throw ValidationError("loss: non-finite input");
    if (spec.kind == LossKind::CrossEntropy) {
        int ones = 0;
        for (int i = 0; i < y.size(); ++i) {
            if (y[i] == 1.0)
                ++ones;
            else if (y[i] != 0.0)
                throw ValidationError("cross-entropy: label entry not in {0,1}");
        }
        if (ones != 1) throw ValidationError("cross-entropy: label not one-hot");
    }
}

static double log_sum_exp(const Vec& z) {
    const double zmax = z.maxCoeff();
    return zmax + std::log((z.array() - zmax).exp().sum());
}

double loss_value(const LossSpec& spec, const Vec& z, const Vec& y) {
    check_pair(spec, z, y);
    switch (spec.kind) {
        case LossKind::Square: return 0.5 * (z - y).squaredNorm();
        case LossKind::CrossEntropy: return -z.dot(y) + log_sum_exp(z);
    }
    throw ValidationError("unknown loss enum");
}

Vec loss_grad(const LossSpec& spec, const Vec& z, const Vec& y) {
    check_pair(spec, z, y);
    switch (spec.kind) {
        case LossKind::Square: return z - y;
        case LossKind::CrossEntropy: return softmax(z) - y;
    }
    throw ValidationError("unknown loss enum");
}

static void check_batch(const LossSpec& spec, const Mat& predictions, const Mat& labels) {
    if (predictions.rows() != labels.rows()) throw ValidationError("risk: sample count mismatch");
    if (predictions.rows() == 0) throw ValidationError("risk: empty batch");
    if (predictions.cols() != spec.d_out || labels.cols() != spec.d_out)
        throw ValidationError("risk: dimension mismatch");
}

double risk(const LossSpec& spec, const Mat& predictions, const Mat& labels) {
    check_batch(spec, predictions, labels);
    const int N = static_cast<int>(predictions.rows());
    std::vector<double> vals(static_cast<size_t>(N));
    for (int s = 0; s < N; ++s)
        vals[static_cast<size_t>(s)] =
            loss_value(spec, predictions.row(s).transpose(), labels.row(s).transpose());
    return pairwise_sum(vals) / static_cast<double>(N);
}

Mat risk_residual(const LossSpec& spec, const Mat& predictions, const Mat& labels) {
    check_batch(spec, predictions, labels);
    Mat out(predictions.rows(), spec.d_out);
    for (int s = 0; s < predictions.rows(); ++s)
        out.row(s) = loss_grad(spec, predictions.row(s).transpose(), labels.row(s).transpose()).transpose();
    return out;
}

static void check_trunc(const Truncation& t, double x) {
    if (!(t.alpha > 0.0)) throw ValidationError("truncation: alpha must be positive");
    if (!(x >= 0.0)) throw ValidationError("truncation: x must be nonnegative");
}

double xi(const Truncation& t, double x) {
    check_trunc(t, x);
    const double a = t.alpha;
    if (x <= a) return x;
    if (x >= 2.0 * a) return 2.0 * a;
    const double u = x - a;
    return x + u * (2.0 * a - x) * (1.0 - std::cos(M_PI * u / a)) / (2.0 * a);
}

double xi_prime(const Truncation& t, double x) {
    check_trunc(t, x);
    const double a = t.alpha;
    if (x <= a) return 1.0;
    if (x >= 2.0 * a) return 0.0;
    const double u = x - a;
    const double c = std::cos(M_PI * u / a);
    const double s = std::sin(M_PI * u / a);
    return 1.0 + ((a - 2.0 * u) * (1.0 - c) + u * (a - u) * (M_PI / a) * s) / (2.0 * a);
}

double xi_double_prime(const Truncation& t, double x) {
    check_trunc(t, x);
    const double a = t.alpha;
    if (x <= a || x >= 2.0 * a) return 0.0;
    const double u = x - a;
    const double c = std::cos(M_PI * u / a);
    const double s = std::sin(M_PI * u / a);
    const double p = M_PI / a;
    return (-2.0 * (1.0 - c) + 2.0 * (a - 2.0 * u) * p * s + u * (a - u) * p * p * c) / (2.0 * a);
}

}  // namespace mfl
