#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "helpers.hpp"
#include "mfl/losses.hpp"

#include <cmath>

using namespace mfl;

namespace {

Vec one_hot(int k, int idx) {
    Vec y = Vec::Zero(k);
    y[idx] = 1.0;
    return y;
}

}  // namespace

TEST_CASE("square loss") {
    Rng rng = make_rng(11);
    LossSpec spec;
    spec.kind = LossKind::Square;
    spec.d_out = 3;

    SUBCASE("value and gradient closed forms") {
        for (int trial = 0; trial < 50; ++trial) {
            const Vec z = 2.0 * gaussian_vec(rng, 3), y = 2.0 * gaussian_vec(rng, 3);
            CHECK(loss_value(spec, z, y) ==
                  doctest::Approx(0.5 * (z - y).squaredNorm()).epsilon(1e-14));
            CHECK((loss_grad(spec, z, y) - (z - y)).lpNorm<Eigen::Infinity>() == 0.0);
        }
    }

    SUBCASE("gradient-vs-value inequality is an exact equality") {
        for (int trial = 0; trial < 500; ++trial) {
            const Vec z = 3.0 * gaussian_vec(rng, 3), y = 3.0 * gaussian_vec(rng, 3);
            const double lhs = loss_grad(spec, z, y).squaredNorm();
            const double rhs = 2.0 * loss_value(spec, z, y);
            CHECK(lhs <= rhs * (1 + 1e-12) + 1e-300);
            CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
        }
    }
}

TEST_CASE("cross-entropy loss") {
    Rng rng = make_rng(22);
    LossSpec spec;
    spec.kind = LossKind::CrossEntropy;
    spec.d_out = 4;

    SUBCASE("value matches a high-precision naive formula") {
        for (int trial = 0; trial < 50; ++trial) {
            const Vec z = 3.0 * gaussian_vec(rng, 4);
            const Vec y = one_hot(4, trial % 4);
            long double lse = 0.0L;
            for (int i = 0; i < 4; ++i) lse += std::exp(static_cast<long double>(z[i]));
            const double naive = static_cast<double>(-static_cast<long double>(z.dot(y)) +
                                                     std::log(lse));
            CHECK(loss_value(spec, z, y) == doctest::Approx(naive).epsilon(1e-13));
        }
    }

    SUBCASE("value is stable for extreme logits") {
        Vec z(4);
        z << 500.0, -500.0, 499.0, 0.0;
        const double v = loss_value(spec, z, one_hot(4, 1));
        CHECK(std::isfinite(v));
        CHECK(v == doctest::Approx(1000.0 + std::log(1.0 + std::exp(-1.0) + std::exp(-500.0)))
                       .epsilon(1e-12));
    }

    SUBCASE("gradient is softmax minus the label and matches finite differences") {
        for (int trial = 0; trial < 30; ++trial) {
            const Vec z = 2.0 * gaussian_vec(rng, 4);
            const Vec y = one_hot(4, trial % 4);
            const Vec g = loss_grad(spec, z, y);
            const Vec numeric = testutil::fd_gradient(
                [&](const Vec& zz) { return loss_value(spec, zz, y); }, z);
            CHECK((g - numeric).norm() < 1e-7);
            CHECK(g.sum() == doctest::Approx(0.0).epsilon(1e-12));  // softmax sums to one
        }
    }

    SUBCASE("gradient norm is controlled by twice the value") {
        for (int trial = 0; trial < 2000; ++trial) {
            const int k = 2 + trial % 5;
            LossSpec s;
            s.kind = LossKind::CrossEntropy;
            s.d_out = k;
            Rng local = make_rng(900, static_cast<std::uint64_t>(trial));
            const Vec z = 3.0 * gaussian_vec(local, k);
            const Vec y = one_hot(k, trial % k);
            CHECK(loss_grad(s, z, y).squaredNorm() <= 2.0 * loss_value(s, z, y) + 1e-12);
        }
    }

    SUBCASE("labels must be one-hot") {
        const Vec z = gaussian_vec(rng, 4);
        Vec bad = Vec::Zero(4);
        CHECK_THROWS_AS(loss_value(spec, z, bad), ValidationError);  // all zero
        bad << 0.5, 0.5, 0.0, 0.0;
        CHECK_THROWS_AS(loss_value(spec, z, bad), ValidationError);  // split mass
        bad << 1.0, 1.0, 0.0, 0.0;
        CHECK_THROWS_AS(loss_grad(spec, z, bad), ValidationError);  // two hot
    }
}

TEST_CASE("empirical risk") {
    Rng rng = make_rng(33);
    LossSpec spec;
    spec.kind = LossKind::Square;
    spec.d_out = 2;
    const int N = 37;
    Mat P(N, 2), Y(N, 2);
    for (int s = 0; s < N; ++s) {
        P.row(s) = gaussian_vec(rng, 2).transpose();
        Y.row(s) = gaussian_vec(rng, 2).transpose();
    }

    SUBCASE("risk matches the per-row average") {
        long double acc = 0.0L;
        for (int s = 0; s < N; ++s)
            acc += loss_value(spec, P.row(s).transpose(), Y.row(s).transpose());
        CHECK(risk(spec, P, Y) == doctest::Approx(static_cast<double>(acc / N)).epsilon(1e-13));
    }

    SUBCASE("residual rows are the per-sample gradients") {
        const Mat R = risk_residual(spec, P, Y);
        for (int s = 0; s < N; ++s) {
            const Vec g = loss_grad(spec, P.row(s).transpose(), Y.row(s).transpose());
            CHECK((R.row(s).transpose() - g).lpNorm<Eigen::Infinity>() == 0.0);
        }
    }

    SUBCASE("shape mismatches are rejected") {
        CHECK_THROWS_AS(risk(spec, P, Mat::Zero(N, 3)), ValidationError);
        CHECK_THROWS_AS(risk_residual(spec, P, Mat::Zero(N + 1, 2)), ValidationError);
    }
}

TEST_CASE("risk truncation profile") {
    const double knot_probe = 1e-7;

    for (double alpha : {0.5, 1.0, 2.0}) {
        CAPTURE(alpha);
        Truncation t{alpha};

        SUBCASE("identity below the lower knot, constant above the upper") {
            CHECK(xi(t, 0.0) == 0.0);
            CHECK(xi(t, 0.25 * alpha) == 0.25 * alpha);
            CHECK(xi(t, alpha) == alpha);
            CHECK(xi(t, 2.0 * alpha) == doctest::Approx(2.0 * alpha).epsilon(1e-15));
            CHECK(xi(t, 5.0 * alpha) == 2.0 * alpha);
            CHECK(xi_prime(t, 0.5 * alpha) == 1.0);
            CHECK(xi_prime(t, 3.0 * alpha) == 0.0);
        }

        SUBCASE("midpoint closed form") {
            CHECK(xi(t, 1.5 * alpha) == doctest::Approx(13.0 * alpha / 8.0).epsilon(1e-12));
        }

        SUBCASE("derivatives match finite differences inside the blend") {
            for (double frac : {1.05, 1.3, 1.5, 1.7, 1.95}) {
                const double x = frac * alpha;
                const double h = 1e-6 * alpha;
                const double fd1 = (xi(t, x + h) - xi(t, x - h)) / (2 * h);
                const double fd2 = (xi_prime(t, x + h) - xi_prime(t, x - h)) / (2 * h);
                CHECK(xi_prime(t, x) == doctest::Approx(fd1).epsilon(1e-7));
                CHECK(xi_double_prime(t, x) == doctest::Approx(fd2).epsilon(1e-6));
            }
        }

        SUBCASE("slope stays in [0, 1.5] and curvature within 4 / alpha") {
            for (int i = 0; i <= 3000; ++i) {
                const double x = 3.0 * alpha * i / 3000.0;
                const double xp = xi_prime(t, x);
                CHECK(xp >= 0.0);
                CHECK(xp <= 1.5 + 1e-12);
                CHECK(std::abs(xi_double_prime(t, x)) <= 4.0 / alpha + 1e-9);
            }
        }

        SUBCASE("continuity and first-derivative continuity at both knots") {
            // Any genuine jump would survive as the probe shrinks; a smooth
            // crossing only contributes slope * width. Slope <= 1.5 and
            // curvature <= 4 / alpha bound the smooth part.
            for (double knot : {alpha, 2.0 * alpha}) {
                const double value_step = std::abs(xi(t, knot + knot_probe) - xi(t, knot - knot_probe));
                CHECK(value_step <= 1.5 * 2 * knot_probe + 1e-10);
                const double slope_step =
                    std::abs(xi_prime(t, knot + knot_probe) - xi_prime(t, knot - knot_probe));
                CHECK(slope_step <= (4.0 / alpha) * 2 * knot_probe + 1e-10);
            }
        }

        SUBCASE("curvature is continuous at the lower knot only") {
            // Lower knot: both sides approach 0.
            CHECK(std::abs(xi_double_prime(t, alpha - knot_probe)) < 1e-9);
            CHECK(std::abs(xi_double_prime(t, alpha + knot_probe)) < 1e-4);
            // Upper knot: the blend ends with curvature -2 / alpha while the
            // plateau has curvature 0. That one-sided jump is the documented
            // cost of reaching the full plateau value 2 * alpha with a plain
            // half-cosine; both one-sided values stay within the 4 / alpha cap.
            CHECK(xi_double_prime(t, 2.0 * alpha - knot_probe) ==
                  doctest::Approx(-2.0 / alpha).epsilon(1e-5));
            CHECK(xi_double_prime(t, 2.0 * alpha + knot_probe) == 0.0);
        }

        SUBCASE("monotone nondecreasing") {
            double prev = -1.0;
            for (int i = 0; i <= 500; ++i) {
                const double x = 3.0 * alpha * i / 500.0;
                const double v = xi(t, x);
                CHECK(v >= prev - 1e-15);
                prev = v;
            }
        }
    }

    SUBCASE("negative inputs and bad alpha are rejected") {
        Truncation t{1.0};
        CHECK_THROWS_AS(xi(t, -0.1), ValidationError);
        CHECK_THROWS_AS(xi(Truncation{0.0}, 0.5), ValidationError);
        CHECK_THROWS_AS(xi(Truncation{-2.0}, 0.5), ValidationError);
    }
}

TEST_CASE("loss kind strings") {
    CHECK(loss_from_string("square") == LossKind::Square);
    CHECK(loss_from_string("cross-entropy") == LossKind::CrossEntropy);
    CHECK(to_string(LossKind::Square) == "square");
    CHECK(to_string(LossKind::CrossEntropy) == "cross-entropy");
    CHECK_THROWS_AS(loss_from_string("hinge"), ValidationError);
}
