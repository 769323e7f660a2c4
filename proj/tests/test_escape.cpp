#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "helpers.hpp"
#include "mfl/escape.hpp"
#include "mfl/flow.hpp"

#include <cmath>

using namespace mfl;

namespace {

// Scalar well with a bounded level set: g(theta) = -1/(1+|theta|^2) - 1/2.
// Level -1 is the sphere |theta| = 1 where |grad g| = 1/2; the gradient norm
// peaks at 9 / (8 sqrt 3) at radius 1/sqrt 3.
std::shared_ptr<FieldG> bounded_well(bool flipped_sign = false) {
    const double s = flipped_sign ? -1.0 : 1.0;
    return std::make_shared<FunctionField>(
        1, 2,
        [s](const Vec& th) {
            Vec g(1);
            g[0] = s * (-1.0 / (1.0 + th.squaredNorm()) - 0.5);
            return g;
        },
        [s](const Vec& th) {
            const double q = 1.0 + th.squaredNorm();
            Mat J(1, 2);
            J = s * (2.0 / (q * q)) * th.transpose();
            return J;
        },
        nullptr, 1.5, 9.0 / (8.0 * std::sqrt(3.0)));
}

// Scalar field with unbounded level sets: g = -3/4 - theta_1 / (2 sqrt(1+|theta|^2)).
std::shared_ptr<FieldG> tilted_field() {
    return std::make_shared<FunctionField>(
        1, 2,
        [](const Vec& th) {
            Vec g(1);
            g[0] = -0.75 - 0.5 * th[0] / std::sqrt(1.0 + th.squaredNorm());
            return g;
        },
        [](const Vec& th) {
            const double q = 1.0 + th.squaredNorm();
            Vec e1 = Vec::Zero(th.size());
            e1[0] = 1.0;
            Mat J(1, th.size());
            J = (-0.5 * (e1 / std::sqrt(q) - th[0] * th / std::pow(q, 1.5))).transpose();
            return J;
        },
        nullptr, 1.25, 0.5);
}

AsymptoticScalarField tilted_profile() {
    AsymptoticScalarField prof;
    prof.value = [](const Vec& phi) { return -0.75 - 0.5 * phi[0]; };
    prof.sphere_grad = [](const Vec& phi) {
        Vec e1 = Vec::Zero(phi.size());
        e1[0] = 1.0;
        return Vec(-0.5 * (e1 - phi[0] * phi));
    };
    return prof;
}

// Planar spiral field with one angular coordinate: g(theta) =
// -f(theta) (cos 0.3 theta, sin 0.3 theta), f = 1/2 + exp(-theta^2).
std::shared_ptr<FieldG> spiral_field() {
    return std::make_shared<FunctionField>(
        2, 1,
        [](const Vec& th) {
            const double t = th[0];
            const double f = 0.5 + std::exp(-t * t);
            Vec g(2);
            g << -f * std::cos(0.3 * t), -f * std::sin(0.3 * t);
            return g;
        },
        [](const Vec& th) {
            const double t = th[0];
            const double f = 0.5 + std::exp(-t * t);
            const double fp = -2.0 * t * std::exp(-t * t);
            Mat J(2, 1);
            J << -fp * std::cos(0.3 * t) + 0.3 * f * std::sin(0.3 * t),
                -fp * std::sin(0.3 * t) - 0.3 * f * std::cos(0.3 * t);
            return J;
        });
}

// Radially symmetric planar field aligned with e1 everywhere.
std::shared_ptr<FieldG> radial_field() {
    return std::make_shared<FunctionField>(
        2, 2,
        [](const Vec& th) {
            Vec g(2);
            g << -(0.5 + std::exp(-th.squaredNorm())), 0.0;
            return g;
        },
        [](const Vec& th) {
            Mat J = Mat::Zero(2, 2);
            J.row(0) = 2.0 * std::exp(-th.squaredNorm()) * th.transpose();
            return J;
        });
}

std::shared_ptr<FieldG> constant_scalar(double level) {
    return std::make_shared<FunctionField>(1, 2, [level](const Vec&) {
        Vec g(1);
        g[0] = -level;
        return g;
    });
}

ScalarBuildOptions well_options() {
    ScalarBuildOptions opt;
    opt.eta_lo = 1.0;
    opt.eta_hi = 1.0;
    opt.n_eta_grid = 1;
    opt.n_directions = 256;
    opt.seed = 7;
    return opt;
}

ScalarBuildOptions tilted_options() {
    ScalarBuildOptions opt;
    opt.eta_lo = 0.875;
    opt.eta_hi = 0.875;
    opt.n_eta_grid = 1;
    opt.n_directions = 256;
    opt.seed = 7;
    opt.g_inf = tilted_profile();
    return opt;
}

Vec scalar_vec(double x) {
    Vec v(1);
    v[0] = x;
    return v;
}

}  // namespace

TEST_CASE("field differentials") {
    Rng rng = make_rng(71);

    SUBCASE("default finite-difference Jacobian matches the analytic one") {
        const auto analytic = tilted_field();
        FunctionField numeric(1, 2, [&](const Vec& th) { return analytic->g(th); });
        for (int trial = 0; trial < 20; ++trial) {
            const Vec th = 2.0 * gaussian_vec(rng, 2);
            CHECK((numeric.jacobian(th) - analytic->jacobian(th)).norm() < 1e-7);
        }
    }

    SUBCASE("hessian_vector is exact for a quadratic field") {
        Mat A0(2, 2), A1(2, 2);
        A0 << 2.0, 0.5, 0.5, -1.0;
        A1 << 0.0, 1.5, 1.5, 3.0;
        // With the analytic Jacobian supplied, the Hessian stack differences an
        // exactly linear map, so only rounding noise remains.
        FunctionField quad(
            2, 2,
            [&](const Vec& th) {
                Vec g(2);
                g << 0.5 * th.dot(A0 * th), 0.5 * th.dot(A1 * th);
                return g;
            },
            [&](const Vec& th) {
                Mat J(2, 2);
                J.row(0) = (A0 * th).transpose();
                J.row(1) = (A1 * th).transpose();
                return J;
            });
        for (int trial = 0; trial < 10; ++trial) {
            const Vec th = gaussian_vec(rng, 2);
            const Vec u = gaussian_vec(rng, 2);
            const Mat expect = u[0] * A0 + u[1] * A1;
            CHECK((quad.hessian_vector(th, u) - expect).norm() < 1e-7);
        }
    }

    SUBCASE("declared sup bounds pass through") {
        const auto f = bounded_well();
        CHECK(f->sup_g() == 1.5);
        CHECK(f->sup_jacobian() == doctest::Approx(9.0 / (8.0 * std::sqrt(3.0))));
        FunctionField bare(1, 2, [](const Vec&) { return scalar_vec(0.0); });
        CHECK(bare.sup_g() < 0.0);
    }
}

TEST_CASE("ensemble snapshot field freezes the residual") {
    const auto model = make_sigmoid_net(3, 2);
    InitSpec spec;
    spec.kind = InitSpec::Kind::Gaussian;
    spec.location = Vec::Zero(5);
    spec.seed = 11;
    const Ensemble snap = sample_ensemble(spec, 8, 2, 3);
    const Dataset data = make_teacher_dataset(*model, 24, 4, 12);
    LossSpec loss;
    loss.d_out = 2;
    const EnsembleField field(model, data, loss, snap);
    Rng rng = make_rng(13);

    SUBCASE("matches the flow's potential field at the snapshot") {
        for (int trial = 0; trial < 10; ++trial) {
            const Vec th = gaussian_vec(rng, 3);
            CHECK((field.g(th) - g_mu(snap, *model, data, loss, th)).norm() < 1e-14);
        }
    }

    SUBCASE("equals minus the w-velocity of any particle at that theta") {
        const Particle& p = snap.particles[2];
        const Particle v = velocity(snap, *model, data, loss, p);
        CHECK((field.g(p.theta) + v.w).norm() < 1e-14);
    }

    SUBCASE("the residual stays frozen when the query moves") {
        const Mat R0 = field.residual();
        (void)field.g(gaussian_vec(rng, 3));
        CHECK(field.residual() == R0);
    }

    SUBCASE("analytic Jacobian agrees with finite differences of g") {
        for (int trial = 0; trial < 6; ++trial) {
            const Vec th = gaussian_vec(rng, 3);
            const Mat numeric = testutil::fd_jacobian(
                [&](const Vec& t) { return field.g(t); }, th);
            CHECK((field.jacobian(th) - numeric).norm() < 1e-6);
        }
    }
}

TEST_CASE("perturbation families stay inside their budget") {
    Rng probe = make_rng(17);
    const double eps = 0.3;
    for (auto kind : {PerturbationFamily::Kind::None, PerturbationFamily::Kind::ConstantOffset,
                      PerturbationFamily::Kind::TimeOscillating,
                      PerturbationFamily::Kind::AdversarialTowardBoundary}) {
        PerturbationFamily fam;
        switch (kind) {
            case PerturbationFamily::Kind::None:
                fam = PerturbationFamily::none(3);
                break;
            case PerturbationFamily::Kind::ConstantOffset:
                fam = PerturbationFamily::constant_offset(3, eps, 5);
                break;
            case PerturbationFamily::Kind::TimeOscillating:
                fam = PerturbationFamily::time_oscillating(3, eps, 5);
                break;
            case PerturbationFamily::Kind::AdversarialTowardBoundary:
                fam = PerturbationFamily::adversarial(sphere_vec(probe, 3), eps);
                break;
        }
        for (int i = 0; i < 100; ++i) {
            const double t = 0.2 * i;
            CHECK(fam.offset(t).norm() <= eps + 1e-12);
        }
    }

    SUBCASE("oscillation has the requested period and sign") {
        PerturbationFamily fam = PerturbationFamily::time_oscillating(1, 0.5, 2, 2.0 * M_PI);
        CHECK(fam.offset(0.0).norm() == 0.0);
        CHECK((fam.offset(0.25) - 0.5 * fam.direction).norm() < 1e-12);  // sin peak
        CHECK((fam.offset(1.0) - fam.offset(0.0)).norm() < 1e-12);
    }

    SUBCASE("adversarial pushes exactly along the requested direction") {
        Vec v(2);
        v << 3.0, 4.0;
        PerturbationFamily fam = PerturbationFamily::adversarial(v, 0.2);
        CHECK((fam.offset(7.0) - 0.2 * Vec(v / 5.0)).norm() < 1e-15);
    }

    SUBCASE("string names round trip") {
        for (auto kind : {PerturbationFamily::Kind::None, PerturbationFamily::Kind::ConstantOffset,
                          PerturbationFamily::Kind::TimeOscillating,
                          PerturbationFamily::Kind::AdversarialTowardBoundary})
            CHECK(PerturbationFamily::kind_from_string(PerturbationFamily::to_string(kind)) == kind);
        CHECK_THROWS_AS(PerturbationFamily::kind_from_string("bogus"), ValidationError);
    }
}

TEST_CASE("reduced ode integration") {
    SUBCASE("constant field integrates exactly") {
        const double level = 0.8;
        const auto field = constant_scalar(level);
        EscapeOdeConfig cfg;
        cfg.step_size = 0.1;
        cfg.t_end = 2.0;
        const EscapeTrajectory traj = escape_ode_run(*field, PerturbationFamily::none(1),
                                                     scalar_vec(1.0), Vec::Zero(2), cfg);
        for (size_t k = 0; k < traj.times.size(); ++k) {
            CHECK(traj.w[k][0] == doctest::Approx(1.0 + level * traj.times[k]).epsilon(1e-14));
            CHECK(traj.theta[k].norm() == 0.0);
            CHECK(traj.rate[k] ==
                  doctest::Approx(traj.w[k][0] * level).epsilon(1e-14));
        }
    }

    SUBCASE("oscillating offset matches its closed-form solution") {
        const double level = 0.8, eps = 0.25, omega = 3.0;
        const auto field = constant_scalar(level);
        PerturbationFamily fam;
        fam.kind = PerturbationFamily::Kind::TimeOscillating;
        fam.epsilon = eps;
        fam.omega = omega;
        fam.direction = scalar_vec(1.0);
        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        cfg.t_end = 3.0;
        const EscapeTrajectory traj =
            escape_ode_run(*field, fam, scalar_vec(2.0), Vec::Zero(2), cfg);
        for (size_t k = 0; k < traj.times.size(); ++k) {
            const double t = traj.times[k];
            // w' = level - eps sin(omega t)
            const double exact = 2.0 + level * t + (eps / omega) * (std::cos(omega * t) - 1.0);
            CHECK(traj.w[k][0] == doctest::Approx(exact).epsilon(1e-8));
        }
    }

    SUBCASE("agrees with an independently written integrator on the well") {
        const auto field = bounded_well();
        const Vec w0 = scalar_vec(2.5);
        Vec th0(2);
        th0 << 0.8, -0.6;
        PerturbationFamily fam = PerturbationFamily::constant_offset(1, 0.1, 3);

        EscapeOdeConfig cfg;
        cfg.step_size = 1e-3;
        cfg.t_end = 1.0;
        const EscapeTrajectory traj = escape_ode_run(*field, fam, w0, th0, cfg);

        const auto rhs = [&](double t, const std::vector<double>& y) {
            Vec w = scalar_vec(y[0]);
            Vec th(2);
            th << y[1], y[2];
            const Vec gv = field->g(th) + fam.offset(t);
            const Vec thdot = -field->jacobian(th).transpose() * w;
            return std::vector<double>{-gv[0], thdot[0], thdot[1]};
        };
        const auto ref = testutil::reference_rk4(rhs, {w0[0], th0[0], th0[1]}, 0.0, 1.0, 1000);
        CHECK(traj.w.back()[0] == doctest::Approx(ref[0]).epsilon(1e-10));
        CHECK(traj.theta.back()[0] == doctest::Approx(ref[1]).epsilon(1e-10));
        CHECK(traj.theta.back()[1] == doctest::Approx(ref[2]).epsilon(1e-10));
    }

    SUBCASE("recorded rate is the time derivative of half |w|^2") {
        const auto field = bounded_well();
        EscapeOdeConfig cfg;
        cfg.step_size = 0.001;
        cfg.t_end = 0.5;
        Vec th0(2);
        th0 << 1.2, 0.0;
        const EscapeTrajectory traj = escape_ode_run(*field, PerturbationFamily::none(1),
                                                     scalar_vec(3.0), th0, cfg);
        for (size_t k = 1; k + 1 < traj.times.size(); k += 50) {
            const double fd = (traj.half_w_sq[k + 1] - traj.half_w_sq[k - 1]) /
                              (traj.times[k + 1] - traj.times[k - 1]);
            CHECK(traj.rate[k] == doctest::Approx(fd).epsilon(1e-5));
        }
    }

    SUBCASE("dimension mismatches are rejected") {
        const auto field = bounded_well();
        EscapeOdeConfig cfg;
        CHECK_THROWS_AS(escape_ode_run(*field, PerturbationFamily::none(1), Vec::Zero(2),
                                       Vec::Zero(2), cfg),
                        ValidationError);
        CHECK_THROWS_AS(escape_ode_run(*field, PerturbationFamily::none(2), scalar_vec(1.0),
                                       Vec::Zero(2), cfg),
                        ValidationError);
        EscapeOdeConfig bad;
        bad.step_size = -0.1;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
}

TEST_CASE("scalar certificate: bounded level set") {
    const auto field = bounded_well();
    const EscapeSetScalar cert = build_escape_set_scalar(*field, well_options());

    SUBCASE("ledger values match the closed forms") {
        CHECK(cert.eta == 1.0);
        CHECK(cert.bounded_boundary);
        CHECK(!cert.constant_field);
        CHECK(!cert.flipped);
        // |grad g| on the level set |theta| = 1 is identically 1/2
        CHECK(cert.beta == doctest::Approx(0.5).epsilon(1e-4));
        CHECK(cert.sup_grad == doctest::Approx(9.0 / (8.0 * std::sqrt(3.0))).epsilon(1e-6));
        CHECK(cert.epsilon == doctest::Approx(0.19245).epsilon(1e-3));
        CHECK(cert.w_min == doctest::Approx(2.47663).epsilon(1e-3));
        CHECK(cert.rate_floor == doctest::Approx(2.0).epsilon(1e-6));
    }

    SUBCASE("internal relations hold exactly") {
        CHECK(cert.epsilon ==
              doctest::Approx(0.5 * std::min(cert.beta * cert.beta / cert.sup_grad, cert.eta))
                  .epsilon(1e-12));
        CHECK(cert.w_min ==
              doctest::Approx(2.0 * cert.eta / (cert.eta - cert.epsilon)).epsilon(1e-12));
        CHECK(cert.rate_floor ==
              doctest::Approx(cert.w_min * (cert.eta - cert.epsilon)).epsilon(1e-12));
    }

    SUBCASE("sampler respects the set description") {
        const StateSampler sampler = make_scalar_set_sampler(*field, cert, 3.0);
        Rng rng = make_rng(23);
        for (int i = 0; i < 200; ++i) {
            const auto [w0, th0] = sampler(rng);
            CHECK(w0[0] >= cert.w_min - 1e-12);
            CHECK(field->g(th0)[0] <= -cert.eta + 1e-12);
            CHECK(th0.norm() <= 3.0 + 1e-12);
        }
    }

    SUBCASE("rate verification passes for every perturbation kind") {
        const StateSampler sampler = make_scalar_set_sampler(*field, cert, 3.0);
        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        std::vector<PerturbationFamily> fams = {
            PerturbationFamily::constant_offset(1, cert.epsilon, 31),
            PerturbationFamily::time_oscillating(1, cert.epsilon, 32),
            PerturbationFamily::adversarial(scalar_vec(1.0), cert.epsilon)};
        for (const auto& fam : fams) {
            const EscapeRateReport rep = verify_escape_rate(*field, fam, sampler,
                                                            cert.rate_floor, 10.0, 25, cfg, 77);
            CHECK(rep.pass);
            CHECK(rep.min_rate >= cert.rate_floor - 1e-6);
            for (double s : rep.per_trial_w_slope) CHECK(s > 0.0);
        }
    }

    SUBCASE("trajectories never leave the sublevel set") {
        const StateSampler sampler = make_scalar_set_sampler(*field, cert, 3.0);
        PerturbationFamily fam = PerturbationFamily::constant_offset(1, cert.epsilon, 41);
        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        cfg.t_end = 10.0;
        Rng rng = make_rng(43);
        for (int trial = 0; trial < 10; ++trial) {
            const auto [w0, th0] = sampler(rng);
            const EscapeTrajectory traj = escape_ode_run(*field, fam, w0, th0, cfg);
            const double g0 = field->g(th0)[0];
            for (const Vec& th : traj.theta) CHECK(field->g(th)[0] <= g0 + 1e-9);
        }
    }

    SUBCASE("an oversized perturbation defeats the rate floor") {
        const StateSampler sampler = make_scalar_set_sampler(*field, cert, 3.0);
        PerturbationFamily fam = PerturbationFamily::adversarial(scalar_vec(1.0), 5.0 * cert.epsilon);
        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        const EscapeRateReport rep =
            verify_escape_rate(*field, fam, sampler, cert.rate_floor, 10.0, 25, cfg, 78);
        CHECK(!rep.pass);
    }
}

TEST_CASE("scalar certificate: degenerate and sign-flipped fields") {
    SUBCASE("identically zero fields are rejected") {
        const auto zero = std::make_shared<FunctionField>(
            1, 2, [](const Vec&) { return scalar_vec(0.0); });
        CHECK_THROWS_AS(build_escape_set_scalar(*zero, well_options()), ValidationError);
    }

    SUBCASE("levels outside the field's range are rejected") {
        ScalarBuildOptions opt = well_options();
        opt.eta_lo = 3.0;  // range of |g| is [0.5, 1.5]
        opt.eta_hi = 3.0;
        CHECK_THROWS_AS(build_escape_set_scalar(*bounded_well(), opt), ValidationError);
    }

    SUBCASE("constant fields use the simplified ledger") {
        const auto field = constant_scalar(0.8);
        ScalarBuildOptions opt = well_options();
        opt.eta_lo = 0.4;
        opt.eta_hi = 0.4;
        const EscapeSetScalar cert = build_escape_set_scalar(*field, opt);
        CHECK(cert.constant_field);
        CHECK(cert.epsilon == doctest::Approx(0.4).epsilon(1e-12));  // half the level
        CHECK(cert.w_min == 1.0);
        CHECK(cert.rate_floor == doctest::Approx(0.4).epsilon(1e-12));
    }

    SUBCASE("a nonnegative field is certified through its negation") {
        const EscapeSetScalar cert = build_escape_set_scalar(*bounded_well(true), well_options());
        CHECK(cert.flipped);
        CHECK(cert.eta == 1.0);
        CHECK(cert.rate_floor == doctest::Approx(2.0).epsilon(1e-6));

        const auto field = bounded_well(true);
        const StateSampler sampler = make_scalar_set_sampler(*field, cert, 3.0);
        Rng rng = make_rng(51);
        for (int i = 0; i < 50; ++i) {
            const auto [w0, th0] = sampler(rng);
            CHECK(w0[0] <= -cert.w_min + 1e-12);       // escape runs toward -infinity
            CHECK(field->g(th0)[0] >= cert.eta - 1e-12);
        }
        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        const EscapeRateReport rep = verify_escape_rate(
            *field, PerturbationFamily::adversarial(scalar_vec(-1.0), cert.epsilon), sampler,
            cert.rate_floor, 10.0, 15, cfg, 90);
        CHECK(rep.pass);
    }
}

TEST_CASE("scalar certificate: unbounded level set ledger") {
    const auto field = tilted_field();
    const EscapeSetScalar cert = build_escape_set_scalar(*field, tilted_options());

    SUBCASE("branch selection and sanity bands") {
        CHECK(!cert.bounded_boundary);
        CHECK(cert.eta == 0.875);
        CHECK(cert.sup_g == 1.25);
        CHECK(cert.C_theta > 0.45);
        CHECK(cert.C_theta < 0.55);
        CHECK(cert.r_bar > 40.0);
        CHECK(cert.r_bar < 90.0);
        CHECK(cert.epsilon > 0.012);
        CHECK(cert.epsilon < 0.03);
    }

    SUBCASE("constant chain identities") {
        CHECK(cert.C_w == doctest::Approx(cert.sup_g + 1.0).epsilon(1e-12));
        CHECK(cert.C2 == doctest::Approx(2.0 * (4.0 + cert.C_theta)).epsilon(1e-12));
        // alpha solves C2 (alpha + C_w alpha^2 / 2) = 1
        CHECK(cert.C2 * (cert.alpha + 0.5 * cert.C_w * cert.alpha * cert.alpha) ==
              doctest::Approx(1.0).epsilon(1e-10));
        CHECK(cert.C1 ==
              doctest::Approx(cert.C2 * (1.0 + 0.5 * cert.C_w * cert.alpha * cert.alpha))
                  .epsilon(1e-10));
        CHECK(cert.tau ==
              doctest::Approx(std::max(1.0, std::sqrt(cert.eta * cert.C1 / cert.C2)))
                  .epsilon(1e-12));
        CHECK(cert.tau == 1.0);  // eta C1 / C2 < 1 for this field
    }

    SUBCASE("asymptotic margins") {
        // Level direction: phi_1 = 2 (eta - 3/4) = 1/4; the spherical gradient
        // there has norm (1/2) sqrt(1 - phi_1^2).
        CHECK(cert.beta_inf == doctest::Approx(0.5 * std::sqrt(1.0 - 0.0625)).epsilon(1e-4));
        CHECK(cert.gamma_inf <= cert.eta / 4.0 + 1e-12);
        CHECK(cert.gamma_inf == doctest::Approx(cert.eta / 4.0).epsilon(1e-9));
        CHECK(cert.small_c ==
              doctest::Approx(std::min(
                                  cert.gamma_inf,
                                  (3.0 * cert.beta_inf * cert.beta_inf / (32.0 * cert.C2)) *
                                      std::log1p(cert.alpha * cert.C2 / cert.C1)))
                  .epsilon(1e-10));
        CHECK(cert.small_c > 0.0);
        CHECK(cert.epsilon ==
              doctest::Approx(std::min({cert.beta_inf * cert.beta_inf /
                                            (16.0 * cert.sup_grad_s_inf),
                                        cert.eta / 4.0, 1.0 / cert.r_bar}))
                  .epsilon(1e-12));
        CHECK(cert.w_min == doctest::Approx(cert.tau * cert.r_bar).epsilon(1e-12));
        CHECK(cert.rate_floor == doctest::Approx(cert.w_min * cert.eta / 4.0).epsilon(1e-12));
    }

    SUBCASE("escape rate holds on the unbounded branch") {
        const StateSampler sampler = make_scalar_set_sampler(*field, cert, cert.r_bar);
        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        const EscapeRateReport rep = verify_escape_rate(
            *field, PerturbationFamily::adversarial(scalar_vec(1.0), cert.epsilon), sampler,
            cert.rate_floor, 5.0, 10, cfg, 91);
        CHECK(rep.pass);
    }

    SUBCASE("a collar start above the level re-enters immediately") {
        // Start just outside K at radius 2.5 r_bar with the certified w floor;
        // the drift pushes the level value down, so the leading excursion must
        // re-enter and never climb past the small-c collar.
        const double r_c = 2.5 * cert.r_bar;
        const double target = -cert.eta + 0.25 * cert.small_c;
        const double phi1 = 2.0 * (-target - 0.75) * std::sqrt(1.0 + r_c * r_c) / r_c;
        REQUIRE(phi1 < 1.0);
        Vec th0(2);
        th0 << r_c * phi1, r_c * std::sqrt(1.0 - phi1 * phi1);
        const double g0 = field->g(th0)[0];
        REQUIRE(g0 > -cert.eta);
        REQUIRE(g0 < -cert.eta + 0.5 * cert.small_c);

        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        cfg.t_end = 5.0;
        const EscapeTrajectory traj = escape_ode_run(*field, PerturbationFamily::none(1),
                                                     scalar_vec(cert.w_min), th0, cfg);
        std::vector<double> series;
        for (const Vec& th : traj.theta) series.push_back(field->g(th)[0]);
        const ExcursionReport rep = analyze_level_excursions(series, cert.eta);
        CHECK(rep.n_excursions == 1);
        CHECK(rep.all_reentered);
        CHECK(rep.max_g_during <= -cert.eta + cert.small_c);
        CHECK(series.back() < -cert.eta);
    }
}

TEST_CASE("excursion bookkeeping") {
    SUBCASE("counts segments above the level and their re-entries") {
        const std::vector<double> series = {-1.2, -0.8, -0.9, -1.1, -0.7, -1.3};
        const ExcursionReport rep = analyze_level_excursions(series, 1.0);
        CHECK(rep.n_excursions == 2);
        CHECK(rep.all_reentered);
        CHECK(rep.max_g_during == -0.7);
        REQUIRE(rep.reentry_values.size() == 2);
        CHECK(rep.reentry_values[0] == -1.1);
        CHECK(rep.reentry_values[1] == -1.3);
    }

    SUBCASE("a trailing excursion is flagged as not re-entered") {
        const ExcursionReport rep = analyze_level_excursions({-1.2, -0.5}, 1.0);
        CHECK(rep.n_excursions == 1);
        CHECK(!rep.all_reentered);
    }

    SUBCASE("a series that stays below the level has no excursions") {
        const ExcursionReport rep = analyze_level_excursions({-1.5, -1.2, -1.01}, 1.0);
        CHECK(rep.n_excursions == 0);
        CHECK(rep.all_reentered);
        CHECK(rep.reentry_values.empty());
    }
}

namespace {

ThetaSampler radial_interior_sampler() {
    return [](Rng& rng) {
        const auto field = radial_field();
        for (int attempt = 0; attempt < 256; ++attempt) {
            Vec th = sphere_vec(rng, 2) * uniform01(rng);
            if (field->g(th)[0] <= -1.0) return th;
        }
        throw ValidationError("radial sampler: no interior point found");
    };
}

ThetaSampler ray_boundary_sampler(std::shared_ptr<FieldG> field, const Vec& v, double eta,
                                  double r_max) {
    return [field, v, eta, r_max](Rng& rng) {
        for (int attempt = 0; attempt < 256; ++attempt) {
            const Vec dir = sphere_vec(rng, field->d_theta());
            const auto hit = boundary_point_along_ray(*field, v, eta, Vec::Zero(field->d_theta()),
                                                      dir, r_max);
            if (hit) return *hit;
        }
        throw ValidationError("boundary sampler: no crossing found");
    };
}

}  // namespace

TEST_CASE("vector boundary condition and stable set") {
    Vec e1 = Vec::Zero(2);
    e1[0] = 1.0;

    SUBCASE("radial field: perfectly aligned everywhere") {
        const auto field = radial_field();
        const CondRefinedReport cond = cond_refined_check(
            *field, e1, 1.0, radial_interior_sampler(),
            ray_boundary_sampler(field, e1, 1.0, 5.0), 128, 7);
        CHECK(cond.pass);
        CHECK(!cond.inconclusive);
        CHECK(cond.lhs == 0.0);  // J J^T v is parallel to v in exact arithmetic
        CHECK(cond.rhs == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(cond.delta_lo == doctest::Approx(0.0));
        CHECK(cond.delta_hi == doctest::Approx(1.0));

        const StableSetVector cert = build_stable_set_vector(
            *field, e1, 1.0, cond, ray_boundary_sampler(field, e1, 1.0, 5.0), 128, 9);
        CHECK(cert.delta == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(cert.epsilon_max > 0.0);
    }

    SUBCASE("spiral field: curved but certifiable") {
        const auto field = spiral_field();
        const ThetaSampler interior = [field](Rng& rng) {
            for (int attempt = 0; attempt < 256; ++attempt) {
                Vec th = scalar_vec(2.0 * (uniform01(rng) - 0.5));
                Vec e = Vec::Zero(2);
                e[0] = 1.0;
                if (field->g(th).dot(e) <= -0.95) return th;
            }
            throw ValidationError("spiral sampler: no interior point found");
        };
        const CondRefinedReport cond = cond_refined_check(
            *field, e1, 0.95, interior, ray_boundary_sampler(field, e1, 0.95, 3.0), 256, 7);
        CHECK(cond.pass);
        CHECK(cond.lhs == doctest::Approx(0.0872).epsilon(0.2));
        CHECK(cond.rhs == doctest::Approx(0.9674).epsilon(0.02));

        const StableSetVector cert = build_stable_set_vector(
            *field, e1, 0.95, cond, ray_boundary_sampler(field, e1, 0.95, 3.0), 256, 9);
        CHECK(cert.delta == doctest::Approx(0.5 * (cond.delta_lo + cond.delta_hi)).epsilon(1e-12));
        const double d = cert.delta, gp = cert.gamma_prime, gm = cert.gamma;
        const double expect_eps =
            std::min(cert.beta * (d * std::sqrt(1 - gp * gp) - std::sqrt(1 - d * d) * gp),
                     cert.eta * (std::sqrt(1 - d * d) * gm - d * std::sqrt(1 - gm * gm)));
        CHECK(cert.epsilon_max == doctest::Approx(expect_eps).epsilon(1e-12));

        // trials: no trajectory may leave the certified set
        const StateSampler sample_A = [field, cert](Rng& rng) {
            for (int attempt = 0; attempt < 256; ++attempt) {
                const double a = cert.delta + (1.0 - cert.delta) * uniform01(rng);
                Vec tangent = Vec::Zero(2);
                tangent[1] = uniform01(rng) < 0.5 ? -1.0 : 1.0;
                Vec dir = a * cert.v + std::sqrt(1.0 - a * a) * tangent;
                const double mag = 0.5 + 1.5 * uniform01(rng);
                Vec th = scalar_vec(1.2 * (uniform01(rng) - 0.5));
                if (field->g(th).dot(cert.v) <= -cert.eta) return std::pair<Vec, Vec>{mag * dir, th};
            }
            throw ValidationError("sample_A: no admissible start found");
        };
        EscapeOdeConfig cfg;
        cfg.step_size = 0.01;
        const double tol = cert.eta * std::sqrt(1.0 - cert.delta * cert.delta) *
                               std::sqrt(1.0 - cert.gamma * cert.gamma) / cert.gamma +
                           cert.epsilon_max + 1e-6;
        for (auto kind : {0, 1, 2}) {
            PerturbationFamily fam =
                kind == 0   ? PerturbationFamily::constant_offset(2, cert.epsilon_max, 61)
                : kind == 1 ? PerturbationFamily::time_oscillating(2, cert.epsilon_max, 62)
                            : PerturbationFamily::adversarial(cert.v, cert.epsilon_max);
            const StableSetReport rep =
                verify_stable_set_vector(*field, cert, fam, sample_A, 25, 5.0, cfg, 71, tol);
            CHECK(rep.pass);
            for (double a : rep.per_trial_min_alignment) CHECK(a >= cert.delta - 1e-6);
            for (double l : rep.per_trial_max_level) CHECK(l <= -cert.eta + 1e-6);
        }

        // an oversized adversarial budget must break the certificate
        const StableSetReport broken = verify_stable_set_vector(
            *field, cert, PerturbationFamily::adversarial(cert.v, 5.0), sample_A, 10, 5.0, cfg,
            72, tol);
        CHECK(!broken.pass);
    }

    SUBCASE("degenerate boundary reports inconclusive") {
        const auto flat = std::make_shared<FunctionField>(2, 2, [](const Vec&) {
            Vec g(2);
            g << -1.0, 0.0;
            return g;
        });
        const ThetaSampler anywhere = [](Rng& rng) { return Vec(sphere_vec(rng, 2)); };
        const CondRefinedReport cond =
            cond_refined_check(*flat, e1, 1.0, anywhere, anywhere, 32, 5);
        CHECK(cond.inconclusive);
        CHECK(!cond.pass);
        CHECK(cond.degenerate_sample.size() == 2);
        CHECK_THROWS_AS(build_stable_set_vector(*flat, e1, 1.0, cond, anywhere, 32, 5),
                        ValidationError);
    }
}

TEST_CASE("local curvature constants") {
    SUBCASE("one-dimensional closed forms to high precision") {
        Mat J(2, 1), H(1, 1);
        J << 0.0, -0.45;
        H << 3.2025;
        const LocalConstants lc = local_constants(J, H, 7, 16, 20000);
        CHECK(lc.c1 == doctest::Approx(0.45 / std::sqrt(3.2025)).epsilon(1e-10));
        CHECK(lc.c2 == doctest::Approx(std::sqrt(3.2025) / 0.45).epsilon(1e-10));
        CHECK(lc.pass);  // c1 < c2
        CHECK(lc.c2_mesh >= 0.0);
        CHECK(lc.c2 == doctest::Approx(lc.c2_multistart).epsilon(1e-9));
    }

    SUBCASE("spiral field pipeline reproduces the closed forms at theta* = 0") {
        // At theta* = 0: J = (0, -0.45)^T and H = -<g, Hess g> = 3.2025.
        const auto field = spiral_field();
        const LocalConstants lc = local_constants_at(*field, Vec::Zero(1));
        CHECK(lc.c1 == doctest::Approx(0.45 / std::sqrt(3.2025)).epsilon(1e-5));
        CHECK(lc.c2 == doctest::Approx(std::sqrt(3.2025) / 0.45).epsilon(1e-4));
        CHECK(lc.pass);
    }

    SUBCASE("invariance under orthogonal reparameterization") {
        Rng rng = make_rng(83);
        Mat J0(2, 3);
        J0 << 0.3, -0.1, 0.2, 0.0, 0.4, -0.2;
        Mat B = Mat::Random(3, 3);
        Mat H0 = 2.0 * Mat::Identity(3, 3) + 0.25 * (B + B.transpose());
        const LocalConstants base = local_constants(J0, H0, 7, 24, 50000);

        Mat G(3, 3);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) G(i, j) = gaussian(rng);
        const Mat Q = Eigen::HouseholderQR<Mat>(G).householderQ();
        const LocalConstants rot = local_constants(J0 * Q.transpose(), Q * H0 * Q.transpose(), 11, 24, 50000);
        CHECK(rot.c1 == doctest::Approx(base.c1).epsilon(1e-6));
        CHECK(rot.c2 == doctest::Approx(base.c2).epsilon(1e-3));
    }

    SUBCASE("indefinite curvature is rejected") {
        Mat J(1, 2), H(2, 2);
        J << 0.1, 0.0;
        H << 1.0, 0.0, 0.0, -0.5;
        CHECK_THROWS_AS(local_constants(J, H), ValidationError);
    }
}

TEST_CASE("boundary search along rays") {
    Vec e1 = Vec::Zero(2);
    e1[0] = 1.0;

    SUBCASE("finds the radial level at the analytic radius") {
        const auto field = radial_field();
        Rng rng = make_rng(97);
        for (int trial = 0; trial < 20; ++trial) {
            const Vec dir = sphere_vec(rng, 2);
            const auto hit = boundary_point_along_ray(*field, e1, 1.0, Vec::Zero(2), dir, 5.0);
            REQUIRE(hit.has_value());
            CHECK(hit->norm() == doctest::Approx(std::sqrt(std::log(2.0))).epsilon(1e-9));
            CHECK(field->g(*hit).dot(e1) == doctest::Approx(-1.0).epsilon(1e-9));
        }
    }

    SUBCASE("returns nothing when the level is never crossed") {
        const auto field = radial_field();
        // <g, e1> <= -1/2 everywhere, so the 0.4 level has no boundary
        const auto hit = boundary_point_along_ray(*field, e1, 0.4, Vec::Zero(2), e1, 10.0);
        CHECK(!hit.has_value());
    }
}
