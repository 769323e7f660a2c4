#pragma once

// Empirical measures on parameter space Omega = R^{d_w} x R^{d_theta}:
// uniformly weighted particle collections, seeded samplers, moments and the
// measure-level sub-Gaussian norm.

#include "mfl/common.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mfl {

// One atom (w, theta) of an empirical measure.
struct Particle {
    Vec w;
    Vec theta;

    double squared_norm() const { return w.squaredNorm() + theta.squaredNorm(); }
};

// Uniform empirical measure (1/m) sum_i delta_{(w_i, theta_i)}.
struct Ensemble {
    int d_w = 0;
    int d_theta = 0;
    std::vector<Particle> particles;

    int m() const { return static_cast<int>(particles.size()); }

    // Throws ValidationError on size/dimension mismatch or non-finite entries.
    void validate() const;
};

// Seeded initial distribution. "gaussian" and "uniform-ball" are centered at
// `location` with spread `scale`; "product" draws w and theta from two
// independent sub-specs; "point-mass" puts every particle at `location`.
struct InitSpec {
    enum class Kind { Gaussian, UniformBall, Product, PointMass };

    Kind kind = Kind::Gaussian;
    Vec location;          // length d_w + d_theta (ignored for Product)
    double scale = 1.0;
    std::uint64_t seed = 0;

    // Only used when kind == Product: independent specs for the w block and
    // the theta block (their `location` lengths define the split).
    struct Block {
        Kind kind = Kind::Gaussian;
        Vec location;
        double scale = 1.0;
    };
    Block w_block;
    Block theta_block;
};

// Draws m i.i.d. particles; identical (spec, m) gives a bitwise-identical
// ensemble. d_w/d_theta are taken from the spec's location lengths.
Ensemble sample_ensemble(const InitSpec& spec, int m, int d_w, int d_theta);

// (1/m) sum_i |u_i|^2.
double second_moment(const Ensemble& ens);

// Measure-level sub-Gaussian norm: the smallest c > 0 such that
// (1/m) sum_i exp(|u_i|^2 / c^2) <= 2, found by bisection to relative
// precision tol. Returns 0 for the point mass at the origin.
double psi2_norm(const Ensemble& ens, double tol = 1e-10);

// Applies `map` to every particle, preserving order and weights. Throws
// ValidationError if the map produces non-finite values.
Ensemble pushforward(const Ensemble& ens, const std::function<Particle(const Particle&)>& map);

}  // namespace mfl
