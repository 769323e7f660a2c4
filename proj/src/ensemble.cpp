#include "mfl/ensemble.hpp"

#include <cmath>
#include <limits>

namespace mfl {

void Ensemble::validate() const {
    if (particles.empty()) throw ValidationError("ensemble must hold at least one particle");
    // One block may be empty (a measure on just the other factor), but not both.
    if (d_w < 0 || d_theta < 0 || d_w + d_theta <= 0)
        throw ValidationError("ensemble dimensions must be nonnegative with positive total");
    for (const Particle& p : particles) {
        if (p.w.size() != d_w || p.theta.size() != d_theta)
            throw ValidationError("particle dimensions do not match the ensemble");
        if (!p.w.allFinite() || !p.theta.allFinite())
            throw ValidationError("particle has non-finite coordinates");
    }
}

namespace {

// Uniform draw from the unit ball in R^n: direction times radius^(1/n) law.
Vec ball_vec(Rng& rng, int n) {
    if (n == 0) return Vec();
    Vec dir = sphere_vec(rng, n);
    double r = std::pow(uniform01(rng), 1.0 / n);
    return r * dir;
}

Vec draw_block(InitSpec::Kind kind, const Vec& location, double scale, Rng& rng) {
    const int n = static_cast<int>(location.size());
    switch (kind) {
        case InitSpec::Kind::Gaussian:
            return location + scale * gaussian_vec(rng, n);
        case InitSpec::Kind::UniformBall:
            return location + scale * ball_vec(rng, n);
        case InitSpec::Kind::PointMass:
            return location;
        case InitSpec::Kind::Product:
            throw ValidationError("nested product init specs are not supported");
    }
    throw ValidationError("unknown init spec kind");
}

}  // namespace

Ensemble sample_ensemble(const InitSpec& spec, int m, int d_w, int d_theta) {
    if (m < 1) throw ValidationError("ensemble size must be at least 1");
    if (d_w < 0 || d_theta < 0 || d_w + d_theta <= 0)
        throw ValidationError("dimensions must be nonnegative with positive total");
    if (spec.scale < 0) throw ValidationError("init scale must be nonnegative");

    Vec location = spec.location;
    if (spec.kind != InitSpec::Kind::Product) {
        if (location.size() == 0) location = Vec::Zero(d_w + d_theta);
        if (location.size() != d_w + d_theta)
            throw ValidationError("init location length must equal d_w + d_theta");
    } else {
        if (spec.w_block.location.size() != 0 && spec.w_block.location.size() != d_w)
            throw ValidationError("product init: w block location length must equal d_w");
        if (spec.theta_block.location.size() != 0 && spec.theta_block.location.size() != d_theta)
            throw ValidationError("product init: theta block location length must equal d_theta");
    }

    Ensemble ens;
    ens.d_w = d_w;
    ens.d_theta = d_theta;
    ens.particles.resize(m);
    Rng rng = make_rng(spec.seed);
    for (int i = 0; i < m; ++i) {
        Particle& p = ens.particles[i];
        if (spec.kind == InitSpec::Kind::Product) {
            Vec wloc = spec.w_block.location.size() ? spec.w_block.location : Vec::Zero(d_w);
            Vec tloc = spec.theta_block.location.size() ? spec.theta_block.location : Vec::Zero(d_theta);
            p.w = draw_block(spec.w_block.kind, wloc, spec.w_block.scale, rng);
            p.theta = draw_block(spec.theta_block.kind, tloc, spec.theta_block.scale, rng);
        } else {
            Vec u = draw_block(spec.kind, location, spec.scale, rng);
            p.w = u.head(d_w);
            p.theta = u.tail(d_theta);
        }
    }
    ens.validate();
    return ens;
}

double second_moment(const Ensemble& ens) {
    std::vector<double> sq(ens.particles.size());
    for (std::size_t i = 0; i < ens.particles.size(); ++i) sq[i] = ens.particles[i].squared_norm();
    return pairwise_sum(sq) / static_cast<double>(ens.particles.size());
}

double psi2_norm(const Ensemble& ens, double tol) {
    if (tol <= 0) throw ValidationError("psi2_norm tolerance must be positive");
    const auto m = static_cast<double>(ens.particles.size());
    std::vector<double> sq(ens.particles.size());
    double max_sq = 0.0;
    for (std::size_t i = 0; i < ens.particles.size(); ++i) {
        sq[i] = ens.particles[i].squared_norm();
        max_sq = std::max(max_sq, sq[i]);
    }
    if (max_sq == 0.0) return 0.0;  // point mass at the origin

    auto feasible = [&](double c) {
        // mean of exp(|u_i|^2/c^2) <= 2, with early exit on overflow
        const double inv_c2 = 1.0 / (c * c);
        std::vector<double> terms(sq.size());
        for (std::size_t i = 0; i < sq.size(); ++i) {
            double e = sq[i] * inv_c2;
            if (e > 700.0) return false;  // exp overflows => definitely > 2m
            terms[i] = std::exp(e);
        }
        return pairwise_sum(terms) <= 2.0 * m;
    };

    // Bracket: below `lo` even the largest single term alone exceeds the
    // budget 2m, so the condition cannot hold; `hi` is grown geometrically
    // until feasible (it always becomes so since every term tends to 1).
    double max_norm = std::sqrt(max_sq);
    double lo = max_norm / std::sqrt(std::log(2.0 * m));
    double hi = std::max(lo * 2.0, max_norm * std::sqrt(m / std::log(2.0)));
    while (!feasible(hi)) hi *= 2.0;

    while ((hi - lo) > tol * hi) {
        double mid = 0.5 * (lo + hi);
        if (feasible(mid))
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

Ensemble pushforward(const Ensemble& ens, const std::function<Particle(const Particle&)>& map) {
    Ensemble out;
    out.d_w = ens.d_w;
    out.d_theta = ens.d_theta;
    out.particles.reserve(ens.particles.size());
    for (const Particle& p : ens.particles) {
        Particle q = map(p);
        if (!q.w.allFinite() || !q.theta.allFinite())
            throw ValidationError("pushforward map produced non-finite values");
        out.particles.push_back(std::move(q));
    }
    out.d_w = static_cast<int>(out.particles.front().w.size());
    out.d_theta = static_cast<int>(out.particles.front().theta.size());
    out.validate();
    return out;
}

}  // namespace mfl
