#include "mfl/escape.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace mfl {

// ---------------------------------------------------------------------------
// Finite-difference defaults

Mat FieldG::jacobian(const Vec& theta) const {
    Mat J(d_w(), d_theta());
    for (int j = 0; j < d_theta(); ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(theta[j]));
        Vec tp = theta, tm = theta;
        tp[j] += h;
        tm[j] -= h;
        J.col(j) = (g(tp) - g(tm)) / (2.0 * h);
    }
    return J;
}

Mat FieldG::hessian_vector(const Vec& theta, const Vec& u) const {
    const int d = d_theta();
    Mat H(d, d);
    for (int j = 0; j < d; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(theta[j]));
        Vec tp = theta, tm = theta;
        tp[j] += h;
        tm[j] -= h;
        H.col(j) = (jacobian_tu(tp, u) - jacobian_tu(tm, u)) / (2.0 * h);
    }
    return 0.5 * (H + H.transpose());
}

// ---------------------------------------------------------------------------
// FunctionField

FunctionField::FunctionField(int d_w, int d_theta, GFn g_fn, JFn j_fn, HFn h_fn, double sup_g,
                             double sup_j)
    : d_w_(d_w), d_theta_(d_theta), g_fn_(std::move(g_fn)), j_fn_(std::move(j_fn)),
      h_fn_(std::move(h_fn)), sup_g_(sup_g), sup_j_(sup_j) {
    if (d_w_ <= 0 || d_theta_ <= 0) throw ValidationError("FunctionField: non-positive dimensions");
    if (!g_fn_) throw ValidationError("FunctionField: missing g callable");
}

Vec FunctionField::g(const Vec& theta) const {
    Vec out = g_fn_(theta);
    if (out.size() != d_w_) throw ValidationError("FunctionField: g returned wrong dimension");
    return out;
}

Mat FunctionField::jacobian(const Vec& theta) const {
    if (j_fn_) return j_fn_(theta);
    return FieldG::jacobian(theta);
}

Mat FunctionField::hessian_vector(const Vec& theta, const Vec& u) const {
    if (h_fn_) return h_fn_(theta, u);
    return FieldG::hessian_vector(theta, u);
}

// ---------------------------------------------------------------------------
// EnsembleField

EnsembleField::EnsembleField(std::shared_ptr<const ModelSpec> model, Dataset data, LossSpec loss,
                             const Ensemble& snapshot)
    : model_(std::move(model)), data_(std::move(data)) {
    if (!model_) throw ValidationError("EnsembleField: null model");
    model_->check_dataset(data_);
    const Mat P = predictor_mean(snapshot, *model_, data_);
    residual_ = risk_residual(loss, P, data_.Y);
}

int EnsembleField::d_w() const { return model_->d_w(); }
int EnsembleField::d_theta() const { return model_->d_theta(); }

Vec EnsembleField::g(const Vec& theta) const { return model_->phi_adjoint(theta, data_.X, residual_); }

Mat EnsembleField::jacobian(const Vec& theta) const {
    Mat J(d_w(), d_theta());
    Vec e = Vec::Zero(d_w());
    for (int k = 0; k < d_w(); ++k) {
        e[k] = 1.0;
        J.row(k) = model_->grad_theta_mean(theta, e, data_.X, residual_).transpose();
        e[k] = 0.0;
    }
    return J;
}

// ---------------------------------------------------------------------------
// Perturbations

Vec PerturbationFamily::offset(double t) const {
    switch (kind) {
        case Kind::None: return Vec::Zero(direction.size());
        case Kind::ConstantOffset: return epsilon * direction;
        case Kind::TimeOscillating: return epsilon * std::sin(omega * t) * direction;
        case Kind::AdversarialTowardBoundary: return epsilon * direction;
    }
    throw ValidationError("unknown perturbation kind");
}

PerturbationFamily::Kind PerturbationFamily::kind_from_string(const std::string& name) {
    if (name == "none") return Kind::None;
    if (name == "constant-offset") return Kind::ConstantOffset;
    if (name == "time-oscillating") return Kind::TimeOscillating;
    if (name == "adversarial-toward-boundary") return Kind::AdversarialTowardBoundary;
    throw ValidationError("unknown perturbation kind '" + name + "'");
}

std::string PerturbationFamily::to_string(Kind k) {
    switch (k) {
        case Kind::None: return "none";
        case Kind::ConstantOffset: return "constant-offset";
        case Kind::TimeOscillating: return "time-oscillating";
        case Kind::AdversarialTowardBoundary: return "adversarial-toward-boundary";
    }
    throw ValidationError("unknown perturbation kind");
}

PerturbationFamily PerturbationFamily::none(int d_w) {
    PerturbationFamily p;
    p.kind = Kind::None;
    p.direction = Vec::Zero(d_w);
    return p;
}

PerturbationFamily PerturbationFamily::constant_offset(int d_w, double eps, std::uint64_t seed) {
    if (eps < 0.0) throw ValidationError("perturbation: negative epsilon");
    PerturbationFamily p;
    p.kind = Kind::ConstantOffset;
    p.epsilon = eps;
    Rng rng = make_rng(seed, 0x706572745f63ULL);
    p.direction = sphere_vec(rng, d_w);
    return p;
}

PerturbationFamily PerturbationFamily::time_oscillating(int d_w, double eps, std::uint64_t seed,
                                                        double omega) {
    if (eps < 0.0) throw ValidationError("perturbation: negative epsilon");
    PerturbationFamily p;
    p.kind = Kind::TimeOscillating;
    p.epsilon = eps;
    p.omega = omega;
    Rng rng = make_rng(seed, 0x706572745f6fULL);
    p.direction = sphere_vec(rng, d_w);
    return p;
}

PerturbationFamily PerturbationFamily::adversarial(const Vec& v_toward, double eps) {
    if (eps < 0.0) throw ValidationError("perturbation: negative epsilon");
    const double n = v_toward.norm();
    if (n <= 0.0) throw ValidationError("perturbation: zero adversarial direction");
    PerturbationFamily p;
    p.kind = Kind::AdversarialTowardBoundary;
    p.epsilon = eps;
    p.direction = v_toward / n;
    return p;
}

// ---------------------------------------------------------------------------
// Reduced ODE

void EscapeOdeConfig::validate() const {
    if (!(step_size > 0.0)) throw ValidationError("escape ode: step_size must be positive");
    if (!(t_end > 0.0)) throw ValidationError("escape ode: t_end must be positive");
    if (record_every <= 0) throw ValidationError("escape ode: record_every must be positive");
}

namespace {

struct OdeState {
    Vec w, theta;
};

OdeState ode_rhs(const FieldG& field, const PerturbationFamily& pert, double t, const OdeState& s) {
    OdeState d;
    d.w = -(field.g(s.theta) + pert.offset(t));
    d.theta = -field.jacobian_tu(s.theta, s.w);
    return d;
}

}  // namespace

EscapeTrajectory escape_ode_run(const FieldG& field, const PerturbationFamily& pert, const Vec& w0,
                                const Vec& theta0, const EscapeOdeConfig& cfg) {
    cfg.validate();
    if (w0.size() != field.d_w() || theta0.size() != field.d_theta())
        throw ValidationError("escape ode: state dimension mismatch");
    if (pert.direction.size() != field.d_w())
        throw ValidationError("escape ode: perturbation dimension mismatch");

    OdeState s{w0, theta0};
    EscapeTrajectory traj;

    const double h = cfg.step_size;
    const long n_full = static_cast<long>(std::floor(cfg.t_end / h + 1e-12));
    const double rem = cfg.t_end - static_cast<double>(n_full) * h;
    const bool has_partial = rem > 1e-12 * std::max(1.0, cfg.t_end);
    const long n_steps = n_full + (has_partial ? 1 : 0);

    const auto record = [&](double t) {
        traj.times.push_back(t);
        traj.w.push_back(s.w);
        traj.theta.push_back(s.theta);
        traj.half_w_sq.push_back(0.5 * s.w.squaredNorm());
        traj.rate.push_back(-s.w.dot(field.g(s.theta) + pert.offset(t)));
    };
    const auto guard = [&](long step) {
        if (!s.w.allFinite() || !s.theta.allFinite())
            throw DivergenceError("escape ode: non-finite state at step " + std::to_string(step));
    };

    guard(0);
    record(0.0);
    double t = 0.0;
    for (long step = 0; step < n_steps; ++step) {
        const double dt = (has_partial && step == n_steps - 1) ? rem : h;
        const OdeState k1 = ode_rhs(field, pert, t, s);
        OdeState s2{s.w + 0.5 * dt * k1.w, s.theta + 0.5 * dt * k1.theta};
        const OdeState k2 = ode_rhs(field, pert, t + 0.5 * dt, s2);
        OdeState s3{s.w + 0.5 * dt * k2.w, s.theta + 0.5 * dt * k2.theta};
        const OdeState k3 = ode_rhs(field, pert, t + 0.5 * dt, s3);
        OdeState s4{s.w + dt * k3.w, s.theta + dt * k3.theta};
        const OdeState k4 = ode_rhs(field, pert, t + dt, s4);
        s.w += (dt / 6.0) * (k1.w + 2.0 * k2.w + 2.0 * k3.w + k4.w);
        s.theta += (dt / 6.0) * (k1.theta + 2.0 * k2.theta + 2.0 * k3.theta + k4.theta);
        t += dt;
        guard(step + 1);
        if ((step + 1) % cfg.record_every == 0 || step + 1 == n_steps) record(t);
    }
    return traj;
}

void write_escape_trajectory_csv(const std::string& path, const EscapeTrajectory& traj) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open " + path);
    out << "t";
    const int dw = traj.w.empty() ? 0 : static_cast<int>(traj.w.front().size());
    const int dt = traj.theta.empty() ? 0 : static_cast<int>(traj.theta.front().size());
    for (int i = 0; i < dw; ++i) out << ",w_" << i;
    for (int i = 0; i < dt; ++i) out << ",theta_" << i;
    out << ",half_w_sq,rate\n";
    for (size_t k = 0; k < traj.times.size(); ++k) {
        out << format_double(traj.times[k]);
        for (int i = 0; i < dw; ++i) out << ',' << format_double(traj.w[k][i]);
        for (int i = 0; i < dt; ++i) out << ',' << format_double(traj.theta[k][i]);
        out << ',' << format_double(traj.half_w_sq[k]) << ',' << format_double(traj.rate[k]) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Rate verification

EscapeRateReport verify_escape_rate(const FieldG& field, const PerturbationFamily& pert,
                                    const StateSampler& sample_A, double eta, double t_end,
                                    int n_trials, const EscapeOdeConfig& base_cfg, std::uint64_t seed,
                                    double tolerance) {
    if (n_trials <= 0) throw ValidationError("verify_escape_rate: n_trials must be positive");
    EscapeOdeConfig cfg = base_cfg;
    cfg.t_end = t_end;

    EscapeRateReport rep;
    rep.eta = eta;
    rep.tolerance = tolerance;
    rep.min_rate = std::numeric_limits<double>::infinity();

    for (int trial = 0; trial < n_trials; ++trial) {
        Rng rng = make_rng(seed, 0xabcd0000ULL + static_cast<std::uint64_t>(trial));
        const auto [w0, theta0] = sample_A(rng);
        const EscapeTrajectory traj = escape_ode_run(field, pert, w0, theta0, cfg);

        double min_rate = std::numeric_limits<double>::infinity();
        for (double r : traj.rate) min_rate = std::min(min_rate, r);
        rep.per_trial_min_rate.push_back(min_rate);
        rep.min_rate = std::min(rep.min_rate, min_rate);

        // slope of |w_t| against t
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        const int n = static_cast<int>(traj.times.size());
        for (int i = 0; i < n; ++i) {
            const double x = traj.times[i], y = traj.w[static_cast<size_t>(i)].norm();
            sx += x; sy += y; sxx += x * x; sxy += x * y;
        }
        const double den = sxx * n - sx * sx;
        rep.per_trial_w_slope.push_back(den > 0.0 ? (sxy * n - sx * sy) / den : 0.0);
    }
    rep.pass = rep.min_rate >= eta - tolerance;
    return rep;
}

// ---------------------------------------------------------------------------
// Scalar construction helpers

namespace {

// Scalar view of a d_w = 1 field, possibly sign-flipped.
struct ScalarView {
    const FieldG& field;
    double sign;

    double value(const Vec& theta) const { return sign * field.g(theta)[0]; }
    Vec grad(const Vec& theta) const { return sign * field.jacobian(theta).row(0).transpose(); }
};

std::vector<Vec> sphere_directions(int d, int count, std::uint64_t seed) {
    std::vector<Vec> dirs;
    dirs.reserve(static_cast<size_t>(count));
    Rng rng = make_rng(seed, 0x64697273ULL);
    for (int i = 0; i < count; ++i) dirs.push_back(sphere_vec(rng, d));
    return dirs;
}

// First root of value(from + t*dir) + eta = 0 along t in (0, t_max]; the
// start must be strictly inside (value < -eta).
std::optional<double> first_level_crossing(const ScalarView& gs, double eta, const Vec& from,
                                           const Vec& dir, double t_max) {
    const int n_scan = 128;
    double t_prev = 0.0;
    double f_prev = gs.value(from) + eta;
    if (f_prev >= 0.0) return std::nullopt;
    for (int i = 1; i <= n_scan; ++i) {
        // geometric refinement near the origin, linear afterwards
        const double t = t_max * static_cast<double>(i) / n_scan;
        const double f = gs.value(from + t * dir) + eta;
        if (f >= 0.0) {
            double lo = t_prev, hi = t;
            for (int it = 0; it < 80; ++it) {
                const double mid = 0.5 * (lo + hi);
                if (gs.value(from + mid * dir) + eta >= 0.0)
                    hi = mid;
                else
                    lo = mid;
            }
            return 0.5 * (lo + hi);
        }
        t_prev = t;
        f_prev = f;
    }
    return std::nullopt;
}

// Geodesic bisection for a root of f on the unit sphere between two points
// with opposite signs.
Vec slerp(const Vec& a, const Vec& b, double s) {
    Vec v = (1.0 - s) * a + s * b;
    const double n = v.norm();
    if (n < 1e-12) {
        // nearly antipodal: nudge deterministically
        Vec w = a;
        w[0] += 0.5;
        v = (1.0 - s) * a + s * w;
        return v / v.norm();
    }
    return v / n;
}

}  // namespace

Vec AsymptoticScalarField::grad(const Vec& phi) const {
    if (!value) throw ValidationError("asymptotic profile: missing value callable");
    Vec gvec;
    if (sphere_grad) {
        gvec = sphere_grad(phi);
    } else {
        const int d = static_cast<int>(phi.size());
        gvec.resize(d);
        for (int j = 0; j < d; ++j) {
            const double h = 1e-6;
            Vec pp = phi, pm = phi;
            pp[j] += h;
            pm[j] -= h;
            gvec[j] = (value(pp / pp.norm()) - value(pm / pm.norm())) / (2.0 * h);
        }
    }
    // project onto the tangent space at phi
    return gvec - gvec.dot(phi) * phi;
}

EscapeSetScalar build_escape_set_scalar(const FieldG& field, const ScalarBuildOptions& opt) {
    if (field.d_w() != 1) throw ValidationError("scalar construction requires d_w = 1");
    if (!(opt.eta_lo > 0.0) || opt.eta_hi < opt.eta_lo)
        throw ValidationError("scalar construction: bad eta search interval");
    const int d = field.d_theta();

    // Probe the field over radii x directions.
    const std::vector<Vec> dirs = sphere_directions(d, opt.n_directions, opt.seed);
    std::vector<double> radii{0.0};
    for (int i = 0; i <= 32; ++i)
        radii.push_back(1e-2 * std::pow(opt.probe_radius / 1e-2, static_cast<double>(i) / 32.0));

    double gmin = std::numeric_limits<double>::infinity();
    double gmax = -std::numeric_limits<double>::infinity();
    double sup_abs_g = 0.0, sup_grad_sample = 0.0;
    Vec argmin = Vec::Zero(d);
    for (const Vec& phi : dirs) {
        for (double r : radii) {
            const Vec theta = r * phi;
            const double v = field.g(theta)[0];
            if (v < gmin) {
                gmin = v;
                argmin = theta;
            }
            gmax = std::max(gmax, v);
            sup_abs_g = std::max(sup_abs_g, std::abs(v));
            sup_grad_sample = std::max(sup_grad_sample, field.jacobian(theta).row(0).norm());
        }
    }
    if (sup_abs_g < 1e-12) throw ValidationError("scalar construction: field is identically zero");

    EscapeSetScalar cert;
    cert.sup_g = field.sup_g() >= 0.0 ? field.sup_g() : sup_abs_g;
    cert.sup_grad = field.sup_jacobian() >= 0.0 ? field.sup_jacobian() : sup_grad_sample;

    // Sign handling: build against -g when g never goes negative.
    cert.flipped = gmin >= 0.0;
    const ScalarView gs{field, cert.flipped ? -1.0 : 1.0};
    const double smin = cert.flipped ? -gmax : gmin;
    const double smax = cert.flipped ? -gmin : gmax;

    // Constant-field short circuit.
    if (smax - smin < 1e-12) {
        const double eta0 = -smax;
        if (eta0 <= 0.0) throw ValidationError("scalar construction: constant field with wrong sign");
        cert.constant_field = true;
        cert.eta = eta0;
        cert.epsilon = 0.5 * eta0;
        cert.w_min = 1.0;
        cert.rate_floor = cert.w_min * (eta0 - cert.epsilon);
        cert.bounded_boundary = false;
        return cert;
    }

    // Regular-value search over the eta grid.
    struct Candidate {
        double eta = 0.0;
        double grad_min = 0.0;
        bool bounded = false;
        std::vector<Vec> boundary;
        Vec interior;
    };
    std::optional<Candidate> best;
    std::string evidence;

    for (int k = 0; k < opt.n_eta_grid; ++k) {
        const double eta = opt.n_eta_grid == 1
                               ? opt.eta_lo
                               : opt.eta_lo + (opt.eta_hi - opt.eta_lo) * k / (opt.n_eta_grid - 1.0);
        // interior point: the sampled minimizer of the signed view
        Vec inside = argmin;
        if (cert.flipped) {
            // argmin currently tracks min of raw g = -max of view; recompute for view
            double vmin = std::numeric_limits<double>::infinity();
            for (const Vec& phi : dirs)
                for (double r : radii) {
                    const Vec theta = r * phi;
                    const double v = gs.value(theta);
                    if (v < vmin) {
                        vmin = v;
                        inside = theta;
                    }
                }
        }
        if (gs.value(inside) > -eta - 1e-9) {
            evidence += "eta=" + std::to_string(eta) + ": level not reached; ";
            continue;
        }
        Candidate cand;
        cand.eta = eta;
        cand.interior = inside;
        cand.grad_min = std::numeric_limits<double>::infinity();
        for (const Vec& phi : dirs) {
            const auto t = first_level_crossing(gs, eta, inside, phi, opt.probe_radius);
            if (t) {
                const Vec b = inside + *t * phi;
                cand.boundary.push_back(b);
                cand.grad_min = std::min(cand.grad_min, gs.grad(b).norm());
            }
        }
        if (cand.boundary.empty()) {
            evidence += "eta=" + std::to_string(eta) + ": no boundary found; ";
            continue;
        }
        cand.bounded = true;
        for (const Vec& phi : dirs)
            if (gs.value(opt.probe_radius * phi) <= -eta) {
                cand.bounded = false;
                break;
            }
        if (cand.grad_min < opt.regular_floor) {
            evidence += "eta=" + std::to_string(eta) +
                        ": sampled min |grad g| = " + std::to_string(cand.grad_min) + "; ";
            continue;
        }
        if (!best || cand.grad_min > best->grad_min) best = std::move(cand);
    }
    if (!best)
        throw ValidationError("scalar construction: no regular level found in the search interval (" +
                              evidence + ")");

    cert.eta = best->eta;
    cert.bounded_boundary = best->bounded;
    cert.beta = best->grad_min;
    cert.boundary_grad_min = best->grad_min;
    cert.n_boundary_samples = static_cast<int>(best->boundary.size());

    if (cert.bounded_boundary) {
        cert.epsilon = 0.5 * std::min(cert.beta * cert.beta / cert.sup_grad, cert.eta);
        cert.w_min = 2.0 * cert.eta / (cert.eta - cert.epsilon);
        cert.rate_floor = cert.w_min * (cert.eta - cert.epsilon);
        return cert;
    }

    // Unbounded branch: asymptotic ledger. Requires a declared profile.
    if (!opt.g_inf)
        throw ValidationError(
            "scalar construction: level set reaches the probe radius; a directional profile must be "
            "declared for the unbounded branch");
    const AsymptoticScalarField& prof = *opt.g_inf;
    const double flip = cert.flipped ? -1.0 : 1.0;
    const auto prof_value = [&](const Vec& phi) { return flip * prof.value(phi); };
    const auto prof_grad = [&](const Vec& phi) { return Vec(flip * prof.grad(phi)); };

    cert.C_w = cert.sup_g + 1.0;
    // C_theta: sup |grad g| together with sup_r r |grad g(r phi)|.
    double sup_r_grad = 0.0;
    for (const Vec& phi : dirs)
        for (double r : radii)
            if (r > 0.0) sup_r_grad = std::max(sup_r_grad, r * field.jacobian(r * phi).row(0).norm());
    cert.C_theta = std::max(cert.sup_grad, sup_r_grad);
    cert.C2 = 2.0 * (4.0 + cert.C_theta);
    // largest alpha with C2 * (alpha + C_w alpha^2 / 2) <= 1
    cert.alpha = (-1.0 + std::sqrt(1.0 + 2.0 * cert.C_w / cert.C2)) / cert.C_w;
    cert.C1 = 9.0 + cert.C_w * (4.0 + cert.C_theta) * cert.alpha * cert.alpha;
    cert.tau = std::max(1.0, std::sqrt(cert.eta * cert.C1 / cert.C2));

    // Spherical level set of the profile at -eta.
    std::vector<Vec> level_pts;
    {
        std::vector<Vec> above, below;
        for (const Vec& phi : dirs) {
            const double v = prof_value(phi) + cert.eta;
            (v >= 0.0 ? above : below).push_back(phi);
        }
        if (above.empty() || below.empty())
            throw ValidationError("scalar construction: profile level set not bracketed by samples");
        const size_t pairs = std::min<size_t>(static_cast<size_t>(opt.n_directions),
                                              std::max(above.size(), below.size()));
        for (size_t i = 0; i < pairs; ++i) {
            Vec a = above[i % above.size()];
            Vec b = below[i % below.size()];
            double lo = 0.0, hi = 1.0;  // f(a) >= 0 at s=0 ... sign convention below
            for (int it = 0; it < 60; ++it) {
                const double mid = 0.5 * (lo + hi);
                const double v = prof_value(slerp(a, b, mid)) + cert.eta;
                if (v >= 0.0)
                    lo = mid;
                else
                    hi = mid;
            }
            level_pts.push_back(slerp(a, b, 0.5 * (lo + hi)));
        }
    }
    cert.beta_inf = std::numeric_limits<double>::infinity();
    for (const Vec& phi : level_pts) cert.beta_inf = std::min(cert.beta_inf, prof_grad(phi).norm());
    if (!(cert.beta_inf > opt.regular_floor))
        throw ValidationError("scalar construction: profile level is not regular (sampled)");

    // Dense profile statistics for the band search.
    const std::vector<Vec> dense = sphere_directions(d, 8 * opt.n_directions, opt.seed ^ 0x9999ULL);
    double sup_grad_s = 0.0, band_max = 0.0;
    std::vector<std::pair<double, double>> prof_samples;  // (value + eta, |grad_S|)
    prof_samples.reserve(dense.size() + level_pts.size());
    for (const Vec& phi : dense) {
        const double v = prof_value(phi) + cert.eta;
        const double gn = prof_grad(phi).norm();
        sup_grad_s = std::max(sup_grad_s, gn);
        band_max = std::max(band_max, std::abs(v));
        prof_samples.emplace_back(v, gn);
    }
    for (const Vec& phi : level_pts) prof_samples.emplace_back(0.0, prof_grad(phi).norm());
    cert.sup_grad_s_inf = sup_grad_s;

    // largest gamma with inf{|grad_S| : |value + eta| <= gamma} >= beta_inf / 2
    const auto band_inf = [&](double gamma) {
        double inf = std::numeric_limits<double>::infinity();
        for (const auto& [v, gn] : prof_samples)
            if (std::abs(v) <= gamma) inf = std::min(inf, gn);
        return inf;
    };
    double glo = 0.0, ghi = band_max;
    if (band_inf(band_max) >= 0.5 * cert.beta_inf) {
        glo = band_max;
    } else {
        for (int it = 0; it < 50; ++it) {
            const double mid = 0.5 * (glo + ghi);
            if (band_inf(mid) >= 0.5 * cert.beta_inf)
                glo = mid;
            else
                ghi = mid;
        }
    }
    const double gamma_prime_inf = glo;
    cert.gamma_inf = std::min(gamma_prime_inf, cert.eta / 4.0);
    cert.small_c = std::min(cert.gamma_inf, (3.0 * cert.beta_inf * cert.beta_inf / (32.0 * cert.C2)) *
                                                std::log(1.0 + cert.alpha * cert.C2 / cert.C1));

    // Stabilization radius: both uniform gaps below their thresholds from
    // r_bar on (checked on a geometric grid up to r_grid_max).
    const double thresh_val = std::min({cert.small_c / 4.0, cert.eta / 4.0, cert.gamma_inf});
    const double thresh_grad =
        std::min({cert.beta_inf * cert.beta_inf / (16.0 * sup_grad_s), cert.eta / 4.0, 1.0});
    const int n_r = 160;
    std::vector<double> r_grid, gap_val(n_r), gap_grad(n_r);
    for (int i = 0; i < n_r; ++i)
        r_grid.push_back(std::pow(10.0, std::log10(1.0) +
                                            (std::log10(opt.r_grid_max) - 0.0) * i / (n_r - 1.0)));
    for (int i = 0; i < n_r; ++i) {
        const double r = r_grid[static_cast<size_t>(i)];
        double gv = 0.0, gg = 0.0;
        for (const Vec& phi : dirs) {
            const Vec theta = r * phi;
            gv = std::max(gv, std::abs(gs.value(theta) - prof_value(phi)));
            const Vec grad_full = gs.grad(theta);
            const Vec tang = grad_full - grad_full.dot(phi) * phi;
            gg = std::max(gg, (r * tang - prof_grad(phi)).norm());
        }
        gap_val[static_cast<size_t>(i)] = gv;
        gap_grad[static_cast<size_t>(i)] = gg;
    }
    int first_ok = -1;
    for (int i = n_r - 1; i >= 0; --i) {
        if (gap_val[static_cast<size_t>(i)] <= thresh_val &&
            gap_grad[static_cast<size_t>(i)] <= thresh_grad)
            first_ok = i;
        else
            break;
    }
    if (first_ok < 0)
        throw ValidationError("scalar construction: stabilization radius not found below r_grid_max");
    cert.r_bar = std::max(1.0, r_grid[static_cast<size_t>(first_ok)]);

    cert.epsilon = std::min({cert.beta_inf * cert.beta_inf / (16.0 * sup_grad_s), cert.eta / 4.0,
                             1.0 / cert.r_bar});
    cert.w_min = cert.tau * cert.r_bar;
    cert.rate_floor = cert.w_min * cert.eta / 4.0;
    return cert;
}

StateSampler make_scalar_set_sampler(const FieldG& field, const EscapeSetScalar& cert,
                                     double theta_radius) {
    if (field.d_w() != 1) throw ValidationError("scalar sampler requires d_w = 1");
    const int d = field.d_theta();
    const double sign = cert.flipped ? -1.0 : 1.0;
    return [&field, cert, theta_radius, d, sign](Rng& rng) {
        Vec theta = Vec::Zero(d);
        if (!cert.constant_field) {
            bool found = false;
            for (int attempt = 0; attempt < 512; ++attempt) {
                Vec cand = theta_radius * std::pow(uniform01(rng), 1.0 / d) * sphere_vec(rng, d);
                if (sign * field.g(cand)[0] <= -cert.eta) {
                    theta = cand;
                    found = true;
                    break;
                }
            }
            if (!found)
                throw ValidationError("scalar sampler: no point of the sublevel set found in the ball");
        }
        Vec w(1);
        w[0] = sign * (cert.w_min * (1.0 + uniform01(rng)));
        return std::make_pair(w, theta);
    };
}

ExcursionReport analyze_level_excursions(const std::vector<double>& g_series, double eta) {
    ExcursionReport rep;
    bool outside = false;
    bool closed = true;
    for (double v : g_series) {
        if (v > -eta) {
            if (!outside) {
                ++rep.n_excursions;
                outside = true;
                closed = false;
            }
            rep.max_g_during = std::max(rep.max_g_during, v);
        } else {
            if (outside) {
                rep.reentry_values.push_back(v);
                closed = true;
            }
            outside = false;
        }
    }
    if (!closed) rep.all_reentered = false;
    return rep;
}

// ---------------------------------------------------------------------------
// Vector certificates

CondRefinedReport cond_refined_check(const FieldG& field, const Vec& v_in, double eta,
                                     const ThetaSampler& sample_K, const ThetaSampler& sample_boundary,
                                     int n_samples, std::uint64_t seed, double margin_guard) {
    if (n_samples <= 0) throw ValidationError("cond_refined_check: n_samples must be positive");
    const double vn = v_in.norm();
    if (vn <= 0.0) throw ValidationError("cond_refined_check: zero direction");
    const Vec v = v_in / vn;
    if (!(eta > 0.0)) throw ValidationError("cond_refined_check: eta must be positive");

    CondRefinedReport rep;
    rep.margin = margin_guard;
    rep.lhs = 0.0;
    rep.rhs = std::numeric_limits<double>::infinity();

    Rng rng_b = make_rng(seed, 0x626f756eULL);
    for (int i = 0; i < n_samples; ++i) {
        const Vec theta = sample_boundary(rng_b);
        const Mat J = field.jacobian(theta);
        const Vec y = J * (J.transpose() * v);
        const double ny = y.norm();
        if (ny < 1e-12) {
            rep.inconclusive = true;
            rep.degenerate_sample = theta;
            continue;
        }
        const Vec perp = y - y.dot(v) * v;
        rep.lhs = std::max(rep.lhs, perp.norm() / ny);
    }

    Rng rng_k = make_rng(seed, 0x696e7465ULL);
    for (int i = 0; i < n_samples; ++i) {
        const Vec theta = sample_K(rng_k);
        const Vec gv = field.g(theta);
        const double n = gv.norm();
        if (n < 1e-300) continue;
        rep.rhs = std::min(rep.rhs, std::abs(gv.dot(v)) / n);
    }

    rep.pass = !rep.inconclusive && rep.lhs + margin_guard < rep.rhs;
    if (rep.pass) {
        rep.delta_lo = rep.lhs;
        rep.delta_hi = rep.rhs;
    }
    return rep;
}

StableSetVector build_stable_set_vector(const FieldG& field, const Vec& v_in, double eta,
                                        const CondRefinedReport& cond, const ThetaSampler& sample_boundary,
                                        int n_samples, std::uint64_t seed) {
    if (!cond.pass) throw ValidationError("stable set: boundary condition did not pass");
    const Vec v = v_in / v_in.norm();
    StableSetVector cert;
    cert.v = v;
    cert.eta = eta;
    cert.gamma_prime = cond.lhs;
    cert.gamma = cond.rhs;
    cert.delta = 0.5 * (cond.delta_lo + cond.delta_hi);

    cert.beta = std::numeric_limits<double>::infinity();
    Rng rng = make_rng(seed, 0x62657461ULL);
    for (int i = 0; i < n_samples; ++i) {
        const Vec theta = sample_boundary(rng);
        cert.beta = std::min(cert.beta, (field.jacobian(theta).transpose() * v).norm());
    }

    const double d = cert.delta, gp = cert.gamma_prime, gm = cert.gamma;
    const double margin_K = d * std::sqrt(1.0 - gp * gp) - std::sqrt(1.0 - d * d) * gp;
    const double margin_align = std::sqrt(1.0 - d * d) * gm - d * std::sqrt(1.0 - gm * gm);
    cert.epsilon_max = std::min(cert.beta * margin_K, eta * margin_align);
    if (!(cert.epsilon_max > 0.0)) throw ValidationError("stable set: empty perturbation budget");
    return cert;
}

StableSetReport verify_stable_set_vector(const FieldG& field, const StableSetVector& cert,
                                         const PerturbationFamily& pert, const StateSampler& sample_A,
                                         int n_trials, double t_end, const EscapeOdeConfig& base_cfg,
                                         std::uint64_t seed, double tolerance) {
    if (n_trials <= 0) throw ValidationError("verify_stable_set_vector: n_trials must be positive");
    EscapeOdeConfig cfg = base_cfg;
    cfg.t_end = t_end;

    StableSetReport rep;
    rep.eta_delta = cert.eta * cert.delta;
    rep.tolerance = tolerance;
    bool ok = true;

    for (int trial = 0; trial < n_trials; ++trial) {
        Rng rng = make_rng(seed, 0x57ab1e00ULL + static_cast<std::uint64_t>(trial));
        const auto [w0, theta0] = sample_A(rng);
        const double a0 = cert.v.dot(w0) / w0.norm();
        const double l0 = field.g(theta0).dot(cert.v);
        if (a0 < cert.delta - 1e-12 || l0 > -cert.eta + 1e-12) {
            ++rep.n_outside_A;
            continue;
        }
        const EscapeTrajectory traj = escape_ode_run(field, pert, w0, theta0, cfg);

        double min_align = std::numeric_limits<double>::infinity();
        double max_level = -std::numeric_limits<double>::infinity();
        double min_w_rate = std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < traj.times.size(); ++k) {
            const double wn = traj.w[k].norm();
            if (wn < 1e-300) continue;
            min_align = std::min(min_align, cert.v.dot(traj.w[k]) / wn);
            max_level = std::max(max_level, field.g(traj.theta[k]).dot(cert.v));
            min_w_rate = std::min(min_w_rate, traj.rate[k] / wn);  // d/dt |w| = rate / |w|
        }
        rep.per_trial_min_alignment.push_back(min_align);
        rep.per_trial_max_level.push_back(max_level);
        rep.per_trial_min_w_rate.push_back(min_w_rate);

        if (min_align < cert.delta - 1e-6) ok = false;
        if (max_level > -cert.eta + 1e-6) ok = false;
        if (min_w_rate < rep.eta_delta - tolerance) ok = false;
    }
    rep.pass = ok && rep.per_trial_min_alignment.size() + static_cast<size_t>(rep.n_outside_A) ==
                         static_cast<size_t>(n_trials) &&
               !rep.per_trial_min_alignment.empty();
    return rep;
}

// ---------------------------------------------------------------------------
// Local curvature constants

namespace {

double c2_objective(const Mat& H, const Mat& G, const Vec& y) {
    const double den = (G * y).norm();
    if (den < 1e-14) return std::numeric_limits<double>::infinity();
    return y.dot(H * y) / den;
}

// Projected-gradient descent of c2_objective on the unit sphere.
double c2_from_start(const Mat& H, const Mat& G, Vec y) {
    y.normalize();
    double f = c2_objective(H, G, y);
    double step = 0.1;
    for (int it = 0; it < 400; ++it) {
        const Vec Gy = G * y;
        const double den = Gy.norm();
        if (den < 1e-14) break;
        const double num = y.dot(H * y);
        Vec grad = 2.0 * (H * y) / den - num * (G.transpose() * Gy) / (den * den * den);
        grad -= grad.dot(y) * y;  // tangent projection
        if (grad.norm() < 1e-14) break;
        bool moved = false;
        while (step > 1e-14) {
            Vec cand = y - step * grad;
            cand.normalize();
            const double fc = c2_objective(H, G, cand);
            if (fc < f - 1e-15) {
                y = cand;
                f = fc;
                moved = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break;
    }
    return f;
}

}  // namespace

LocalConstants local_constants(const Mat& J, const Mat& H_in, std::uint64_t seed, int n_starts,
                               int mesh_points) {
    const int d = static_cast<int>(H_in.rows());
    if (H_in.cols() != d || J.cols() != d) throw ValidationError("local_constants: shape mismatch");
    if ((H_in - H_in.transpose()).norm() > 1e-8 * std::max(1.0, H_in.norm()))
        throw ValidationError("local_constants: H not symmetric");
    const Mat H = 0.5 * (H_in + H_in.transpose());
    Eigen::LLT<Mat> llt(H);
    if (llt.info() != Eigen::Success)
        throw ValidationError("local_constants: H not positive definite");
    {
        const Mat S = H - J.transpose() * J;
        Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (S + S.transpose()));
        if (es.eigenvalues().minCoeff() <= 0.0)
            throw ValidationError("local_constants: nondegeneracy J^T J < H violated");
    }

    LocalConstants out;
    // c1^2 = max eigenvalue of the pencil (J^T J, H)
    Eigen::GeneralizedSelfAdjointEigenSolver<Mat> ges(J.transpose() * J, H);
    out.c1 = std::sqrt(std::max(0.0, ges.eigenvalues().maxCoeff()));

    // substitute x = H^{-1/2} y: minimize (y^T H y)/|J H^{1/2} y| over |y| = 1
    Eigen::SelfAdjointEigenSolver<Mat> esH(H);
    const Mat Hsqrt = esH.operatorSqrt();
    const Mat G = J * Hsqrt;

    double best = std::numeric_limits<double>::infinity();
    Rng rng = make_rng(seed, 0x633274ULL);
    for (int s = 0; s < n_starts; ++s) best = std::min(best, c2_from_start(H, G, sphere_vec(rng, d)));
    for (int a = 0; a < d; ++a) {
        Vec e = Vec::Zero(d);
        e[a] = 1.0;
        best = std::min(best, c2_from_start(H, G, e));
        best = std::min(best, c2_from_start(H, G, Vec(-e)));
    }
    out.c2_multistart = best;

    if (d <= 3 && mesh_points > 0) {
        double mesh_best = std::numeric_limits<double>::infinity();
        if (d == 1) {
            Vec y(1);
            y[0] = 1.0;
            mesh_best = std::min(c2_objective(H, G, y), c2_objective(H, G, Vec(-y)));
        } else if (d == 2) {
            for (int i = 0; i < mesh_points; ++i) {
                const double a = 2.0 * M_PI * i / mesh_points;
                Vec y(2);
                y << std::cos(a), std::sin(a);
                mesh_best = std::min(mesh_best, c2_objective(H, G, y));
            }
        } else {
            // Fibonacci sphere
            const double golden = M_PI * (3.0 - std::sqrt(5.0));
            for (int i = 0; i < mesh_points; ++i) {
                const double z = 1.0 - 2.0 * (i + 0.5) / mesh_points;
                const double rad = std::sqrt(std::max(0.0, 1.0 - z * z));
                const double a = golden * i;
                Vec y(3);
                y << rad * std::cos(a), rad * std::sin(a), z;
                mesh_best = std::min(mesh_best, c2_objective(H, G, y));
            }
        }
        out.c2_mesh = mesh_best;
        out.c2 = std::min(out.c2_multistart, mesh_best);
    } else {
        out.c2 = out.c2_multistart;
    }
    out.pass = out.c1 < out.c2;
    return out;
}

LocalConstants local_constants_at(const FieldG& field, const Vec& theta_star, std::uint64_t seed) {
    const Vec gstar = field.g(theta_star);
    const Mat H = -field.hessian_vector(theta_star, gstar);
    const Mat J = field.jacobian(theta_star);
    return local_constants(J, H, seed);
}

// ---------------------------------------------------------------------------
// Boundary root finding

std::optional<Vec> boundary_point_along_ray(const FieldG& field, const Vec& v, double eta,
                                            const Vec& from, const Vec& dir, double r_max,
                                            double tol) {
    const Vec vn = v / v.norm();
    const auto f = [&](double t) { return field.g(from + t * dir).dot(vn) + eta; };
    const double f0 = f(0.0);
    const int n_scan = 256;
    double t_prev = 0.0, f_prev = f0;
    for (int i = 1; i <= n_scan; ++i) {
        const double t = r_max * static_cast<double>(i) / n_scan;
        const double ft = f(t);
        if ((f_prev < 0.0) != (ft < 0.0)) {
            double lo = t_prev, hi = t;
            while (hi - lo > tol * std::max(1.0, hi)) {
                const double mid = 0.5 * (lo + hi);
                if ((f(mid) < 0.0) == (f_prev < 0.0))
                    lo = mid;
                else
                    hi = mid;
            }
            return from + 0.5 * (lo + hi) * dir;
        }
        t_prev = t;
        f_prev = ft;
    }
    return std::nullopt;
}

}  // namespace mfl
