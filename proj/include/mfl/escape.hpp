#pragma once

// Escape machinery for the reduced two-variable dynamic
//   w' = -g_t(theta),   theta' = -J_{g_t}(theta)^T w,
// where g_t is an epsilon-bounded perturbation of a fixed driving field g.
// Provides: field abstractions with Jacobians and Hessian stacks, the
// perturbation families used to stress candidate invariant sets, scalar
// (d_w = 1) escape-set construction with its full constant ledger (bounded
// and unbounded level-set branches), the vector-case alignment certificate
// with its boundary condition, and the local curvature constants c1/c2 at a
// nondegenerate norm maximizer.

#include "mfl/common.hpp"
#include "mfl/dataset.hpp"
#include "mfl/losses.hpp"
#include "mfl/models.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mfl {

// ---------------------------------------------------------------------------
// Driving fields

class FieldG {
  public:
    virtual ~FieldG() = default;
    virtual int d_w() const = 0;
    virtual int d_theta() const = 0;
    virtual Vec g(const Vec& theta) const = 0;
    // d_w x d_theta Jacobian; default central finite differences of g.
    virtual Mat jacobian(const Vec& theta) const;
    // u-weighted Hessian stack sum_k u_k Hess(g_k)(theta); default second-order
    // finite differences of theta -> J(theta)^T u, symmetrized.
    virtual Mat hessian_vector(const Vec& theta, const Vec& u) const;
    // Declared sup-norm bounds; negative means "not declared".
    virtual double sup_g() const { return -1.0; }
    virtual double sup_jacobian() const { return -1.0; }

    Vec jacobian_tu(const Vec& theta, const Vec& u) const { return jacobian(theta).transpose() * u; }
};

// Closed-form field from callables, with optional analytic Jacobian/Hessian
// and declared sup bounds.
class FunctionField final : public FieldG {
  public:
    using GFn = std::function<Vec(const Vec&)>;
    using JFn = std::function<Mat(const Vec&)>;
    using HFn = std::function<Mat(const Vec&, const Vec&)>;

    FunctionField(int d_w, int d_theta, GFn g_fn, JFn j_fn = nullptr, HFn h_fn = nullptr,
                  double sup_g = -1.0, double sup_j = -1.0);

    int d_w() const override { return d_w_; }
    int d_theta() const override { return d_theta_; }
    Vec g(const Vec& theta) const override;
    Mat jacobian(const Vec& theta) const override;
    Mat hessian_vector(const Vec& theta, const Vec& u) const override;
    double sup_g() const override { return sup_g_; }
    double sup_jacobian() const override { return sup_j_; }

  private:
    int d_w_, d_theta_;
    GFn g_fn_;
    JFn j_fn_;
    HFn h_fn_;
    double sup_g_, sup_j_;
};

// Field induced by an ensemble snapshot: the residual of the ensemble's mean
// prediction is frozen once, and g(theta) is the dataset-averaged adjoint of
// phi(theta) against that fixed residual. Jacobian and theta'-pairing are
// analytic through the model's grad_theta.
class EnsembleField final : public FieldG {
  public:
    EnsembleField(std::shared_ptr<const ModelSpec> model, Dataset data, LossSpec loss,
                  const Ensemble& snapshot);

    int d_w() const override;
    int d_theta() const override;
    Vec g(const Vec& theta) const override;
    Mat jacobian(const Vec& theta) const override;
    const Mat& residual() const { return residual_; }

  private:
    std::shared_ptr<const ModelSpec> model_;
    Dataset data_;
    Mat residual_;  // N x d_out, frozen at construction
};

// ---------------------------------------------------------------------------
// Perturbation families: g_t = g + delta(t) with delta constant in theta, so
// sup_t (|delta|_inf + sup_r |r * J_delta|) = sup_t |delta|_inf <= epsilon by
// construction for every kind.

struct PerturbationFamily {
    enum class Kind { None, ConstantOffset, TimeOscillating, AdversarialTowardBoundary };

    Kind kind = Kind::None;
    double epsilon = 0.0;
    double omega = 2.0 * M_PI;  // angular frequency of the oscillating kind
    Vec direction;              // unit vector in R^{d_w}

    Vec offset(double t) const;

    static Kind kind_from_string(const std::string& name);
    static std::string to_string(Kind k);
    static PerturbationFamily none(int d_w);
    static PerturbationFamily constant_offset(int d_w, double eps, std::uint64_t seed);
    static PerturbationFamily time_oscillating(int d_w, double eps, std::uint64_t seed,
                                               double omega = 2.0 * M_PI);
    // Pushes <g, v> upward at rate eps: worst case for a set of the form
    // {<g, v> <= -eta} (scalar case: v = +1 pushes g toward its level).
    static PerturbationFamily adversarial(const Vec& v_toward, double eps);
};

// ---------------------------------------------------------------------------
// Reduced ODE

struct EscapeOdeConfig {
    double step_size = 0.01;
    double t_end = 1.0;
    int record_every = 1;

    void validate() const;
};

struct EscapeTrajectory {
    std::vector<double> times;
    std::vector<Vec> w;
    std::vector<Vec> theta;
    std::vector<double> half_w_sq;  // |w_t|^2 / 2
    std::vector<double> rate;       // d/dt of the above = -<w_t, g_t(theta_t)>
};

EscapeTrajectory escape_ode_run(const FieldG& field, const PerturbationFamily& pert, const Vec& w0,
                                const Vec& theta0, const EscapeOdeConfig& cfg);

void write_escape_trajectory_csv(const std::string& path, const EscapeTrajectory& traj);

// ---------------------------------------------------------------------------
// Rate verification

struct EscapeRateReport {
    std::vector<double> per_trial_min_rate;   // min over time of d/dt |w|^2/2
    std::vector<double> per_trial_w_slope;    // least-squares slope of |w_t| vs t
    double min_rate = 0.0;
    double eta = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

using StateSampler = std::function<std::pair<Vec, Vec>(Rng&)>;  // (w0, theta0)

EscapeRateReport verify_escape_rate(const FieldG& field, const PerturbationFamily& pert,
                                    const StateSampler& sample_A, double eta, double t_end,
                                    int n_trials, const EscapeOdeConfig& cfg, std::uint64_t seed,
                                    double tolerance = 1e-6);

// ---------------------------------------------------------------------------
// Scalar escape sets (d_w = 1), sublevel set K = {g <= -eta}

// Asymptotic directional profile of a scalar field: value on the unit sphere
// with (optionally analytic) spherical gradient.
struct AsymptoticScalarField {
    std::function<double(const Vec&)> value;                 // phi on the sphere
    std::function<Vec(const Vec&)> sphere_grad = nullptr;    // optional analytic gradient

    Vec grad(const Vec& phi) const;  // tangent vector at phi (finite differences if needed)
};

struct ScalarBuildOptions {
    double eta_lo = 0.1;
    double eta_hi = 1.0;
    int n_eta_grid = 16;
    int n_directions = 256;    // ray / sphere sampling density
    double probe_radius = 1e3; // beyond this the level set is treated as unbounded
    double regular_floor = 1e-4;
    std::uint64_t seed = 1;
    std::optional<AsymptoticScalarField> g_inf;  // required for unbounded level sets
    double r_grid_max = 1e4;   // search range for the stabilization radius
};

struct EscapeSetScalar {
    double eta = 0.0;
    bool bounded_boundary = true;
    bool constant_field = false;
    bool flipped = false;  // built for -g because g had nonnegative range
    double sup_g = 0.0;
    double sup_grad = 0.0;
    double epsilon = 0.0;   // certified perturbation budget
    double w_min = 1.0;     // w floor used when sampling the invariant set
    double rate_floor = 0.0;  // guaranteed d/dt |w|^2/2 on the set
    double boundary_grad_min = 0.0;  // sampled min |grad g| on the level set
    int n_boundary_samples = 0;
    // bounded branch
    double beta = 0.0;  // inf over the boundary of |grad g|
    // unbounded branch ledger
    double C_w = 0.0, C_theta = 0.0, alpha = 0.0, C1 = 0.0, C2 = 0.0, tau = 0.0;
    double beta_inf = 0.0, gamma_inf = 0.0, small_c = 0.0, r_bar = 0.0;
    double sup_grad_s_inf = 0.0;
};

// Searches eta in [eta_lo, eta_hi] for a regular level of a nonzero scalar
// field and assembles the constant ledger (bounded branch or, when the level
// set escapes the probe radius, the asymptotic branch, which requires a
// declared directional profile). Throws ValidationError when g is identically
// zero or no sampled level is regular.
EscapeSetScalar build_escape_set_scalar(const FieldG& field, const ScalarBuildOptions& opt);

// Samples (w0, theta0) from the invariant set described by a scalar ledger.
StateSampler make_scalar_set_sampler(const FieldG& field, const EscapeSetScalar& cert,
                                     double theta_radius);

// Excursion bookkeeping for a scalar level: segments of a sampled g-series
// above -eta, with re-entry flags.
struct ExcursionReport {
    int n_excursions = 0;
    bool all_reentered = true;
    double max_g_during = -std::numeric_limits<double>::infinity();
    std::vector<double> reentry_values;  // g at the first sample back below -eta
};

ExcursionReport analyze_level_excursions(const std::vector<double>& g_series, double eta);

// ---------------------------------------------------------------------------
// Vector stable sets: K = {theta : <g(theta), v> <= -eta}, alignment floor
// delta on w/|w|.

struct CondRefinedReport {
    double lhs = 0.0;   // sup over boundary of the misalignment ratio
    double rhs = 0.0;   // inf over K of |<g, v>| / |g|
    double margin = 0.0;
    bool pass = false;
    bool inconclusive = false;       // a boundary sample had J J^T v below floor
    Vec degenerate_sample;           // the offending theta when inconclusive
    double delta_lo = 0.0, delta_hi = 0.0;  // feasible alignment window when pass
};

using ThetaSampler = std::function<Vec(Rng&)>;

CondRefinedReport cond_refined_check(const FieldG& field, const Vec& v, double eta,
                                     const ThetaSampler& sample_K, const ThetaSampler& sample_boundary,
                                     int n_samples, std::uint64_t seed, double margin_guard = 1e-6);

struct StableSetVector {
    Vec v;
    double eta = 0.0;
    double delta = 0.0;
    double epsilon_max = 0.0;  // perturbation budget implied by the margins
    double beta = 0.0;         // inf over the boundary of |J_g^T v|
    double gamma_prime = 0.0;  // boundary misalignment sup (lhs)
    double gamma = 0.0;        // interior alignment inf (rhs)
};

// Assembles the vector certificate from a passed boundary condition, choosing
// delta in the open window and the largest budget the margins allow.
StableSetVector build_stable_set_vector(const FieldG& field, const Vec& v, double eta,
                                        const CondRefinedReport& cond, const ThetaSampler& sample_boundary,
                                        int n_samples, std::uint64_t seed);

struct StableSetReport {
    std::vector<double> per_trial_min_alignment;  // min over time of <v, w>/|w|
    std::vector<double> per_trial_max_level;      // max over time of <g(theta), v>
    std::vector<double> per_trial_min_w_rate;     // min over time of d/dt |w_t|
    int n_outside_A = 0;  // sampled initial conditions rejected (not in A)
    double eta_delta = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

StableSetReport verify_stable_set_vector(const FieldG& field, const StableSetVector& cert,
                                         const PerturbationFamily& pert, const StateSampler& sample_A,
                                         int n_trials, double t_end, const EscapeOdeConfig& cfg,
                                         std::uint64_t seed, double tolerance = 1e-6);

// ---------------------------------------------------------------------------
// Local curvature constants at a nondegenerate maximizer

struct LocalConstants {
    double c1 = 0.0;           // sup_{<Hx,x>=1} |Jx|
    double c2 = 0.0;           // inf_{<Hx,x>=1} |Hx|^2 / |JHx|
    double c2_multistart = 0.0;
    double c2_mesh = -1.0;     // dense-mesh cross-check, set when d_theta <= 3
    bool pass = false;         // c1 < c2
};

LocalConstants local_constants(const Mat& J, const Mat& H, std::uint64_t seed = 7,
                               int n_starts = 16, int mesh_points = 100000);

// H = -hessian_vector(theta_star, g(theta_star)), J = jacobian(theta_star).
LocalConstants local_constants_at(const FieldG& field, const Vec& theta_star, std::uint64_t seed = 7);

// ---------------------------------------------------------------------------
// Boundary location helper: root of <g(.), v> + eta along a ray.

std::optional<Vec> boundary_point_along_ray(const FieldG& field, const Vec& v, double eta,
                                            const Vec& from, const Vec& dir, double r_max,
                                            double tol = 1e-10);

}  // namespace mfl
