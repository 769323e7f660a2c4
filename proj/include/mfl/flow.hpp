#pragma once

// Coupled particle gradient descent on the ensemble objective
//   F_m(u_1..u_m) = risk( (1/m) sum_i Phi(w_i, theta_i) )
// integrated as the ODE u_i' = -m * grad_{u_i} F_m, which is the particle
// form of the measure-level steepest-descent dynamic. Provides the driving
// field g_mu, per-particle velocities, fixed-step integrators with energy
// accounting, trajectory persistence, and the two-resolution stability
// experiment comparing flows started from a common initializer.

#include "mfl/common.hpp"
#include "mfl/dataset.hpp"
#include "mfl/ensemble.hpp"
#include "mfl/losses.hpp"
#include "mfl/models.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mfl {

enum class Integrator { Euler, Rk4 };

Integrator integrator_from_string(const std::string& name);
std::string to_string(Integrator i);

struct FlowConfig {
    Integrator integrator = Integrator::Rk4;
    double step_size = 0.05;
    double t_end = 1.0;
    int record_every = 1;
    std::optional<Truncation> truncation;  // when set, descend xi(risk) instead of risk
    int n_threads = 1;
    int max_halvings = 6;  // automatic step halving when recorded energy increases

    void validate() const;
};

struct Trajectory {
    std::vector<double> times;
    std::vector<Ensemble> states;
    std::vector<double> energies;    // F_m at each recorded state
    std::vector<double> grad_norms;  // sqrt((1/m) sum_i |velocity_i|^2)
    double step_size_used = 0.0;
    bool energies_monotone = true;
};

// Driving field: g_mu(theta) = (1/N) sum_s phi(theta, x_s)^* residual_s with
// the residual induced by the ensemble's mean prediction.
Vec g_mu(const Ensemble& ens, const ModelSpec& model, const Dataset& data, const LossSpec& loss,
         const Vec& theta);

// <g_mu(theta), w>: the per-unit-mass sensitivity of the risk to adding a
// particle at (w, theta).
double first_variation(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                       const LossSpec& loss, const Vec& w, const Vec& theta);

// Velocity of one particle under the coupled flow: (-g_mu(theta), -J_g^T w).
Particle velocity(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                  const LossSpec& loss, const Particle& p);

// Objective value F_m for an ensemble.
double flow_energy(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                   const LossSpec& loss, int n_threads = 1);

Trajectory run_flow(const Ensemble& ens0, const ModelSpec& model, const Dataset& data,
                    const LossSpec& loss, const FlowConfig& cfg);

// Directory layout: manifest.json, scalars.csv
// (t,energy,grad_norm,psi2_norm,second_moment), states/state_<k>.bin.
void save_trajectory(const std::string& dir, const Trajectory& traj, const std::string& manifest_json);

struct StabilityResult {
    std::vector<double> times;
    std::vector<double> distances;  // W2 between the two flows at each time
    double fitted_rate = 0.0;       // least-squares slope of log distance vs t
    double envelope_rate = 0.0;     // max_t (log d(t) - log d(0)) / t
    bool all_finite = true;
    bool used_exact_w2 = true;
};

// Runs the flow at two particle counts from the same initializer (and seed,
// so the smaller ensemble is a prefix of the larger) and reports the W2
// distance trace plus fitted growth rates. m_small must divide m_large; the
// smaller state is replicated to m_large atoms so the comparison is exact
// whenever m_large is within the exact-solver cap.
StabilityResult stability_experiment(const InitSpec& spec, int m_small, int m_large,
                                     const ModelSpec& model, const Dataset& data,
                                     const LossSpec& loss, const FlowConfig& cfg,
                                     int sliced_projections = 64);

}  // namespace mfl
