#include "mfl/flow.hpp"

#include "mfl/serialize.hpp"
#include "mfl/wasserstein.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mfl {

Integrator integrator_from_string(const std::string& name) {
    if (name == "euler") return Integrator::Euler;
    if (name == "rk4") return Integrator::Rk4;
    throw ValidationError("unknown integrator '" + name + "'");
}

std::string to_string(Integrator i) {
    switch (i) {
        case Integrator::Euler: return "euler";
        case Integrator::Rk4: return "rk4";
    }
    throw ValidationError("unknown integrator enum");
}

void FlowConfig::validate() const {
    if (!(step_size > 0.0)) throw ValidationError("flow: step_size must be positive");
    if (!(t_end > 0.0)) throw ValidationError("flow: t_end must be positive");
    if (record_every <= 0) throw ValidationError("flow: record_every must be positive");
    if (max_halvings < 0) throw ValidationError("flow: max_halvings must be nonnegative");
    if (truncation && !(truncation->alpha > 0.0))
        throw ValidationError("flow: truncation level must be positive");
}

static void check_problem(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                          const LossSpec& loss) {
    ens.validate();
    model.check_dataset(data);
    if (ens.d_w != model.d_w() || ens.d_theta != model.d_theta())
        throw ValidationError("flow: ensemble/model dimension mismatch");
    if (loss.d_out != model.d_out()) throw ValidationError("flow: loss/model dimension mismatch");
}

Vec g_mu(const Ensemble& ens, const ModelSpec& model, const Dataset& data, const LossSpec& loss,
         const Vec& theta) {
    check_problem(ens, model, data, loss);
    const Mat P = predictor_mean(ens, model, data);
    const Mat R = risk_residual(loss, P, data.Y);
    return model.phi_adjoint(theta, data.X, R);
}

double first_variation(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                       const LossSpec& loss, const Vec& w, const Vec& theta) {
    return g_mu(ens, model, data, loss, theta).dot(w);
}

Particle velocity(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                  const LossSpec& loss, const Particle& p) {
    check_problem(ens, model, data, loss);
    const Mat P = predictor_mean(ens, model, data);
    const Mat R = risk_residual(loss, P, data.Y);
    Particle v;
    v.w = -model.phi_adjoint(p.theta, data.X, R);
    v.theta = -model.grad_theta_mean(p.theta, p.w, data.X, R);
    return v;
}

double flow_energy(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                   const LossSpec& loss, int n_threads) {
    check_problem(ens, model, data, loss);
    return risk(loss, predictor_mean(ens, model, data, n_threads), data.Y);
}

namespace {

struct FieldEval {
    Mat VW, VTh;
    double energy = 0.0;
};

// One full-field evaluation: residual once, then every particle velocity.
void eval_field(const ModelSpec& model, const Dataset& data, const LossSpec& loss,
                const FlowConfig& cfg, const Mat& W, const Mat& Th, FieldEval& out) {
    const Mat P = model.predict_mean(W, Th, data.X, cfg.n_threads);
    const Mat R = risk_residual(loss, P, data.Y);
    out.energy = risk(loss, P, data.Y);
    model.velocities(W, Th, data.X, R, out.VW, out.VTh, cfg.n_threads);
    if (cfg.truncation) {
        const double scale = xi_prime(*cfg.truncation, out.energy);
        out.VW *= scale;
        out.VTh *= scale;
    }
}

double grad_norm_of(const Mat& VW, const Mat& VTh) {
    const int m = static_cast<int>(VW.cols());
    std::vector<double> sq(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i)
        sq[static_cast<size_t>(i)] = VW.col(i).squaredNorm() + VTh.col(i).squaredNorm();
    return std::sqrt(pairwise_sum(sq) / static_cast<double>(m));
}

void guard_state(const Mat& W, const Mat& Th, double energy, long step) {
    const auto bad = [step](const std::string& what) {
        return DivergenceError("flow diverged at step " + std::to_string(step) + ": " + what);
    };
    if (!W.allFinite() || !Th.allFinite()) throw bad("non-finite state");
    if (!std::isfinite(energy) || energy > 1e12) throw bad("energy above 1e12");
    const int m = static_cast<int>(W.cols());
    for (int i = 0; i < m; ++i)
        if (std::sqrt(W.col(i).squaredNorm() + Th.col(i).squaredNorm()) > 1e8)
            throw bad("particle norm above 1e8");
}

Trajectory integrate_once(const Ensemble& ens0, const ModelSpec& model, const Dataset& data,
                          const LossSpec& loss, const FlowConfig& cfg, double h) {
    Mat W, Th;
    pack_ensemble(ens0, W, Th);

    Trajectory traj;
    traj.step_size_used = h;

    const long n_full = static_cast<long>(std::floor(cfg.t_end / h + 1e-12));
    const double rem = cfg.t_end - static_cast<double>(n_full) * h;
    const bool has_partial = rem > 1e-12 * std::max(1.0, cfg.t_end);
    const long n_steps = n_full + (has_partial ? 1 : 0);

    FieldEval k1, k2, k3, k4;
    double t = 0.0;

    const auto record = [&](double time, const FieldEval& at_state) {
        traj.times.push_back(time);
        traj.states.push_back(unpack_ensemble(W, Th));
        traj.energies.push_back(at_state.energy);
        traj.grad_norms.push_back(grad_norm_of(at_state.VW, at_state.VTh));
    };

    eval_field(model, data, loss, cfg, W, Th, k1);
    guard_state(W, Th, k1.energy, 0);
    record(0.0, k1);

    for (long step = 0; step < n_steps; ++step) {
        const double dt = (has_partial && step == n_steps - 1) ? rem : h;
        if (cfg.integrator == Integrator::Euler) {
            W += dt * k1.VW;
            Th += dt * k1.VTh;
        } else {
            const Mat W0 = W, Th0 = Th;
            eval_field(model, data, loss, cfg, W0 + 0.5 * dt * k1.VW, Th0 + 0.5 * dt * k1.VTh, k2);
            eval_field(model, data, loss, cfg, W0 + 0.5 * dt * k2.VW, Th0 + 0.5 * dt * k2.VTh, k3);
            eval_field(model, data, loss, cfg, W0 + dt * k3.VW, Th0 + dt * k3.VTh, k4);
            W = W0 + (dt / 6.0) * (k1.VW + 2.0 * k2.VW + 2.0 * k3.VW + k4.VW);
            Th = Th0 + (dt / 6.0) * (k1.VTh + 2.0 * k2.VTh + 2.0 * k3.VTh + k4.VTh);
        }
        t += dt;
        eval_field(model, data, loss, cfg, W, Th, k1);  // becomes next step's k1
        guard_state(W, Th, k1.energy, step + 1);
        if ((step + 1) % cfg.record_every == 0 || step + 1 == n_steps) record(t, k1);
    }

    for (size_t i = 0; i + 1 < traj.energies.size(); ++i)
        if (traj.energies[i + 1] > traj.energies[i] + 1e-9 * std::max(1.0, traj.energies[i]))
            traj.energies_monotone = false;
    return traj;
}

}  // namespace

Trajectory run_flow(const Ensemble& ens0, const ModelSpec& model, const Dataset& data,
                    const LossSpec& loss, const FlowConfig& cfg) {
    cfg.validate();
    check_problem(ens0, model, data, loss);
    double h = cfg.step_size;
    Trajectory traj = integrate_once(ens0, model, data, loss, cfg, h);
    for (int k = 0; k < cfg.max_halvings && !traj.energies_monotone; ++k) {
        h *= 0.5;
        traj = integrate_once(ens0, model, data, loss, cfg, h);
    }
    return traj;
}

void save_trajectory(const std::string& dir, const Trajectory& traj, const std::string& manifest_json) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "states");
    {
        std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
        if (!out) throw ValidationError("save_trajectory: cannot write manifest");
        out << manifest_json;
        if (!manifest_json.empty() && manifest_json.back() != '\n') out << '\n';
    }
    std::ofstream csv(fs::path(dir) / "scalars.csv", std::ios::binary);
    if (!csv) throw ValidationError("save_trajectory: cannot write scalars.csv");
    csv << "t,energy,grad_norm,psi2_norm,second_moment\n";
    for (size_t i = 0; i < traj.times.size(); ++i) {
        csv << format_double(traj.times[i]) << ',' << format_double(traj.energies[i]) << ','
            << format_double(traj.grad_norms[i]) << ',' << format_double(psi2_norm(traj.states[i]))
            << ',' << format_double(second_moment(traj.states[i])) << '\n';
        std::ostringstream name;
        name << "state_" << i << ".bin";
        write_ensemble_binary(traj.states[i], (fs::path(dir) / "states" / name.str()).string());
    }
}

namespace {

Ensemble replicate(const Ensemble& ens, int factor) {
    Ensemble out;
    out.d_w = ens.d_w;
    out.d_theta = ens.d_theta;
    out.particles.reserve(ens.particles.size() * static_cast<size_t>(factor));
    for (int r = 0; r < factor; ++r)
        for (const Particle& p : ens.particles) out.particles.push_back(p);
    return out;
}

}  // namespace

StabilityResult stability_experiment(const InitSpec& spec, int m_small, int m_large,
                                     const ModelSpec& model, const Dataset& data,
                                     const LossSpec& loss, const FlowConfig& cfg,
                                     int sliced_projections) {
    if (m_small <= 0 || m_large <= 0 || m_large % m_small != 0)
        throw ValidationError("stability_experiment: m_small must divide m_large");
    const int factor = m_large / m_small;

    const Ensemble small0 = sample_ensemble(spec, m_small, model.d_w(), model.d_theta());
    const Ensemble large0 = sample_ensemble(spec, m_large, model.d_w(), model.d_theta());

    const Trajectory a = run_flow(small0, model, data, loss, cfg);
    const Trajectory b = run_flow(large0, model, data, loss, cfg);
    if (a.times.size() != b.times.size())
        throw ValidationError("stability_experiment: trajectories recorded differently");

    StabilityResult res;
    res.used_exact_w2 = m_large <= kW2ExactCap;
    for (size_t i = 0; i < a.times.size(); ++i) {
        res.times.push_back(a.times[i]);
        const Ensemble rep = replicate(a.states[i], factor);
        double d = 0.0;
        if (res.used_exact_w2)
            d = w2_exact(rep, b.states[i]);
        else
            d = w2_sliced(rep, b.states[i], sliced_projections, spec.seed ^ 0x5731ULL);
        if (!std::isfinite(d)) res.all_finite = false;
        res.distances.push_back(d);
    }

    // Least-squares slope of log d against t over the strictly positive entries.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (size_t i = 0; i < res.times.size(); ++i) {
        if (res.distances[i] <= 0.0 || !std::isfinite(res.distances[i])) continue;
        const double x = res.times[i], y = std::log(res.distances[i]);
        sx += x; sy += y; sxx += x * x; sxy += x * y;
        ++n;
    }
    if (n >= 2 && sxx * n - sx * sx > 0.0) res.fitted_rate = (sxy * n - sx * sy) / (sxx * n - sx * sx);

    res.envelope_rate = 0.0;
    if (!res.distances.empty() && res.distances.front() > 0.0) {
        for (size_t i = 1; i < res.times.size(); ++i) {
            if (res.times[i] <= 0.0 || res.distances[i] <= 0.0) continue;
            res.envelope_rate = std::max(
                res.envelope_rate,
                (std::log(res.distances[i]) - std::log(res.distances.front())) / res.times[i]);
        }
    }
    return res;
}

}  // namespace mfl
