#include "experiments.hpp"

#include "mfl/asymptotics.hpp"
#include "mfl/dataset.hpp"
#include "mfl/ensemble.hpp"
#include "mfl/escape.hpp"
#include "mfl/flow.hpp"
#include "mfl/losses.hpp"
#include "mfl/models.hpp"
#include "mfl/serialize.hpp"
#include "mfl/wasserstein.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

namespace mflab {
namespace {

using namespace mfl;
namespace fs = std::filesystem;

// --- Artifact plumbing ---------------------------------------------------

std::string now_utc_iso() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& p, const std::string& s) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + p.string());
    out << s;
}

struct RunArtifacts {
    std::vector<std::string> outputs{"manifest.json"};
    std::string verdict = "NONE";  // NONE | PASS | FAIL
    Json summary = Json::object();
};

// Everything except "timestamp" is a pure function of the config, so a rerun
// reproduces the manifest byte-for-byte up to that one field.
Json manifest_json(const ExperimentConfig& cfg, const RunArtifacts& art) {
    std::vector<std::string> outputs = art.outputs;
    std::sort(outputs.begin(), outputs.end());
    outputs.erase(std::unique(outputs.begin(), outputs.end()), outputs.end());

    Json m;
    m["format"] = "mflab-run";
    m["version"] = 1;
    m["experiment"] = cfg.experiment;
    m["verdict"] = art.verdict;
    m["summary"] = art.summary;
    m["outputs"] = outputs;
    m["config"] = to_json(cfg);
    m["timestamp"] = now_utc_iso();
    return m;
}

void write_manifest(const ExperimentConfig& cfg, const RunArtifacts& art) {
    write_text(fs::path(cfg.output) / "manifest.json", manifest_json(cfg, art).dump(2) + "\n");
}

std::vector<double> to_std(const Vec& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

// --- Input builders ------------------------------------------------------

std::shared_ptr<ModelSpec> build_model(const ExperimentConfig& c) {
    if (c.model.family == "sigmoid-net")
        return make_sigmoid_net(c.model.d_in, c.model.d_out,
                                activation_from_string(c.model.activation));
    return make_attention_head(c.model.n_tokens, c.model.token_dim, c.model.value_dim);
}

InitSpec build_init(const ExperimentConfig& c, const ModelSpec& model) {
    InitSpec s;
    s.seed = mix_seed(c.seed, 0x696e6974ULL);
    const int dw = model.d_w(), dt = model.d_theta();
    if (c.init.kind == "gaussian") {
        s.kind = InitSpec::Kind::Gaussian;
        s.location = Vec::Zero(dw + dt);
        s.scale = c.init.scale;
    } else if (c.init.kind == "uniform-ball") {
        s.kind = InitSpec::Kind::UniformBall;
        s.location = Vec::Zero(dw + dt);
        s.scale = c.init.scale;
    } else if (c.init.kind == "point") {
        s.kind = InitSpec::Kind::PointMass;
        s.location = Vec::Zero(dw + dt);
    } else {  // product
        s.kind = InitSpec::Kind::Product;
        s.w_block.kind = InitSpec::Kind::Gaussian;
        s.w_block.location = Vec::Zero(dw);
        s.w_block.scale = c.init.w_scale;
        s.theta_block.kind = InitSpec::Kind::Gaussian;
        s.theta_block.location = Vec::Zero(dt);
        s.theta_block.scale = c.init.theta_scale;
    }
    return s;
}

// One-hot encoding of the row-wise argmax; ties resolve to the lowest index.
Mat argmax_onehot(const Mat& scores) {
    Mat Y = Mat::Zero(scores.rows(), scores.cols());
    for (int s = 0; s < scores.rows(); ++s) {
        int best = 0;
        scores.row(s).maxCoeff(&best);
        Y(s, best) = 1.0;
    }
    return Y;
}

Dataset build_dataset(const ExperimentConfig& c, const ModelSpec& model,
                      const Ensemble* init_ens) {
    const LossKind lk = loss_from_string(c.loss_kind);
    if (c.dataset.source == "file") {
        const std::string sidecar =
            c.dataset.sidecar.empty() ? c.dataset.path + ".json" : c.dataset.sidecar;
        Dataset d = read_dataset(c.dataset.path, sidecar);
        model.check_dataset(d);
        return d;
    }
    if (c.dataset.source == "teacher") {
        Dataset d = make_teacher_dataset(model, c.dataset.n, c.dataset.teacher_width,
                                         mix_seed(c.seed, 0x64617461ULL), c.dataset.feature_scale,
                                         c.dataset.teacher_w_scale, c.dataset.teacher_theta_scale,
                                         c.dataset.noise);
        // Cross-entropy needs one-hot labels; use the teacher's argmax class.
        if (lk == LossKind::CrossEntropy) d.Y = argmax_onehot(d.Y);
        return d;
    }
    // self-labeled: the initial ensemble's own predictions, so the residual
    // vanishes at t = 0 and the flow is exactly stationary.
    if (lk == LossKind::CrossEntropy)
        throw ValidationError("self-labeled datasets require the square loss");
    if (init_ens == nullptr)
        throw ValidationError("self-labeled datasets need an initial ensemble");
    Dataset d;
    if (const auto* att = dynamic_cast<const AttentionHead*>(&model)) {
        d.n_tokens = att->n_tokens();
        d.X = sample_gaussian_contexts(c.dataset.n, att->n_tokens(), att->token_dim(),
                                       mix_seed(c.seed, 0x64617461ULL), c.dataset.feature_scale);
    } else {
        d.X = sample_gaussian_matrix(c.dataset.n, model.d_in(), mix_seed(c.seed, 0x64617461ULL),
                                     c.dataset.feature_scale);
    }
    d.Y = teacher_labels(*init_ens, model, d.X);
    d.validate();
    return d;
}

FlowConfig build_flow(const ExperimentConfig& c) {
    FlowConfig fc;
    fc.integrator = integrator_from_string(c.flow.integrator);
    fc.step_size = c.flow.step_size;
    fc.t_end = c.flow.t_end;
    fc.record_every = c.flow.record_every;
    if (c.flow.truncation_alpha > 0.0) fc.truncation = Truncation{c.flow.truncation_alpha};
    fc.n_threads = resolve_threads(c.threads);
    fc.max_halvings = c.flow.max_halvings;
    fc.validate();
    return fc;
}

// --- Built-in driving fields ---------------------------------------------

struct ScalarFieldSetup {
    std::shared_ptr<FieldG> field;
    std::optional<AsymptoticScalarField> g_inf;
};

ScalarFieldSetup make_scalar_field(const std::string& name, int d, double level) {
    if (d < 1) throw ValidationError("escape field needs d_theta >= 1");
    if (name == "bounded-well") {
        // g(theta) = -1/(1+|theta|^2) - 1/2: strictly negative, bounded level sets.
        auto gfn = [](const Vec& th) {
            Vec r(1);
            r[0] = -1.0 / (1.0 + th.squaredNorm()) - 0.5;
            return r;
        };
        auto jfn = [d](const Vec& th) {
            const double q = 1.0 + th.squaredNorm();
            Mat J(1, d);
            J.row(0) = (2.0 / (q * q)) * th.transpose();
            return J;
        };
        const double sup_j = 9.0 / (8.0 * std::sqrt(3.0));
        return {std::make_shared<FunctionField>(1, d, gfn, jfn, nullptr, 1.5, sup_j), std::nullopt};
    }
    if (name == "tilted") {
        // g(theta) = -3/4 - (1/2) theta_1 / sqrt(1+|theta|^2): sublevel sets above
        // eta = 3/4 are unbounded cones around +e1.
        auto gfn = [](const Vec& th) {
            Vec r(1);
            r[0] = -0.75 - 0.5 * th[0] / std::sqrt(1.0 + th.squaredNorm());
            return r;
        };
        auto jfn = [d](const Vec& th) {
            const double q = 1.0 + th.squaredNorm();
            const double s = std::sqrt(q);
            Vec grad = Vec::Zero(d);
            grad[0] = 1.0 / s;
            grad -= (th[0] / (q * s)) * th;
            Mat J(1, d);
            J.row(0) = (-0.5) * grad.transpose();
            return J;
        };
        AsymptoticScalarField prof;
        prof.value = [](const Vec& phi) { return -0.75 - 0.5 * phi[0]; };
        prof.sphere_grad = [d](const Vec& phi) {
            Vec u = Vec::Zero(d);
            u[0] = 1.0;
            return Vec((-0.5) * (u - phi[0] * phi));
        };
        return {std::make_shared<FunctionField>(1, d, gfn, jfn, nullptr, 1.25, 0.5), prof};
    }
    if (name == "constant") {
        auto gfn = [level](const Vec&) {
            Vec r(1);
            r[0] = -level;
            return r;
        };
        auto jfn = [d](const Vec&) { return Mat(Mat::Zero(1, d)); };
        return {std::make_shared<FunctionField>(1, d, gfn, jfn, nullptr, std::abs(level), 0.0),
                std::nullopt};
    }
    if (name == "zero") {
        auto gfn = [](const Vec&) { return Vec(Vec::Zero(1)); };
        auto jfn = [d](const Vec&) { return Mat(Mat::Zero(1, d)); };
        return {std::make_shared<FunctionField>(1, d, gfn, jfn, nullptr, 0.0, 0.0), std::nullopt};
    }
    throw ValidationError("unknown scalar escape field '" + name + "'");
}

struct VectorFieldSetup {
    std::shared_ptr<FieldG> field;
    Vec v;                          // target alignment direction
    Vec interior;                   // point inside K for reasonable eta
    std::optional<Vec> theta_star;  // nondegenerate maximizer, when one exists
};

VectorFieldSetup make_vector_field(const std::string& name) {
    if (name == "spiral") {
        // d_theta = 1 -> R^2: g(t) = -f(t) (cos .3t, sin .3t), f = 1/2 + exp(-t^2).
        auto gfn = [](const Vec& th) {
            const double t = th[0];
            const double f = 0.5 + std::exp(-t * t);
            Vec r(2);
            r[0] = -f * std::cos(0.3 * t);
            r[1] = -f * std::sin(0.3 * t);
            return r;
        };
        auto jfn = [](const Vec& th) {
            const double t = th[0];
            const double f = 0.5 + std::exp(-t * t);
            const double fp = -2.0 * t * std::exp(-t * t);
            const double cth = std::cos(0.3 * t), sth = std::sin(0.3 * t);
            Mat J(2, 1);
            J(0, 0) = -fp * cth + 0.3 * f * sth;
            J(1, 0) = -fp * sth - 0.3 * f * cth;
            return J;
        };
        VectorFieldSetup s;
        s.field = std::make_shared<FunctionField>(2, 1, gfn, jfn);
        s.v = Vec::Unit(2, 0);
        s.interior = Vec::Zero(1);
        s.theta_star = Vec::Zero(1);
        return s;
    }
    if (name == "radial") {
        // g(theta) = -(1/2 + exp(-|theta|^2)) e1: perfectly aligned everywhere.
        auto gfn = [](const Vec& th) {
            Vec r(2);
            r[0] = -(0.5 + std::exp(-th.squaredNorm()));
            r[1] = 0.0;
            return r;
        };
        auto jfn = [](const Vec& th) {
            Mat J = Mat::Zero(2, static_cast<int>(th.size()));
            J.row(0) = 2.0 * std::exp(-th.squaredNorm()) * th.transpose();
            return J;
        };
        VectorFieldSetup s;
        s.field = std::make_shared<FunctionField>(2, 2, gfn, jfn);
        s.v = Vec::Unit(2, 0);
        s.interior = Vec::Zero(2);
        return s;
    }
    throw ValidationError("unknown vector escape field '" + name + "'");
}

// --- Experiments ---------------------------------------------------------

int run_simulate(const ExperimentConfig& c) {
    auto model = build_model(c);
    const InitSpec ispec = build_init(c, *model);
    const Ensemble ens0 = sample_ensemble(ispec, c.init.m, model->d_w(), model->d_theta());
    const Dataset data = build_dataset(c, *model, &ens0);
    const LossSpec loss{loss_from_string(c.loss_kind), model->d_out()};
    const FlowConfig fc = build_flow(c);

    const Trajectory traj = run_flow(ens0, *model, data, loss, fc);

    RunArtifacts art;
    art.outputs.push_back("scalars.csv");
    for (std::size_t k = 0; k < traj.states.size(); ++k)
        art.outputs.push_back("states/state_" + std::to_string(k) + ".bin");
    art.summary = {{"initial_energy", traj.energies.front()},
                   {"final_energy", traj.energies.back()},
                   {"final_grad_norm", traj.grad_norms.back()},
                   {"records", traj.times.size()},
                   {"step_size_used", traj.step_size_used},
                   {"energies_monotone", traj.energies_monotone}};
    save_trajectory(c.output, traj, manifest_json(c, art).dump(2));

    std::cout << "simulate: m=" << c.init.m << " N=" << data.N() << " t_end=" << c.flow.t_end
              << "\n  energy " << traj.energies.front() << " -> " << traj.energies.back()
              << " (monotone: " << (traj.energies_monotone ? "yes" : "no")
              << ", step " << traj.step_size_used << ")\n";
    return 0;
}

int run_stability(const ExperimentConfig& c) {
    auto model = build_model(c);
    const InitSpec ispec = build_init(c, *model);
    const Dataset data = build_dataset(c, *model, nullptr);
    const LossSpec loss{loss_from_string(c.loss_kind), model->d_out()};
    const FlowConfig fc = build_flow(c);

    const StabilityResult res =
        stability_experiment(ispec, c.stability.m_small, c.stability.m_large, *model, data, loss,
                             fc, c.stability.sliced_projections);

    std::ostringstream csv;
    csv << "t,w2,log_w2,envelope_bound\n";
    const double log_d0 = std::log(res.distances.front());
    for (std::size_t i = 0; i < res.times.size(); ++i)
        csv << format_double(res.times[i]) << ',' << format_double(res.distances[i]) << ','
            << format_double(std::log(res.distances[i])) << ','
            << format_double(log_d0 + res.envelope_rate * res.times[i]) << '\n';
    write_text(fs::path(c.output) / "stability.csv", csv.str());

    RunArtifacts art;
    art.outputs.push_back("stability.csv");
    art.verdict = res.all_finite ? "PASS" : "FAIL";
    art.summary = {{"m_small", c.stability.m_small},
                   {"m_large", c.stability.m_large},
                   {"w2_initial", res.distances.front()},
                   {"w2_final", res.distances.back()},
                   {"fitted_rate", res.fitted_rate},
                   {"envelope_rate", res.envelope_rate},
                   {"used_exact_w2", res.used_exact_w2},
                   {"all_finite", res.all_finite}};
    write_manifest(c, art);

    std::cout << "stability: m " << c.stability.m_small << " vs " << c.stability.m_large
              << "\n  W2 " << res.distances.front() << " -> " << res.distances.back()
              << "\n  growth-rate estimate " << res.fitted_rate << " (least squares), "
              << res.envelope_rate << " (envelope), " << (res.used_exact_w2 ? "exact" : "sliced")
              << " W2\n  verdict " << art.verdict << "\n";
    return art.verdict == "FAIL" ? 4 : 0;
}

Json ledger_json(const EscapeSetScalar& cert) {
    Json j;
    j["eta"] = cert.eta;
    j["bounded_boundary"] = cert.bounded_boundary;
    j["constant_field"] = cert.constant_field;
    j["flipped"] = cert.flipped;
    j["sup_g"] = cert.sup_g;
    j["sup_grad"] = cert.sup_grad;
    j["epsilon"] = cert.epsilon;
    j["w_min"] = cert.w_min;
    j["rate_floor"] = cert.rate_floor;
    j["boundary_grad_min"] = cert.boundary_grad_min;
    j["n_boundary_samples"] = cert.n_boundary_samples;
    j["beta"] = cert.beta;
    if (!cert.bounded_boundary) {
        j["C_w"] = cert.C_w;
        j["C_theta"] = cert.C_theta;
        j["alpha"] = cert.alpha;
        j["C1"] = cert.C1;
        j["C2"] = cert.C2;
        j["tau"] = cert.tau;
        j["beta_inf"] = cert.beta_inf;
        j["gamma_inf"] = cert.gamma_inf;
        j["small_c"] = cert.small_c;
        j["r_bar"] = cert.r_bar;
        j["sup_grad_s_inf"] = cert.sup_grad_s_inf;
    }
    return j;
}

int run_escape_scalar(const ExperimentConfig& c) {
    const ScalarFieldSetup setup =
        make_scalar_field(c.escape.field, c.escape.d_theta, c.escape.level);

    ScalarBuildOptions opt;
    opt.eta_lo = c.escape.eta_lo;
    opt.eta_hi = c.escape.eta_hi;
    opt.n_eta_grid = c.escape.n_eta_grid;
    opt.n_directions = c.escape.n_directions;
    opt.probe_radius = c.escape.probe_radius;
    opt.regular_floor = c.escape.regular_floor;
    opt.r_grid_max = c.escape.r_grid_max;
    opt.seed = mix_seed(c.seed, 0x65736361ULL);
    opt.g_inf = setup.g_inf;

    EscapeSetScalar cert;
    RunArtifacts art;
    try {
        cert = build_escape_set_scalar(*setup.field, opt);
    } catch (const ValidationError& e) {
        // The construction itself refused: that is a verification failure for
        // this field, not a configuration problem.
        art.verdict = "FAIL";
        art.summary = {{"field", c.escape.field}, {"reason", e.what()}};
        write_manifest(c, art);
        std::cout << "escape-scalar: field '" << c.escape.field << "'\n  no escape set: "
                  << e.what() << "\n  verdict FAIL\n";
        return 4;
    }

    write_text(fs::path(c.output) / "ledger.json", ledger_json(cert).dump(2) + "\n");
    art.outputs.push_back("ledger.json");

    const double eps = cert.epsilon * c.escape.epsilon_frac;
    double theta_radius = c.escape.theta_radius;
    if (!cert.bounded_boundary && !cert.constant_field)
        theta_radius = std::min(theta_radius, cert.r_bar);
    const StateSampler sampler = make_scalar_set_sampler(*setup.field, cert, theta_radius);

    EscapeOdeConfig oc;
    oc.step_size = c.escape.step_size;
    oc.t_end = c.escape.t_end;
    oc.record_every = 1;

    const double adversarial_sign = cert.flipped ? -1.0 : 1.0;
    const std::vector<std::pair<std::string, PerturbationFamily>> kinds = {
        {"constant-offset",
         PerturbationFamily::constant_offset(1, eps, mix_seed(c.seed, 0x70657231ULL))},
        {"time-oscillating",
         PerturbationFamily::time_oscillating(1, eps, mix_seed(c.seed, 0x70657232ULL))},
        {"adversarial",
         PerturbationFamily::adversarial(adversarial_sign * Vec::Ones(1), eps)}};

    Json reports = Json::array();
    bool all_pass = true;
    int kidx = 0;
    for (const auto& [kname, pert] : kinds) {
        const EscapeRateReport rep =
            verify_escape_rate(*setup.field, pert, sampler, cert.rate_floor, c.escape.t_end,
                               c.escape.n_trials, oc, mix_seed(c.seed, 0x74726900ULL + kidx));
        all_pass = all_pass && rep.pass;
        const double worst_slope =
            *std::min_element(rep.per_trial_w_slope.begin(), rep.per_trial_w_slope.end());
        reports.push_back({{"perturbation", kname},
                           {"min_rate", rep.min_rate},
                           {"rate_floor", cert.rate_floor},
                           {"min_w_slope", worst_slope},
                           {"pass", rep.pass}});
        ++kidx;
    }

    // One recorded trajectory for plotting, under the adversarial family.
    {
        Rng rng = make_rng(c.seed, 0x74726a63ULL);
        const auto [w0, th0] = sampler(rng);
        const EscapeTrajectory traj =
            escape_ode_run(*setup.field, kinds.back().second, w0, th0, oc);
        write_escape_trajectory_csv((fs::path(c.output) / "trajectory.csv").string(), traj);
        art.outputs.push_back("trajectory.csv");
    }

    art.verdict = all_pass ? "PASS" : "FAIL";
    art.summary = {{"field", c.escape.field},
                   {"eta", cert.eta},
                   {"epsilon", eps},
                   {"w_min", cert.w_min},
                   {"rate_floor", cert.rate_floor},
                   {"bounded_boundary", cert.bounded_boundary},
                   {"n_trials", c.escape.n_trials},
                   {"reports", reports}};
    write_manifest(c, art);

    std::cout << "escape-scalar: field '" << c.escape.field << "', eta=" << cert.eta
              << ", epsilon=" << eps << ", w_min=" << cert.w_min
              << ", rate_floor=" << cert.rate_floor << "\n";
    for (const auto& r : reports)
        std::cout << "  " << r["perturbation"].get<std::string>() << ": min rate "
                  << r["min_rate"].get<double>() << (r["pass"].get<bool>() ? " (ok)" : " (LOW)")
                  << "\n";
    std::cout << "  verdict " << art.verdict << "\n";
    return all_pass ? 0 : 4;
}

int run_escape_vector(const ExperimentConfig& c) {
    const VectorFieldSetup setup = make_vector_field(c.escape.field);
    const FieldG& field = *setup.field;
    const Vec v = setup.v;
    const double eta = c.escape.eta;
    const int d = field.d_theta();
    const double R = c.escape.ball_radius;
    const Vec interior = setup.interior;

    const ThetaSampler sample_K = [&field, v, eta, interior, R, d](Rng& rng) {
        for (int attempt = 0; attempt < 512; ++attempt) {
            const Vec cand =
                interior + R * std::pow(uniform01(rng), 1.0 / d) * sphere_vec(rng, d);
            if (v.dot(field.g(cand)) <= -eta) return cand;
        }
        throw ValidationError("escape-vector: could not sample the sublevel set");
    };
    const ThetaSampler sample_boundary = [&field, v, eta, interior, R, d](Rng& rng) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            const Vec dir = sphere_vec(rng, d);
            const auto p = boundary_point_along_ray(field, v, eta, interior, dir, 4.0 * R);
            if (p) return *p;
        }
        throw ValidationError("escape-vector: could not locate the set boundary");
    };

    const CondRefinedReport cond =
        cond_refined_check(field, v, eta, sample_K, sample_boundary, c.escape.n_samples,
                           mix_seed(c.seed, 0x636f6e64ULL));

    RunArtifacts art;
    Json cond_j = {{"lhs", cond.lhs},
                   {"rhs", cond.rhs},
                   {"pass", cond.pass},
                   {"inconclusive", cond.inconclusive},
                   {"delta_window", {cond.delta_lo, cond.delta_hi}}};
    if (!cond.pass) {
        art.verdict = "FAIL";
        art.summary = {{"field", c.escape.field}, {"eta", eta}, {"boundary_condition", cond_j}};
        write_manifest(c, art);
        std::cout << "escape-vector: field '" << c.escape.field
                  << "' boundary condition failed (lhs=" << cond.lhs << ", rhs=" << cond.rhs
                  << (cond.inconclusive ? ", inconclusive" : "") << ")\n  verdict FAIL\n";
        return 4;
    }

    const StableSetVector cert = build_stable_set_vector(
        field, v, eta, cond, sample_boundary, c.escape.n_samples, mix_seed(c.seed, 0x63657274ULL));

    Json lc_j;
    if (setup.theta_star) {
        const LocalConstants lc =
            local_constants_at(field, *setup.theta_star, mix_seed(c.seed, 0x6c6f6373ULL));
        lc_j = {{"c1", lc.c1},
                {"c2", lc.c2},
                {"c2_multistart", lc.c2_multistart},
                {"c2_mesh", lc.c2_mesh},
                {"pass", lc.pass}};
    }

    const int dw = field.d_w();
    const double delta = cert.delta;
    const StateSampler sample_A = [sample_K, v, delta, dw](Rng& rng) {
        const Vec th = sample_K(rng);
        const double a = delta + (1.0 - delta) * uniform01(rng);
        Vec t = gaussian_vec(rng, dw);
        t -= t.dot(v) * v;
        const double tn = t.norm();
        Vec dir;
        if (tn < 1e-12) {
            dir = v;
        } else {
            dir = a * v + std::sqrt(std::max(0.0, 1.0 - a * a)) * (t / tn);
        }
        const double mag = 0.5 + 1.5 * uniform01(rng);
        return std::make_pair(Vec(mag * dir), th);
    };

    EscapeOdeConfig oc;
    oc.step_size = c.escape.step_size;
    oc.t_end = c.escape.t_end;
    oc.record_every = 1;

    const double eps = cert.epsilon_max * c.escape.epsilon_frac;
    // Guaranteed floor on d/dt |w|: eta*delta minus the misalignment leakage
    // and the perturbation budget.
    const double tol =
        eta * std::sqrt(std::max(0.0, 1.0 - delta * delta)) *
            std::sqrt(std::max(0.0, 1.0 - cert.gamma * cert.gamma)) / cert.gamma +
        eps + 1e-6;

    const std::vector<std::pair<std::string, PerturbationFamily>> kinds = {
        {"constant-offset",
         PerturbationFamily::constant_offset(dw, eps, mix_seed(c.seed, 0x70657231ULL))},
        {"time-oscillating",
         PerturbationFamily::time_oscillating(dw, eps, mix_seed(c.seed, 0x70657232ULL))},
        {"adversarial", PerturbationFamily::adversarial(v, eps)}};

    Json reports = Json::array();
    bool all_pass = true;
    int kidx = 0;
    for (const auto& [kname, pert] : kinds) {
        const StableSetReport rep =
            verify_stable_set_vector(field, cert, pert, sample_A, c.escape.n_trials,
                                     c.escape.t_end, oc, mix_seed(c.seed, 0x74726900ULL + kidx),
                                     tol);
        all_pass = all_pass && rep.pass;
        int exits = 0;
        for (std::size_t i = 0; i < rep.per_trial_min_alignment.size(); ++i)
            if (rep.per_trial_min_alignment[i] < cert.delta - 1e-6 ||
                rep.per_trial_max_level[i] > -cert.eta + 1e-6)
                ++exits;
        const double worst_rate = *std::min_element(rep.per_trial_min_w_rate.begin(),
                                                    rep.per_trial_min_w_rate.end());
        reports.push_back({{"perturbation", kname},
                           {"exits", exits},
                           {"min_w_rate", worst_rate},
                           {"rate_floor", rep.eta_delta - rep.tolerance},
                           {"pass", rep.pass}});
        ++kidx;
    }

    art.verdict = all_pass ? "PASS" : "FAIL";
    art.summary = {{"field", c.escape.field},
                   {"eta", cert.eta},
                   {"delta", cert.delta},
                   {"epsilon_max", cert.epsilon_max},
                   {"epsilon", eps},
                   {"beta", cert.beta},
                   {"gamma_prime", cert.gamma_prime},
                   {"gamma", cert.gamma},
                   {"boundary_condition", cond_j},
                   {"local_constants", lc_j},
                   {"n_trials", c.escape.n_trials},
                   {"reports", reports}};
    write_manifest(c, art);

    std::cout << "escape-vector: field '" << c.escape.field << "', eta=" << eta
              << ", delta=" << cert.delta << " in (" << cert.gamma_prime << ", " << cert.gamma
              << "), epsilon=" << eps << "\n";
    if (!lc_j.is_null())
        std::cout << "  local constants c1=" << lc_j["c1"].get<double>()
                  << " c2=" << lc_j["c2"].get<double>()
                  << (lc_j["pass"].get<bool>() ? " (c1 < c2)" : " (DEGENERATE)") << "\n";
    for (const auto& r : reports)
        std::cout << "  " << r["perturbation"].get<std::string>() << ": exits "
                  << r["exits"].get<int>() << ", min d|w|/dt " << r["min_w_rate"].get<double>()
                  << (r["pass"].get<bool>() ? " (ok)" : " (FAIL)") << "\n";
    std::cout << "  verdict " << art.verdict << "\n";
    return all_pass ? 0 : 4;
}

int run_hardmax_scan(const ExperimentConfig& c) {
    const int n = c.scan.n_tokens, d = c.scan.token_dim;
    const Mat contexts =
        sample_gaussian_contexts(c.scan.n_contexts, n, d, mix_seed(c.seed, 0x7363616eULL));

    SphereSampler sphere;
    sphere.dim = d * d;
    sphere.count = c.scan.n_directions;
    sphere.seed = mix_seed(c.seed, 0x73706872ULL);
    sphere.kind = SphereSampler::Kind::StratifiedPlusAxes;

    const ConvergenceScan scan = hardmax_convergence_scan(contexts, n, d, sphere, c.scan.r_grid,
                                                          1e-9, resolve_threads(c.threads));

    write_scan_csv((fs::path(c.output) / "scan.csv").string(), scan);
    std::ostringstream plot;
    plot << "# r sup_gap\n";
    for (std::size_t i = 0; i < scan.r_grid.size(); ++i)
        plot << format_double(scan.r_grid[i]) << ' ' << format_double(scan.sup_gaps[i]) << '\n';
    write_text(fs::path(c.output) / "scan_plot.dat", plot.str());

    RunArtifacts art;
    art.outputs.push_back("scan.csv");
    art.outputs.push_back("scan_plot.dat");
    art.summary = {{"n_tokens", n},
                   {"token_dim", d},
                   {"n_contexts", c.scan.n_contexts},
                   {"n_directions", c.scan.n_directions},
                   {"r_grid", scan.r_grid},
                   {"sup_gaps", scan.sup_gaps},
                   {"strictly_decreasing", scan.strictly_decreasing}};
    write_manifest(c, art);

    std::cout << "hardmax-scan: n=" << n << " d=" << d << ", " << c.scan.n_directions
              << " directions, " << c.scan.n_contexts << " contexts\n";
    for (std::size_t i = 0; i < scan.r_grid.size(); ++i)
        std::cout << "  r=" << scan.r_grid[i] << "  sup gap " << scan.sup_gaps[i] << "\n";
    std::cout << "  sup gaps strictly decreasing: " << (scan.strictly_decreasing ? "yes" : "no")
              << "\n";
    return 0;
}

int run_sigmoid_asymptotics(const ExperimentConfig& c) {
    const int d = c.asymptotics.d_in;
    const DensitySpec density = standard_gaussian_density(d);
    std::function<double(const Vec&)> f;
    if (c.asymptotics.profile == "one")
        f = [](const Vec&) { return 1.0; };
    else
        f = [](const Vec& x) { return std::tanh(x[0]); };
    const Vec theta = Vec::Unit(d, 0);

    const Mat X = sample_gaussian_matrix(c.asymptotics.n_samples, d,
                                         mix_seed(c.seed, 0x6173796dULL));

    // r = 0 first: there sigmoid(0) = 1/2 exactly, so the estimate must equal
    // half the sample mean of f bit-for-bit (scaling by 0.5 is exact).
    std::vector<double> r_all = {0.0};
    r_all.insert(r_all.end(), c.asymptotics.r_grid.begin(), c.asymptotics.r_grid.end());
    const auto half_rows = sigmoid_halfspace_check(f, X, theta, r_all);
    std::vector<double> fx(static_cast<std::size_t>(X.rows()));
    for (int s = 0; s < X.rows(); ++s) fx[static_cast<std::size_t>(s)] = f(X.row(s).transpose());
    const double mean_f = pairwise_sum(fx) / static_cast<double>(X.rows());
    const bool identity_exact = half_rows.front().mc == 0.5 * mean_f;

    const auto grad_rows = sigmoid_gradient_limit_check(
        f, density, theta, c.asymptotics.r_grid, c.asymptotics.n_mc, c.asymptotics.n_surface,
        mix_seed(c.seed, 0x67726164ULL));

    std::ostringstream hcsv;
    hcsv << "r,mc,limit,gap,stderr\n";
    for (const auto& row : half_rows)
        hcsv << format_double(row.r) << ',' << format_double(row.mc) << ','
             << format_double(row.limit) << ',' << format_double(row.gap) << ','
             << format_double(row.stderr_gap) << '\n';
    write_text(fs::path(c.output) / "halfspace.csv", hcsv.str());

    std::ostringstream gcsv;
    gcsv << "r,mc_norm,limit_norm,gap,stderr\n";
    for (const auto& row : grad_rows)
        gcsv << format_double(row.r) << ',' << format_double(row.mc.norm()) << ','
             << format_double(row.limit.norm()) << ',' << format_double(row.gap) << ','
             << format_double(row.stderr_gap) << '\n';
    write_text(fs::path(c.output) / "gradient.csv", gcsv.str());

    const auto& last_h = half_rows.back();
    const auto& last_g = grad_rows.back();
    RunArtifacts art;
    art.outputs.push_back("halfspace.csv");
    art.outputs.push_back("gradient.csv");
    art.summary = {{"profile", c.asymptotics.profile},
                   {"d_in", d},
                   {"identity_at_zero_exact", identity_exact},
                   {"halfspace_final_gap", last_h.gap},
                   {"halfspace_final_stderr", last_h.stderr_gap},
                   {"gradient_final_gap", last_g.gap},
                   {"gradient_final_stderr", last_g.stderr_gap}};
    write_manifest(c, art);

    std::cout << "sigmoid-asymptotics: profile '" << c.asymptotics.profile << "', d=" << d
              << "\n  r=0 identity exact: " << (identity_exact ? "yes" : "no") << "\n";
    for (const auto& row : half_rows)
        std::cout << "  half-space r=" << row.r << "  gap " << row.gap << " (se "
                  << row.stderr_gap << ")\n";
    for (const auto& row : grad_rows)
        std::cout << "  gradient   r=" << row.r << "  gap " << row.gap << " (se "
                  << row.stderr_gap << ")\n";
    return 0;
}

}  // namespace

int run_w2_selftest(const std::string& output_dir) {
    Rng rng = make_rng(0x57325354ULL);
    int exact_checked = 0, exact_bad = 0;
    double worst_exact = 0.0;
    for (int inst = 0; inst < 200; ++inst) {
        const int m = 1 + inst % 6;
        const int dw = 1 + (inst / 6) % 3;
        const int dt = 1 + (inst / 18) % 3;
        Ensemble a, b;
        a.d_w = b.d_w = dw;
        a.d_theta = b.d_theta = dt;
        for (int i = 0; i < m; ++i) {
            a.particles.push_back({gaussian_vec(rng, dw), gaussian_vec(rng, dt)});
            b.particles.push_back({gaussian_vec(rng, dw), gaussian_vec(rng, dt)});
        }
        const double ex = w2_exact(a, b), bf = w2_bruteforce(a, b);
        worst_exact = std::max(worst_exact, std::abs(ex - bf));
        if (!(std::abs(ex - bf) <= 1e-12)) ++exact_bad;
        ++exact_checked;
    }

    int sliced_checked = 0, sliced_bad = 0;
    double worst_sliced = 0.0;
    for (int inst = 0; inst < 50; ++inst) {
        const int m = 2 + inst % 30;
        Ensemble a, b;
        a.d_w = b.d_w = 1;
        a.d_theta = b.d_theta = 0;
        for (int i = 0; i < m; ++i) {
            a.particles.push_back({gaussian_vec(rng, 1), Vec()});
            b.particles.push_back({gaussian_vec(rng, 1), Vec()});
        }
        const double ex = w2_exact(a, b);
        const double sl = w2_sliced(a, b, 8, 0x1d5eedULL + inst);
        worst_sliced = std::max(worst_sliced, std::abs(ex - sl));
        if (!(std::abs(ex - sl) <= 1e-10)) ++sliced_bad;
        ++sliced_checked;
    }

    const bool pass = exact_bad == 0 && sliced_bad == 0;
    std::cout << "w2-selftest: " << exact_checked << " exact-vs-bruteforce instances (max dev "
              << worst_exact << "), " << sliced_checked << " sliced-vs-exact 1-d instances (max dev "
              << worst_sliced << ")\n  verdict " << (pass ? "PASS" : "FAIL") << "\n";

    if (!output_dir.empty()) {
        Json j = {{"exact_instances", exact_checked},
                  {"exact_mismatches", exact_bad},
                  {"exact_max_deviation", worst_exact},
                  {"sliced_instances", sliced_checked},
                  {"sliced_mismatches", sliced_bad},
                  {"sliced_max_deviation", worst_sliced},
                  {"pass", pass}};
        write_text(fs::path(output_dir) / "selftest.json", j.dump(2) + "\n");
    }
    return pass ? 0 : 4;
}

int run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.output.empty()) throw ValidationError("config: output directory is required");
    fs::create_directories(cfg.output);

    if (cfg.experiment == "simulate") return run_simulate(cfg);
    if (cfg.experiment == "stability") return run_stability(cfg);
    if (cfg.experiment == "escape-scalar") return run_escape_scalar(cfg);
    if (cfg.experiment == "escape-vector") return run_escape_vector(cfg);
    if (cfg.experiment == "hardmax-scan") return run_hardmax_scan(cfg);
    if (cfg.experiment == "sigmoid-asymptotics") return run_sigmoid_asymptotics(cfg);
    if (cfg.experiment == "w2-selftest") {
        const int code = run_w2_selftest(cfg.output);
        RunArtifacts art;
        art.outputs.push_back("selftest.json");
        art.verdict = code == 0 ? "PASS" : "FAIL";
        art.summary = {{"suite", "w2"}};
        write_manifest(cfg, art);
        return code;
    }
    throw ValidationError("unknown experiment kind '" + cfg.experiment + "'");
}

}  // namespace mflab
