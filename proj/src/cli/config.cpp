#include "config.hpp"

#include "mfl/common.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace mflab {

namespace {

using mfl::ValidationError;

const std::set<std::string> kExperiments = {
    "simulate",       "stability",           "escape-scalar", "escape-vector",
    "hardmax-scan",   "sigmoid-asymptotics", "w2-selftest"};

// Wraps a JSON object for strict field extraction: every get_* marks the key
// as consumed, and finish() rejects anything left over.
class StrictObject {
  public:
    StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) throw ValidationError("config: '" + where_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;  // keep default
        try {
            out = j_.at(key).get<T>();
        } catch (const Json::exception&) {
            throw ValidationError("config: bad type for '" + where_ + "." + key + "'");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    const Json* sub(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ValidationError("config: unknown key '" + where_ + "." + it.key() + "'");
    }

  private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

void require_positive(double v, const char* what) {
    if (!(v > 0.0)) throw ValidationError(std::string("config: ") + what + " must be positive");
}

void require_positive(int v, const char* what) {
    if (v <= 0) throw ValidationError(std::string("config: ") + what + " must be positive");
}

}  // namespace

void ExperimentConfig::validate() const {
    if (!kExperiments.count(experiment))
        throw ValidationError("config: unknown experiment kind '" + experiment + "'");
    if (threads < 0) throw ValidationError("config: threads must be >= 0");
    if (model.family != "sigmoid-net" && model.family != "attention")
        throw ValidationError("config: unknown model family '" + model.family + "'");
    if (loss_kind != "square" && loss_kind != "cross-entropy" && loss_kind != "xent")
        throw ValidationError("config: unknown loss kind '" + loss_kind + "'");
    if (dataset.source != "teacher" && dataset.source != "file" && dataset.source != "self-labeled")
        throw ValidationError("config: unknown dataset source '" + dataset.source + "'");
    if (dataset.source == "file" && dataset.path.empty())
        throw ValidationError("config: dataset.source 'file' requires dataset.path");
    if (init.kind != "gaussian" && init.kind != "uniform-ball" && init.kind != "point" &&
        init.kind != "product")
        throw ValidationError("config: unknown init kind '" + init.kind + "'");
    require_positive(init.m, "init.m");
    require_positive(dataset.n, "dataset.n");
    require_positive(dataset.teacher_width, "dataset.teacher_width");
    require_positive(flow.step_size, "flow.step_size");
    require_positive(flow.t_end, "flow.t_end");
    require_positive(flow.record_every, "flow.record_every");
    if (flow.truncation_alpha < 0.0)
        throw ValidationError("config: flow.truncation_alpha must be >= 0");
    require_positive(stability.m_small, "stability.m_small");
    require_positive(stability.m_large, "stability.m_large");
    require_positive(escape.n_trials, "escape.n_trials");
    require_positive(escape.t_end, "escape.t_end");
    require_positive(escape.step_size, "escape.step_size");
    require_positive(escape.n_directions, "escape.n_directions");
    require_positive(escape.n_eta_grid, "escape.n_eta_grid");
    require_positive(scan.n_tokens, "scan.n_tokens");
    require_positive(scan.token_dim, "scan.token_dim");
    require_positive(scan.n_contexts, "scan.n_contexts");
    require_positive(scan.n_directions, "scan.n_directions");
    if (scan.r_grid.empty()) throw ValidationError("config: scan.r_grid must be nonempty");
    require_positive(asymptotics.d_in, "asymptotics.d_in");
    require_positive(asymptotics.n_samples, "asymptotics.n_samples");
    require_positive(asymptotics.n_mc, "asymptotics.n_mc");
    require_positive(asymptotics.n_surface, "asymptotics.n_surface");
    if (asymptotics.profile != "tanh-x1" && asymptotics.profile != "one")
        throw ValidationError("config: unknown asymptotics profile '" + asymptotics.profile + "'");
    if (asymptotics.r_grid.empty())
        throw ValidationError("config: asymptotics.r_grid must be nonempty");
}

Json to_json(const ExperimentConfig& c) {
    Json j;
    j["experiment"] = c.experiment;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["output"] = c.output;
    j["model"] = {{"family", c.model.family},
                  {"d_in", c.model.d_in},
                  {"d_out", c.model.d_out},
                  {"activation", c.model.activation},
                  {"n_tokens", c.model.n_tokens},
                  {"token_dim", c.model.token_dim},
                  {"value_dim", c.model.value_dim}};
    j["loss"] = c.loss_kind;
    j["dataset"] = {{"source", c.dataset.source},
                    {"path", c.dataset.path},
                    {"sidecar", c.dataset.sidecar},
                    {"n", c.dataset.n},
                    {"teacher_width", c.dataset.teacher_width},
                    {"teacher_w_scale", c.dataset.teacher_w_scale},
                    {"teacher_theta_scale", c.dataset.teacher_theta_scale},
                    {"noise", c.dataset.noise},
                    {"feature_scale", c.dataset.feature_scale}};
    j["init"] = {{"kind", c.init.kind},
                 {"m", c.init.m},
                 {"scale", c.init.scale},
                 {"w_scale", c.init.w_scale},
                 {"theta_scale", c.init.theta_scale}};
    j["flow"] = {{"integrator", c.flow.integrator},
                 {"step_size", c.flow.step_size},
                 {"t_end", c.flow.t_end},
                 {"record_every", c.flow.record_every},
                 {"truncation_alpha", c.flow.truncation_alpha},
                 {"max_halvings", c.flow.max_halvings}};
    j["stability"] = {{"m_small", c.stability.m_small},
                      {"m_large", c.stability.m_large},
                      {"sliced_projections", c.stability.sliced_projections}};
    j["escape"] = {{"field", c.escape.field},
                   {"d_theta", c.escape.d_theta},
                   {"level", c.escape.level},
                   {"eta_lo", c.escape.eta_lo},
                   {"eta_hi", c.escape.eta_hi},
                   {"n_eta_grid", c.escape.n_eta_grid},
                   {"n_directions", c.escape.n_directions},
                   {"probe_radius", c.escape.probe_radius},
                   {"regular_floor", c.escape.regular_floor},
                   {"r_grid_max", c.escape.r_grid_max},
                   {"theta_radius", c.escape.theta_radius},
                   {"epsilon_frac", c.escape.epsilon_frac},
                   {"n_trials", c.escape.n_trials},
                   {"t_end", c.escape.t_end},
                   {"step_size", c.escape.step_size},
                   {"eta", c.escape.eta},
                   {"ball_radius", c.escape.ball_radius},
                   {"n_samples", c.escape.n_samples}};
    j["scan"] = {{"n_tokens", c.scan.n_tokens},
                 {"token_dim", c.scan.token_dim},
                 {"n_contexts", c.scan.n_contexts},
                 {"n_directions", c.scan.n_directions},
                 {"r_grid", c.scan.r_grid}};
    j["asymptotics"] = {{"d_in", c.asymptotics.d_in},
                        {"profile", c.asymptotics.profile},
                        {"n_samples", c.asymptotics.n_samples},
                        {"n_mc", c.asymptotics.n_mc},
                        {"n_surface", c.asymptotics.n_surface},
                        {"r_grid", c.asymptotics.r_grid}};
    return j;
}

ExperimentConfig config_from_json(const Json& j) {
    ExperimentConfig c;
    StrictObject top(j, "");
    top.get("experiment", c.experiment);
    top.get("seed", c.seed);
    top.get("threads", c.threads);
    top.get("output", c.output);
    top.get("loss", c.loss_kind);

    if (const Json* m = top.sub("model")) {
        StrictObject o(*m, "model");
        o.get("family", c.model.family);
        o.get("d_in", c.model.d_in);
        o.get("d_out", c.model.d_out);
        o.get("activation", c.model.activation);
        o.get("n_tokens", c.model.n_tokens);
        o.get("token_dim", c.model.token_dim);
        o.get("value_dim", c.model.value_dim);
        o.finish();
    }
    if (const Json* m = top.sub("dataset")) {
        StrictObject o(*m, "dataset");
        o.get("source", c.dataset.source);
        o.get("path", c.dataset.path);
        o.get("sidecar", c.dataset.sidecar);
        o.get("n", c.dataset.n);
        o.get("teacher_width", c.dataset.teacher_width);
        o.get("teacher_w_scale", c.dataset.teacher_w_scale);
        o.get("teacher_theta_scale", c.dataset.teacher_theta_scale);
        o.get("noise", c.dataset.noise);
        o.get("feature_scale", c.dataset.feature_scale);
        o.finish();
    }
    if (const Json* m = top.sub("init")) {
        StrictObject o(*m, "init");
        o.get("kind", c.init.kind);
        o.get("m", c.init.m);
        o.get("scale", c.init.scale);
        o.get("w_scale", c.init.w_scale);
        o.get("theta_scale", c.init.theta_scale);
        o.finish();
    }
    if (const Json* m = top.sub("flow")) {
        StrictObject o(*m, "flow");
        o.get("integrator", c.flow.integrator);
        o.get("step_size", c.flow.step_size);
        o.get("t_end", c.flow.t_end);
        o.get("record_every", c.flow.record_every);
        o.get("truncation_alpha", c.flow.truncation_alpha);
        o.get("max_halvings", c.flow.max_halvings);
        o.finish();
    }
    if (const Json* m = top.sub("stability")) {
        StrictObject o(*m, "stability");
        o.get("m_small", c.stability.m_small);
        o.get("m_large", c.stability.m_large);
        o.get("sliced_projections", c.stability.sliced_projections);
        o.finish();
    }
    if (const Json* m = top.sub("escape")) {
        StrictObject o(*m, "escape");
        o.get("field", c.escape.field);
        o.get("d_theta", c.escape.d_theta);
        o.get("level", c.escape.level);
        o.get("eta_lo", c.escape.eta_lo);
        o.get("eta_hi", c.escape.eta_hi);
        o.get("n_eta_grid", c.escape.n_eta_grid);
        o.get("n_directions", c.escape.n_directions);
        o.get("probe_radius", c.escape.probe_radius);
        o.get("regular_floor", c.escape.regular_floor);
        o.get("r_grid_max", c.escape.r_grid_max);
        o.get("theta_radius", c.escape.theta_radius);
        o.get("epsilon_frac", c.escape.epsilon_frac);
        o.get("n_trials", c.escape.n_trials);
        o.get("t_end", c.escape.t_end);
        o.get("step_size", c.escape.step_size);
        o.get("eta", c.escape.eta);
        o.get("ball_radius", c.escape.ball_radius);
        o.get("n_samples", c.escape.n_samples);
        o.finish();
    }
    if (const Json* m = top.sub("scan")) {
        StrictObject o(*m, "scan");
        o.get("n_tokens", c.scan.n_tokens);
        o.get("token_dim", c.scan.token_dim);
        o.get("n_contexts", c.scan.n_contexts);
        o.get("n_directions", c.scan.n_directions);
        o.get("r_grid", c.scan.r_grid);
        o.finish();
    }
    if (const Json* m = top.sub("asymptotics")) {
        StrictObject o(*m, "asymptotics");
        o.get("d_in", c.asymptotics.d_in);
        o.get("profile", c.asymptotics.profile);
        o.get("n_samples", c.asymptotics.n_samples);
        o.get("n_mc", c.asymptotics.n_mc);
        o.get("n_surface", c.asymptotics.n_surface);
        o.get("r_grid", c.asymptotics.r_grid);
        o.finish();
    }
    top.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file: " + path);
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ValidationError("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

std::string serialize_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void save_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write config file: " + path);
    out << serialize_config(cfg);
}

}  // namespace mflab
