#pragma once

// Experiment configuration: one JSON document covering every experiment kind.
// Parsing is strict (unknown keys are rejected) and serialization always
// emits every knob with its effective value, so a manifest pins the complete
// configuration and silent defaults cannot drift between versions.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace mflab {

using Json = nlohmann::ordered_json;

// Model family and shape. "sigmoid-net" uses d_in/d_out/activation;
// "attention" uses n_tokens/token_dim/value_dim (0 -> token_dim).
struct ModelConfig {
    std::string family = "sigmoid-net";
    int d_in = 2;
    int d_out = 1;
    std::string activation = "sigmoid";
    int n_tokens = 2;
    int token_dim = 2;
    int value_dim = 0;
};

// Where samples come from. "teacher": Gaussian features labeled by a sampled
// teacher ensemble. "file": CSV + JSON sidecar on disk. "self-labeled":
// Gaussian features labeled by the run's own initial ensemble, so the flow
// starts exactly stationary.
struct DatasetConfig {
    std::string source = "teacher";
    std::string path;
    std::string sidecar;  // empty -> path + ".json"
    int n = 128;
    int teacher_width = 8;
    double teacher_w_scale = 2.0;
    double teacher_theta_scale = 1.0;
    double noise = 0.0;
    double feature_scale = 1.0;
};

// Initial ensemble. kind: gaussian | uniform-ball | point | product
// (product = independent centered Gaussian blocks with w_scale/theta_scale).
struct InitConfig {
    std::string kind = "gaussian";
    int m = 256;
    double scale = 1.0;
    double w_scale = 1.0;
    double theta_scale = 1.0;
};

struct FlowBlock {
    std::string integrator = "rk4";
    double step_size = 0.05;
    double t_end = 1.0;
    int record_every = 1;
    double truncation_alpha = 0.0;  // 0 disables the risk clamp
    int max_halvings = 6;
};

struct StabilityBlock {
    int m_small = 64;
    int m_large = 512;
    int sliced_projections = 64;
};

// Shared by the scalar and vector escape experiments; the `field` name picks
// a built-in closed-form driving field.
struct EscapeBlock {
    std::string field = "bounded-well";
    int d_theta = 2;
    double level = 0.875;  // magnitude of the "constant" field
    // scalar set construction
    double eta_lo = 1.0;
    double eta_hi = 1.0;
    int n_eta_grid = 1;
    int n_directions = 256;
    double probe_radius = 1e3;
    double regular_floor = 1e-4;
    double r_grid_max = 1e4;
    double theta_radius = 2.0;   // sampling radius for initial theta
    double epsilon_frac = 1.0;   // fraction of the certified budget to apply
    // trials
    int n_trials = 100;
    double t_end = 10.0;
    double step_size = 0.01;
    // vector set construction
    double eta = 0.95;
    double ball_radius = 3.0;
    int n_samples = 256;
};

struct ScanBlock {
    int n_tokens = 3;
    int token_dim = 2;
    int n_contexts = 10000;
    int n_directions = 512;
    std::vector<double> r_grid = {1.0, 10.0, 100.0, 1000.0};
};

struct AsymptoticsBlock {
    int d_in = 3;
    std::string profile = "tanh-x1";  // tanh-x1 | one
    int n_samples = 1000000;          // half-space comparison sample count
    int n_mc = 200000;                // gradient-limit full-space samples
    int n_surface = 20000;            // gradient-limit hyperplane samples
    std::vector<double> r_grid = {1.0, 10.0, 100.0, 1000.0};
};

struct ExperimentConfig {
    std::string experiment = "simulate";
    std::uint64_t seed = 1;
    int threads = 1;
    std::string output;
    std::string loss_kind = "square";

    ModelConfig model;
    DatasetConfig dataset;
    InitConfig init;
    FlowBlock flow;
    StabilityBlock stability;
    EscapeBlock escape;
    ScanBlock scan;
    AsymptoticsBlock asymptotics;

    // Structural checks only (enum strings, positivity); deeper checks happen
    // in the modules that consume each block. Throws mfl::ValidationError.
    void validate() const;
};

// Full serialization: every field of every block, fixed key order.
Json to_json(const ExperimentConfig& cfg);

// Strict parse: unknown keys and type mismatches raise mfl::ValidationError.
ExperimentConfig config_from_json(const Json& j);

ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);  // canonical text form
void save_config(const ExperimentConfig& cfg, const std::string& path);

}  // namespace mflab
