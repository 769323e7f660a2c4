#pragma once

// Large-parameter limit checks: the softmax-to-hardmax attention scan, the
// sigmoid half-space and hyperplane-integral limits, and the exploratory
// comparison of the rescaled attention score gradient against its conjectured
// surface-integral limit. Surface integrals are estimated by constrained
// Gaussian importance sampling with the coarea weight folded in analytically.

#include "mfl/common.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mfl {

// ---------------------------------------------------------------------------
// Direction sampling

struct SphereSampler {
    enum class Kind { Uniform, StratifiedPlusAxes };

    int dim = 1;
    int count = 512;
    std::uint64_t seed = 1;
    Kind kind = Kind::Uniform;

    // Unit vectors; StratifiedPlusAxes prepends the +/- coordinate axes
    // (for matrix directions these are the rank-one coordinate matrices).
    std::vector<Vec> sample() const;
};

// ---------------------------------------------------------------------------
// Hardmax convergence

struct ConvergenceScan {
    std::vector<double> r_grid;
    std::vector<double> sup_gaps;  // per r, sup over sampled directions
    Mat gaps;                      // directions x r detail table
    bool strictly_decreasing = false;
};

// Gap of direction A at scale r: sqrt((1/N) sum_X |psi(rA)(X) - hardmax(A)(X)|^2)
// over the context rows (each row a flattened n x d context, query last).
ConvergenceScan hardmax_convergence_scan(const Mat& contexts, int n_tokens, int token_dim,
                                         const SphereSampler& sphere,
                                         const std::vector<double>& r_grid, double tie_tol = 1e-9,
                                         int n_threads = 1);

void write_scan_csv(const std::string& path, const ConvergenceScan& scan);

// ---------------------------------------------------------------------------
// Densities

struct DensitySpec {
    int dim = 1;
    double decay_p = 0.0;  // declared bound |pdf(x)| <= C (1+|x|)^{-p}
    std::function<double(const Vec&)> pdf;
    std::function<Vec(Rng&)> sample;
};

DensitySpec standard_gaussian_density(int dim);

// ---------------------------------------------------------------------------
// Sigmoid limits

struct HalfspaceRow {
    double r = 0.0;
    double mc = 0.0;     // E[f(x) sigmoid(r <theta, x>)]
    double limit = 0.0;  // E[f(x) 1{<theta, x> >= 0}]
    double gap = 0.0;
    double stderr_gap = 0.0;
};

// Both sides share the same sample set, so the gap is a paired estimate.
std::vector<HalfspaceRow> sigmoid_halfspace_check(const std::function<double(const Vec&)>& f,
                                                  const Mat& x_samples, const Vec& theta,
                                                  const std::vector<double>& r_grid);

struct GradientLimitRow {
    double r = 0.0;
    Vec mc;          // r E[f(x) sigmoid'(r <theta, x>) x]
    Vec limit;       // integral of f(x) pdf(x) x over the hyperplane <theta, x> = 0
    double gap = 0.0;
    double stderr_gap = 0.0;
};

// Requires a declared decay exponent p > dim for the density (the hyperplane
// integral is otherwise not known to converge).
std::vector<GradientLimitRow> sigmoid_gradient_limit_check(
    const std::function<double(const Vec&)>& f, const DensitySpec& density, const Vec& theta,
    const std::vector<double>& r_grid, int n_mc, int n_surface, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Attention score-gradient explorer (conjectured limit; results are evidence,
// never assertions)

struct AttentionGradientReport {
    std::vector<double> r_grid;
    std::vector<Mat> finite_r;            // r * grad of E<f(X), psi(rA)(X)> at rA
    Mat conjecture;                       // surface-integral estimate of the limit
    double conjecture_stderr = 0.0;
    std::vector<double> gap_to_conjecture;  // Frobenius gaps per r
    std::vector<double> cauchy_gaps;        // consecutive finite-r Frobenius gaps
    double skipped_mass = 0.0;  // fraction of surface samples near the singular locus
    bool is_conjecture = true;
};

// Serializes an explorer report. The status field always carries the
// CONJECTURE label: the surface-integral object is a candidate limit backed
// by numerical evidence only.
void write_attention_report_json(const std::string& path, const AttentionGradientReport& rep);

// Contexts are standard Gaussian on R^{n x d}. f maps an n x d context to R^d.
AttentionGradientReport attention_gradient_limit_explore(
    const std::function<Vec(const Mat&)>& f, const Mat& A, int n_tokens, int token_dim,
    const std::vector<double>& r_grid, int n_mc, int n_surface, std::uint64_t seed,
    double alpha_floor = 1e-6);

}  // namespace mfl
