#pragma once

// Shared basics: linear-algebra aliases, error types, seeded RNG utilities,
// deterministic reductions and a small slot-based parallel map.

#include <Eigen/Dense>

#include <charconv>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mfl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Bad inputs / configs: mapped to exit code 2 by the CLI.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical blow-up during an integration: mapped to exit code 3 by the CLI.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- Seeding ------------------------------------------------------------

// splitmix64 step; used to derive independent per-item seeds from one root
// seed so that parallel trials stay reproducible regardless of scheduling.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Independent stream derived from (seed, salt); use a distinct salt per
// logical purpose so streams never alias across modules or trials.
inline Rng make_rng(std::uint64_t seed, std::uint64_t salt) {
    return Rng(mix_seed(seed, salt));
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double gaussian(Rng& rng) {
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline Vec gaussian_vec(Rng& rng, int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = gaussian(rng);
    return v;
}

// Uniform direction on the unit sphere in R^n (normalized Gaussian).
inline Vec sphere_vec(Rng& rng, int n) {
    Vec v = gaussian_vec(rng, n);
    double nrm = v.norm();
    while (nrm < 1e-300) {  // astronomically unlikely; resample for safety
        v = gaussian_vec(rng, n);
        nrm = v.norm();
    }
    return v / nrm;
}

// --- Deterministic reductions ------------------------------------------

// Fixed-shape pairwise summation: the result depends only on the input
// order, never on thread count or chunking, and is more accurate than a
// running sum.
double pairwise_sum(const double* data, std::size_t n);

inline double pairwise_sum(const std::vector<double>& v) {
    return pairwise_sum(v.data(), v.size());
}

// --- Parallel map -------------------------------------------------------

// Runs fn(i) for i in [0,n) on up to n_threads workers. Each item writes
// only to its own slot, so results are bitwise-identical for any thread
// count; callers then reduce sequentially in index order.
void parallel_for(std::size_t n, int n_threads, const std::function<void(std::size_t)>& fn);

// Threads to use when the caller passes 0 (resolves to hardware count).
int resolve_threads(int requested);

// --- Formatting ---------------------------------------------------------

// Shortest round-trip decimal form of a double; used by every text writer
// so that serialized artifacts are reproducible byte-for-byte.
inline std::string format_double(double x) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

}  // namespace mfl
