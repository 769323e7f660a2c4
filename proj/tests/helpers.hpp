#pragma once

// Shared oracles for the unit tests: finite-difference harnesses, an
// independent reduced-ODE integrator, and temp-directory plumbing. These
// deliberately re-derive quantities through code paths different from the
// library's own, so agreement is evidence rather than tautology.

#include "mfl/common.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace testutil {

using mfl::Mat;
using mfl::Vec;

// Central finite-difference gradient of a scalar function.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x,
                       double h = 1e-6) {
    Vec g(x.size());
    for (int i = 0; i < x.size(); ++i) {
        Vec xp = x, xm = x;
        const double hi = h * std::max(1.0, std::abs(x[i]));
        xp[i] += hi;
        xm[i] -= hi;
        g[i] = (f(xp) - f(xm)) / (2.0 * hi);
    }
    return g;
}

// Central finite-difference Jacobian of a vector function.
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x,
                       double h = 1e-6) {
    const Vec f0 = f(x);
    Mat J(f0.size(), x.size());
    for (int i = 0; i < x.size(); ++i) {
        Vec xp = x, xm = x;
        const double hi = h * std::max(1.0, std::abs(x[i]));
        xp[i] += hi;
        xm[i] -= hi;
        J.col(i) = (f(xp) - f(xm)) / (2.0 * hi);
    }
    return J;
}

// Central difference of a vector function along a direction.
inline Vec fd_directional(const std::function<Vec(const Vec&)>& f, const Vec& x, const Vec& h,
                          double t = 1e-6) {
    return (f(x + t * h) - f(x - t * h)) / (2.0 * t);
}

// Second central difference along a direction: d^2/dt^2 f(x + t h) at t = 0.
inline Vec fd_second_directional(const std::function<Vec(const Vec&)>& f, const Vec& x,
                                 const Vec& h, double t = 1e-4) {
    return (f(x + t * h) - 2.0 * f(x) + f(x - t * h)) / (t * t);
}

// Classical RK4 for dy/dt = rhs(t, y), written independently of the library
// integrators (plain std::vector state, no Eigen expression reuse).
inline std::vector<double> reference_rk4(
    const std::function<std::vector<double>(double, const std::vector<double>&)>& rhs,
    std::vector<double> y, double t0, double t1, int n_steps) {
    const double h = (t1 - t0) / n_steps;
    const auto axpy = [](const std::vector<double>& a, double c, const std::vector<double>& b) {
        std::vector<double> r(a.size());
        for (size_t i = 0; i < a.size(); ++i) r[i] = a[i] + c * b[i];
        return r;
    };
    double t = t0;
    for (int s = 0; s < n_steps; ++s) {
        const auto k1 = rhs(t, y);
        const auto k2 = rhs(t + 0.5 * h, axpy(y, 0.5 * h, k1));
        const auto k3 = rhs(t + 0.5 * h, axpy(y, 0.5 * h, k2));
        const auto k4 = rhs(t + h, axpy(y, h, k3));
        for (size_t i = 0; i < y.size(); ++i)
            y[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        t += h;
    }
    return y;
}

// Fresh scratch directory under the system temp root; removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng{std::random_device{}()};
        const auto base = std::filesystem::temp_directory_path();
        for (int attempt = 0; attempt < 64; ++attempt) {
            auto candidate = base / ("mfl_" + tag + "_" + std::to_string(rng()));
            std::error_code ec;
            if (std::filesystem::create_directories(candidate, ec)) {
                path_ = candidate;
                return;
            }
        }
        throw std::runtime_error("TempDir: could not create scratch directory");
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str(const std::string& leaf = "") const {
        return leaf.empty() ? path_.string() : (path_ / leaf).string();
    }

  private:
    std::filesystem::path path_;
};

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Naive Kahan-free reference sum, for cross-checking deterministic reducers.
inline double naive_sum(const std::vector<double>& v) {
    long double acc = 0.0L;
    for (double x : v) acc += static_cast<long double>(x);
    return static_cast<double>(acc);
}

}  // namespace testutil
