#include "mfl/wasserstein.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mfl {

double solve_assignment(const Mat& cost, std::vector<int>& row_to_col) {
    const int n = static_cast<int>(cost.rows());
    if (cost.cols() != n) throw ValidationError("assignment cost matrix must be square");
    constexpr double kInf = std::numeric_limits<double>::infinity();

    // Dual potentials u (rows) and v (columns), with index 0 as a virtual
    // slot; p[j] is the row currently matched to column j.
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, kInf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }

    row_to_col.assign(n, -1);
    std::vector<double> terms(n, 0.0);
    for (int j = 1; j <= n; ++j) {
        row_to_col[p[j] - 1] = j - 1;
        terms[p[j] - 1] = cost(p[j] - 1, j - 1);
    }
    return pairwise_sum(terms);
}

namespace {

void check_compatible(const Ensemble& a, const Ensemble& b) {
    if (a.m() != b.m()) throw ValidationError("W2 requires equal particle counts");
    if (a.d_w != b.d_w || a.d_theta != b.d_theta)
        throw ValidationError("W2 requires equal particle dimensions");
}

Vec flatten(const Particle& p) {
    Vec u(p.w.size() + p.theta.size());
    u.head(p.w.size()) = p.w;
    u.tail(p.theta.size()) = p.theta;
    return u;
}

}  // namespace

double w2_exact(const Ensemble& a, const Ensemble& b) {
    check_compatible(a, b);
    const int m = a.m();
    if (m > kW2ExactCap)
        throw ValidationError("ensemble size exceeds the exact W2 cap; use w2_sliced");

    Mat cost(m, m);
    std::vector<Vec> ua(m), ub(m);
    for (int i = 0; i < m; ++i) ua[i] = flatten(a.particles[i]);
    for (int j = 0; j < m; ++j) ub[j] = flatten(b.particles[j]);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) cost(i, j) = (ua[i] - ub[j]).squaredNorm();

    std::vector<int> match;
    double total = solve_assignment(cost, match);
    return std::sqrt(std::max(0.0, total / m));
}

double w2_bruteforce(const Ensemble& a, const Ensemble& b) {
    check_compatible(a, b);
    const int m = a.m();
    if (m > 8) throw ValidationError("w2_bruteforce is limited to m <= 8");

    Mat cost(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            cost(i, j) = (flatten(a.particles[i]) - flatten(b.particles[j])).squaredNorm();

    std::vector<int> perm(m);
    for (int i = 0; i < m; ++i) perm[i] = i;
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> terms(m);
    do {
        for (int i = 0; i < m; ++i) terms[i] = cost(i, perm[i]);
        best = std::min(best, pairwise_sum(terms));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::sqrt(std::max(0.0, best / m));
}

double w2_sliced(const Ensemble& a, const Ensemble& b, int n_projections, std::uint64_t seed) {
    check_compatible(a, b);
    if (n_projections < 1) throw ValidationError("w2_sliced needs at least one projection");
    const int m = a.m();
    const int dim = a.d_w + a.d_theta;

    Rng rng = make_rng(seed);
    std::vector<double> pa(m), pb(m), sq(m), per_dir(n_projections);
    for (int k = 0; k < n_projections; ++k) {
        const Vec dir = sphere_vec(rng, dim);
        for (int i = 0; i < m; ++i) {
            pa[i] = dir.head(a.d_w).dot(a.particles[i].w) + dir.tail(a.d_theta).dot(a.particles[i].theta);
            pb[i] = dir.head(b.d_w).dot(b.particles[i].w) + dir.tail(b.d_theta).dot(b.particles[i].theta);
        }
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        for (int i = 0; i < m; ++i) {
            const double d = pa[i] - pb[i];
            sq[i] = d * d;
        }
        per_dir[k] = std::sqrt(pairwise_sum(sq) / m);
    }
    return pairwise_sum(per_dir) / n_projections;
}

}  // namespace mfl
