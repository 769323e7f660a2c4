#include "mfl/asymptotics.hpp"

#include "mfl/models.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace mfl {

// ---------------------------------------------------------------------------
// SphereSampler

std::vector<Vec> SphereSampler::sample() const {
    if (dim <= 0) throw ValidationError("SphereSampler: non-positive dimension");
    if (count <= 0) throw ValidationError("SphereSampler: non-positive count");
    std::vector<Vec> out;
    out.reserve(static_cast<size_t>(count));
    if (kind == Kind::StratifiedPlusAxes) {
        for (int a = 0; a < dim && static_cast<int>(out.size()) < count; ++a) {
            Vec e = Vec::Zero(dim);
            e[a] = 1.0;
            out.push_back(e);
            if (static_cast<int>(out.size()) < count) out.push_back(Vec(-e));
        }
    }
    Rng rng = make_rng(seed, 0x73706872ULL);
    while (static_cast<int>(out.size()) < count) out.push_back(sphere_vec(rng, dim));
    return out;
}

// ---------------------------------------------------------------------------
// Hardmax convergence scan

ConvergenceScan hardmax_convergence_scan(const Mat& contexts, int n_tokens, int token_dim,
                                         const SphereSampler& sphere,
                                         const std::vector<double>& r_grid, double tie_tol,
                                         int n_threads) {
    if (contexts.rows() == 0) throw ValidationError("hardmax scan: empty context set");
    if (contexts.cols() != static_cast<Eigen::Index>(n_tokens) * token_dim)
        throw ValidationError("hardmax scan: context width mismatch");
    if (sphere.dim != token_dim * token_dim)
        throw ValidationError("hardmax scan: sphere dimension must be token_dim^2");
    if (r_grid.empty()) throw ValidationError("hardmax scan: empty r grid");
    for (size_t k = 0; k < r_grid.size(); ++k) {
        if (!(r_grid[k] >= 0.0)) throw ValidationError("hardmax scan: negative r");
        if (k > 0 && r_grid[k] <= r_grid[k - 1])
            throw ValidationError("hardmax scan: r grid must be strictly increasing");
    }

    const std::vector<Vec> dirs = sphere.sample();
    const int n_dirs = static_cast<int>(dirs.size());
    const int n_r = static_cast<int>(r_grid.size());
    const int N = static_cast<int>(contexts.rows());

    ConvergenceScan scan;
    scan.r_grid = r_grid;
    scan.gaps.resize(n_dirs, n_r);

    parallel_for(static_cast<size_t>(n_dirs), n_threads, [&](size_t di) {
        const Mat A = unflatten(dirs[di], token_dim, token_dim);
        for (int ri = 0; ri < n_r; ++ri) {
            std::vector<double> sq(static_cast<size_t>(N));
            for (int s = 0; s < N; ++s) {
                const Mat X = unflatten(contexts.row(s).transpose(), n_tokens, token_dim);
                sq[static_cast<size_t>(s)] =
                    (psi_attention(r_grid[static_cast<size_t>(ri)] * A, X) -
                     psi_hardmax(A, X, tie_tol))
                        .squaredNorm();
            }
            scan.gaps(static_cast<int>(di), ri) = std::sqrt(pairwise_sum(sq) / N);
        }
    });

    scan.sup_gaps.assign(static_cast<size_t>(n_r), 0.0);
    for (int ri = 0; ri < n_r; ++ri) scan.sup_gaps[static_cast<size_t>(ri)] = scan.gaps.col(ri).maxCoeff();
    scan.strictly_decreasing = true;
    for (size_t k = 1; k < scan.sup_gaps.size(); ++k)
        if (!(scan.sup_gaps[k] < scan.sup_gaps[k - 1])) scan.strictly_decreasing = false;
    return scan;
}

void write_scan_csv(const std::string& path, const ConvergenceScan& scan) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open " + path);
    out << "r,direction,gap\n";
    for (int di = 0; di < scan.gaps.rows(); ++di)
        for (size_t ri = 0; ri < scan.r_grid.size(); ++ri)
            out << format_double(scan.r_grid[ri]) << ',' << di << ','
                << format_double(scan.gaps(di, static_cast<int>(ri))) << '\n';
}

// ---------------------------------------------------------------------------
// Densities

DensitySpec standard_gaussian_density(int dim) {
    if (dim <= 0) throw ValidationError("density: non-positive dimension");
    DensitySpec d;
    d.dim = dim;
    d.decay_p = 1e9;  // super-polynomial decay
    d.pdf = [dim](const Vec& x) {
        return std::exp(-0.5 * x.squaredNorm()) / std::pow(2.0 * M_PI, 0.5 * dim);
    };
    d.sample = [dim](Rng& rng) { return gaussian_vec(rng, dim); };
    return d;
}

// ---------------------------------------------------------------------------
// Sigmoid limits

static double logistic_value(double s) {
    if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

std::vector<HalfspaceRow> sigmoid_halfspace_check(const std::function<double(const Vec&)>& f,
                                                  const Mat& x_samples, const Vec& theta,
                                                  const std::vector<double>& r_grid) {
    if (x_samples.rows() == 0) throw ValidationError("halfspace check: empty sample set");
    if (theta.size() != x_samples.cols()) throw ValidationError("halfspace check: dimension mismatch");
    const int N = static_cast<int>(x_samples.rows());

    std::vector<double> fx(static_cast<size_t>(N)), proj(static_cast<size_t>(N));
    for (int s = 0; s < N; ++s) {
        const Vec x = x_samples.row(s).transpose();
        fx[static_cast<size_t>(s)] = f(x);
        proj[static_cast<size_t>(s)] = theta.dot(x);
    }
    std::vector<double> half(static_cast<size_t>(N));
    for (int s = 0; s < N; ++s)
        half[static_cast<size_t>(s)] =
            fx[static_cast<size_t>(s)] * (proj[static_cast<size_t>(s)] > 0.0   ? 1.0
                                          : proj[static_cast<size_t>(s)] == 0.0 ? 0.5
                                                                                : 0.0);
    const double limit = pairwise_sum(half) / N;

    std::vector<HalfspaceRow> rows;
    for (double r : r_grid) {
        HalfspaceRow row;
        row.r = r;
        std::vector<double> soft(static_cast<size_t>(N)), diff(static_cast<size_t>(N));
        for (int s = 0; s < N; ++s) {
            soft[static_cast<size_t>(s)] =
                fx[static_cast<size_t>(s)] * logistic_value(r * proj[static_cast<size_t>(s)]);
            diff[static_cast<size_t>(s)] = soft[static_cast<size_t>(s)] - half[static_cast<size_t>(s)];
        }
        row.mc = pairwise_sum(soft) / N;
        row.limit = limit;
        row.gap = pairwise_sum(diff) / N;
        // Conservative uncertainty: treat the two estimators as independent
        // even though they share samples.  The paired variance can be far
        // smaller than the residual smoothing bias at large finite r, which
        // would make "within k standard errors" tests misleadingly strict.
        double var_soft = 0.0, var_half = 0.0;
        for (double v : soft) var_soft += (v - row.mc) * (v - row.mc);
        for (double v : half) var_half += (v - limit) * (v - limit);
        var_soft /= std::max(1, N - 1);
        var_half /= std::max(1, N - 1);
        row.stderr_gap = std::sqrt((var_soft + var_half) / N);
        rows.push_back(row);
    }
    return rows;
}

namespace {

// Columns form an orthonormal basis of the orthogonal complement of u (unit).
Mat orthogonal_complement(const Vec& u) {
    const int d = static_cast<int>(u.size());
    // QR of [u, e_1, ..] with the axis most aligned with u swapped out so the
    // matrix stays full rank; the trailing Q columns then span u^perp.
    Mat M = Mat::Identity(d, d);
    int drop = 0;
    u.cwiseAbs().maxCoeff(&drop);
    M.col(drop) = M.col(0);
    M.col(0) = u;
    Eigen::HouseholderQR<Mat> qr(M);
    Mat Q = qr.householderQ();
    return Q.rightCols(d - 1);
}

}  // namespace

std::vector<GradientLimitRow> sigmoid_gradient_limit_check(
    const std::function<double(const Vec&)>& f, const DensitySpec& density, const Vec& theta,
    const std::vector<double>& r_grid, int n_mc, int n_surface, std::uint64_t seed) {
    const int d = density.dim;
    if (theta.size() != d) throw ValidationError("gradient limit: dimension mismatch");
    if (!(density.decay_p > d))
        throw ValidationError("gradient limit: density decay exponent must exceed the dimension");
    if (!density.pdf || !density.sample) throw ValidationError("gradient limit: incomplete density");
    if (n_mc <= 1 || n_surface <= 1) throw ValidationError("gradient limit: need at least 2 samples");
    const Vec th = theta / theta.norm();

    // Hyperplane integral of f(x) pdf(x) x over {<theta, x> = 0}: Gaussian
    // proposal in the plane, importance weight pdf / proposal.
    Vec limit = Vec::Zero(d);
    Vec limit_var = Vec::Zero(d);
    if (d > 1) {
        const Mat B = orthogonal_complement(th);
        Rng rng = make_rng(seed, 0x73757266ULL);
        const double log_norm = -0.5 * (d - 1) * std::log(2.0 * M_PI);
        Mat contrib(n_surface, d);
        for (int s = 0; s < n_surface; ++s) {
            const Vec y = gaussian_vec(rng, d - 1);
            const Vec x = B * y;
            const double proposal = std::exp(log_norm - 0.5 * y.squaredNorm());
            const double wgt = density.pdf(x) / proposal;
            contrib.row(s) = (f(x) * wgt) * x.transpose();
        }
        for (int j = 0; j < d; ++j) {
            std::vector<double> col(contrib.col(j).data(), contrib.col(j).data() + n_surface);
            const double mean = pairwise_sum(col) / n_surface;
            limit[j] = mean;
            double var = 0.0;
            for (double v : col) var += (v - mean) * (v - mean);
            limit_var[j] = var / std::max(1, n_surface - 1) / n_surface;
        }
    }

    // Full-space samples, reused across r.
    Rng rng = make_rng(seed, 0x6d63ULL);
    Mat xs(n_mc, d);
    Vec fs(n_mc);
    for (int s = 0; s < n_mc; ++s) {
        const Vec x = density.sample(rng);
        xs.row(s) = x.transpose();
        fs[s] = f(x);
    }
    const Vec proj = xs * th;

    std::vector<GradientLimitRow> rows;
    for (double r : r_grid) {
        GradientLimitRow row;
        row.r = r;
        Mat contrib(n_mc, d);
        for (int s = 0; s < n_mc; ++s) {
            const double sig = logistic_value(r * proj[s]);
            contrib.row(s) = (r * fs[s] * sig * (1.0 - sig)) * xs.row(s);
        }
        row.mc.resize(d);
        Vec mc_var(d);
        for (int j = 0; j < d; ++j) {
            std::vector<double> col(contrib.col(j).data(), contrib.col(j).data() + n_mc);
            const double mean = pairwise_sum(col) / n_mc;
            row.mc[j] = mean;
            double var = 0.0;
            for (double v : col) var += (v - mean) * (v - mean);
            mc_var[j] = var / std::max(1, n_mc - 1) / n_mc;
        }
        row.limit = limit;
        row.gap = (row.mc - limit).norm();
        row.stderr_gap = std::sqrt(mc_var.sum() + limit_var.sum());
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Attention score-gradient explorer

AttentionGradientReport attention_gradient_limit_explore(
    const std::function<Vec(const Mat&)>& f, const Mat& A, int n_tokens, int token_dim,
    const std::vector<double>& r_grid, int n_mc, int n_surface, std::uint64_t seed,
    double alpha_floor) {
    const int n = n_tokens, d = token_dim;
    if (A.rows() != d || A.cols() != d) throw ValidationError("attention explorer: A shape mismatch");
    if (n <= 0 || d <= 0) throw ValidationError("attention explorer: bad context shape");
    if (r_grid.empty()) throw ValidationError("attention explorer: empty r grid");
    if (n_mc <= 1 || n_surface <= 1) throw ValidationError("attention explorer: need at least 2 samples");

    AttentionGradientReport rep;
    rep.r_grid = r_grid;
    const int q = n - 1;  // query row

    // Finite-r side: Monte Carlo of the exact score gradient at rA, times r.
    {
        Rng rng = make_rng(seed, 0x61747447ULL);
        std::vector<Mat> samples(static_cast<size_t>(n_mc), Mat(n, d));
        for (int s = 0; s < n_mc; ++s)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) samples[static_cast<size_t>(s)](i, j) = gaussian(rng);

        for (double r : r_grid) {
            Mat acc = Mat::Zero(d, d);
            for (int s = 0; s < n_mc; ++s) {
                const Mat& X = samples[static_cast<size_t>(s)];
                const Vec xn = X.row(q).transpose();
                const Vec z = X * (r * A * xn);
                const Vec sm = softmax(z);
                const Vec h = X * f(X);  // h_i = <f(X), x_i>
                Mat g = Mat::Zero(d, d);
                if (n > 1) {
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < n; ++j) {
                            if (i == j) continue;
                            g += (sm[i] * sm[j] * h[i]) *
                                 ((X.row(i) - X.row(j)).transpose() * xn.transpose());
                        }
                }
                acc += g;
            }
            rep.finite_r.push_back(Mat((r / n_mc) * acc));
        }
    }

    // Conjectured limit: per ordered pair (i, j), integrate over the tie
    // surface <A x_n, x_i - x_j> = 0 restricted to "i achieves the max".
    // A Gaussian draw has one coordinate (the u-component of a non-query row,
    // u = A x_n / |A x_n|) replaced to land on the surface; the coarea factor
    // alpha / |A x_n| combines with the 1/alpha weight of the integrand into
    // 1 / |A x_n|, and the density ratio is the 1-D normal pdf of the
    // replaced coordinate.
    Mat conj = Mat::Zero(d, d);
    double conj_var = 0.0;
    long skipped = 0, total = 0;
    if (n > 1) {
        Rng rng = make_rng(seed, 0x61747453ULL);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                Mat pair_sum = Mat::Zero(d, d);
                Mat pair_sumsq = Mat::Zero(d, d);
                for (int s = 0; s < n_surface; ++s) {
                    ++total;
                    Mat X(n, d);
                    for (int a = 0; a < n; ++a)
                        for (int b = 0; b < d; ++b) X(a, b) = gaussian(rng);
                    const Vec xn = X.row(q).transpose();
                    const Vec Axn = A * xn;
                    const double axn_norm = Axn.norm();
                    if (axn_norm < 1e-12) {
                        ++skipped;
                        continue;
                    }
                    const Vec u = Axn / axn_norm;
                    const int solve_row = (i != q) ? i : j;
                    const int target_row = (i != q && j != q) ? j : q;
                    const double s_star = u.dot(X.row(target_row).transpose());
                    Vec row = X.row(solve_row).transpose();
                    row += (s_star - u.dot(row)) * u;
                    X.row(solve_row) = row.transpose();

                    if (alpha_coarea(A, X, i, j) < alpha_floor) {
                        ++skipped;
                        continue;
                    }
                    // max condition: score of token i at least every other score
                    const double zi = Axn.dot(X.row(i).transpose());
                    bool is_max = true;
                    for (int k = 0; k < n; ++k)
                        if (Axn.dot(X.row(k).transpose()) > zi + 1e-12) {
                            is_max = false;
                            break;
                        }
                    if (!is_max) continue;

                    const double phi1 = std::exp(-0.5 * s_star * s_star) / std::sqrt(2.0 * M_PI);
                    const double weight = phi1 / axn_norm;
                    const double hi = f(X).dot(X.row(i).transpose());
                    const Mat contrib =
                        (hi * weight) * ((X.row(i) - X.row(j)).transpose() * xn.transpose());
                    pair_sum += contrib;
                    pair_sumsq += contrib.cwiseProduct(contrib);
                }
                const Mat mean = pair_sum / n_surface;
                conj += mean;
                const Mat var =
                    (pair_sumsq / n_surface - mean.cwiseProduct(mean)) / std::max(1, n_surface - 1);
                conj_var += var.sum();
            }
        }
    }
    rep.conjecture = conj;
    rep.conjecture_stderr = std::sqrt(std::max(0.0, conj_var));
    rep.skipped_mass = total > 0 ? static_cast<double>(skipped) / static_cast<double>(total) : 0.0;

    for (const Mat& g : rep.finite_r) rep.gap_to_conjecture.push_back((g - conj).norm());
    for (size_t k = 1; k < rep.finite_r.size(); ++k)
        rep.cauchy_gaps.push_back((rep.finite_r[k] - rep.finite_r[k - 1]).norm());
    return rep;
}

void write_attention_report_json(const std::string& path, const AttentionGradientReport& rep) {
    nlohmann::ordered_json j;
    j["status"] = rep.is_conjecture
                      ? "CONJECTURE: candidate limit from a tie-surface integral; "
                        "numerical evidence only, no proof"
                      : "verified";
    j["r_grid"] = rep.r_grid;
    const auto mat_rows = [](const Mat& m) {
        std::vector<std::vector<double>> rows;
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            rows.emplace_back(m.row(r).begin(), m.row(r).end());
        }
        return rows;
    };
    auto finite = nlohmann::ordered_json::array();
    for (const Mat& g : rep.finite_r) finite.push_back(mat_rows(g));
    j["finite_r"] = finite;
    j["conjecture"] = mat_rows(rep.conjecture);
    j["conjecture_stderr"] = rep.conjecture_stderr;
    j["gap_to_conjecture"] = rep.gap_to_conjecture;
    j["cauchy_gaps"] = rep.cauchy_gaps;
    j["skipped_mass"] = rep.skipped_mass;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open " + path);
    out << j.dump(2) << '\n';
}

}  // namespace mfl
