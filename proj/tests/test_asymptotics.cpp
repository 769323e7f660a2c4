#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "helpers.hpp"
#include "mfl/asymptotics.hpp"
#include "mfl/models.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

using namespace mfl;

TEST_CASE("direction sampler") {
    SUBCASE("uniform draws are unit, deterministic, and seed-sensitive") {
        SphereSampler s;
        s.dim = 5;
        s.count = 256;
        s.seed = 42;
        const auto a = s.sample();
        REQUIRE(a.size() == 256);
        for (const Vec& v : a) CHECK(std::abs(v.norm() - 1.0) < 1e-12);
        const auto b = s.sample();
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
        s.seed = 43;
        const auto c = s.sample();
        CHECK(a[0] != c[0]);
    }

    SUBCASE("stratified sampling leads with the signed coordinate axes") {
        SphereSampler s;
        s.dim = 3;
        s.count = 10;
        s.kind = SphereSampler::Kind::StratifiedPlusAxes;
        const auto dirs = s.sample();
        REQUIRE(dirs.size() == 10);
        for (int a = 0; a < 3; ++a) {
            Vec e = Vec::Zero(3);
            e[a] = 1.0;
            CHECK(dirs[static_cast<size_t>(2 * a)] == e);
            CHECK(dirs[static_cast<size_t>(2 * a + 1)] == Vec(-e));
        }
        for (size_t i = 6; i < 10; ++i) CHECK(std::abs(dirs[i].norm() - 1.0) < 1e-12);

        s.count = 4;  // truncates the axis list
        const auto few = s.sample();
        REQUIRE(few.size() == 4);
        CHECK(few[3][1] == -1.0);
    }

    SUBCASE("degenerate parameters are rejected") {
        SphereSampler s;
        s.dim = 0;
        CHECK_THROWS_AS(s.sample(), ValidationError);
        s.dim = 2;
        s.count = 0;
        CHECK_THROWS_AS(s.sample(), ValidationError);
    }
}

TEST_CASE("hardmax convergence scan") {
    const int n = 3, d = 2, N = 50;
    Rng rng = make_rng(2024);
    Mat contexts(N, n * d);
    for (int i = 0; i < N; ++i) contexts.row(i) = gaussian_vec(rng, n * d).transpose();

    SphereSampler sphere;
    sphere.dim = d * d;
    sphere.count = 16;
    sphere.seed = 5;
    sphere.kind = SphereSampler::Kind::StratifiedPlusAxes;
    const std::vector<double> r_grid = {1.0, 10.0, 100.0};

    const ConvergenceScan scan = hardmax_convergence_scan(contexts, n, d, sphere, r_grid);

    SUBCASE("shapes, envelope, and monotonicity") {
        CHECK(scan.gaps.rows() == 16);
        CHECK(scan.gaps.cols() == 3);
        REQUIRE(scan.sup_gaps.size() == 3);
        for (int ri = 0; ri < 3; ++ri)
            CHECK(scan.sup_gaps[static_cast<size_t>(ri)] == scan.gaps.col(ri).maxCoeff());
        CHECK(scan.strictly_decreasing);
        CHECK(scan.sup_gaps[2] < 0.3 * scan.sup_gaps[0]);
    }

    SUBCASE("entries match a direct recomputation") {
        const auto dirs = sphere.sample();
        for (int di : {0, 5, 11}) {
            const Mat A = unflatten(dirs[static_cast<size_t>(di)], d, d);
            for (int ri = 0; ri < 3; ++ri) {
                double acc = 0.0;
                for (int s = 0; s < N; ++s) {
                    const Mat X = unflatten(contexts.row(s).transpose(), n, d);
                    acc += (psi_attention(r_grid[static_cast<size_t>(ri)] * A, X) -
                            psi_hardmax(A, X, 1e-9))
                               .squaredNorm();
                }
                CHECK(scan.gaps(di, ri) == doctest::Approx(std::sqrt(acc / N)).epsilon(1e-12));
            }
        }
    }

    SUBCASE("gaps respect the convex-hull diameter bound") {
        double max_row = 0.0;
        for (int s = 0; s < N; ++s) {
            const Mat X = unflatten(contexts.row(s).transpose(), n, d);
            for (int i = 0; i < n; ++i) max_row = std::max(max_row, X.row(i).norm());
        }
        CHECK(scan.gaps.maxCoeff() <= 2.0 * max_row + 1e-12);
    }

    SUBCASE("thread count does not change the result") {
        const ConvergenceScan four = hardmax_convergence_scan(contexts, n, d, sphere, r_grid,
                                                              1e-9, 4);
        CHECK(four.gaps == scan.gaps);
    }

    SUBCASE("csv serialization round-trips the table") {
        testutil::TempDir tmp("scan");
        write_scan_csv(tmp.str("scan.csv"), scan);
        std::istringstream in(testutil::read_text_file(tmp.str("scan.csv")));
        std::string line;
        REQUIRE(std::getline(in, line));
        CHECK(line == "r,direction,gap");
        int rows = 0;
        while (std::getline(in, line)) {
            const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
            REQUIRE(c1 != std::string::npos);
            REQUIRE(c2 != std::string::npos);
            const double r = std::stod(line.substr(0, c1));
            const int di = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
            const double gap = std::stod(line.substr(c2 + 1));
            const int ri = static_cast<int>(rows % 3);
            CHECK(r == r_grid[static_cast<size_t>(ri)]);
            CHECK(di == rows / 3);
            CHECK(gap == scan.gaps(di, ri));  // format_double round-trips exactly
            ++rows;
        }
        CHECK(rows == 48);
    }

    SUBCASE("bad arguments are rejected") {
        SphereSampler wrong = sphere;
        wrong.dim = 3;
        CHECK_THROWS_AS(hardmax_convergence_scan(contexts, n, d, wrong, r_grid), ValidationError);
        CHECK_THROWS_AS(hardmax_convergence_scan(contexts, n, d, sphere, {1.0, 1.0}),
                        ValidationError);
        CHECK_THROWS_AS(hardmax_convergence_scan(contexts, n, d, sphere, {-1.0, 2.0}),
                        ValidationError);
        CHECK_THROWS_AS(hardmax_convergence_scan(contexts, n, d, sphere, {}), ValidationError);
        CHECK_THROWS_AS(hardmax_convergence_scan(Mat(0, n * d), n, d, sphere, r_grid),
                        ValidationError);
        CHECK_THROWS_AS(hardmax_convergence_scan(contexts, n + 1, d, sphere, r_grid),
                        ValidationError);
    }
}

TEST_CASE("sigmoid half-space limit") {
    SUBCASE("at r = 0 the estimate is exactly half the sample mean of f") {
        Rng rng = make_rng(314);
        const int N = 4097, d = 2;  // deliberately not a power of two
        Mat xs(N, d);
        for (int i = 0; i < N; ++i) xs.row(i) = gaussian_vec(rng, d).transpose();
        Vec theta(2);
        theta << 0.3, -1.2;
        const auto f = [](const Vec& x) { return std::cos(x[0]) + 0.5 * x[1]; };
        const auto rows = sigmoid_halfspace_check(f, xs, theta, {0.0});
        std::vector<double> fx(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) fx[static_cast<size_t>(i)] = f(xs.row(i).transpose());
        // scaling by the dyadic 1/2 commutes with every rounding step
        CHECK(rows[0].mc == 0.5 * (pairwise_sum(fx) / N));
    }

    SUBCASE("f == 1: exact half at r = 0, sign fraction within noise at large r") {
        Rng rng = make_rng(314);
        const int N = 20000, d = 2;
        Mat xs(N, d);
        for (int i = 0; i < N; ++i) xs.row(i) = gaussian_vec(rng, d).transpose();
        Vec theta(2);
        theta << 0.3, -1.2;
        const auto rows = sigmoid_halfspace_check([](const Vec&) { return 1.0; }, xs, theta,
                                                  {0.0, 1e3});
        CHECK(rows[0].mc == 0.5);
        int n_pos = 0, n_zero = 0;
        for (int i = 0; i < N; ++i) {
            const double s = theta.dot(xs.row(i).transpose());
            n_pos += s > 0.0;
            n_zero += s == 0.0;
        }
        CHECK(rows[0].limit == (n_pos + 0.5 * n_zero) / N);
        CHECK(std::abs(rows[1].gap) <= 3.0 * rows[1].stderr_gap);
        CHECK(rows[1].stderr_gap > 0.0);
    }

    SUBCASE("mirrored samples with an even f cancel the gap to rounding") {
        Rng rng = make_rng(99);
        const int N = 5000, d = 3;
        Mat xs(2 * N, d);
        for (int i = 0; i < N; ++i) {
            const Vec x = gaussian_vec(rng, d);
            xs.row(2 * i) = x.transpose();
            xs.row(2 * i + 1) = -x.transpose();
        }
        Vec theta(3);
        theta << 1.0, 0.5, -0.25;
        const auto rows = sigmoid_halfspace_check(
            [](const Vec& x) { return std::exp(-x.squaredNorm()); }, xs, theta,
            {0.5, 7.0, 300.0});
        for (const auto& row : rows) {
            CHECK(std::abs(row.gap) <= 1e-14);
            CHECK(row.mc == doctest::Approx(row.limit).epsilon(1e-12));
        }
    }

    SUBCASE("bad arguments are rejected") {
        CHECK_THROWS_AS(
            sigmoid_halfspace_check([](const Vec&) { return 1.0; }, Mat(0, 2), Vec::Ones(2), {1.0}),
            ValidationError);
        CHECK_THROWS_AS(
            sigmoid_halfspace_check([](const Vec&) { return 1.0; }, Mat::Zero(3, 2), Vec::Ones(3),
                                    {1.0}),
            ValidationError);
    }
}

TEST_CASE("sigmoid gradient limit") {
    SUBCASE("one dimension: the hyperplane integral vanishes identically") {
        const auto rows = sigmoid_gradient_limit_check([](const Vec&) { return 1.0; },
                                                       standard_gaussian_density(1), Vec::Ones(1),
                                                       {5.0, 20.0}, 100000, 2, 5);
        for (const auto& row : rows) {
            CHECK(row.limit[0] == 0.0);
            CHECK(row.gap <= 4.0 * row.stderr_gap);
        }
    }

    SUBCASE("three dimensions, f = tanh(x_2), theta = e_1") {
        Vec e1 = Vec::Zero(3);
        e1[0] = 1.0;
        const auto rows = sigmoid_gradient_limit_check([](const Vec& x) { return std::tanh(x[1]); },
                                                       standard_gaussian_density(3), e1,
                                                       {2.0, 5.0, 10.0, 20.0}, 200000, 100000, 5);
        REQUIRE(rows.size() == 4);
        for (size_t k = 1; k < rows.size(); ++k) CHECK(rows[k].gap < rows[k - 1].gap);
        CHECK(rows.back().gap <= 4.0 * rows.back().stderr_gap);
        // the limit concentrates on the e_2 component: phi(0) E[Z tanh Z] ~ 0.2416
        CHECK(std::abs(rows[0].limit[0]) <= 0.01);
        CHECK(rows[0].limit[1] > 0.225);
        CHECK(rows[0].limit[1] < 0.26);
        CHECK(std::abs(rows[0].limit[2]) <= 0.01);
    }

    SUBCASE("bad arguments are rejected") {
        DensitySpec slow = standard_gaussian_density(3);
        slow.decay_p = 2.0;  // not faster than the dimension
        const auto one = [](const Vec&) { return 1.0; };
        CHECK_THROWS_AS(sigmoid_gradient_limit_check(one, slow, Vec::Ones(3), {1.0}, 10, 10, 1),
                        ValidationError);
        DensitySpec broken = standard_gaussian_density(2);
        broken.pdf = nullptr;
        CHECK_THROWS_AS(sigmoid_gradient_limit_check(one, broken, Vec::Ones(2), {1.0}, 10, 10, 1),
                        ValidationError);
        CHECK_THROWS_AS(sigmoid_gradient_limit_check(one, standard_gaussian_density(2),
                                                     Vec::Ones(2), {1.0}, 1, 10, 1),
                        ValidationError);
        CHECK_THROWS_AS(sigmoid_gradient_limit_check(one, standard_gaussian_density(2),
                                                     Vec::Ones(3), {1.0}, 10, 10, 1),
                        ValidationError);
    }
}

TEST_CASE("attention score-gradient explorer") {
    const auto first_token = [](const Mat& X) { return Vec(X.row(0).transpose()); };

    SUBCASE("a single token leaves nothing to differentiate") {
        Mat A = Mat::Identity(2, 2);
        const auto rep = attention_gradient_limit_explore(first_token, A, 1, 2, {1.0, 8.0}, 100,
                                                          100, 3);
        for (const Mat& g : rep.finite_r) CHECK(g.norm() == 0.0);
        CHECK(rep.conjecture.norm() == 0.0);
        CHECK(rep.skipped_mass == 0.0);
        for (double g : rep.gap_to_conjecture) CHECK(g == 0.0);
        for (double c : rep.cauchy_gaps) CHECK(c == 0.0);
        CHECK(rep.is_conjecture);
    }

    SUBCASE("reports are deterministic in the seed") {
        Mat A(2, 2);
        A << 1.0, 0.25, -0.5, 0.75;
        const auto a = attention_gradient_limit_explore(first_token, A, 2, 2, {1.0, 4.0}, 500, 500,
                                                        7);
        const auto b = attention_gradient_limit_explore(first_token, A, 2, 2, {1.0, 4.0}, 500, 500,
                                                        7);
        CHECK(a.conjecture == b.conjecture);
        REQUIRE(a.finite_r.size() == b.finite_r.size());
        for (size_t k = 0; k < a.finite_r.size(); ++k) CHECK(a.finite_r[k] == b.finite_r[k]);
    }

    SUBCASE("finite-r gradients drift toward the tie-surface candidate") {
        Mat A(2, 2);
        A << 1.0, 0.25, -0.5, 0.75;
        const auto rep = attention_gradient_limit_explore(first_token, A, 2, 2,
                                                          {1.0, 4.0, 16.0, 64.0}, 40000, 40000, 11);
        REQUIRE(rep.gap_to_conjecture.size() == 4);
        // the gap shrinks sharply once r leaves the diffuse regime; at large r
        // the fixed-budget Monte Carlo noise dominates, so only the early part
        // of the grid is assertable
        CHECK(rep.gap_to_conjecture[1] < 0.5 * rep.gap_to_conjecture[0]);
        CHECK(rep.gap_to_conjecture[1] < 0.05);
        CHECK(rep.gap_to_conjecture[2] < 0.05);
        CHECK(rep.skipped_mass <= 0.01);
        CHECK(rep.conjecture_stderr > 0.0);
        CHECK(rep.conjecture.norm() > 0.06);
        CHECK(rep.conjecture.norm() < 0.25);

        const auto rep2 = attention_gradient_limit_explore(
            first_token, A, 2, 2, {1.0, 4.0, 16.0, 64.0}, 40000, 40000, 12);
        CHECK((rep.conjecture - rep2.conjecture).norm() <=
              2.0 * (rep.conjecture_stderr + rep2.conjecture_stderr));
    }

    SUBCASE("the serialized report is labeled as a conjecture") {
        Mat A(2, 2);
        A << 1.0, 0.25, -0.5, 0.75;
        const auto rep = attention_gradient_limit_explore(first_token, A, 2, 2, {1.0, 4.0}, 200,
                                                          200, 7);
        testutil::TempDir tmp("attn");
        write_attention_report_json(tmp.str("report.json"), rep);
        const std::string text = testutil::read_text_file(tmp.str("report.json"));
        CHECK(text.find("CONJECTURE") != std::string::npos);
        CHECK(text.find("numerical evidence only") != std::string::npos);
        const auto j = nlohmann::json::parse(text);
        CHECK(j.contains("status"));
        CHECK(j.contains("conjecture"));
        CHECK(j.contains("cauchy_gaps"));
        CHECK(j["r_grid"].size() == 2);
        CHECK(j["conjecture"].size() == 2);
        CHECK(j["conjecture"][0].size() == 2);
        CHECK(j["finite_r"].size() == 2);
        CHECK(j["skipped_mass"].get<double>() == rep.skipped_mass);
    }

    SUBCASE("bad arguments are rejected") {
        Mat A = Mat::Identity(2, 2);
        CHECK_THROWS_AS(
            attention_gradient_limit_explore(first_token, Mat::Identity(3, 3), 2, 2, {1.0}, 10, 10, 1),
            ValidationError);
        CHECK_THROWS_AS(attention_gradient_limit_explore(first_token, A, 2, 2, {}, 10, 10, 1),
                        ValidationError);
        CHECK_THROWS_AS(attention_gradient_limit_explore(first_token, A, 2, 2, {1.0}, 1, 10, 1),
                        ValidationError);
        CHECK_THROWS_AS(attention_gradient_limit_explore(first_token, A, 0, 2, {1.0}, 10, 10, 1),
                        ValidationError);
    }
}
