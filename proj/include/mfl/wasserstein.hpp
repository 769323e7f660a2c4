#pragma once

// 2-Wasserstein distances between equally sized, uniformly weighted
// ensembles: an exact O(m^3) assignment solver for m up to a fixed cap, and
// a sliced Monte-Carlo surrogate for larger m.

#include "mfl/ensemble.hpp"

namespace mfl {

// Largest ensemble size accepted by the exact solver.
inline constexpr int kW2ExactCap = 512;

// Minimal-cost perfect matching of a square cost matrix via shortest
// augmenting paths with dual potentials. Returns the total cost;
// row_to_col[i] receives the column matched to row i. Exposed for testing.
double solve_assignment(const Mat& cost, std::vector<int>& row_to_col);

// Exact W2: sqrt of the optimal mean squared matching cost. Requires equal
// particle counts and dimensions and m <= kW2ExactCap.
double w2_exact(const Ensemble& a, const Ensemble& b);

// Exact W2 by exhaustive permutation enumeration; only for m <= 8. Slow by
// design — this is the independent cross-check for the assignment solver.
double w2_bruteforce(const Ensemble& a, const Ensemble& b);

// Sliced W2: average over `n_projections` random unit directions (seeded,
// normalized Gaussians) of the exact one-dimensional W2 between projected
// samples (sorted matching). Coincides with w2_exact in dimension 1.
double w2_sliced(const Ensemble& a, const Ensemble& b, int n_projections, std::uint64_t seed);

}  // namespace mfl
