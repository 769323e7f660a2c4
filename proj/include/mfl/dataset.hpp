#pragma once

// Empirical datasets: feature/label pairs with CSV persistence (widths
// declared in a JSON sidecar) and seeded feature samplers. For attention
// models a row of X is a flattened n_tokens x token_dim context, stored
// row-major with the last token acting as the query.

#include "mfl/common.hpp"

#include <string>

namespace mfl {

struct Dataset {
    Mat X;           // N x d_in, one sample per row
    Mat Y;           // N x d_out
    int n_tokens = 0;  // 0 when samples are plain vectors

    int N() const { return static_cast<int>(X.rows()); }
    int d_in() const { return static_cast<int>(X.cols()); }
    int d_out() const { return static_cast<int>(Y.cols()); }

    void validate() const;
};

// data file: CSV rows "x_0,...,x_{d_in-1},y_0,...,y_{d_out-1}" (no header);
// sidecar file: JSON {"n": N, "d_in": ..., "d_out": ..., "n_tokens": ...}.
void write_dataset(const Dataset& data, const std::string& csv_path, const std::string& sidecar_path);
Dataset read_dataset(const std::string& csv_path, const std::string& sidecar_path);

// rows x cols matrix of i.i.d. N(0, scale^2) entries.
Mat sample_gaussian_matrix(int rows, int cols, std::uint64_t seed, double scale = 1.0);

// Gaussian mixture features: component `c` has weight weights[c], mean row
// means.row(c) and isotropic stddev scales[c].
Mat sample_mixture_features(int N, const Vec& weights, const Mat& means, const Vec& scales,
                            std::uint64_t seed);

// N flattened contexts of n_tokens i.i.d. standard Gaussian tokens in R^d.
Mat sample_gaussian_contexts(int N, int n_tokens, int d, std::uint64_t seed, double scale = 1.0);

// N one-hot label rows over k classes, classes drawn uniformly.
Mat sample_onehot_labels(int N, int k, std::uint64_t seed);

}  // namespace mfl
