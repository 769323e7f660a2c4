#include "mfl/dataset.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mfl {

void Dataset::validate() const {
    if (X.rows() == 0 || X.cols() == 0) throw ValidationError("dataset: empty feature matrix");
    if (Y.rows() != X.rows()) throw ValidationError("dataset: feature/label row count mismatch");
    if (Y.cols() == 0) throw ValidationError("dataset: empty label matrix");
    if (!X.allFinite() || !Y.allFinite()) throw ValidationError("dataset: non-finite entry");
    if (n_tokens < 0) throw ValidationError("dataset: negative n_tokens");
    if (n_tokens > 0 && X.cols() % n_tokens != 0)
        throw ValidationError("dataset: d_in not divisible by n_tokens");
}

void write_dataset(const Dataset& data, const std::string& csv_path, const std::string& sidecar_path) {
    data.validate();
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw ValidationError("dataset: cannot open " + csv_path);
    for (int s = 0; s < data.N(); ++s) {
        for (int j = 0; j < data.d_in(); ++j) {
            if (j) out << ',';
            out << format_double(data.X(s, j));
        }
        for (int j = 0; j < data.d_out(); ++j) out << ',' << format_double(data.Y(s, j));
        out << '\n';
    }
    if (!out) throw ValidationError("dataset: write failed for " + csv_path);

    nlohmann::json side{{"n", data.N()},
                        {"d_in", data.d_in()},
                        {"d_out", data.d_out()},
                        {"n_tokens", data.n_tokens}};
    std::ofstream sout(sidecar_path, std::ios::binary);
    if (!sout) throw ValidationError("dataset: cannot open " + sidecar_path);
    sout << side.dump(2) << '\n';
    if (!sout) throw ValidationError("dataset: write failed for " + sidecar_path);
}

Dataset read_dataset(const std::string& csv_path, const std::string& sidecar_path) {
    std::ifstream sin(sidecar_path);
    if (!sin) throw ValidationError("dataset: cannot open " + sidecar_path);
    nlohmann::json side;
    try {
        sin >> side;
    } catch (const std::exception& e) {
        throw ValidationError(std::string("dataset: bad sidecar JSON: ") + e.what());
    }
    const int n = side.at("n").get<int>();
    const int d_in = side.at("d_in").get<int>();
    const int d_out = side.at("d_out").get<int>();
    const int n_tokens = side.value("n_tokens", 0);
    if (n <= 0 || d_in <= 0 || d_out <= 0)
        throw ValidationError("dataset: sidecar declares non-positive dimensions");

    Dataset data;
    data.X.resize(n, d_in);
    data.Y.resize(n, d_out);
    data.n_tokens = n_tokens;

    std::ifstream in(csv_path);
    if (!in) throw ValidationError("dataset: cannot open " + csv_path);
    std::string line;
    int row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (row >= n) throw ValidationError("dataset: more rows than sidecar declares");
        std::stringstream ss(line);
        std::string cell;
        int col = 0;
        while (std::getline(ss, cell, ',')) {
            if (col >= d_in + d_out) throw ValidationError("dataset: too many columns in row");
            double v = 0.0;
            try {
                v = std::stod(cell);
            } catch (const std::exception&) {
                throw ValidationError("dataset: bad numeric cell '" + cell + "'");
            }
            if (col < d_in)
                data.X(row, col) = v;
            else
                data.Y(row, col - d_in) = v;
            ++col;
        }
        if (col != d_in + d_out) throw ValidationError("dataset: short row");
        ++row;
    }
    if (row != n) throw ValidationError("dataset: fewer rows than sidecar declares");
    data.validate();
    return data;
}

Mat sample_gaussian_matrix(int rows, int cols, std::uint64_t seed, double scale) {
    if (rows <= 0 || cols <= 0) throw ValidationError("sample_gaussian_matrix: non-positive shape");
    Rng rng = make_rng(seed, 0x6d61747278ULL);
    Mat out(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out(i, j) = scale * gaussian(rng);
    return out;
}

Mat sample_mixture_features(int N, const Vec& weights, const Mat& means, const Vec& scales,
                            std::uint64_t seed) {
    const int k = static_cast<int>(weights.size());
    if (k == 0 || means.rows() != k || scales.size() != k)
        throw ValidationError("sample_mixture_features: inconsistent component count");
    if (weights.minCoeff() < 0.0 || weights.sum() <= 0.0)
        throw ValidationError("sample_mixture_features: bad weights");
    const int d = static_cast<int>(means.cols());
    Rng rng = make_rng(seed, 0x6d697874ULL);
    std::discrete_distribution<int> pick(weights.data(), weights.data() + k);
    Mat out(N, d);
    for (int s = 0; s < N; ++s) {
        const int c = pick(rng);
        for (int j = 0; j < d; ++j) out(s, j) = means(c, j) + scales[c] * gaussian(rng);
    }
    return out;
}

Mat sample_gaussian_contexts(int N, int n_tokens, int d, std::uint64_t seed, double scale) {
    if (n_tokens <= 0 || d <= 0) throw ValidationError("sample_gaussian_contexts: non-positive shape");
    return sample_gaussian_matrix(N, n_tokens * d, seed, scale);
}

Mat sample_onehot_labels(int N, int k, std::uint64_t seed) {
    if (N <= 0 || k <= 0) throw ValidationError("sample_onehot_labels: non-positive shape");
    Rng rng = make_rng(seed, 0x6f6e65686f74ULL);
    std::uniform_int_distribution<int> pick(0, k - 1);
    Mat out = Mat::Zero(N, k);
    for (int s = 0; s < N; ++s) out(s, pick(rng)) = 1.0;
    return out;
}

}  // namespace mfl
