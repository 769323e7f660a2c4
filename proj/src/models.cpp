#include "mfl/models.hpp"

#include <cmath>

namespace mfl {

// ---------------------------------------------------------------------------
// Softmax toolbox

Vec softmax(const Vec& z) {
    if (z.size() == 0) throw ValidationError("softmax: empty input");
    if (!z.allFinite()) throw ValidationError("softmax: non-finite input");
    const double zmax = z.maxCoeff();
    Vec e = (z.array() - zmax).exp();
    return e / e.sum();
}

Vec dsoftmax(const Vec& z, const Vec& h) {
    if (z.size() != h.size()) throw ValidationError("dsoftmax: size mismatch");
    const Vec s = softmax(z);
    const double sh = s.dot(h);
    return s.array() * (h.array() - sh);
}

Vec d2softmax(const Vec& z, const Vec& h) {
    if (z.size() != h.size()) throw ValidationError("d2softmax: size mismatch");
    const Vec s = softmax(z);
    const double sh = s.dot(h);
    const double shh = s.dot(Vec(h.array().square()));
    const double var = shh - sh * sh;
    return s.array() * ((h.array() - sh).square() - var);
}

std::vector<int> argmax_set(const Vec& z, double tie_tol) {
    if (z.size() == 0) throw ValidationError("argmax_set: empty input");
    if (!z.allFinite()) throw ValidationError("argmax_set: non-finite input");
    if (tie_tol < 0.0) throw ValidationError("argmax_set: negative tie_tol");
    const double zmax = z.maxCoeff();
    std::vector<int> out;
    for (int i = 0; i < z.size(); ++i)
        if (z[i] >= zmax - tie_tol) out.push_back(i);
    return out;
}

// ---------------------------------------------------------------------------
// Scalar gates

Activation activation_from_string(const std::string& name) {
    if (name == "sigmoid") return Activation::Sigmoid;
    if (name == "gelu") return Activation::Gelu;
    if (name == "silu") return Activation::Silu;
    throw ValidationError("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::Sigmoid: return "sigmoid";
        case Activation::Gelu: return "gelu";
        case Activation::Silu: return "silu";
    }
    throw ValidationError("unknown activation enum");
}

static double logistic(double s) {
    if (s >= 0.0) {
        const double e = std::exp(-s);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(s);
    return e / (1.0 + e);
}

static double gauss_cdf(double s) { return 0.5 * std::erfc(-s / std::sqrt(2.0)); }
static double gauss_pdf(double s) { return std::exp(-0.5 * s * s) / std::sqrt(2.0 * M_PI); }

double act_value(Activation a, double s) {
    switch (a) {
        case Activation::Sigmoid: return logistic(s);
        case Activation::Gelu: return s * gauss_cdf(s);
        case Activation::Silu: return s * logistic(s);
    }
    throw ValidationError("unknown activation enum");
}

double act_deriv(Activation a, double s) {
    switch (a) {
        case Activation::Sigmoid: {
            const double v = logistic(s);
            return v * (1.0 - v);
        }
        case Activation::Gelu: return gauss_cdf(s) + s * gauss_pdf(s);
        case Activation::Silu: {
            const double v = logistic(s);
            return v * (1.0 + s * (1.0 - v));
        }
    }
    throw ValidationError("unknown activation enum");
}

// ---------------------------------------------------------------------------
// Reshape helpers (row-major, so flat index = row * cols + col)

Mat unflatten(const Vec& v, int rows, int cols) {
    if (v.size() != static_cast<Eigen::Index>(rows) * cols)
        throw ValidationError("unflatten: size mismatch");
    Mat out(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out(i, j) = v[i * cols + j];
    return out;
}

Vec flatten(const Mat& m) {
    Vec out(m.rows() * m.cols());
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) out[i * m.cols() + j] = m(i, j);
    return out;
}

// ---------------------------------------------------------------------------
// ModelSpec defaults

void ModelSpec::check_dataset(const Dataset& data) const {
    data.validate();
    if (data.d_in() != d_in())
        throw ValidationError(name() + ": dataset feature width " + std::to_string(data.d_in()) +
                              " != expected " + std::to_string(d_in()));
    if (data.d_out() != d_out())
        throw ValidationError(name() + ": dataset label width " + std::to_string(data.d_out()) +
                              " != expected " + std::to_string(d_out()));
}

Vec ModelSpec::phi_adjoint(const Vec& theta, const Mat& X, const Mat& R) const {
    if (X.rows() != R.rows()) throw ValidationError("phi_adjoint: sample count mismatch");
    const int N = static_cast<int>(X.rows());
    Vec acc = Vec::Zero(d_w());
    for (int s = 0; s < N; ++s) {
        const Mat M = dphi_w(theta, X.row(s).transpose());
        acc.noalias() += M.transpose() * R.row(s).transpose();
    }
    return acc / static_cast<double>(N);
}

Vec ModelSpec::grad_theta_mean(const Vec& theta, const Vec& w, const Mat& X, const Mat& R) const {
    if (X.rows() != R.rows()) throw ValidationError("grad_theta_mean: sample count mismatch");
    const int N = static_cast<int>(X.rows());
    Vec acc = Vec::Zero(d_theta());
    for (int s = 0; s < N; ++s)
        acc += grad_theta(theta, w, X.row(s).transpose(), R.row(s).transpose());
    return acc / static_cast<double>(N);
}

Mat ModelSpec::predict_mean(const Mat& W, const Mat& Th, const Mat& X, int n_threads) const {
    const int m = static_cast<int>(W.cols());
    const int N = static_cast<int>(X.rows());
    if (Th.cols() != m) throw ValidationError("predict_mean: particle count mismatch");
    Mat out(N, d_out());
    parallel_for(static_cast<size_t>(N), n_threads, [&](size_t s) {
        const Vec x = X.row(static_cast<int>(s)).transpose();
        Vec acc = Vec::Zero(d_out());
        for (int i = 0; i < m; ++i) acc += phi_apply(Th.col(i), W.col(i), x);
        out.row(static_cast<int>(s)) = (acc / static_cast<double>(m)).transpose();
    });
    return out;
}

void ModelSpec::velocities(const Mat& W, const Mat& Th, const Mat& X, const Mat& R,
                           Mat& VW, Mat& VTh, int n_threads) const {
    const int m = static_cast<int>(W.cols());
    VW.resize(d_w(), m);
    VTh.resize(d_theta(), m);
    parallel_for(static_cast<size_t>(m), n_threads, [&](size_t i) {
        const int ii = static_cast<int>(i);
        VW.col(ii) = -phi_adjoint(Th.col(ii), X, R);
        VTh.col(ii) = -grad_theta_mean(Th.col(ii), W.col(ii), X, R);
    });
}

// ---------------------------------------------------------------------------
// SigmoidNet

SigmoidNet::SigmoidNet(int d_in, int d_out, Activation act) : d_in_(d_in), d_out_(d_out), act_(act) {
    if (d_in <= 0 || d_out <= 0) throw ValidationError("SigmoidNet: non-positive dimensions");
}

std::string SigmoidNet::name() const { return "sigmoid-net(" + to_string(act_) + ")"; }

Vec SigmoidNet::phi_apply(const Vec& theta, const Vec& w, const Vec& x) const {
    if (theta.size() != d_in_ || w.size() != d_out_ || x.size() != d_in_)
        throw ValidationError("SigmoidNet::phi_apply: dimension mismatch");
    return act_value(act_, theta.dot(x)) * w;
}

Mat SigmoidNet::dphi_w(const Vec& theta, const Vec& x) const {
    if (theta.size() != d_in_ || x.size() != d_in_)
        throw ValidationError("SigmoidNet::dphi_w: dimension mismatch");
    return act_value(act_, theta.dot(x)) * Mat::Identity(d_out_, d_out_);
}

Vec SigmoidNet::grad_theta(const Vec& theta, const Vec& w, const Vec& x, const Vec& cotangent) const {
    if (theta.size() != d_in_ || w.size() != d_out_ || x.size() != d_in_ || cotangent.size() != d_out_)
        throw ValidationError("SigmoidNet::grad_theta: dimension mismatch");
    return act_deriv(act_, theta.dot(x)) * cotangent.dot(w) * x;
}

Mat SigmoidNet::predict_mean(const Mat& W, const Mat& Th, const Mat& X, int /*n_threads*/) const {
    const int m = static_cast<int>(W.cols());
    // Gate matrix G = act(X * Th) is N x m; the mean prediction is G * W^T / m.
    Mat G = X * Th;
    G = G.unaryExpr([this](double s) { return act_value(act_, s); });
    return (G * W.transpose()) / static_cast<double>(m);
}

void SigmoidNet::velocities(const Mat& W, const Mat& Th, const Mat& X, const Mat& R,
                            Mat& VW, Mat& VTh, int /*n_threads*/) const {
    const int N = static_cast<int>(X.rows());
    Mat P = X * Th;  // N x m pre-activations
    Mat G = P.unaryExpr([this](double s) { return act_value(act_, s); });
    Mat Gp = P.unaryExpr([this](double s) { return act_deriv(act_, s); });
    // w-velocity: -(1/N) sum_s gate_si r_s  ->  -(R^T G)/N, columns per particle.
    VW = -(R.transpose() * G) / static_cast<double>(N);
    // theta-velocity: -(1/N) sum_s gate'_si <r_s, w_i> x_s.
    Mat C = R * W;  // N x m of <r_s, w_i>
    VTh = -(X.transpose() * (Gp.array() * C.array()).matrix()) / static_cast<double>(N);
}

// ---------------------------------------------------------------------------
// AttentionHead

AttentionHead::AttentionHead(int n_tokens, int token_dim, int value_dim)
    : n_(n_tokens), d_(token_dim), k_(value_dim > 0 ? value_dim : token_dim) {
    if (n_ <= 0 || d_ <= 0) throw ValidationError("AttentionHead: non-positive dimensions");
}

std::string AttentionHead::name() const { return "attention-head"; }

Vec AttentionHead::phi_apply(const Vec& theta, const Vec& w, const Vec& x) const {
    if (theta.size() != d_theta() || w.size() != d_w() || x.size() != d_in())
        throw ValidationError("AttentionHead::phi_apply: dimension mismatch");
    const Mat A = unflatten(theta, d_, d_);
    const Mat V = unflatten(w, k_, d_);
    const Mat X = unflatten(x, n_, d_);
    return V * psi_attention(A, X);
}

Mat AttentionHead::dphi_w(const Vec& theta, const Vec& x) const {
    if (theta.size() != d_theta() || x.size() != d_in())
        throw ValidationError("AttentionHead::dphi_w: dimension mismatch");
    const Mat A = unflatten(theta, d_, d_);
    const Mat X = unflatten(x, n_, d_);
    const Vec psi = psi_attention(A, X);
    // Row a of the map picks out <psi, w-block a>; as a k x (k*d) matrix it is
    // block-diagonal with psi^T repeated.
    Mat M = Mat::Zero(k_, k_ * d_);
    for (int a = 0; a < k_; ++a) M.block(a, a * d_, 1, d_) = psi.transpose();
    return M;
}

Vec AttentionHead::grad_theta(const Vec& theta, const Vec& w, const Vec& x, const Vec& cotangent) const {
    if (theta.size() != d_theta() || w.size() != d_w() || x.size() != d_in() || cotangent.size() != k_)
        throw ValidationError("AttentionHead::grad_theta: dimension mismatch");
    const Mat A = unflatten(theta, d_, d_);
    const Mat V = unflatten(w, k_, d_);
    const Mat X = unflatten(x, n_, d_);
    const Vec xq = X.row(n_ - 1).transpose();
    const Vec z = X * (A * xq);
    const Vec s = softmax(z);
    const Vec u = V.transpose() * cotangent;       // direction in token space
    const Vec h = X * u;                           // scores of u against tokens
    const Vec t = s.array() * (h.array() - s.dot(h));  // dsoftmax adjoint on h
    const Mat G = (X.transpose() * t) * xq.transpose();
    return flatten(G);
}

// ---------------------------------------------------------------------------
// Attention geometry

Vec psi_attention(const Mat& A, const Mat& X) {
    if (A.rows() != A.cols() || A.rows() != X.cols())
        throw ValidationError("psi_attention: shape mismatch");
    const Vec xq = X.row(X.rows() - 1).transpose();
    const Vec z = X * (A * xq);
    return X.transpose() * softmax(z);
}

Vec dpsi_attention(const Mat& A, const Mat& B, const Mat& X) {
    if (A.rows() != A.cols() || B.rows() != B.cols() || A.rows() != B.rows() || A.rows() != X.cols())
        throw ValidationError("dpsi_attention: shape mismatch");
    const Vec xq = X.row(X.rows() - 1).transpose();
    const Vec z = X * (A * xq);
    const Vec h = X * (B * xq);
    return X.transpose() * dsoftmax(z, h);
}

Vec psi_hardmax(const Mat& A, const Mat& X, double tie_tol) {
    if (A.rows() != A.cols() || A.rows() != X.cols())
        throw ValidationError("psi_hardmax: shape mismatch");
    const Vec xq = X.row(X.rows() - 1).transpose();
    const Vec z = X * (A * xq);
    const std::vector<int> top = argmax_set(z, tie_tol);
    Vec acc = Vec::Zero(X.cols());
    for (int i : top) acc += X.row(i).transpose();
    return acc / static_cast<double>(top.size());
}

double alpha_coarea(const Mat& A, const Mat& X, int i, int j) {
    const int n = static_cast<int>(X.rows());
    if (i == j) throw ValidationError("alpha_coarea: i == j");
    if (i < 0 || j < 0 || i >= n || j >= n) throw ValidationError("alpha_coarea: index out of range");
    const int q = n - 1;  // query token index
    const Vec xn = X.row(q).transpose();
    const Vec Axn = A * xn;
    if (i != q && j != q) {
        const Vec dif = (X.row(i) - X.row(j)).transpose();
        return std::sqrt(2.0 * Axn.squaredNorm() + (A.transpose() * dif).squaredNorm());
    }
    if (i == q) {
        const Vec dif = (X.row(q) - X.row(j)).transpose();
        return std::sqrt(Axn.squaredNorm() + (A.transpose() * dif + Axn).squaredNorm());
    }
    // j == q
    const Vec dif = (X.row(i) - X.row(q)).transpose();
    return std::sqrt(Axn.squaredNorm() + (A.transpose() * dif - Axn).squaredNorm());
}

// ---------------------------------------------------------------------------
// Ensemble-level helpers

void pack_ensemble(const Ensemble& ens, Mat& W, Mat& Th) {
    const int m = ens.m();
    W.resize(ens.d_w, m);
    Th.resize(ens.d_theta, m);
    for (int i = 0; i < m; ++i) {
        W.col(i) = ens.particles[i].w;
        Th.col(i) = ens.particles[i].theta;
    }
}

Ensemble unpack_ensemble(const Mat& W, const Mat& Th) {
    if (W.cols() != Th.cols()) throw ValidationError("unpack_ensemble: particle count mismatch");
    Ensemble ens;
    ens.d_w = static_cast<int>(W.rows());
    ens.d_theta = static_cast<int>(Th.rows());
    ens.particles.resize(W.cols());
    for (int i = 0; i < W.cols(); ++i) {
        ens.particles[i].w = W.col(i);
        ens.particles[i].theta = Th.col(i);
    }
    return ens;
}

Mat predictor_mean(const Ensemble& ens, const ModelSpec& model, const Dataset& data, int n_threads) {
    model.check_dataset(data);
    if (ens.d_w != model.d_w() || ens.d_theta != model.d_theta())
        throw ValidationError("predictor_mean: ensemble/model dimension mismatch");
    Mat W, Th;
    pack_ensemble(ens, W, Th);
    return model.predict_mean(W, Th, data.X, n_threads);
}

Mat teacher_labels(const Ensemble& teacher, const ModelSpec& model, const Mat& X,
                   double noise_std, std::uint64_t noise_seed) {
    Mat W, Th;
    pack_ensemble(teacher, W, Th);
    Mat Y = model.predict_mean(W, Th, X, 1);
    if (noise_std > 0.0) {
        Rng rng = make_rng(noise_seed, 0x6e6f697365ULL);
        for (int s = 0; s < Y.rows(); ++s)
            for (int j = 0; j < Y.cols(); ++j) Y(s, j) += noise_std * gaussian(rng);
    }
    return Y;
}

Dataset make_teacher_dataset(const ModelSpec& model, int N, int teacher_m, std::uint64_t seed,
                             double feature_scale, double w_scale, double theta_scale,
                             double noise_std) {
    if (N < 1 || teacher_m < 1) throw ValidationError("make_teacher_dataset: N and teacher_m must be positive");
    Dataset data;
    if (const auto* att = dynamic_cast<const AttentionHead*>(&model)) {
        data.n_tokens = att->n_tokens();
        data.X = sample_gaussian_contexts(N, att->n_tokens(), att->token_dim(),
                                          mix_seed(seed, 0x66656174ULL), feature_scale);
    } else {
        data.X = sample_gaussian_matrix(N, model.d_in(), mix_seed(seed, 0x66656174ULL), feature_scale);
    }

    InitSpec teacher_spec;
    teacher_spec.kind = InitSpec::Kind::Product;
    teacher_spec.seed = mix_seed(seed, 0x74656163ULL);
    teacher_spec.w_block.kind = InitSpec::Kind::Gaussian;
    teacher_spec.w_block.location = Vec::Zero(model.d_w());
    teacher_spec.w_block.scale = w_scale;
    teacher_spec.theta_block.kind = InitSpec::Kind::Gaussian;
    teacher_spec.theta_block.location = Vec::Zero(model.d_theta());
    teacher_spec.theta_block.scale = theta_scale;
    const Ensemble teacher = sample_ensemble(teacher_spec, teacher_m, model.d_w(), model.d_theta());

    data.Y = teacher_labels(teacher, model, data.X, noise_std, mix_seed(seed, 0x6c61626cULL));
    data.validate();
    return data;
}

std::shared_ptr<ModelSpec> make_sigmoid_net(int d_in, int d_out, Activation act) {
    return std::make_shared<SigmoidNet>(d_in, d_out, act);
}

std::shared_ptr<ModelSpec> make_attention_head(int n_tokens, int token_dim, int value_dim) {
    return std::make_shared<AttentionHead>(n_tokens, token_dim, value_dim);
}

}  // namespace mfl
