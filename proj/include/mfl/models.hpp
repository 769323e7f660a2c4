#pragma once

// Model families of the factored form Phi(w, theta)(x) = phi(theta, x) * w:
//   - SigmoidNet: scalar gate sigma(<theta, x>) times an output vector w,
//     with sigmoid / GELU / SiLU gates;
//   - AttentionHead: a single softmax attention head. theta reshapes to the
//     d x d score matrix A, w to the k x d value matrix V, and the model maps
//     a flattened n x d context X to V * psi(A)(X) with
//     psi(A)(X) = X^T softmax(X A x_n), x_n the last (query) token.
// Alongside the models: softmax differentials with their 1-norm bounds, the
// hardmax (argmax-averaging) limit of psi, and the score-gradient scale
// factor alpha used by the coarea surface integrals.

#include "mfl/common.hpp"
#include "mfl/dataset.hpp"
#include "mfl/ensemble.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mfl {

// ---------------------------------------------------------------------------
// Softmax toolbox

Vec softmax(const Vec& z);
// Directional derivative d softmax(z) . h = s(z) .* h - <s(z), h> s(z).
Vec dsoftmax(const Vec& z, const Vec& h);
// Second directional derivative d^2 softmax(z) . (h, h).
Vec d2softmax(const Vec& z, const Vec& h);
// 0-based indices i with z_i >= max(z) - tie_tol.
std::vector<int> argmax_set(const Vec& z, double tie_tol = 1e-9);

// ---------------------------------------------------------------------------
// Scalar gates

enum class Activation { Sigmoid, Gelu, Silu };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);
double act_value(Activation a, double s);
double act_deriv(Activation a, double s);

// ---------------------------------------------------------------------------
// Row-major reshape helpers (theta <-> A, w <-> V, x <-> X)

Mat unflatten(const Vec& v, int rows, int cols);
Vec flatten(const Mat& m);

// ---------------------------------------------------------------------------
// ModelSpec

class ModelSpec {
  public:
    virtual ~ModelSpec() = default;

    virtual int d_w() const = 0;
    virtual int d_theta() const = 0;
    virtual int d_in() const = 0;
    virtual int d_out() const = 0;
    virtual std::string name() const = 0;

    // Phi(w, theta)(x), a d_out vector.
    virtual Vec phi_apply(const Vec& theta, const Vec& w, const Vec& x) const = 0;
    // The d_out x d_w matrix of the linear map w -> phi(theta, x) w.
    virtual Mat dphi_w(const Vec& theta, const Vec& x) const = 0;
    // Gradient in theta of <cotangent, Phi(w, theta)(x)>.
    virtual Vec grad_theta(const Vec& theta, const Vec& w, const Vec& x, const Vec& cotangent) const = 0;

    // (1/N) sum_s phi(theta, x_s)^* r_s for a residual matrix R (N x d_out).
    virtual Vec phi_adjoint(const Vec& theta, const Mat& X, const Mat& R) const;
    // (1/N) sum_s grad_theta(theta, w, x_s, r_s).
    virtual Vec grad_theta_mean(const Vec& theta, const Vec& w, const Mat& X, const Mat& R) const;

    // Batched ensemble mean prediction. W is d_w x m, Th is d_theta x m,
    // X is N x d_in; row s of the result is (1/m) sum_i Phi(w_i, theta_i)(x_s).
    virtual Mat predict_mean(const Mat& W, const Mat& Th, const Mat& X, int n_threads) const;

    // Batched per-particle updates: column i of VW receives
    // -phi_adjoint(theta_i, X, R), column i of VTh receives
    // -grad_theta_mean(theta_i, w_i, X, R).
    virtual void velocities(const Mat& W, const Mat& Th, const Mat& X, const Mat& R,
                            Mat& VW, Mat& VTh, int n_threads) const;

    void check_dataset(const Dataset& data) const;
};

class SigmoidNet final : public ModelSpec {
  public:
    SigmoidNet(int d_in, int d_out, Activation act = Activation::Sigmoid);

    int d_w() const override { return d_out_; }
    int d_theta() const override { return d_in_; }
    int d_in() const override { return d_in_; }
    int d_out() const override { return d_out_; }
    std::string name() const override;
    Activation activation() const { return act_; }

    Vec phi_apply(const Vec& theta, const Vec& w, const Vec& x) const override;
    Mat dphi_w(const Vec& theta, const Vec& x) const override;
    Vec grad_theta(const Vec& theta, const Vec& w, const Vec& x, const Vec& cotangent) const override;

    Mat predict_mean(const Mat& W, const Mat& Th, const Mat& X, int n_threads) const override;
    void velocities(const Mat& W, const Mat& Th, const Mat& X, const Mat& R,
                    Mat& VW, Mat& VTh, int n_threads) const override;

  private:
    int d_in_;
    int d_out_;
    Activation act_;
};

class AttentionHead final : public ModelSpec {
  public:
    AttentionHead(int n_tokens, int token_dim, int value_dim = 0);  // value_dim 0 -> token_dim

    int d_w() const override { return k_ * d_; }
    int d_theta() const override { return d_ * d_; }
    int d_in() const override { return n_ * d_; }
    int d_out() const override { return k_; }
    std::string name() const override;
    int n_tokens() const { return n_; }
    int token_dim() const { return d_; }
    int value_dim() const { return k_; }

    Vec phi_apply(const Vec& theta, const Vec& w, const Vec& x) const override;
    Mat dphi_w(const Vec& theta, const Vec& x) const override;
    Vec grad_theta(const Vec& theta, const Vec& w, const Vec& x, const Vec& cotangent) const override;

  private:
    int n_, d_, k_;
};

// ---------------------------------------------------------------------------
// Attention geometry (free functions on unpacked shapes)

// psi(A)(X) = X^T softmax(X A x_n); X is n x d with the query as last row.
Vec psi_attention(const Mat& A, const Mat& X);
// Directional derivative [d psi(A) . B](X) = X^T (d softmax(X A x_n) . (X B x_n)).
Vec dpsi_attention(const Mat& A, const Mat& B, const Mat& X);
// Uniform average of the tokens achieving the maximal score.
Vec psi_hardmax(const Mat& A, const Mat& X, double tie_tol = 1e-9);
// |grad_X <A x_n, x_i - x_j>| via the closed-form branches; i, j are 0-based
// token indices and the query is index n-1.
double alpha_coarea(const Mat& A, const Mat& X, int i, int j);

// ---------------------------------------------------------------------------
// Ensemble-level helpers

// Pack particles into column matrices (W: d_w x m, Th: d_theta x m).
void pack_ensemble(const Ensemble& ens, Mat& W, Mat& Th);
Ensemble unpack_ensemble(const Mat& W, const Mat& Th);

// N x d_out matrix whose row s is (1/m) sum_i Phi(w_i, theta_i)(x_s).
Mat predictor_mean(const Ensemble& ens, const ModelSpec& model, const Dataset& data,
                   int n_threads = 1);

// Labels produced by a mean-field teacher: predictor_mean plus optional
// Gaussian observation noise.
Mat teacher_labels(const Ensemble& teacher, const ModelSpec& model, const Mat& X,
                   double noise_std = 0.0, std::uint64_t noise_seed = 0);

// Synthetic regression dataset: Gaussian features (componentwise N(0,
// feature_scale^2); flattened Gaussian contexts for attention models) labeled
// by a freshly sampled teacher ensemble of `teacher_m` particles with
// independent Gaussian w (w_scale) and theta (theta_scale) blocks.
Dataset make_teacher_dataset(const ModelSpec& model, int N, int teacher_m, std::uint64_t seed,
                             double feature_scale = 1.0, double w_scale = 2.0,
                             double theta_scale = 1.0, double noise_std = 0.0);

std::shared_ptr<ModelSpec> make_sigmoid_net(int d_in, int d_out, Activation act = Activation::Sigmoid);
std::shared_ptr<ModelSpec> make_attention_head(int n_tokens, int token_dim, int value_dim = 0);

}  // namespace mfl
