#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "realcompo/attention.hpp"
#include "realcompo/denoisers.hpp"
#include "realcompo/mixture.hpp"

namespace realcompo {

// Weights of the micro cross-attention denoiser:
//   phi0_i = [z_i, x_i, y_i]            (C + 2, coordinates in [-1, 1])
//   phi_i  = phi0_i W_lift + b_lift      (d_f)
//   A      = softmax(phi W_Q (E W_K)^T / sqrt(d_k) + bias)
//   o_i    = sum_j A_ij (E W_V)_j        (d_v)
//   eps_i  = [o_i, phi0_i] W_out + b_out (C)
struct MicroParams {
    int channels = 3;
    Matrix w_lift;               // (C+2) x d_f
    std::vector<double> b_lift;  // d_f
    AttnProjection proj;         // W_Q: d_f x d_k, W_K: d_k x d_k
    Matrix w_v;                  // d_k x d_v
    Matrix w_out;                // (d_v + C + 2) x C
    std::vector<double> b_out;   // C

    int d_f() const { return w_lift.cols(); }
    int d_k() const { return proj.d_k(); }
    int d_v() const { return w_v.cols(); }
    void validate() const;
    bool operator==(const MicroParams&) const = default;
};

struct MicroDims {
    int channels = 3;
    int d_f      = 16;
    int d_k      = 8;
    int d_v      = 8;
};

// Seeded N(0, 1/fan_in) weights scaled by `scale`, zero biases.
MicroParams init_micro_params(const MicroDims& dims, std::uint64_t seed, double scale = 1.0);
MicroParams zero_micro_params(const MicroDims& dims);

inline constexpr double kDefaultMaskBias = 2.0;

// +gamma on the logit of token j at pixels inside the box bound to j.
Tensor3 mask_logit_bias(const Layout& layout, int height, int width, int tokens, double gamma);

Tensor3 micro_features(const Latent& z, const MicroParams& params);

// Forward pass; `bias` may be null (fidelity variant).
DenoiserOutput micro_denoise(const Latent& z, const TokenSequence& tokens, const MicroParams& params,
                             const Tensor3* bias);

class MicroDenoiser final : public Denoiser {
public:
    MicroDenoiser(MicroParams params, Shape latent, Branch branch, double gamma = kDefaultMaskBias);

    std::string name() const override;
    Branch branch() const override { return branch_; }
    Shape latent_shape() const override { return shape_; }
    DenoiserOutput denoise(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond) const override;
    Latent attention_vjp(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond,
                         const Tensor3& cotangent) const override;

    const MicroParams& params() const { return params_; }

private:
    Tensor3 bias_for(const TokenSequence& tokens, const Layout* cond) const;

    MicroParams params_;
    Shape shape_;
    Branch branch_;
    double gamma_;
};

struct TrainOptions {
    int iterations   = 200;
    int batch        = 16;
    double lr        = 0.05;
    std::uint64_t seed = 0;
};

// Fits the output head (W_out, b_out) to the squared-error noise-prediction
// loss on draws from `data`, keeping every other weight fixed. Returns the
// per-iteration batch loss.
std::vector<double> train_head(MicroParams& params, const MixtureSpec& data, const TokenSequence& tokens,
                               const NoiseSchedule& sched, const TrainOptions& opts);

}  // namespace realcompo
