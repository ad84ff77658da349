#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "realcompo/attention.hpp"
#include "realcompo/conditions.hpp"
#include "realcompo/denoisers.hpp"
#include "realcompo/schedule.hpp"
#include "realcompo/tensor.hpp"

namespace realcompo {

// `paper` follows the published chain rule (each branch's own eps only);
// `full` also carries the softmax cross-term and is the exact gradient.
enum class GradientMode { paper, full };

const char* to_string(GradientMode m);
GradientMode parse_gradient_mode(const std::string& s);

enum class RhoDecay { constant, linear };

const char* to_string(RhoDecay d);
RhoDecay parse_rho_decay(const std::string& s);

// Raw per-pixel coefficients of the two branches (broadcast over channels).
struct CoeMap {
    Grid text;
    Grid spatial;

    void validate() const;
};

// Softmaxed influences; text + spatial = 1 per pixel.
struct XiMap {
    Grid text;
    Grid spatial;
};

struct BalancerConfig {
    double rho = 0.1;
    RhoDecay rho_decay = RhoDecay::constant;
    int inner_updates = 1;
    GradientMode gradient_mode = GradientMode::paper;
    JacobianMode jacobian_mode = JacobianMode::paper;

    void validate() const;
    // Update rate at step t of a T-step run (linear decay: rho * t / T).
    double rho_at(int t, int steps) const;
};

// One N(0, 1) grid from the seed, copied to both branches.
CoeMap init_coe(int height, int width, std::uint64_t seed);

XiMap softmax_xi(const CoeMap& coe);

// xi_text * eps_text + xi_spatial * eps_spatial, xi broadcast over channels.
Latent balance_noise(const XiMap& xi, const Latent& eps_text, const Latent& eps_spatial);

struct MaskBinding {
    BinaryMask mask;
    int token_index = -1;
};

inline constexpr double kAttentionMassFloor = 1e-12;

// Rasterized mask per layout box (bound token indices required).
std::vector<MaskBinding> layout_masks(const Layout& layout, int height, int width);

// sum_i A_ij M_i / sum_i A_ij for one box.
double in_box_ratio(const AttnMaps& attn, const BinaryMask& mask, int token_index);

// sum_b (1 - in_box_ratio) for one branch.
double branch_loss(const AttnMaps& attn, const std::vector<MaskBinding>& masks);

double alignment_loss(const AttnMaps& attn_text, const AttnMaps& attn_spatial,
                      const std::vector<MaskBinding>& masks);

// dL_b / dA[., j_b] as an H x W grid (other tokens have zero cotangent).
Grid loss_attn_cotangent(const AttnMaps& attn, const BinaryMask& mask, int token_index);

// Cotangent of branch_loss w.r.t. the whole map, H x W x N.
Tensor3 branch_loss_cotangent(const AttnMaps& attn, const std::vector<MaskBinding>& masks);

// Everything fixed within one balanced step: branch noises predicted at z_t
// and the operands needed to re-evaluate attention at z_{t-1}.
struct StepContext {
    const Latent& z;
    int t;
    const Latent& eps_text;
    const Latent& eps_spatial;
    const Denoiser& text;
    const Denoiser& spatial;
    const TokenSequence& tokens;
    const Layout& layout;
    const std::vector<MaskBinding>& masks;
    const NoiseSchedule& sched;
    const Latent* ddim_noise = nullptr;  // required when sigma(t) > 0
};

// Result of evaluating the alignment loss for a coefficient map.
struct AlignmentEval {
    Latent z_prev;
    DenoiserOutput text;
    DenoiserOutput spatial;
    double loss = 0.0;
};

// Balanced noise -> provisional z_{t-1} -> both branches at z_{t-1} -> loss.
AlignmentEval evaluate_alignment(const StepContext& ctx, const CoeMap& coe);

struct CoeGradient {
    Grid text;
    Grid spatial;
    AlignmentEval eval;
};

// dL/dCoe for both branches at the current coefficients.
CoeGradient coe_gradient(const StepContext& ctx, const CoeMap& coe, GradientMode gradient_mode,
                         JacobianMode jacobian_mode);

// Coe^c - rho * grad^c. Rejects non-finite gradients.
CoeMap update_coe(const CoeMap& coe, const Grid& grad_text, const Grid& grad_spatial, double rho);

}  // namespace realcompo
