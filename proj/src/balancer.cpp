#include "realcompo/balancer.hpp"

#include <algorithm>
#include <cmath>

#include "realcompo/errors.hpp"
#include "realcompo/rng.hpp"

namespace realcompo {

const char* to_string(GradientMode m) { return m == GradientMode::paper ? "paper" : "full"; }

GradientMode parse_gradient_mode(const std::string& s) {
    if (s == "paper") {
        return GradientMode::paper;
    }
    if (s == "full") {
        return GradientMode::full;
    }
    throw ConfigError("balancer", "unknown gradient mode '" + s + "' (expected paper|full)");
}

const char* to_string(RhoDecay d) { return d == RhoDecay::constant ? "constant" : "linear"; }

RhoDecay parse_rho_decay(const std::string& s) {
    if (s == "constant") {
        return RhoDecay::constant;
    }
    if (s == "linear") {
        return RhoDecay::linear;
    }
    throw ConfigError("balancer", "unknown rho decay '" + s + "' (expected constant|linear)");
}

void CoeMap::validate() const {
    if (!text.same_shape(spatial)) {
        throw ShapeError("balancer", "coefficient grids differ in shape");
    }
    if (!text.all_finite() || !spatial.all_finite()) {
        throw NonFiniteError("balancer", "non-finite coefficient");
    }
}

void BalancerConfig::validate() const {
    if (!(std::isfinite(rho) && rho > 0.0)) {
        throw ConfigError("balancer", "rho must be finite and positive");
    }
    if (inner_updates < 0) {
        throw ConfigError("balancer", "inner_updates must be >= 0");
    }
}

double BalancerConfig::rho_at(int t, int steps) const {
    if (rho_decay == RhoDecay::constant) {
        return rho;
    }
    return rho * static_cast<double>(t) / steps;
}

CoeMap init_coe(int height, int width, std::uint64_t seed) {
    if (height < 1 || width < 1) {
        throw ShapeError("balancer", "coefficient grid dimensions must be positive");
    }
    Grid g(height, width);
    Rng rng(seed, Stream::coefficients);
    rng.fill_normal(g);
    return {g, g};
}

XiMap softmax_xi(const CoeMap& coe) {
    coe.validate();
    XiMap xi{Grid(coe.text.height(), coe.text.width()), Grid(coe.text.height(), coe.text.width())};
    for (std::size_t i = 0; i < coe.text.size(); ++i) {
        const double a  = coe.text[i];
        const double b  = coe.spatial[i];
        const double mx = std::max(a, b);
        const double ea = std::exp(a - mx);
        const double eb = std::exp(b - mx);
        xi.text[i]      = ea / (ea + eb);
        xi.spatial[i]   = eb / (ea + eb);
    }
    return xi;
}

Latent balance_noise(const XiMap& xi, const Latent& eps_text, const Latent& eps_spatial) {
    require_same_shape(eps_text, eps_spatial, "balance_noise");
    if (xi.text.height() != eps_text.height() || xi.text.width() != eps_text.width() ||
        !xi.text.same_shape(xi.spatial)) {
        throw ShapeError("balancer", "influence grid does not match noise resolution");
    }
    const int c = eps_text.depth();
    Latent out(eps_text.shape());
    for (std::size_t i = 0; i < out.pixels(); ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t k = i * c + ch;
            out[k]              = xi.text[i] * eps_text[k] + xi.spatial[i] * eps_spatial[k];
        }
    }
    return out;
}

std::vector<MaskBinding> layout_masks(const Layout& layout, int height, int width) {
    std::vector<MaskBinding> masks;
    for (const auto& b : layout.boxes) {
        if (b.token_index < 0) {
            throw RangeError("balancer", "layout box '" + b.label + "' is not bound to a token");
        }
        masks.push_back({rasterize(b, height, width), b.token_index});
    }
    return masks;
}

namespace {

void check_mask(const AttnMaps& attn, const BinaryMask& mask, int token_index) {
    if (mask.height() != attn.height() || mask.width() != attn.width()) {
        throw ShapeError("balancer", "mask resolution does not match attention resolution");
    }
    if (token_index < 0 || token_index >= attn.tokens()) {
        throw RangeError("balancer", "mask token index " + std::to_string(token_index) + " out of range");
    }
}

struct BoxSums {
    double inside = 0.0;
    double total  = 0.0;
};

// Neumaier-compensated running sum; keeps in/all exact for uniform maps.
struct CompensatedSum {
    double sum = 0.0;
    double c   = 0.0;
    void add(double v) {
        const double t = sum + v;
        c += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
        sum = t;
    }
    double value() const { return sum + c; }
};

BoxSums box_sums(const AttnMaps& attn, const BinaryMask& mask, int token_index) {
    check_mask(attn, mask, token_index);
    CompensatedSum total, inside;
    for (std::size_t i = 0; i < attn.pixels(); ++i) {
        const double a = attn.at(i, token_index);
        total.add(a);
        if (mask[i]) {
            inside.add(a);
        }
    }
    return {inside.value(), std::max(total.value(), kAttentionMassFloor)};
}

}  // namespace

double in_box_ratio(const AttnMaps& attn, const BinaryMask& mask, int token_index) {
    const BoxSums s = box_sums(attn, mask, token_index);
    return s.inside / s.total;
}

double branch_loss(const AttnMaps& attn, const std::vector<MaskBinding>& masks) {
    double loss = 0.0;
    for (const auto& m : masks) {
        loss += 1.0 - in_box_ratio(attn, m.mask, m.token_index);
    }
    return loss;
}

double alignment_loss(const AttnMaps& attn_text, const AttnMaps& attn_spatial,
                      const std::vector<MaskBinding>& masks) {
    return branch_loss(attn_text, masks) + branch_loss(attn_spatial, masks);
}

Grid loss_attn_cotangent(const AttnMaps& attn, const BinaryMask& mask, int token_index) {
    const BoxSums s = box_sums(attn, mask, token_index);
    const double d  = s.total * s.total;
    Grid g(attn.height(), attn.width());
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = (s.inside - (mask[i] ? s.total : 0.0)) / d;
    }
    return g;
}

Tensor3 branch_loss_cotangent(const AttnMaps& attn, const std::vector<MaskBinding>& masks) {
    Tensor3 cot(attn.height(), attn.width(), attn.tokens());
    const int n = attn.tokens();
    for (const auto& m : masks) {
        const Grid g = loss_attn_cotangent(attn, m.mask, m.token_index);
        for (std::size_t i = 0; i < g.size(); ++i) {
            cot[i * n + m.token_index] += g[i];
        }
    }
    return cot;
}

AlignmentEval evaluate_alignment(const StepContext& ctx, const CoeMap& coe) {
    const XiMap xi     = softmax_xi(coe);
    const Latent eps   = balance_noise(xi, ctx.eps_text, ctx.eps_spatial);
    AlignmentEval eval;
    eval.z_prev  = ddim_step(ctx.z, eps, ctx.t, ctx.sched, ctx.ddim_noise);
    // Re-evaluated with the step's own timestep t, as in the reference procedure.
    eval.text    = ctx.text.denoise(eval.z_prev, ctx.t, ctx.tokens, nullptr);
    eval.spatial = ctx.spatial.denoise(eval.z_prev, ctx.t, ctx.tokens, &ctx.layout);
    eval.loss    = alignment_loss(eval.text.attn, eval.spatial.attn, ctx.masks);
    return eval;
}

CoeGradient coe_gradient(const StepContext& ctx, const CoeMap& coe, GradientMode gradient_mode,
                         JacobianMode jacobian_mode) {
    const XiMap xi = softmax_xi(coe);
    CoeGradient out;
    out.eval = evaluate_alignment(ctx, coe);

    const Tensor3 cot_text    = branch_loss_cotangent(out.eval.text.attn, ctx.masks);
    const Tensor3 cot_spatial = branch_loss_cotangent(out.eval.spatial.attn, ctx.masks);
    const Latent gz_text      = ctx.text.attention_vjp(out.eval.z_prev, ctx.t, ctx.tokens, nullptr, cot_text);
    const Latent gz_spatial   = ctx.spatial.attention_vjp(out.eval.z_prev, ctx.t, ctx.tokens, &ctx.layout, cot_spatial);
    const double jac          = ddim_eps_jacobian_scalar(ctx.t, ctx.sched, jacobian_mode);

    const int c = ctx.z.depth();
    out.text    = Grid(coe.text.height(), coe.text.width());
    out.spatial = Grid(coe.text.height(), coe.text.width());
    for (std::size_t i = 0; i < out.text.size(); ++i) {
        // d xi^c / d Coe^c = xi^text xi^spatial
        const double dxi = xi.text[i] * xi.spatial[i];
        double gt = 0.0, gs = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t k = i * c + ch;
            const double gz     = gz_text[k] + gz_spatial[k];
            if (gradient_mode == GradientMode::paper) {
                gt += gz * ctx.eps_text[k];
                gs += gz * ctx.eps_spatial[k];
            } else {
                const double diff = ctx.eps_text[k] - ctx.eps_spatial[k];
                gt += gz * diff;
                gs -= gz * diff;
            }
        }
        out.text[i]    = gt * jac * dxi;
        out.spatial[i] = gs * jac * dxi;
    }
    if (!out.text.all_finite() || !out.spatial.all_finite()) {
        throw NonFiniteError("balancer", "non-finite coefficient gradient at step " + std::to_string(ctx.t));
    }
    return out;
}

CoeMap update_coe(const CoeMap& coe, const Grid& grad_text, const Grid& grad_spatial, double rho) {
    coe.validate();
    if (!coe.text.same_shape(grad_text) || !coe.text.same_shape(grad_spatial)) {
        throw ShapeError("balancer", "gradient grid does not match coefficient grid");
    }
    if (!grad_text.all_finite() || !grad_spatial.all_finite()) {
        throw NonFiniteError("balancer", "refusing to apply a non-finite gradient");
    }
    CoeMap out = coe;
    for (std::size_t i = 0; i < out.text.size(); ++i) {
        out.text[i] -= rho * grad_text[i];
        out.spatial[i] -= rho * grad_spatial[i];
    }
    return out;
}

}  // namespace realcompo
