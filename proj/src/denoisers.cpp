#include "realcompo/denoisers.hpp"

#include "realcompo/errors.hpp"

namespace realcompo {

const char* to_string(Branch b) { return b == Branch::fidelity ? "text" : "spatial"; }

void Denoiser::check_call(const Latent& z, const Layout* cond) const {
    if (z.shape() != latent_shape()) {
        throw ShapeError("denoisers", name() + ": latent shape " + z.shape().str() + " expected " +
                                          latent_shape().str());
    }
    if (branch() == Branch::spatial && cond == nullptr) {
        throw ConfigError("denoisers", name() + ": spatial branch called without a condition");
    }
}

AnalyticDenoiser::AnalyticDenoiser(MixtureSpec text, NoiseSchedule sched, Branch branch, bool confine)
    : text_(std::move(text)), sched_(std::move(sched)), branch_(branch), confine_(confine) {
    text_.validate();
}

AnalyticDenoiser AnalyticDenoiser::fidelity(MixtureSpec text, NoiseSchedule sched) {
    return AnalyticDenoiser(std::move(text), std::move(sched), Branch::fidelity, false);
}

AnalyticDenoiser AnalyticDenoiser::spatial(MixtureSpec text, NoiseSchedule sched, bool confine) {
    return AnalyticDenoiser(std::move(text), std::move(sched), Branch::spatial, confine);
}

std::string AnalyticDenoiser::name() const {
    return branch_ == Branch::fidelity ? "analytic-text" : "analytic-spatial";
}

MixtureSpec AnalyticDenoiser::effective_spec(const Layout* cond) const {
    if (branch_ == Branch::fidelity) {
        return text_;
    }
    if (cond == nullptr) {
        throw ConfigError("denoisers", name() + ": spatial branch called without a condition");
    }
    return restrict_to_layout(text_, *cond, confine_).spec;
}

DenoiserOutput AnalyticDenoiser::denoise(const Latent& z, int t, const TokenSequence& tokens,
                                         const Layout* cond) const {
    check_call(z, cond);
    sched_.check_step(t);
    const double ab = sched_.alpha_bar(t);
    if (branch_ == Branch::fidelity) {
        return {analytic_eps(z, ab, text_), analytic_attention(z, ab, text_, tokens)};
    }
    const MixtureSpec spec = effective_spec(cond);
    return {analytic_eps(z, ab, spec), analytic_attention(z, ab, spec, tokens)};
}

Latent AnalyticDenoiser::attention_vjp(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond,
                                       const Tensor3& cotangent) const {
    check_call(z, cond);
    sched_.check_step(t);
    const double ab = sched_.alpha_bar(t);
    if (branch_ == Branch::fidelity) {
        return analytic_attention_vjp(z, ab, text_, tokens, cotangent);
    }
    return analytic_attention_vjp(z, ab, effective_spec(cond), tokens, cotangent);
}

void GateConfig::validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw RangeError("denoisers", "gate beta must lie in [0, 1]");
    }
}

Latent gated_spatial_eps(const Latent& z, int t, const GateConfig& gate, const MixtureSpec& text_spec,
                         const MixtureSpec& layout_spec, const NoiseSchedule& sched) {
    gate.validate();
    if (text_spec.shape != layout_spec.shape) {
        throw ShapeError("denoisers", "gated_spatial_eps: mixtures differ in shape");
    }
    sched.check_step(t);
    const double beta = gate.effective_beta(t);
    const double ab   = sched.alpha_bar(t);
    if (beta == 0.0) {
        return analytic_eps(z, ab, text_spec);
    }
    if (beta == 1.0) {
        return analytic_eps(z, ab, layout_spec);
    }
    return axpby(1.0 - beta, analytic_eps(z, ab, text_spec), beta, analytic_eps(z, ab, layout_spec));
}

GatedSpatialDenoiser::GatedSpatialDenoiser(MixtureSpec text, NoiseSchedule sched, GateConfig gate, bool confine)
    : text_(std::move(text)), sched_(std::move(sched)), gate_(gate), confine_(confine) {
    gate_.validate();
    text_.validate();
}

std::string GatedSpatialDenoiser::name() const { return "gated-spatial"; }

DenoiserOutput GatedSpatialDenoiser::denoise(const Latent& z, int t, const TokenSequence& tokens,
                                             const Layout* cond) const {
    check_call(z, cond);
    const MixtureSpec layout_spec = restrict_to_layout(text_, *cond, confine_).spec;
    const double beta             = gate_.effective_beta(t);
    const double ab               = sched_.alpha_bar(t);
    Latent eps                    = gated_spatial_eps(z, t, gate_, text_, layout_spec, sched_);
    AttnMaps a_text               = analytic_attention(z, ab, text_, tokens);
    const AttnMaps a_layout       = analytic_attention(z, ab, layout_spec, tokens);
    for (std::size_t i = 0; i < a_text.tensor().size(); ++i) {
        a_text.tensor()[i] = (1.0 - beta) * a_text.tensor()[i] + beta * a_layout.tensor()[i];
    }
    return {std::move(eps), std::move(a_text)};
}

Latent GatedSpatialDenoiser::attention_vjp(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond,
                                           const Tensor3& cotangent) const {
    check_call(z, cond);
    const MixtureSpec layout_spec = restrict_to_layout(text_, *cond, confine_).spec;
    const double beta             = gate_.effective_beta(t);
    const double ab               = sched_.alpha_bar(t);
    return axpby(1.0 - beta, analytic_attention_vjp(z, ab, text_, tokens, cotangent), beta,
                 analytic_attention_vjp(z, ab, layout_spec, tokens, cotangent));
}

}  // namespace realcompo
