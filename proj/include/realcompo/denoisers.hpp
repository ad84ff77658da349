#pragma once

#include <memory>
#include <optional>
#include <string>

#include "realcompo/attention.hpp"
#include "realcompo/conditions.hpp"
#include "realcompo/mixture.hpp"
#include "realcompo/schedule.hpp"
#include "realcompo/tensor.hpp"

namespace realcompo {

struct DenoiserOutput {
    Latent eps;
    AttnMaps attn;
};

// Fidelity branches ignore the condition; spatial branches require it.
enum class Branch { fidelity, spatial };

const char* to_string(Branch b);

// Noise predictor with cross-attention maps. Implementations are immutable
// after construction and deterministic; `denoise` and `attention_vjp` may be
// called concurrently.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual std::string name() const = 0;
    virtual Branch branch() const = 0;
    virtual Shape latent_shape() const = 0;

    virtual DenoiserOutput denoise(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond) const = 0;

    // v^T dA/dz of the maps `denoise` returns for the same (z, t, cond).
    virtual Latent attention_vjp(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond,
                                 const Tensor3& cotangent) const = 0;

protected:
    void check_call(const Latent& z, const Layout* cond) const;
};

// Exact delta-mixture denoiser. The spatial variant restricts the text
// mixture to the condition's layout on every call.
class AnalyticDenoiser final : public Denoiser {
public:
    static AnalyticDenoiser fidelity(MixtureSpec text, NoiseSchedule sched);
    static AnalyticDenoiser spatial(MixtureSpec text, NoiseSchedule sched, bool confine = true);

    std::string name() const override;
    Branch branch() const override { return branch_; }
    Shape latent_shape() const override { return text_.shape; }
    DenoiserOutput denoise(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond) const override;
    Latent attention_vjp(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond,
                         const Tensor3& cotangent) const override;

    const MixtureSpec& text_spec() const { return text_; }
    // Mixture actually used for a given condition.
    MixtureSpec effective_spec(const Layout* cond) const;

private:
    AnalyticDenoiser(MixtureSpec text, NoiseSchedule sched, Branch branch, bool confine);

    MixtureSpec text_;
    NoiseSchedule sched_;
    Branch branch_;
    bool confine_;
};

struct GateConfig {
    double beta = 1.0;           // spatial injection strength in [0, 1]
    int cutoff_step = 0;         // beta forced to 0 for t < cutoff_step

    void validate() const;
    double effective_beta(int t) const { return t < cutoff_step ? 0.0 : beta; }
};

// (1 - beta) eps(text_spec) + beta eps(layout_spec).
Latent gated_spatial_eps(const Latent& z, int t, const GateConfig& gate, const MixtureSpec& text_spec,
                         const MixtureSpec& layout_spec, const NoiseSchedule& sched);

// Spatial branch whose injection strength is gated by beta. Attention maps
// are gated the same way, which keeps rows stochastic.
class GatedSpatialDenoiser final : public Denoiser {
public:
    GatedSpatialDenoiser(MixtureSpec text, NoiseSchedule sched, GateConfig gate, bool confine = true);

    std::string name() const override;
    Branch branch() const override { return Branch::spatial; }
    Shape latent_shape() const override { return text_.shape; }
    DenoiserOutput denoise(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond) const override;
    Latent attention_vjp(const Latent& z, int t, const TokenSequence& tokens, const Layout* cond,
                         const Tensor3& cotangent) const override;

private:
    MixtureSpec text_;
    NoiseSchedule sched_;
    GateConfig gate_;
    bool confine_;
};

}  // namespace realcompo
