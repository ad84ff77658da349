#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "realcompo/balancer.hpp"
#include "realcompo/pipeline.hpp"

namespace realcompo {

struct FdOptions {
    double h    = 1e-3;
    double rtol = 1e-3;
    // Entries smaller than floor_frac * max|fd| are compared against that
    // floor instead of their own magnitude.
    double floor_frac = 1e-3;
};

// |analytic - fd| / max(|analytic|, |fd|, floor).
double fd_relative_error(double analytic, double fd, double floor);

struct CheckReport {
    std::string name;
    std::size_t entries = 0;
    double max_rel_error = 0.0;
    double rtol          = 0.0;
    bool pass            = false;
    std::string worst;  // location of the largest error
};

// One balanced step frozen for checking: branch noises at z_t, a random
// coefficient map and everything StepContext refers to.
struct GradcheckInstance {
    std::string label;
    NoiseSchedule sched = NoiseSchedule::linear({});
    TokenSequence tokens;
    Layout layout;
    std::vector<MaskBinding> masks;
    std::shared_ptr<const Denoiser> text;
    std::shared_ptr<const Denoiser> spatial;
    int t = 0;
    Latent z;
    Latent eps_text;
    Latent eps_spatial;
    Latent ddim_noise;  // empty when sigma(t) = 0
    CoeMap coe;

    StepContext context() const;
};

struct GradcheckParams {
    int size           = 8;
    int t              = 25;
    std::uint64_t seed = 0;
    ScheduleParams schedule;
    std::string prompt = "a red cube and a blue ball";
};

GradcheckInstance make_gradcheck_instance(DenoiserKind kind, const GradcheckParams& params);

// Coefficient gradient (gradient_mode full, the given Jacobian mode) against
// central differences of the alignment loss over every cell of both branches.
CheckReport check_coe_gradient(const GradcheckInstance& inst, JacobianMode jacobian_mode, const FdOptions& opts);

// attention_vjp of one branch against central differences of sum(v * A) over z.
CheckReport check_attention_vjp(const GradcheckInstance& inst, Branch branch, const FdOptions& opts);

}  // namespace realcompo
