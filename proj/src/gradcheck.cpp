#include "realcompo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "realcompo/errors.hpp"
#include "realcompo/micro.hpp"
#include "realcompo/rng.hpp"

namespace realcompo {

double fd_relative_error(double analytic, double fd, double floor) {
    const double scale = std::max({std::abs(analytic), std::abs(fd), floor});
    return scale == 0.0 ? 0.0 : std::abs(analytic - fd) / scale;
}

StepContext GradcheckInstance::context() const {
    return StepContext{z,      t,      eps_text, eps_spatial, *text, *spatial, tokens, layout, masks,
                       sched, ddim_noise.size() != 0 ? &ddim_noise : nullptr};
}

GradcheckInstance make_gradcheck_instance(DenoiserKind kind, const GradcheckParams& p) {
    GradcheckInstance inst;
    inst.label = std::string(to_string(kind)) + " " + std::to_string(p.size) + "x" + std::to_string(p.size);
    inst.sched = NoiseSchedule::linear(p.schedule);
    inst.sched.check_step(p.t);
    inst.t = p.t;

    RunConfig cfg;
    cfg.prompt            = p.prompt;
    cfg.schedule          = p.schedule;
    cfg.testbed.height    = p.size;
    cfg.testbed.width     = p.size;
    cfg.denoiser          = kind;
    cfg.micro.param_seed  = p.seed;
    const Scene scene     = build_scene(cfg);
    inst.tokens           = scene.tokens;
    inst.layout           = scene.layout;
    inst.masks            = layout_masks(inst.layout, p.size, p.size);
    const DenoiserPair dp = make_denoisers(cfg, scene, inst.sched);
    inst.text             = dp.text;
    inst.spatial          = dp.spatial;

    Rng rng(p.seed, Stream::instances);
    const auto& comps = scene.text_spec.components;
    const Latent& x0  = comps[rng.below(static_cast<std::uint32_t>(comps.size()))].mean;
    Latent eps(x0.shape());
    rng.fill_normal(eps);
    inst.z = forward_diffuse(x0, inst.t, eps, inst.sched);
    if (inst.sched.sigma(inst.t) > 0.0) {
        inst.ddim_noise = Latent(x0.shape());
        rng.fill_normal(inst.ddim_noise);
    }
    inst.eps_text    = inst.text->denoise(inst.z, inst.t, inst.tokens, nullptr).eps;
    inst.eps_spatial = inst.spatial->denoise(inst.z, inst.t, inst.tokens, &inst.layout).eps;
    inst.coe         = CoeMap{Grid(p.size, p.size), Grid(p.size, p.size)};
    rng.fill_normal(inst.coe.text);
    rng.fill_normal(inst.coe.spatial);
    return inst;
}

CheckReport check_coe_gradient(const GradcheckInstance& inst, JacobianMode jacobian_mode, const FdOptions& opts) {
    const StepContext ctx = inst.context();
    const CoeGradient g   = coe_gradient(ctx, inst.coe, GradientMode::full, jacobian_mode);
    const std::size_t n   = inst.coe.text.size();
    std::vector<double> fd_text(n), fd_spatial(n);
    for (int branch = 0; branch < 2; ++branch) {
        for (std::size_t i = 0; i < n; ++i) {
            CoeMap plus = inst.coe, minus = inst.coe;
            (branch == 0 ? plus.text : plus.spatial)[i] += opts.h;
            (branch == 0 ? minus.text : minus.spatial)[i] -= opts.h;
            const double d = (evaluate_alignment(ctx, plus).loss - evaluate_alignment(ctx, minus).loss) / (2.0 * opts.h);
            (branch == 0 ? fd_text : fd_spatial)[i] = d;
        }
    }
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        scale = std::max({scale, std::abs(fd_text[i]), std::abs(fd_spatial[i])});
    }
    const double floor = opts.floor_frac * scale;
    CheckReport rep;
    rep.name    = std::string("coe_gradient[") + inst.label + ", jacobian=" + to_string(jacobian_mode) + "]";
    rep.entries = 2 * n;
    rep.rtol    = opts.rtol;
    const int w = inst.coe.text.width();
    for (int branch = 0; branch < 2; ++branch) {
        for (std::size_t i = 0; i < n; ++i) {
            const double a   = (branch == 0 ? g.text : g.spatial)[i];
            const double f   = (branch == 0 ? fd_text : fd_spatial)[i];
            const double err = fd_relative_error(a, f, floor);
            if (err > rep.max_rel_error || rep.worst.empty()) {
                rep.max_rel_error = std::max(rep.max_rel_error, err);
                std::ostringstream os;
                os << (branch == 0 ? "text" : "spatial") << " cell (" << i / w << "," << i % w << ") analytic "
                   << a << " fd " << f;
                rep.worst = os.str();
            }
        }
    }
    rep.pass = rep.max_rel_error <= opts.rtol;
    return rep;
}

CheckReport check_attention_vjp(const GradcheckInstance& inst, Branch branch, const FdOptions& opts) {
    const Denoiser& d    = branch == Branch::fidelity ? *inst.text : *inst.spatial;
    const Layout* cond   = branch == Branch::fidelity ? nullptr : &inst.layout;
    const Shape s        = inst.z.shape();
    Tensor3 cot(s.height, s.width, inst.tokens.size());
    Rng rng(fnv1a64(inst.label.data(), inst.label.size()), Stream::instances);
    rng.fill_normal(cot);
    const Latent g = d.attention_vjp(inst.z, inst.t, inst.tokens, cond, cot);
    auto objective = [&](const Latent& z) {
        const AttnMaps a = d.denoise(z, inst.t, inst.tokens, cond).attn;
        double v         = 0.0;
        for (std::size_t i = 0; i < cot.size(); ++i) {
            v += cot[i] * a.tensor()[i];
        }
        return v;
    };
    std::vector<double> fd(inst.z.size());
    double scale = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
        Latent plus = inst.z, minus = inst.z;
        plus[i] += opts.h;
        minus[i] -= opts.h;
        fd[i] = (objective(plus) - objective(minus)) / (2.0 * opts.h);
        scale = std::max(scale, std::abs(fd[i]));
    }
    CheckReport rep;
    rep.name    = std::string("attention_vjp[") + inst.label + ", " + to_string(branch) + "]";
    rep.entries = fd.size();
    rep.rtol    = opts.rtol;
    for (std::size_t i = 0; i < fd.size(); ++i) {
        const double err = fd_relative_error(g[i], fd[i], opts.floor_frac * scale);
        if (err > rep.max_rel_error || rep.worst.empty()) {
            rep.max_rel_error = std::max(rep.max_rel_error, err);
            const std::size_t px = i / s.depth;
            std::ostringstream os;
            os << "z(" << px / s.width << "," << px % s.width << "," << i % s.depth << ") analytic " << g[i]
               << " fd " << fd[i];
            rep.worst = os.str();
        }
    }
    rep.pass = rep.max_rel_error <= opts.rtol;
    return rep;
}

}  // namespace realcompo
