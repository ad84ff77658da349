#include "realcompo/schedule.hpp"

#include <cmath>
#include <string>

#include "realcompo/errors.hpp"

namespace realcompo {

const char* to_string(JacobianMode m) { return m == JacobianMode::paper ? "paper" : "consistent"; }

JacobianMode parse_jacobian_mode(const std::string& s) {
    if (s == "paper") {
        return JacobianMode::paper;
    }
    if (s == "consistent") {
        return JacobianMode::consistent;
    }
    throw ConfigError("schedule", "unknown jacobian mode '" + s + "' (expected paper|consistent)");
}

NoiseSchedule NoiseSchedule::linear(const ScheduleParams& p) {
    if (p.steps < 1) {
        throw ConfigError("schedule", "steps must be positive");
    }
    if (p.train_steps < p.steps) {
        throw ConfigError("schedule", "train_steps must be >= steps");
    }
    if (!(p.beta_start > 0.0 && p.beta_end < 1.0 && p.beta_start <= p.beta_end)) {
        throw ConfigError("schedule", "betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> train_abar(static_cast<std::size_t>(p.train_steps) + 1, 1.0);
    for (int s = 1; s <= p.train_steps; ++s) {
        const double frac = p.train_steps == 1 ? 0.0 : static_cast<double>(s - 1) / (p.train_steps - 1);
        const double beta = p.beta_start + (p.beta_end - p.beta_start) * frac;
        train_abar[s]     = train_abar[s - 1] * (1.0 - beta);
    }
    NoiseSchedule sched;
    sched.alpha_bar_.assign(1, 1.0);
    sched.train_t_.assign(1, 0);
    for (int k = 1; k <= p.steps; ++k) {
        const auto tau = static_cast<int>(std::lround(static_cast<double>(k) * p.train_steps / p.steps));
        sched.alpha_bar_.push_back(train_abar[tau]);
        sched.train_t_.push_back(tau);
    }
    sched.finalize(p.eta);
    return sched;
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar, double eta) {
    if (alpha_bar.empty()) {
        throw ConfigError("schedule", "empty alpha_bar");
    }
    NoiseSchedule sched;
    sched.alpha_bar_.assign(1, 1.0);
    sched.alpha_bar_.insert(sched.alpha_bar_.end(), alpha_bar.begin(), alpha_bar.end());
    for (std::size_t t = 0; t < sched.alpha_bar_.size(); ++t) {
        sched.train_t_.push_back(static_cast<int>(t));
    }
    sched.finalize(eta);
    return sched;
}

void NoiseSchedule::finalize(double eta) {
    if (!(eta >= 0.0 && eta <= 1.0)) {
        throw ConfigError("schedule", "eta must lie in [0, 1]");
    }
    eta_ = eta;
    for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
        const double ab = alpha_bar_[t];
        if (!(ab > 0.0 && ab <= 1.0)) {
            throw ConfigError("schedule", "alpha_bar outside (0, 1] at step " + std::to_string(t));
        }
        if (!(ab < alpha_bar_[t - 1])) {
            throw ConfigError("schedule", "alpha_bar must be strictly decreasing (step " + std::to_string(t) + ")");
        }
    }
    sigma_.assign(alpha_bar_.size(), 0.0);
    for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
        const double ab = alpha_bar_[t];
        const double ap = alpha_bar_[t - 1];
        sigma_[t]       = eta * std::sqrt((1.0 - ap) / (1.0 - ab)) * std::sqrt(1.0 - ab / ap);
    }
}

void NoiseSchedule::check_step(int t) const {
    if (t < 1 || t > steps()) {
        throw RangeError("schedule", "step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > steps()) {
        throw RangeError("schedule", "step " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
    }
    return alpha_bar_[t];
}

double NoiseSchedule::alpha(int t) const {
    check_step(t);
    return alpha_bar_[t] / alpha_bar_[t - 1];
}

double NoiseSchedule::sigma(int t) const {
    check_step(t);
    return sigma_[t];
}

int NoiseSchedule::train_timestep(int t) const {
    check_step(t);
    return train_t_[t];
}

Latent forward_diffuse(const Latent& x0, const Latent& eps, double alpha_bar) {
    require_same_shape(x0, eps, "forward_diffuse");
    return axpby(std::sqrt(alpha_bar), x0, std::sqrt(1.0 - alpha_bar), eps);
}

Latent forward_diffuse(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& sched) {
    sched.check_step(t);
    return forward_diffuse(x0, eps, sched.alpha_bar(t));
}

Latent ddim_update(const Latent& z, const Latent& eps, double alpha_bar_t, double alpha_bar_prev, double sigma,
                   const Latent* noise) {
    require_same_shape(z, eps, "ddim_step");
    if (!z.all_finite() || !eps.all_finite()) {
        throw NonFiniteError("schedule", "ddim_step: non-finite latent or noise prediction");
    }
    const double dir2 = 1.0 - alpha_bar_prev - sigma * sigma;
    if (dir2 < 0.0) {
        throw RangeError("schedule", "ddim_step: sigma^2 exceeds 1 - alpha_bar_prev");
    }
    if (sigma > 0.0) {
        if (noise == nullptr) {
            throw ConfigError("schedule", "ddim_step: sigma > 0 requires a noise sample");
        }
        require_same_shape(z, *noise, "ddim_step noise");
    }
    const double sa_t  = std::sqrt(alpha_bar_t);
    const double sn_t  = std::sqrt(1.0 - alpha_bar_t);
    const double sa_p  = std::sqrt(alpha_bar_prev);
    const double dir   = std::sqrt(dir2);
    Latent out(z.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0 = (z[i] - sn_t * eps[i]) / sa_t;
        out[i]          = sa_p * x0 + dir * eps[i];
        if (sigma > 0.0) {
            out[i] += sigma * (*noise)[i];
        }
    }
    return out;
}

Latent ddim_step(const Latent& z, const Latent& eps, int t, const NoiseSchedule& sched, const Latent* noise) {
    sched.check_step(t);
    return ddim_update(z, eps, sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.sigma(t), noise);
}

double ddim_eps_jacobian_scalar(int t, const NoiseSchedule& sched, JacobianMode mode) {
    sched.check_step(t);
    const double ab_t = sched.alpha_bar(t);
    const double ab_p = sched.alpha_bar(t - 1);
    if (mode == JacobianMode::paper) {
        const double s    = sched.sigma(t);
        const double dir2 = 1.0 - ab_p - s * s;
        if (dir2 < 0.0) {
            throw RangeError("schedule", "jacobian: 1 - alpha_bar_prev - sigma^2 < 0 at step " + std::to_string(t));
        }
        return std::sqrt(dir2) - std::sqrt(1.0 - ab_t) / std::sqrt(sched.alpha(t));
    }
    return std::sqrt(1.0 - ab_p) - std::sqrt(ab_p) * std::sqrt(1.0 - ab_t) / std::sqrt(ab_t);
}

}  // namespace realcompo
