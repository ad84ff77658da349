#pragma once

#include <vector>

#include "realcompo/tensor.hpp"

namespace realcompo {

enum class JacobianMode { paper, consistent };

const char* to_string(JacobianMode m);
JacobianMode parse_jacobian_mode(const std::string& s);

struct ScheduleParams {
    int steps          = 50;
    int train_steps    = 1000;
    double beta_start  = 1e-4;
    double beta_end    = 2e-2;
    double eta         = 0.0;  // DDIM stochasticity; 0 is the deterministic sampler
};

// Sampling schedule indexed by step t = 1..T, with alpha_bar(0) = 1.
//
// The linear constructor spaces T sampling steps uniformly over a
// `train_steps`-long linear-beta grid; per-step alpha(t) is the ratio
// alpha_bar(t) / alpha_bar(t-1), so alpha_bar is exactly the cumulative
// product of alpha.
class NoiseSchedule {
public:
    static NoiseSchedule linear(const ScheduleParams& p);
    // alpha_bar[k] is the value at step k+1; must be strictly decreasing in (0, 1].
    static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar, double eta = 0.0);

    int steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
    double alpha_bar(int t) const;
    double alpha(int t) const;
    double beta(int t) const { return 1.0 - alpha(t); }
    double sigma(int t) const;
    double eta() const { return eta_; }
    // Training-grid timestep each sampling step maps to (for logs).
    int train_timestep(int t) const;

    void check_step(int t) const;

private:
    NoiseSchedule() = default;
    void finalize(double eta);

    std::vector<double> alpha_bar_;  // index 0..T
    std::vector<double> sigma_;      // index 0..T, sigma_[0] unused
    std::vector<int> train_t_;
    double eta_ = 0.0;
};

// sqrt(abar)*x0 + sqrt(1-abar)*eps.
Latent forward_diffuse(const Latent& x0, const Latent& eps, double alpha_bar);
Latent forward_diffuse(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& sched);

// Generalized DDIM update from explicit coefficients. `noise` is required
// when sigma > 0 and ignored otherwise.
Latent ddim_update(const Latent& z, const Latent& eps, double alpha_bar_t, double alpha_bar_prev, double sigma,
                   const Latent* noise = nullptr);
Latent ddim_step(const Latent& z, const Latent& eps, int t, const NoiseSchedule& sched, const Latent* noise = nullptr);

// d z_{t-1} / d eps_t as a scalar. `paper` keeps sigma and the per-step
// alpha in the denominator; `consistent` differentiates the sigma-free step.
double ddim_eps_jacobian_scalar(int t, const NoiseSchedule& sched, JacobianMode mode);

}  // namespace realcompo
