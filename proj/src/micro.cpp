#include "realcompo/micro.hpp"

#include <cmath>

#include "realcompo/errors.hpp"
#include "realcompo/rng.hpp"

namespace realcompo {

namespace {

void fill(Matrix& m, Rng& rng, double scale) {
    const double s = scale / std::sqrt(static_cast<double>(m.rows()));
    for (auto& x : m.data()) {
        x = s * rng.normal();
    }
}

// [o_i, phi0_i] for every pixel: head input rows.
struct HeadInputs {
    Tensor3 rows;
    AttnMaps attn;
};

HeadInputs head_inputs(const Latent& z, const TokenSequence& tokens, const MicroParams& p, const Tensor3* bias) {
    const Tensor3 phi = micro_features(z, p);
    AttnMaps attn     = compute_attention(phi, tokens, p.proj, bias);
    const int n = tokens.size(), dk = p.d_k(), dv = p.d_v(), c = p.channels;
    Matrix values(n, dv);
    for (int j = 0; j < n; ++j) {
        for (int v = 0; v < dv; ++v) {
            double s = 0.0;
            for (int a = 0; a < dk; ++a) {
                s += tokens.embeddings(j, a) * p.w_v(a, v);
            }
            values(j, v) = s;
        }
    }
    HeadInputs out{Tensor3(z.height(), z.width(), dv + c + 2), std::move(attn)};
    for (int r = 0; r < z.height(); ++r) {
        for (int col = 0; col < z.width(); ++col) {
            const std::size_t i = static_cast<std::size_t>(r) * z.width() + col;
            auto row            = out.rows.pixel(i);
            for (int v = 0; v < dv; ++v) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) {
                    s += out.attn.at(i, j) * values(j, v);
                }
                row[v] = s;
            }
            for (int ch = 0; ch < c; ++ch) {
                row[dv + ch] = z.at(r, col, ch);
            }
            row[dv + c]     = 2.0 * (col + 0.5) / z.width() - 1.0;
            row[dv + c + 1] = 2.0 * (r + 0.5) / z.height() - 1.0;
        }
    }
    return out;
}

Latent apply_head(const Tensor3& rows, const MicroParams& p, int height, int width) {
    Latent eps(height, width, p.channels);
    const int in = rows.depth();
    for (std::size_t i = 0; i < rows.pixels(); ++i) {
        const auto h = rows.pixel(i);
        for (int ch = 0; ch < p.channels; ++ch) {
            double s = p.b_out[ch];
            for (int a = 0; a < in; ++a) {
                s += h[a] * p.w_out(a, ch);
            }
            eps[i * p.channels + ch] = s;
        }
    }
    return eps;
}

}  // namespace

void MicroParams::validate() const {
    const int c = channels;
    if (c < 1 || w_lift.rows() != c + 2 || static_cast<int>(b_lift.size()) != w_lift.cols() ||
        proj.w_q.rows() != w_lift.cols() || w_v.rows() != proj.d_k() || w_out.rows() != w_v.cols() + c + 2 ||
        w_out.cols() != c || static_cast<int>(b_out.size()) != c) {
        throw ShapeError("denoisers", "micro denoiser parameter shapes are inconsistent");
    }
    proj.validate();
    bool finite = w_lift.all_finite() && w_v.all_finite() && w_out.all_finite();
    for (double x : b_lift) {
        finite = finite && std::isfinite(x);
    }
    for (double x : b_out) {
        finite = finite && std::isfinite(x);
    }
    if (!finite) {
        throw NonFiniteError("denoisers", "non-finite micro denoiser parameters");
    }
}

MicroParams zero_micro_params(const MicroDims& d) {
    MicroParams p;
    p.channels = d.channels;
    p.w_lift   = Matrix(d.channels + 2, d.d_f);
    p.b_lift.assign(static_cast<std::size_t>(d.d_f), 0.0);
    p.proj.w_q = Matrix(d.d_f, d.d_k);
    p.proj.w_k = Matrix(d.d_k, d.d_k);
    p.w_v      = Matrix(d.d_k, d.d_v);
    p.w_out    = Matrix(d.d_v + d.channels + 2, d.channels);
    p.b_out.assign(static_cast<std::size_t>(d.channels), 0.0);
    return p;
}

MicroParams init_micro_params(const MicroDims& dims, std::uint64_t seed, double scale) {
    MicroParams p = zero_micro_params(dims);
    Rng rng(seed, Stream::params);
    fill(p.w_lift, rng, scale);
    fill(p.proj.w_q, rng, scale);
    fill(p.proj.w_k, rng, scale);
    fill(p.w_v, rng, scale);
    fill(p.w_out, rng, scale);
    p.validate();
    return p;
}

Tensor3 mask_logit_bias(const Layout& layout, int height, int width, int tokens, double gamma) {
    Tensor3 bias(height, width, tokens);
    for (const auto& b : layout.boxes) {
        if (b.token_index < 0 || b.token_index >= tokens) {
            throw RangeError("denoisers", "layout box is not bound to a prompt token");
        }
        const BinaryMask m = rasterize(b, height, width);
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (m[i]) {
                bias[i * tokens + b.token_index] += gamma;
            }
        }
    }
    return bias;
}

Tensor3 micro_features(const Latent& z, const MicroParams& p) {
    if (z.depth() != p.channels) {
        throw ShapeError("denoisers", "micro denoiser expects " + std::to_string(p.channels) + " channels");
    }
    const int df = p.d_f(), c = p.channels;
    Tensor3 phi(z.height(), z.width(), df);
    std::vector<double> phi0(static_cast<std::size_t>(c) + 2);
    for (int r = 0; r < z.height(); ++r) {
        for (int col = 0; col < z.width(); ++col) {
            for (int ch = 0; ch < c; ++ch) {
                phi0[ch] = z.at(r, col, ch);
            }
            phi0[c]     = 2.0 * (col + 0.5) / z.width() - 1.0;
            phi0[c + 1] = 2.0 * (r + 0.5) / z.height() - 1.0;
            for (int f = 0; f < df; ++f) {
                double s = p.b_lift[f];
                for (int a = 0; a < c + 2; ++a) {
                    s += phi0[a] * p.w_lift(a, f);
                }
                phi.at(r, col, f) = s;
            }
        }
    }
    return phi;
}

DenoiserOutput micro_denoise(const Latent& z, const TokenSequence& tokens, const MicroParams& params,
                             const Tensor3* bias) {
    params.validate();
    if (!z.all_finite()) {
        throw NonFiniteError("denoisers", "non-finite latent");
    }
    HeadInputs h = head_inputs(z, tokens, params, bias);
    return {apply_head(h.rows, params, z.height(), z.width()), std::move(h.attn)};
}

MicroDenoiser::MicroDenoiser(MicroParams params, Shape latent, Branch branch, double gamma)
    : params_(std::move(params)), shape_(latent), branch_(branch), gamma_(gamma) {
    params_.validate();
    if (latent.depth != params_.channels) {
        throw ShapeError("denoisers", "micro denoiser channel count does not match latent shape");
    }
}

std::string MicroDenoiser::name() const { return branch_ == Branch::fidelity ? "micro-text" : "micro-spatial"; }

Tensor3 MicroDenoiser::bias_for(const TokenSequence& tokens, const Layout* cond) const {
    return mask_logit_bias(*cond, shape_.height, shape_.width, tokens.size(), gamma_);
}

DenoiserOutput MicroDenoiser::denoise(const Latent& z, int /*t*/, const TokenSequence& tokens,
                                      const Layout* cond) const {
    check_call(z, cond);
    if (branch_ == Branch::fidelity) {
        return micro_denoise(z, tokens, params_, nullptr);
    }
    const Tensor3 bias = bias_for(tokens, cond);
    return micro_denoise(z, tokens, params_, &bias);
}

Latent MicroDenoiser::attention_vjp(const Latent& z, int /*t*/, const TokenSequence& tokens, const Layout* cond,
                                    const Tensor3& cotangent) const {
    check_call(z, cond);
    const Tensor3 phi = micro_features(z, params_);
    Tensor3 g_phi;
    if (branch_ == Branch::fidelity) {
        g_phi = realcompo::attention_vjp(phi, tokens, params_.proj, cotangent, nullptr);
    } else {
        const Tensor3 bias = bias_for(tokens, cond);
        g_phi              = realcompo::attention_vjp(phi, tokens, params_.proj, cotangent, &bias);
    }
    // Only the channel rows of W_lift depend on z.
    Latent g(z.shape());
    const int c = params_.channels, df = params_.d_f();
    for (std::size_t i = 0; i < z.pixels(); ++i) {
        const auto gp = g_phi.pixel(i);
        for (int ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int f = 0; f < df; ++f) {
                s += params_.w_lift(ch, f) * gp[f];
            }
            g[i * c + ch] = s;
        }
    }
    return g;
}

std::vector<double> train_head(MicroParams& params, const MixtureSpec& data, const TokenSequence& tokens,
                               const NoiseSchedule& sched, const TrainOptions& opts) {
    params.validate();
    data.validate();
    if (data.shape.depth != params.channels) {
        throw ShapeError("denoisers", "training data channel count does not match the denoiser");
    }
    Rng rng(opts.seed, Stream::training);
    std::vector<double> history;
    const int c = params.channels;
    for (int it = 0; it < opts.iterations; ++it) {
        Matrix g_w(params.w_out.rows(), params.w_out.cols());
        std::vector<double> g_b(static_cast<std::size_t>(c), 0.0);
        double loss   = 0.0;
        double weight = 0.0;
        for (int b = 0; b < opts.batch; ++b) {
            const auto k   = rng.below(static_cast<std::uint32_t>(data.components.size()));
            const int t    = 1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(sched.steps())));
            Latent eps(data.shape);
            rng.fill_normal(eps);
            const Latent z        = forward_diffuse(data.components[k].mean, t, eps, sched);
            const HeadInputs h    = head_inputs(z, tokens, params, nullptr);
            const Latent pred     = apply_head(h.rows, params, z.height(), z.width());
            for (std::size_t i = 0; i < z.pixels(); ++i) {
                const auto row = h.rows.pixel(i);
                for (int ch = 0; ch < c; ++ch) {
                    const double e = pred[i * c + ch] - eps[i * c + ch];
                    loss += e * e;
                    for (int a = 0; a < h.rows.depth(); ++a) {
                        g_w(a, ch) += 2.0 * e * row[a];
                    }
                    g_b[ch] += 2.0 * e;
                }
            }
            weight += static_cast<double>(z.size());
        }
        for (std::size_t i = 0; i < g_w.data().size(); ++i) {
            params.w_out.data()[i] -= opts.lr * g_w.data()[i] / weight;
        }
        for (int ch = 0; ch < c; ++ch) {
            params.b_out[ch] -= opts.lr * g_b[ch] / weight;
        }
        history.push_back(loss / weight);
    }
    return history;
}

}  // namespace realcompo
