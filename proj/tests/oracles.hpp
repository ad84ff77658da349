#pragma once

// Independent reference implementations used by the tests. Each one is a
// plain loop over the defining formula and shares no code with the library
// beyond the container types.

#include <algorithm>
#include <cmath>
#include <vector>

#include "realcompo/attention.hpp"
#include "realcompo/conditions.hpp"
#include "realcompo/micro.hpp"
#include "realcompo/mixture.hpp"
#include "realcompo/tensor.hpp"

namespace oracle {

using namespace realcompo;

inline Latent forward(const Latent& x0, const Latent& eps, double ab) {
    Latent out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::sqrt(ab) * x0[i] + std::sqrt(1.0 - ab) * eps[i];
    }
    return out;
}

inline double ddim(double z, double eps, double ab_t, double ab_prev, double sigma = 0.0, double noise = 0.0) {
    const double x0 = (z - std::sqrt(1.0 - ab_t) * eps) / std::sqrt(ab_t);
    return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev - sigma * sigma) * eps + sigma * noise;
}

inline Latent ddim(const Latent& z, const Latent& eps, double ab_t, double ab_prev) {
    Latent out(z.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ddim(z[i], eps[i], ab_t, ab_prev);
    }
    return out;
}

inline BinaryMask rasterize(const Box& b, int h, int w) {
    BinaryMask m(h, w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const double x = (c + 0.5) / w, y = (r + 0.5) / h;
            m.set(r, c, x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1);
        }
    }
    return m;
}

// Softmax attention written out per pixel and token.
inline AttnMaps attention(const Tensor3& phi, const TokenSequence& tokens, const AttnProjection& proj,
                          const Tensor3* bias = nullptr) {
    const int n = tokens.size(), dk = proj.d_k(), df = proj.d_f();
    AttnMaps a(phi.height(), phi.width(), n);
    for (int r = 0; r < phi.height(); ++r) {
        for (int c = 0; c < phi.width(); ++c) {
            std::vector<double> logit(n);
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int k = 0; k < dk; ++k) {
                    double q = 0.0, key = 0.0;
                    for (int f = 0; f < df; ++f) {
                        q += phi.at(r, c, f) * proj.w_q(f, k);
                    }
                    for (int e = 0; e < dk; ++e) {
                        key += tokens.embeddings(j, e) * proj.w_k(e, k);
                    }
                    s += q * key;
                }
                logit[j] = s / std::sqrt(static_cast<double>(dk)) + (bias ? bias->at(r, c, j) : 0.0);
            }
            const double m = *std::max_element(logit.begin(), logit.end());
            double z       = 0.0;
            for (int j = 0; j < n; ++j) {
                z += std::exp(logit[j] - m);
            }
            for (int j = 0; j < n; ++j) {
                a.at(r, c, j) = std::exp(logit[j] - m) / z;
            }
        }
    }
    return a;
}

struct BoxToken {
    Box box;
    int token = 0;
};

inline double branch_loss(const AttnMaps& a, const std::vector<BoxToken>& boxes) {
    double loss = 0.0;
    for (const auto& b : boxes) {
        const BinaryMask m = oracle::rasterize(b.box, a.height(), a.width());
        double in = 0.0, all = 0.0;
        for (int r = 0; r < a.height(); ++r) {
            for (int c = 0; c < a.width(); ++c) {
                all += a.at(r, c, b.token);
                if (m.at(r, c)) {
                    in += a.at(r, c, b.token);
                }
            }
        }
        loss += 1.0 - in / std::max(all, 1e-12);
    }
    return loss;
}

// Mixture posterior by literal sums of Gaussian densities (no log-sum-exp);
// only usable at moderate distances.
inline std::vector<double> responsibilities(const Latent& z, double ab, const MixtureSpec& spec) {
    std::vector<double> p(spec.components.size());
    double total = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double d = z[i] - std::sqrt(ab) * spec.components[k].mean[i];
            d2 += d * d;
        }
        p[k] = spec.components[k].weight * std::exp(-d2 / (2.0 * (1.0 - ab)));
        total += p[k];
    }
    for (double& v : p) {
        v /= total;
    }
    return p;
}

inline Latent mixture_eps(const Latent& z, double ab, const MixtureSpec& spec) {
    const auto r = oracle::responsibilities(z, ab, spec);
    Latent eps(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        double x0 = 0.0;
        for (std::size_t k = 0; k < r.size(); ++k) {
            x0 += r[k] * spec.components[k].mean[i];
        }
        eps[i] = (z[i] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    }
    return eps;
}

// Object attention sum_k r_k blob_kj / max(1, sum_j blob_kj); background gets the rest.
inline AttnMaps mixture_attention(const Latent& z, double ab, const MixtureSpec& spec, const TokenSequence& tokens) {
    const auto r = oracle::responsibilities(z, ab, spec);
    AttnMaps a(z.height(), z.width(), tokens.size());
    for (int row = 0; row < z.height(); ++row) {
        for (int c = 0; c < z.width(); ++c) {
            double used = 0.0;
            for (std::size_t o = 0; o < spec.objects.size(); ++o) {
                const int j = tokens.find(spec.objects[o].name);
                double v    = 0.0;
                for (std::size_t k = 0; k < r.size(); ++k) {
                    double blobs = 0.0;
                    for (const auto& b : spec.components[k].blobs) {
                        blobs += b.at(row, c);
                    }
                    v += r[k] * spec.components[k].blobs[o].at(row, c) / std::max(1.0, blobs);
                }
                a.at(row, c, j) += v;
                used += v;
            }
            a.at(row, c, 0) += 1.0 - used;
        }
    }
    return a;
}

// Scalar forward pass of the micro denoiser.
inline DenoiserOutput micro(const Latent& z, const TokenSequence& tokens, const MicroParams& p,
                            const Tensor3* bias = nullptr) {
    const int h = z.height(), w = z.width(), ch = p.channels;
    const int df = p.d_f(), dk = p.d_k(), dv = p.d_v(), n = tokens.size();
    Tensor3 phi(h, w, df);
    std::vector<std::vector<double>> phi0(static_cast<std::size_t>(h) * w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            auto& v = phi0[static_cast<std::size_t>(r) * w + c];
            for (int k = 0; k < ch; ++k) {
                v.push_back(z.at(r, c, k));
            }
            v.push_back(2.0 * (c + 0.5) / w - 1.0);
            v.push_back(2.0 * (r + 0.5) / h - 1.0);
            for (int f = 0; f < df; ++f) {
                double s = p.b_lift[f];
                for (int a = 0; a < ch + 2; ++a) {
                    s += v[a] * p.w_lift(a, f);
                }
                phi.at(r, c, f) = s;
            }
        }
    }
    AttnMaps attn = attention(phi, tokens, p.proj, bias);
    Latent eps(z.shape());
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::vector<double> row;
            for (int v = 0; v < dv; ++v) {
                double o = 0.0;
                for (int j = 0; j < n; ++j) {
                    double val = 0.0;
                    for (int a = 0; a < dk; ++a) {
                        val += tokens.embeddings(j, a) * p.w_v(a, v);
                    }
                    o += attn.at(r, c, j) * val;
                }
                row.push_back(o);
            }
            for (double x : phi0[static_cast<std::size_t>(r) * w + c]) {
                row.push_back(x);
            }
            for (int k = 0; k < ch; ++k) {
                double s = p.b_out[k];
                for (std::size_t a = 0; a < row.size(); ++a) {
                    s += row[a] * p.w_out(static_cast<int>(a), k);
                }
                eps.at(r, c, k) = s;
            }
        }
    }
    return {eps, attn};
}

}  // namespace oracle
