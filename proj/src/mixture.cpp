#include "realcompo/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>

#include "realcompo/errors.hpp"
#include "realcompo/rng.hpp"

namespace realcompo {

namespace {

std::string singular_word(std::string w) {
    for (auto& ch : w) {
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    if (w.size() > 3 && w.back() == 's' && w[w.size() - 2] != 's') {
        w.pop_back();
    }
    return w;
}

double squared_distance(const Latent& z, double scale, const Latent& mu) {
    double d = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double e = z[i] - scale * mu[i];
        d += e * e;
    }
    return d;
}

double log_sum_exp(const std::vector<double>& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(mx)) {
        return mx;
    }
    double s = 0.0;
    for (double x : v) {
        s += std::exp(x - mx);
    }
    return mx + std::log(s);
}

double distance_to_box(const std::array<double, 2>& p, const Box& b) {
    const double dx = std::max({b.x0 - p[0], 0.0, p[0] - b.x1});
    const double dy = std::max({b.y0 - p[1], 0.0, p[1] - b.y1});
    return std::hypot(dx, dy);
}

void check_latent(const Latent& z, const MixtureSpec& spec) {
    if (z.shape() != spec.shape) {
        throw ShapeError("denoisers", "latent shape " + z.shape().str() + " does not match mixture " + spec.shape.str());
    }
    if (!z.all_finite()) {
        throw NonFiniteError("denoisers", "non-finite latent");
    }
}

void check_noise_level(double alpha_bar) {
    if (!(alpha_bar > 0.0 && alpha_bar < 1.0)) {
        throw RangeError("denoisers", "analytic denoiser needs 0 < alpha_bar < 1 (1 - alpha_bar = 0 has no score)");
    }
}

// Token column for every mixture object.
std::vector<int> object_tokens(const MixtureSpec& spec, const TokenSequence& tokens) {
    std::vector<int> cols;
    for (const auto& o : spec.objects) {
        const int j = tokens.find(o.name);
        if (j < 0) {
            throw RangeError("denoisers", "mixture object '" + o.name + "' has no prompt token");
        }
        cols.push_back(j);
    }
    return cols;
}

Latent render_mean(const MixtureSpec& spec, const MixtureComponent& comp) {
    Latent mean(spec.shape);
    for (std::size_t o = 0; o < spec.objects.size(); ++o) {
        const auto& color = spec.objects[o].color;
        const Grid& blob  = comp.blobs[o];
        for (std::size_t i = 0; i < spec.shape.pixels(); ++i) {
            for (int ch = 0; ch < spec.shape.depth; ++ch) {
                mean[i * spec.shape.depth + ch] += color[ch] * blob[i];
            }
        }
    }
    return mean;
}

}  // namespace

void MixtureSpec::validate() const {
    if (shape.size() == 0) {
        throw ShapeError("denoisers", "mixture has empty shape");
    }
    if (components.empty()) {
        throw ConfigError("denoisers", "mixture has no components");
    }
    double total = 0.0;
    for (const auto& c : components) {
        if (!(c.weight > 0.0)) {
            throw ConfigError("denoisers", "mixture weights must be positive");
        }
        total += c.weight;
        if (c.mean.shape() != shape || !c.mean.all_finite()) {
            throw ShapeError("denoisers", "component mean has wrong shape or non-finite entries");
        }
        if (c.blobs.size() != objects.size() || c.anchors.size() != objects.size() ||
            c.profiles.size() != objects.size()) {
            throw ConfigError("denoisers", "every component must place every object exactly once");
        }
        for (const auto& g : c.blobs) {
            if (g.height() != shape.height || g.width() != shape.width) {
                throw ShapeError("denoisers", "blob profile resolution does not match latent");
            }
        }
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("denoisers", "mixture weights must sum to 1");
    }
    for (const auto& o : objects) {
        if (static_cast<int>(o.color.size()) != shape.depth) {
            throw ShapeError("denoisers", "object color length must equal channel count");
        }
    }
}

void MixtureSpec::finalize() {
    for (auto& c : components) {
        c.profiles.assign(objects.size(), Grid(shape.height, shape.width));
        for (std::size_t i = 0; i < shape.pixels(); ++i) {
            double total = 0.0;
            for (const auto& b : c.blobs) {
                total += b[i];
            }
            const double norm = std::max(1.0, total);
            for (std::size_t o = 0; o < objects.size(); ++o) {
                c.profiles[o][i] = c.blobs[o][i] / norm;
            }
        }
    }
}

namespace {

const std::map<std::string, int>& vocabulary() {
    static const std::map<std::string, int> words{
        {"cube", 0}, {"apple", 0}, {"cat", 0},  {"car", 0},  {"tree", 1}, {"sofa", 1},
        {"leaf", 1}, {"frog", 1},  {"ball", 2}, {"dog", 2},  {"cup", 2},  {"bird", 2},
    };
    return words;
}

}  // namespace

bool is_blobworld_noun(const std::string& word) { return vocabulary().count(singular_word(word)) != 0; }

std::vector<double> blobworld_color(const std::string& name, int channels) {
    const auto& vocab     = vocabulary();
    const std::string key = singular_word(name);
    int channel           = 0;
    if (const auto it = vocab.find(key); it != vocab.end()) {
        channel = it->second;
    } else {
        channel = static_cast<int>(fnv1a64(key.data(), key.size()) % 3u);
    }
    std::vector<double> color(static_cast<std::size_t>(channels), 0.0);
    color[static_cast<std::size_t>(channel % channels)] = 1.0;
    return color;
}

Grid render_blob(int height, int width, double anchor_x, double anchor_y, double sigma_cells) {
    Grid g(height, width);
    const double cx = anchor_x * width - 0.5;
    const double cy = anchor_y * height - 0.5;
    const double k  = 1.0 / (2.0 * sigma_cells * sigma_cells);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const double d2 = (c - cx) * (c - cx) + (r - cy) * (r - cy);
            g.at(r, c)      = std::exp(-d2 * k);
        }
    }
    return g;
}

MixtureSpec make_blobworld(const std::vector<std::string>& objects, const BlobworldParams& params) {
    if (objects.empty() || static_cast<int>(objects.size()) > kMaxBlobworldObjects) {
        throw ConfigError("denoisers", "blobworld scenes hold 1 to " + std::to_string(kMaxBlobworldObjects) + " objects");
    }
    if (params.height < 1 || params.width < 1 || params.channels < 1 || params.anchor_grid < 1 ||
        !(params.blob_radius > 0.0)) {
        throw ConfigError("denoisers", "invalid blobworld parameters");
    }
    MixtureSpec spec;
    spec.shape = Shape{params.height, params.width, params.channels};
    for (const auto& name : objects) {
        spec.objects.push_back({name, blobworld_color(name, params.channels)});
    }
    std::vector<std::array<double, 2>> anchors;
    for (int ay = 0; ay < params.anchor_grid; ++ay) {
        for (int ax = 0; ax < params.anchor_grid; ++ax) {
            anchors.push_back({(ax + 0.5) / params.anchor_grid, (ay + 0.5) / params.anchor_grid});
        }
    }
    const double sigma = params.blob_radius / 2.0;
    std::vector<Grid> blob_at;
    for (const auto& a : anchors) {
        blob_at.push_back(render_blob(params.height, params.width, a[0], a[1], sigma));
    }
    // Enumerate ordered placements at distinct anchors.
    std::vector<std::size_t> slot(objects.size(), 0);
    const std::size_t na = anchors.size();
    while (true) {
        std::set<std::size_t> used(slot.begin(), slot.end());
        if (used.size() == slot.size()) {
            MixtureComponent comp;
            for (std::size_t o = 0; o < objects.size(); ++o) {
                comp.blobs.push_back(blob_at[slot[o]]);
                comp.anchors.push_back(anchors[slot[o]]);
            }
            comp.mean = render_mean(spec, comp);
            spec.components.push_back(std::move(comp));
        }
        std::size_t o = 0;
        while (o < slot.size() && ++slot[o] == na) {
            slot[o++] = 0;
        }
        if (o == slot.size()) {
            break;
        }
    }
    if (spec.components.empty()) {
        throw ConfigError("denoisers", "anchor grid too small for the number of objects");
    }
    const double w = 1.0 / static_cast<double>(spec.components.size());
    for (auto& c : spec.components) {
        c.weight = w;
    }
    spec.finalize();
    spec.validate();
    return spec;
}

Restriction restrict_to_layout(const MixtureSpec& text, const Layout& layout, bool confine) {
    text.validate();
    Restriction out;
    const std::size_t n_obj = text.objects.size();
    std::vector<const Box*> box_of(n_obj, nullptr);
    for (std::size_t o = 0; o < n_obj; ++o) {
        for (const auto& b : layout.boxes) {
            if (singular_word(b.label) == singular_word(text.objects[o].name)) {
                box_of[o] = &b;
                break;
            }
        }
    }
    // Feasible anchors per boxed object.
    std::vector<std::set<std::array<double, 2>>> feasible(n_obj);
    for (std::size_t o = 0; o < n_obj; ++o) {
        if (box_of[o] == nullptr) {
            continue;
        }
        std::set<std::array<double, 2>> all;
        for (const auto& c : text.components) {
            all.insert(c.anchors[o]);
        }
        for (const auto& a : all) {
            if (box_of[o]->contains(a[0], a[1])) {
                feasible[o].insert(a);
            }
        }
        if (feasible[o].empty()) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& a : all) {
                best = std::min(best, distance_to_box(a, *box_of[o]));
            }
            for (const auto& a : all) {
                if (distance_to_box(a, *box_of[o]) <= best + 1e-12) {
                    feasible[o].insert(a);
                }
            }
            out.warnings.push_back("no anchor inside the box of '" + text.objects[o].name +
                                   "'; using the nearest anchor");
        }
    }
    auto admissible = [&](const MixtureComponent& c) {
        for (std::size_t o = 0; o < n_obj; ++o) {
            if (box_of[o] != nullptr && feasible[o].count(c.anchors[o]) == 0) {
                return false;
            }
        }
        return true;
    };
    std::vector<std::size_t> keep;
    for (std::size_t k = 0; k < text.components.size(); ++k) {
        if (admissible(text.components[k])) {
            keep.push_back(k);
        }
    }
    if (keep.empty()) {
        // Feasible sets conflict (e.g. two objects whose only anchor coincides).
        double best = std::numeric_limits<double>::infinity();
        std::vector<double> cost(text.components.size(), 0.0);
        for (std::size_t k = 0; k < text.components.size(); ++k) {
            for (std::size_t o = 0; o < n_obj; ++o) {
                if (box_of[o] != nullptr) {
                    cost[k] += distance_to_box(text.components[k].anchors[o], *box_of[o]);
                }
            }
            best = std::min(best, cost[k]);
        }
        for (std::size_t k = 0; k < cost.size(); ++k) {
            if (cost[k] <= best + 1e-12) {
                keep.push_back(k);
            }
        }
        out.warnings.push_back("layout infeasible for the testbed anchors; using the closest placements");
    }
    out.spec.shape   = text.shape;
    out.spec.objects = text.objects;
    double total     = 0.0;
    for (std::size_t k : keep) {
        total += text.components[k].weight;
    }
    std::vector<BinaryMask> masks(n_obj);
    if (confine) {
        for (std::size_t o = 0; o < n_obj; ++o) {
            if (box_of[o] != nullptr) {
                masks[o] = rasterize(*box_of[o], text.shape.height, text.shape.width);
            }
        }
    }
    for (std::size_t k : keep) {
        MixtureComponent c = text.components[k];
        c.weight /= total;
        if (confine) {
            for (std::size_t o = 0; o < n_obj; ++o) {
                if (box_of[o] == nullptr) {
                    continue;
                }
                for (std::size_t i = 0; i < c.blobs[o].size(); ++i) {
                    if (!masks[o][i]) {
                        c.blobs[o][i] = 0.0;
                    }
                }
            }
            c.mean = render_mean(out.spec, c);
        }
        out.spec.components.push_back(std::move(c));
    }
    out.spec.finalize();
    out.spec.validate();
    return out;
}

std::vector<double> responsibilities(const Latent& z, double alpha_bar, const MixtureSpec& spec) {
    check_latent(z, spec);
    check_noise_level(alpha_bar);
    const double scale = std::sqrt(alpha_bar);
    const double inv   = 1.0 / (2.0 * (1.0 - alpha_bar));
    std::vector<double> logits(spec.components.size());
    for (std::size_t k = 0; k < spec.components.size(); ++k) {
        const auto& c = spec.components[k];
        logits[k]     = std::log(c.weight) - squared_distance(z, scale, c.mean) * inv;
    }
    const double lse = log_sum_exp(logits);
    for (auto& l : logits) {
        l = std::exp(l - lse);
    }
    return logits;
}

Latent analytic_eps(const Latent& z, double alpha_bar, const MixtureSpec& spec) {
    const auto r = responsibilities(z, alpha_bar, spec);
    Latent x0(spec.shape);
    for (std::size_t k = 0; k < r.size(); ++k) {
        if (r[k] == 0.0) {
            continue;
        }
        const auto& mu = spec.components[k].mean;
        for (std::size_t i = 0; i < x0.size(); ++i) {
            x0[i] += r[k] * mu[i];
        }
    }
    const double sa = std::sqrt(alpha_bar);
    const double sn = std::sqrt(1.0 - alpha_bar);
    Latent eps(spec.shape);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        eps[i] = (z[i] - sa * x0[i]) / sn;
    }
    return eps;
}

Latent analytic_eps(const Latent& z, int t, const MixtureSpec& spec, const NoiseSchedule& sched) {
    sched.check_step(t);
    return analytic_eps(z, sched.alpha_bar(t), spec);
}

AttnMaps analytic_attention(const Latent& z, double alpha_bar, const MixtureSpec& spec, const TokenSequence& tokens) {
    const auto cols = object_tokens(spec, tokens);
    const auto r    = responsibilities(z, alpha_bar, spec);
    const int h = spec.shape.height, w = spec.shape.width;
    AttnMaps attn(h, w, tokens.size());
    for (std::size_t k = 0; k < r.size(); ++k) {
        if (r[k] == 0.0) {
            continue;
        }
        const auto& comp = spec.components[k];
        for (std::size_t o = 0; o < cols.size(); ++o) {
            const Grid& p = comp.profiles[o];
            for (std::size_t i = 0; i < p.size(); ++i) {
                attn.at(i, cols[o]) += r[k] * p[i];
            }
        }
    }
    for (std::size_t i = 0; i < attn.pixels(); ++i) {
        double s = 0.0;
        for (int j = 1; j < attn.tokens(); ++j) {
            s += attn.at(i, j);
        }
        attn.at(i, 0) = std::max(0.0, 1.0 - s);
    }
    return attn;
}

Latent analytic_attention_vjp(const Latent& z, double alpha_bar, const MixtureSpec& spec,
                              const TokenSequence& tokens, const Tensor3& cotangent) {
    const auto cols = object_tokens(spec, tokens);
    if (cotangent.shape() != Shape{spec.shape.height, spec.shape.width, tokens.size()}) {
        throw ShapeError("denoisers", "attention cotangent shape " + cotangent.shape().str() + " does not match maps");
    }
    const auto r = responsibilities(z, alpha_bar, spec);
    const int n  = tokens.size();
    // dA_{i,col(o)}/dr_k = P_{k,o}(i); dA_{i,0}/dr_k = -sum_o P_{k,o}(i).
    std::vector<double> g_r(r.size(), 0.0);
    for (std::size_t k = 0; k < r.size(); ++k) {
        const auto& comp = spec.components[k];
        double s         = 0.0;
        for (std::size_t o = 0; o < cols.size(); ++o) {
            const Grid& p = comp.profiles[o];
            for (std::size_t i = 0; i < p.size(); ++i) {
                s += (cotangent[i * n + cols[o]] - cotangent[i * n]) * p[i];
            }
        }
        g_r[k] = s;
    }
    double mean_g = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
        mean_g += r[k] * g_r[k];
    }
    // logit_k = log w_k - |z - sqrt(abar) mu_k|^2 / (2 (1 - abar))
    const double scale = std::sqrt(alpha_bar);
    const double inv   = 1.0 / (1.0 - alpha_bar);
    Latent grad(spec.shape);
    for (std::size_t k = 0; k < r.size(); ++k) {
        const double g_logit = r[k] * (g_r[k] - mean_g);
        if (g_logit == 0.0) {
            continue;
        }
        const auto& mu = spec.components[k].mean;
        for (std::size_t i = 0; i < grad.size(); ++i) {
            grad[i] -= g_logit * (z[i] - scale * mu[i]) * inv;
        }
    }
    return grad;
}

double mixture_log_density(const Latent& z, double alpha_bar, const MixtureSpec& spec) {
    check_latent(z, spec);
    check_noise_level(alpha_bar);
    const double scale = std::sqrt(alpha_bar);
    const double var   = 1.0 - alpha_bar;
    std::vector<double> terms;
    for (const auto& c : spec.components) {
        terms.push_back(std::log(c.weight) - squared_distance(z, scale, c.mean) / (2.0 * var));
    }
    return log_sum_exp(terms) - 0.5 * spec.dim() * std::log(2.0 * std::numbers::pi * var);
}

double smoothed_log_likelihood(const Latent& x, const MixtureSpec& spec, double bandwidth) {
    check_latent(x, spec);
    if (!(bandwidth > 0.0)) {
        throw RangeError("denoisers", "bandwidth must be positive");
    }
    const double var = bandwidth * bandwidth;
    std::vector<double> terms;
    for (const auto& c : spec.components) {
        terms.push_back(std::log(c.weight) - squared_distance(x, 1.0, c.mean) / (2.0 * var));
    }
    return log_sum_exp(terms) - 0.5 * spec.dim() * std::log(2.0 * std::numbers::pi * var);
}

Latent gaussian_eps(const Latent& z, double alpha_bar, const Latent& mean, double variance) {
    require_same_shape(z, mean, "gaussian_eps");
    check_noise_level(alpha_bar);
    const double sa    = std::sqrt(alpha_bar);
    const double denom = alpha_bar * variance + 1.0 - alpha_bar;
    const double sn    = std::sqrt(1.0 - alpha_bar);
    Latent eps(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        eps[i] = sn * (z[i] - sa * mean[i]) / denom;
    }
    return eps;
}

}  // namespace realcompo
