#include "realcompo/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "realcompo/errors.hpp"
#include "realcompo/io.hpp"
#include "realcompo/rng.hpp"

namespace realcompo {

using nlohmann::json;

const char* to_string(DenoiserKind k) { return k == DenoiserKind::analytic ? "analytic" : "micro"; }

DenoiserKind parse_denoiser_kind(const std::string& s) {
    if (s == "analytic") {
        return DenoiserKind::analytic;
    }
    if (s == "micro") {
        return DenoiserKind::micro;
    }
    throw ConfigError("pipeline", "unknown denoiser kind '" + s + "' (expected analytic|micro)");
}

const char* to_string(ConditionSource s) {
    switch (s) {
    case ConditionSource::stub: return "stub";
    case ConditionSource::llm: return "llm";
    case ConditionSource::layout: return "layout";
    case ConditionSource::keypoints: return "keypoints";
    case ConditionSource::segmentation: return "segmentation";
    }
    return "?";
}

ConditionSource parse_condition_source(const std::string& s) {
    for (auto c : {ConditionSource::stub, ConditionSource::llm, ConditionSource::layout, ConditionSource::keypoints,
                   ConditionSource::segmentation}) {
        if (s == to_string(c)) {
            return c;
        }
    }
    throw ConfigError("pipeline",
                      "unknown condition source '" + s + "' (expected stub|llm|layout|keypoints|segmentation)");
}

std::vector<std::uint64_t> RunConfig::seed_list() const {
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(std::max(num_seeds, 0)));
    std::iota(seeds.begin(), seeds.end(), first_seed);
    return seeds;
}

void RunConfig::validate() const {
    if (schedule.steps < 1 || schedule.train_steps < schedule.steps) {
        throw ConfigError("pipeline", "schedule needs 1 <= steps <= train_steps");
    }
    if (!(schedule.eta >= 0.0)) {
        throw ConfigError("pipeline", "schedule eta must be >= 0");
    }
    if (t0 < -1 || t0 > schedule.steps) {
        throw ConfigError("pipeline", "t0 must lie in [0, T]");
    }
    if (testbed.height < 1 || testbed.width < 1 || testbed.channels < 1 || testbed.height > 32 ||
        testbed.width > 32) {
        throw ConfigError("pipeline", "testbed dimensions must lie in [1, 32]");
    }
    if (testbed.anchor_grid < 1 || !(testbed.blob_radius > 0.0)) {
        throw ConfigError("pipeline", "testbed anchor_grid and blob_radius must be positive");
    }
    if (micro.dims.channels != testbed.channels) {
        throw ConfigError("pipeline", "micro denoiser channels must equal testbed channels");
    }
    if (micro.dims.d_f < 1 || micro.dims.d_k < 1 || micro.dims.d_v < 1) {
        throw ConfigError("pipeline", "micro denoiser dimensions must be positive");
    }
    if (num_seeds < 1) {
        throw ConfigError("pipeline", "seed count must be >= 1");
    }
    if (!(realism_bandwidth > 0.0)) {
        throw ConfigError("pipeline", "realism bandwidth must be positive");
    }
    for (double b : betas) {
        if (!(b >= 0.0 && b <= 1.0)) {
            throw ConfigError("pipeline", "beta values must lie in [0, 1]");
        }
    }
    if (condition.source != ConditionSource::stub && condition.source != ConditionSource::llm &&
        condition.path.empty()) {
        throw ConfigError("pipeline", std::string("condition source '") + to_string(condition.source) +
                                          "' needs a path");
    }
    balancer.validate();
    gate.validate();
    if (condition.source == ConditionSource::llm) {
        llm.validate();
    }
}

namespace {

[[noreturn]] void rethrow_at_step(int t) {
    const std::string where = "step " + std::to_string(t) + ": ";
    try {
        throw;
    } catch (const ParseError&) {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError(e.module(), where + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(e.module(), where + e.what());
    } catch (const RangeError& e) {
        throw RangeError(e.module(), where + e.what());
    } catch (const NonFiniteError& e) {
        throw NonFiniteError(e.module(), where + e.what());
    } catch (const Error& e) {
        throw Error(e.module(), where + e.what());
    }
}

double mean_of(const Grid& g) { return g.size() == 0 ? 0.0 : g.sum() / static_cast<double>(g.size()); }

void dump_diagnostics(const std::string& dir, int t, const Latent& z, const Latent& eps) {
    if (dir.empty()) {
        return;
    }
    TensorArchive a;
    const std::vector<std::uint64_t> dims{static_cast<std::uint64_t>(z.height()),
                                          static_cast<std::uint64_t>(z.width()),
                                          static_cast<std::uint64_t>(z.depth())};
    a["z"]   = {dims, z.data()};
    a["eps"] = {dims, eps.data()};
    write_archive(fs::path(dir) / ("diagnostics-t" + std::to_string(t) + ".rct"), a);
}

std::size_t count_non_finite(const Latent& z) {
    return static_cast<std::size_t>(
        std::count_if(z.data().begin(), z.data().end(), [](double v) { return !std::isfinite(v); }));
}

void bind_layout(Layout& layout, const TokenSequence& tokens) {
    for (const auto& b : layout.boxes) {
        if (b.token_index == 0 || b.token_index >= tokens.size()) {
            throw RangeError("pipeline", "condition refers to token " + std::to_string(b.token_index) +
                                             " but the prompt has " + std::to_string(tokens.size() - 1) +
                                             " content tokens");
        }
    }
    bind_tokens(layout, tokens);
}

}  // namespace

Layout resolve_condition(const RunConfig& cfg, std::vector<std::string>& warnings) {
    const ConditionConfig& c = cfg.condition;
    switch (c.source) {
    case ConditionSource::stub:
    case ConditionSource::llm: {
        auto g = generate_layout(cfg.prompt, c.source == ConditionSource::stub ? LayoutBackend::stub : LayoutBackend::llm,
                                 cfg.llm);
        warnings.insert(warnings.end(), g.warnings.begin(), g.warnings.end());
        return g.layout;
    }
    case ConditionSource::layout: {
        Layout layout = read_layout(c.path);
        for (auto& b : layout.boxes) {
            b = normalize_box(b, warnings);
        }
        return layout;
    }
    case ConditionSource::keypoints:
        return transfer(read_keypoints(c.path), c.keypoint_pad);
    case ConditionSource::segmentation: {
        const SegmentationMap seg = read_pgm(c.path);
        Layout layout = c.labels.empty() ? transfer(seg) : transfer(seg, c.labels);
        for (auto& b : layout.boxes) {
            b.label.clear();  // labels are token indices
        }
        return layout;
    }
    }
    throw ConfigError("pipeline", "unhandled condition source");
}

Scene build_scene(const RunConfig& cfg, Layout layout) {
    Scene scene;
    scene.tokens = TokenSequence::from_prompt(cfg.prompt, cfg.micro.dims.d_k);
    if (scene.tokens.size() < 2) {
        throw ConfigError("pipeline", "prompt has no content words");
    }
    bind_layout(layout, scene.tokens);
    scene.layout = std::move(layout);
    std::vector<std::string> objects;
    for (const auto& b : scene.layout.boxes) {
        objects.push_back(scene.tokens.tokens[b.token_index]);
    }
    if (static_cast<int>(objects.size()) > kMaxBlobworldObjects) {
        throw ConfigError("pipeline", "the blobworld testbed holds at most " + std::to_string(kMaxBlobworldObjects) +
                                          " objects; the condition has " + std::to_string(objects.size()));
    }
    scene.text_spec = make_blobworld(objects, cfg.testbed);
    return scene;
}

Scene build_scene(const RunConfig& cfg) {
    cfg.validate();
    std::vector<std::string> warnings;
    Layout layout = resolve_condition(cfg, warnings);
    Scene scene   = build_scene(cfg, std::move(layout));
    scene.warnings.insert(scene.warnings.begin(), warnings.begin(), warnings.end());
    return scene;
}

DenoiserPair make_denoisers(const RunConfig& cfg, const Scene& scene, const NoiseSchedule& sched) {
    if (cfg.denoiser == DenoiserKind::analytic) {
        return {std::make_shared<AnalyticDenoiser>(AnalyticDenoiser::fidelity(scene.text_spec, sched)),
                std::make_shared<AnalyticDenoiser>(AnalyticDenoiser::spatial(scene.text_spec, sched, cfg.confine))};
    }
    MicroParams params = cfg.micro.params_path.empty()
                             ? init_micro_params(cfg.micro.dims, cfg.micro.param_seed, cfg.micro.init_scale)
                             : read_micro_params(cfg.micro.params_path);
    if (params.d_k() != scene.tokens.dim()) {
        throw ConfigError("pipeline", "micro denoiser key dimension does not match the token embeddings");
    }
    if (cfg.micro.train_iterations > 0) {
        TrainOptions opts;
        opts.iterations = cfg.micro.train_iterations;
        opts.seed       = cfg.micro.param_seed;
        train_head(params, scene.text_spec, scene.tokens, sched, opts);
    }
    const Shape shape = scene.text_spec.shape;
    return {std::make_shared<MicroDenoiser>(params, shape, Branch::fidelity, cfg.micro.mask_bias),
            std::make_shared<MicroDenoiser>(params, shape, Branch::spatial, cfg.micro.mask_bias)};
}

Rollout rollout(const Denoiser& text, const Denoiser& spatial, const TokenSequence& tokens, const Layout& layout,
                const NoiseSchedule& sched, const RolloutOptions& opts) {
    const int T  = sched.steps();
    const int t0 = opts.t0 < 0 ? T : opts.t0;
    if (t0 > T) {
        throw ConfigError("pipeline", "t0 exceeds the step count");
    }
    if (text.latent_shape() != spatial.latent_shape()) {
        throw ShapeError("pipeline", "branch denoisers disagree on the latent shape");
    }
    opts.balancer.validate();
    layout.validate(tokens.size());
    const Shape shape = spatial.latent_shape();

    Rollout out;
    Latent z(shape);
    Rng(opts.seed, Stream::initial_latent).fill_normal(z);
    out.coe = init_coe(shape.height, shape.width, opts.seed);
    Rng noise_rng(opts.seed, Stream::ddim_noise);
    const auto masks = layout_masks(layout, shape.height, shape.width);

    for (int t = T; t >= 1; --t) {
        if (opts.observer) {
            opts.observer(t, z);
        }
        const auto start = std::chrono::steady_clock::now();
        Latent noise;
        const Latent* noise_ptr = nullptr;
        if (sched.sigma(t) > 0.0) {
            noise = Latent(shape);
            noise_rng.fill_normal(noise);
            noise_ptr = &noise;
        }
        Latent eps;
        try {
            const DenoiserOutput sp = spatial.denoise(z, t, tokens, &layout);
            if (t > t0) {
                eps = sp.eps;
                if (opts.record_noise) {
                    out.noise.push_back({t, false, eps, sp.eps});
                }
            } else {
                const DenoiserOutput tx = text.denoise(z, t, tokens, nullptr);
                const StepContext ctx{z, t, tx.eps, sp.eps, text, spatial, tokens, layout, masks, sched, noise_ptr};
                StepRecord rec;
                rec.t = t;
                StepGrids grids;
                if (opts.balancer.inner_updates == 0) {
                    rec.loss = evaluate_alignment(ctx, out.coe).loss;
                } else {
                    const double rho = opts.balancer.rho_at(t, T);
                    for (int u = 0; u < opts.balancer.inner_updates; ++u) {
                        const CoeGradient g = coe_gradient(ctx, out.coe, opts.balancer.gradient_mode,
                                                           opts.balancer.jacobian_mode);
                        if (u == 0) {
                            rec.loss            = g.eval.loss;
                            rec.grad_l2_text    = g.text.l2_norm();
                            rec.grad_l2_spatial = g.spatial.l2_norm();
                            grids.grad_text     = g.text;
                            grids.grad_spatial  = g.spatial;
                        }
                        out.coe = update_coe(out.coe, g.text, g.spatial, rho);
                    }
                }
                const XiMap xi   = softmax_xi(out.coe);
                eps              = balance_noise(xi, tx.eps, sp.eps);
                rec.mean_xi_text = mean_of(xi.text);
                if (opts.record_noise) {
                    out.noise.push_back({t, true, eps, sp.eps});
                }
                if (opts.record_grids) {
                    grids.t       = t;
                    grids.xi_text    = xi.text;
                    grids.xi_spatial = xi.spatial;
                    out.grids.push_back(std::move(grids));
                }
                rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
                out.trajectory.push_back(rec);
            }
            Latent next = ddim_step(z, eps, t, sched, noise_ptr);
            if (const std::size_t bad = count_non_finite(next); bad != 0) {
                dump_diagnostics(opts.diagnostics_dir, t, z, eps);
                throw NonFiniteError("pipeline", std::to_string(bad) + " non-finite latent entries after the update" +
                                                     (opts.diagnostics_dir.empty()
                                                          ? std::string()
                                                          : "; state dumped to " + opts.diagnostics_dir));
            }
            z = std::move(next);
        } catch (const Error&) {
            rethrow_at_step(t);
        }
    }
    if (opts.observer) {
        opts.observer(0, z);
    }
    out.sample = std::move(z);
    return out;
}

std::vector<ObjectMetrics> in_box_mass(const Latent& sample, const Layout& layout, const TokenSequence& tokens) {
    std::vector<ObjectMetrics> out;
    for (const auto& b : layout.boxes) {
        ObjectMetrics m;
        m.token_index = b.token_index;
        m.object      = b.token_index >= 0 && b.token_index < tokens.size() ? tokens.tokens[b.token_index] : b.label;
        const auto color = blobworld_color(m.object, sample.depth());
        const BinaryMask mask = rasterize(b, sample.height(), sample.width());
        double inside = 0.0, total = 0.0;
        for (std::size_t i = 0; i < sample.pixels(); ++i) {
            double s = 0.0;
            for (int c = 0; c < sample.depth(); ++c) {
                s += color[c] * sample[i * sample.depth() + c];
            }
            s = std::max(s, 0.0);
            total += s;
            if (mask[i]) {
                inside += s;
            }
        }
        if (total <= 1e-12) {
            m.zero_signal = true;
        } else {
            m.in_box_mass = inside / total;
        }
        out.push_back(m);
    }
    return out;
}

Metrics evaluate(const Latent& sample, const Layout& layout, const TokenSequence& tokens, const Denoiser& text,
                 const Denoiser& spatial, const MixtureSpec* text_spec, double bandwidth) {
    if (!sample.all_finite()) {
        throw NonFiniteError("pipeline", "cannot evaluate a non-finite sample");
    }
    Metrics m;
    m.objects             = in_box_mass(sample, layout, tokens);
    const AttnMaps a_text = text.denoise(sample, 1, tokens, nullptr).attn;
    const AttnMaps a_sp   = spatial.denoise(sample, 1, tokens, &layout).attn;
    for (std::size_t b = 0; b < layout.boxes.size(); ++b) {
        const Box& box        = layout.boxes[b];
        const BinaryMask mask = rasterize(box, sample.height(), sample.width());
        auto& o               = m.objects[b];
        o.attn_in_box_text    = in_box_ratio(a_text, mask, box.token_index);
        o.attn_in_box_spatial = in_box_ratio(a_sp, mask, box.token_index);
        o.attn_in_box         = 0.5 * (o.attn_in_box_text + o.attn_in_box_spatial);
        m.mean_in_box_mass += o.in_box_mass;
        m.mean_attn_in_box += o.attn_in_box;
    }
    m.mean_in_box_mass /= static_cast<double>(layout.boxes.size());
    m.mean_attn_in_box /= static_cast<double>(layout.boxes.size());
    if (text_spec != nullptr) {
        m.realism_proxy = smoothed_log_likelihood(sample, *text_spec, bandwidth);
    }
    return m;
}

RolloutOptions rollout_options(const RunConfig& cfg) {
    RolloutOptions o;
    o.seed         = cfg.seed;
    o.t0           = cfg.resolved_t0();
    o.balancer     = cfg.balancer;
    o.record_grids = cfg.export_grids;
    return o;
}

RunResult run(const RunConfig& cfg, const Scene& scene, const RolloutOptions* overrides) {
    cfg.validate();
    const NoiseSchedule sched  = NoiseSchedule::linear(cfg.schedule);
    const DenoiserPair pair    = make_denoisers(cfg, scene, sched);
    const RolloutOptions opts  = overrides != nullptr ? *overrides : rollout_options(cfg);
    RunResult r{scene, rollout(*pair.text, *pair.spatial, scene.tokens, scene.layout, sched, opts), {}};
    r.metrics = evaluate(r.rollout.sample, scene.layout, scene.tokens, *pair.text, *pair.spatial, &scene.text_spec,
                         cfg.realism_bandwidth);
    return r;
}

RunResult run(const RunConfig& cfg, const RolloutOptions* overrides) { return run(cfg, build_scene(cfg), overrides); }

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads) : std::thread::hardware_concurrency();
    workers             = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t failed_at = n;
    std::exception_ptr failure;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (i < failed_at) {
                    failed_at = i;
                    failure   = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back(work);
    }
    for (auto& th : pool) {
        th.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            rank[idx[k]] = r;
        }
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ShapeError("pipeline", "spearman needs two equal-length series of length >= 2");
    }
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

SweepResult sweep_beta(const RunConfig& cfg, const std::vector<double>& betas, const std::vector<std::uint64_t>& seeds) {
    if (betas.empty() || seeds.empty()) {
        throw ConfigError("pipeline", "beta sweep needs at least one beta and one seed");
    }
    const Scene scene         = build_scene(cfg);
    const NoiseSchedule sched = NoiseSchedule::linear(cfg.schedule);
    const AnalyticDenoiser text = AnalyticDenoiser::fidelity(scene.text_spec, sched);
    std::vector<GatedSpatialDenoiser> gated;
    for (double beta : betas) {
        GateConfig gate = cfg.gate;
        gate.beta       = beta;
        gated.emplace_back(scene.text_spec, sched, gate, cfg.confine);
    }
    SweepResult result;
    result.rows.resize(betas.size());
    for (std::size_t b = 0; b < betas.size(); ++b) {
        result.rows[b].beta = betas[b];
        result.rows[b].in_box_mass.assign(seeds.size(), 0.0);
        result.rows[b].realism.assign(seeds.size(), 0.0);
    }
    parallel_for(betas.size() * seeds.size(), cfg.threads, [&](std::size_t k) {
        const std::size_t b = k / seeds.size(), s = k % seeds.size();
        RolloutOptions opts;
        opts.seed = seeds[s];
        opts.t0   = 0;
        opts.balancer = cfg.balancer;
        const Rollout r  = rollout(text, gated[b], scene.tokens, scene.layout, sched, opts);
        const auto objs  = in_box_mass(r.sample, scene.layout, scene.tokens);
        double mass      = 0.0;
        for (const auto& o : objs) {
            mass += o.in_box_mass;
        }
        result.rows[b].in_box_mass[s] = mass / static_cast<double>(objs.size());
        result.rows[b].realism[s]     = smoothed_log_likelihood(r.sample, scene.text_spec, cfg.realism_bandwidth);
    });
    std::vector<double> bx, my;
    for (auto& row : result.rows) {
        const double n       = static_cast<double>(seeds.size());
        row.mean_in_box_mass = std::accumulate(row.in_box_mass.begin(), row.in_box_mass.end(), 0.0) / n;
        row.mean_realism     = std::accumulate(row.realism.begin(), row.realism.end(), 0.0) / n;
        bx.push_back(row.beta);
        my.push_back(row.mean_in_box_mass);
    }
    result.spearman = betas.size() >= 2 ? spearman(bx, my) : 0.0;
    return result;
}

AblationResult ablate(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) {
        throw ConfigError("pipeline", "ablation needs at least one seed");
    }
    const Scene scene         = build_scene(cfg);
    const NoiseSchedule sched = NoiseSchedule::linear(cfg.schedule);
    const DenoiserPair pair   = make_denoisers(cfg, scene, sched);
    AblationResult result;
    result.rows.resize(seeds.size());
    parallel_for(2 * seeds.size(), cfg.threads, [&](std::size_t k) {
        const std::size_t s = k / 2;
        const bool frozen   = (k % 2) == 1;
        RolloutOptions opts = rollout_options(cfg);
        opts.seed           = seeds[s];
        opts.record_grids   = false;
        if (frozen) {
            opts.balancer.inner_updates = 0;
        }
        Rollout r = rollout(*pair.text, *pair.spatial, scene.tokens, scene.layout, sched, opts);
        Metrics m = evaluate(r.sample, scene.layout, scene.tokens, *pair.text, *pair.spatial, &scene.text_spec,
                             cfg.realism_bandwidth);
        AblationRow& row = result.rows[s];
        row.seed         = seeds[s];
        if (frozen) {
            row.frozen            = std::move(m);
            row.frozen_sample     = std::move(r.sample);
            row.frozen_trajectory = std::move(r.trajectory);
        } else {
            row.dynamic            = std::move(m);
            row.dynamic_sample     = std::move(r.sample);
            row.dynamic_trajectory = std::move(r.trajectory);
        }
    });
    const double n = static_cast<double>(seeds.size());
    for (const auto& row : result.rows) {
        result.mean_attn_dynamic += row.dynamic.mean_attn_in_box / n;
        result.mean_attn_frozen += row.frozen.mean_attn_in_box / n;
        result.mean_mass_dynamic += row.dynamic.mean_in_box_mass / n;
        result.mean_mass_frozen += row.frozen.mean_in_box_mass / n;
        result.mean_realism_dynamic += row.dynamic.realism_proxy.value_or(0.0) / n;
        result.mean_realism_frozen += row.frozen.realism_proxy.value_or(0.0) / n;
    }
    return result;
}

json to_json(const StepRecord& r) {
    json j{{"t", r.t}, {"loss", r.loss}, {"mean_xi_text", r.mean_xi_text}, {"wall_ms", r.wall_ms}};
    if (r.grad_l2_text) {
        j["grad_l2_text"] = *r.grad_l2_text;
    }
    if (r.grad_l2_spatial) {
        j["grad_l2_spatial"] = *r.grad_l2_spatial;
    }
    return j;
}

json to_json(const Metrics& m) {
    json objects = json::array();
    for (const auto& o : m.objects) {
        objects.push_back({{"object", o.object},
                           {"token_index", o.token_index},
                           {"in_box_mass", o.in_box_mass},
                           {"zero_signal", o.zero_signal},
                           {"attn_in_box", o.attn_in_box},
                           {"attn_in_box_text", o.attn_in_box_text},
                           {"attn_in_box_spatial", o.attn_in_box_spatial}});
    }
    json j{{"objects", objects}, {"mean_in_box_mass", m.mean_in_box_mass}, {"mean_attn_in_box", m.mean_attn_in_box}};
    j["realism_proxy"] = m.realism_proxy ? json(*m.realism_proxy) : json(nullptr);
    return j;
}

json to_json(const SweepResult& s) {
    json rows = json::array();
    for (const auto& r : s.rows) {
        rows.push_back({{"beta", r.beta},
                        {"mean_in_box_mass", r.mean_in_box_mass},
                        {"mean_realism_proxy", r.mean_realism},
                        {"in_box_mass", r.in_box_mass},
                        {"realism_proxy", r.realism}});
    }
    return {{"rows", rows}, {"spearman_beta_in_box_mass", s.spearman}};
}

json to_json(const AblationResult& a) {
    json rows = json::array();
    for (const auto& r : a.rows) {
        rows.push_back({{"seed", r.seed}, {"dynamic", to_json(r.dynamic)}, {"frozen", to_json(r.frozen)}});
    }
    return {{"rows", rows},
            {"mean_attn_in_box", {{"dynamic", a.mean_attn_dynamic}, {"frozen", a.mean_attn_frozen},
                                  {"delta", a.mean_attn_dynamic - a.mean_attn_frozen}}},
            {"mean_in_box_mass", {{"dynamic", a.mean_mass_dynamic}, {"frozen", a.mean_mass_frozen},
                                  {"delta", a.mean_mass_dynamic - a.mean_mass_frozen}}},
            {"mean_realism_proxy", {{"dynamic", a.mean_realism_dynamic}, {"frozen", a.mean_realism_frozen},
                                    {"delta", a.mean_realism_dynamic - a.mean_realism_frozen}}}};
}

std::string trajectory_jsonl(const std::vector<StepRecord>& trajectory) {
    std::string out;
    for (const auto& r : trajectory) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

}  // namespace realcompo
