#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>

#include "config.hpp"
#include "realcompo/errors.hpp"
#include "realcompo/gradcheck.hpp"
#include "realcompo/io.hpp"
#include "realcompo/layoutgen.hpp"
#include "realcompo/pipeline.hpp"

namespace realcompo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> t0;
    std::optional<double> rho;
    std::optional<std::string> gradient_mode;
    std::optional<std::string> jacobian_mode;
    std::optional<std::string> out;
    std::optional<std::string> beta_list;
    std::optional<int> seeds;
};

// Exit with usage text: thrown by commands before any work is done.
struct UsageFailure {
    std::string message;
    const CLI::App* app;
};

void add_common_flags(CLI::App* sub, Overrides& o, bool config_required) {
    auto* c = sub->add_option("--config", o.config, "YAML run config");
    if (config_required) {
        c->required();
    }
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--t0", o.t0, "Steps t <= t0 are balanced; above it the spatial branch runs alone");
    sub->add_option("--rho", o.rho, "Coefficient update rate");
    sub->add_option("--gradient-mode", o.gradient_mode, "paper|full");
    sub->add_option("--jacobian-mode", o.jacobian_mode, "paper|consistent");
    sub->add_option("--out", o.out, "Output root directory");
    sub->add_option("--beta-list", o.beta_list, "Comma-separated gate strengths for sweep-beta");
    sub->add_option("--seeds", o.seeds, "Number of seeds for batched commands");
}

std::vector<double> parse_beta_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (item.find_first_not_of(" \t", used) != std::string::npos) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw ConfigError("cli", "--beta-list entry '" + item + "' is not a number");
        }
    }
    if (out.empty()) {
        throw ConfigError("cli", "--beta-list is empty");
    }
    return out;
}

RunConfig resolve(const Overrides& o, const CLI::App* app) {
    RunConfig cfg;
    if (!o.config.empty()) {
        if (!fs::is_regular_file(o.config)) {
            throw UsageFailure{"config file not found: " + o.config, app};
        }
        cfg = load_config(o.config);
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.t0) {
        cfg.t0 = *o.t0;
    }
    if (o.rho) {
        cfg.balancer.rho = *o.rho;
    }
    if (o.gradient_mode) {
        cfg.balancer.gradient_mode = parse_gradient_mode(*o.gradient_mode);
    }
    if (o.jacobian_mode) {
        cfg.balancer.jacobian_mode = parse_jacobian_mode(*o.jacobian_mode);
    }
    if (o.out) {
        cfg.out_dir = *o.out;
    }
    if (o.beta_list) {
        cfg.betas = parse_beta_list(*o.beta_list);
    }
    if (o.seeds) {
        cfg.num_seeds = *o.seeds;
    }
    cfg.validate();
    return cfg;
}

fs::path run_dir(const RunConfig& cfg, const std::string& kind) {
    const fs::path dir = fs::path(cfg.out_dir) / (kind + "-" + run_hash(cfg));
    fs::create_directories(dir);
    write_text(dir / "resolved-config.yaml", resolved_config_yaml(cfg));
    return dir;
}

void print_warnings(const std::vector<std::string>& warnings, std::ostream& err) {
    for (const auto& w : warnings) {
        err << json{{"warning", w}}.dump() << "\n";
    }
}

void write_sample(const fs::path& stem, const Latent& sample) {
    write_latent(stem.string() + ".rct", sample);
    write_png(stem.string() + ".png", sample);
}

void write_grid(const fs::path& stem, const Grid& g) {
    write_grid_csv(stem.string() + ".csv", g);
    write_png_heatmap(stem.string() + ".png", g);
}

std::string step_name(int t) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "t%03d", t);
    return buf;
}

int cmd_generate(const Overrides& o, const CLI::App* app, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = resolve(o, app);
    const Scene scene   = build_scene(cfg);
    print_warnings(scene.warnings, err);
    const RunResult res = run(cfg, scene);
    const fs::path dir  = run_dir(cfg, "run");
    write_text(dir / "layout.json", layout_to_json(scene.layout).dump(2) + "\n");
    write_sample(dir / "sample", res.rollout.sample);
    write_text(dir / "metrics.json", to_json(res.metrics).dump(2) + "\n");
    write_text(dir / "trajectory.jsonl", trajectory_jsonl(res.rollout.trajectory));
    for (const auto& g : res.rollout.grids) {
        write_grid(dir / "grids" / (step_name(g.t) + "-xi_text"), g.xi_text);
        if (g.grad_text.size() != 0) {
            write_grid(dir / "grids" / (step_name(g.t) + "-grad_text"), g.grad_text);
            write_grid(dir / "grids" / (step_name(g.t) + "-grad_spatial"), g.grad_spatial);
        }
    }
    out << json{{"run_dir", dir.string()},
                {"sample_digest", latent_digest(res.rollout.sample)},
                {"balanced_steps", res.rollout.trajectory.size()},
                {"metrics", to_json(res.metrics)}}
               .dump(2)
        << "\n";
    return kExitOk;
}

int cmd_sweep(const Overrides& o, const CLI::App* app, std::ostream& out) {
    const RunConfig cfg   = resolve(o, app);
    const SweepResult res = sweep_beta(cfg, cfg.betas, cfg.seed_list());
    const fs::path dir    = run_dir(cfg, "sweep");
    write_text(dir / "sweep.json", to_json(res).dump(2) + "\n");
    std::ostringstream csv;
    csv.precision(17);
    csv << "beta,mean_in_box_mass,mean_realism_proxy\n";
    for (const auto& r : res.rows) {
        csv << r.beta << "," << r.mean_in_box_mass << "," << r.mean_realism << "\n";
    }
    write_text(dir / "sweep.csv", csv.str());
    char line[160];
    out << "beta    in_box_mass  realism_proxy\n";
    for (const auto& r : res.rows) {
        std::snprintf(line, sizeof line, "%-7.3f %-12.4f %.3f\n", r.beta, r.mean_in_box_mass, r.mean_realism);
        out << line;
    }
    std::snprintf(line, sizeof line, "spearman(beta, in_box_mass) = %.4f over %d seeds\n", res.spearman,
                  cfg.num_seeds);
    out << line << "wrote " << (dir / "sweep.json").string() << "\n";
    return kExitOk;
}

int cmd_ablate(const Overrides& o, const CLI::App* app, std::ostream& out) {
    const RunConfig cfg      = resolve(o, app);
    const AblationResult res = ablate(cfg, cfg.seed_list());
    const fs::path dir       = run_dir(cfg, "ablate");
    write_text(dir / "ablation.json", to_json(res).dump(2) + "\n");
    for (const auto& r : res.rows) {
        const std::string s = "seed" + std::to_string(r.seed);
        write_sample(dir / "samples" / (s + "-dynamic"), r.dynamic_sample);
        write_sample(dir / "samples" / (s + "-frozen"), r.frozen_sample);
        write_text(dir / "trajectories" / (s + "-dynamic.jsonl"), trajectory_jsonl(r.dynamic_trajectory));
        write_text(dir / "trajectories" / (s + "-frozen.jsonl"), trajectory_jsonl(r.frozen_trajectory));
    }
    char line[160];
    out << "metric             dynamic     frozen      delta\n";
    std::snprintf(line, sizeof line, "attn_in_box        %-11.5f %-11.5f %+.5f\n", res.mean_attn_dynamic,
                  res.mean_attn_frozen, res.mean_attn_dynamic - res.mean_attn_frozen);
    out << line;
    std::snprintf(line, sizeof line, "in_box_mass        %-11.5f %-11.5f %+.5f\n", res.mean_mass_dynamic,
                  res.mean_mass_frozen, res.mean_mass_dynamic - res.mean_mass_frozen);
    out << line;
    std::snprintf(line, sizeof line, "realism_proxy      %-11.3f %-11.3f %+.3f\n", res.mean_realism_dynamic,
                  res.mean_realism_frozen, res.mean_realism_dynamic - res.mean_realism_frozen);
    out << line << "seeds: " << res.rows.size() << ", wrote " << (dir / "ablation.json").string() << "\n";
    return kExitOk;
}

struct GradcheckFlags {
    std::string denoiser = "all";
    int step             = 25;
    int size             = 8;
    std::optional<double> eta;
};

int cmd_gradcheck(const Overrides& o, const GradcheckFlags& g, const CLI::App* app, std::ostream& out) {
    RunConfig cfg = resolve(o, app);
    if (g.eta) {
        cfg.schedule.eta = *g.eta;
    }
    std::vector<DenoiserKind> kinds;
    if (g.denoiser == "all") {
        kinds = {DenoiserKind::analytic, DenoiserKind::micro};
    } else {
        kinds = {parse_denoiser_kind(g.denoiser)};
    }
    GradcheckParams params;
    params.size     = g.size;
    params.t        = g.step;
    params.seed     = cfg.seed;
    params.schedule = cfg.schedule;
    params.prompt   = cfg.prompt;
    const FdOptions coe_opts{1e-3, 1e-3, 1e-3};
    const FdOptions vjp_opts{1e-4, 1e-3, 1e-3};
    bool all_pass = true;
    char line[256];
    for (DenoiserKind kind : kinds) {
        const GradcheckInstance inst = make_gradcheck_instance(kind, params);
        std::vector<CheckReport> reps{check_coe_gradient(inst, cfg.balancer.jacobian_mode, coe_opts),
                                      check_attention_vjp(inst, Branch::fidelity, vjp_opts),
                                      check_attention_vjp(inst, Branch::spatial, vjp_opts)};
        for (const auto& r : reps) {
            std::snprintf(line, sizeof line, "%s %s entries=%zu max_rel_error=%.3e rtol=%.0e\n",
                          r.pass ? "PASS" : "FAIL", r.name.c_str(), r.entries, r.max_rel_error, r.rtol);
            out << line;
            if (!r.pass) {
                out << "  worst: " << r.worst << "\n";
                all_pass = false;
            }
        }
    }
    return all_pass ? kExitOk : kExitFailed;
}

int cmd_dump_attn(const Overrides& o, int step, const CLI::App* app, std::ostream& out) {
    const RunConfig cfg = resolve(o, app);
    if (step < 0 || step > cfg.schedule.steps) {
        throw ConfigError("cli", "--step must lie in [0, T]");
    }
    const Scene scene         = build_scene(cfg);
    const NoiseSchedule sched = NoiseSchedule::linear(cfg.schedule);
    const DenoiserPair pair   = make_denoisers(cfg, scene, sched);
    RolloutOptions opts       = rollout_options(cfg);
    Latent captured;
    opts.observer = [&](int t, const Latent& z) {
        if (t == step) {
            captured = z;
        }
    };
    rollout(*pair.text, *pair.spatial, scene.tokens, scene.layout, sched, opts);
    const int t        = std::max(step, 1);
    const fs::path dir = run_dir(cfg, "attn") / step_name(step);
    write_sample(dir / "latent", captured);
    for (const auto* d : {pair.text.get(), pair.spatial.get()}) {
        const Layout* cond = d->branch() == Branch::spatial ? &scene.layout : nullptr;
        const AttnMaps a   = d->denoise(captured, t, scene.tokens, cond).attn;
        for (int j = 0; j < a.tokens(); ++j) {
            std::string tok = scene.tokens.tokens[j] == kBackgroundToken ? "bg" : scene.tokens.tokens[j];
            const Grid g    = a.token_map(j);
            const fs::path stem = dir / (std::string(to_string(d->branch())) + "-" + std::to_string(j) + "-" + tok);
            write_grid_csv(stem.string() + ".csv", g);
            Latent img(g.height(), g.width(), 1);
            img.data() = g.data();
            write_png(stem.string() + ".png", img);
        }
    }
    out << "wrote attention maps for step " << step << " to " << dir.string() << "\n";
    return kExitOk;
}

int cmd_make_testbed(const Overrides& o, const CLI::App* app, std::ostream& out, std::ostream& err) {
    RunConfig cfg = resolve(o, app);
    if (!o.out) {
        cfg.out_dir = "testbed";
    }
    const Scene scene = build_scene(cfg);
    print_warnings(scene.warnings, err);
    const fs::path dir = cfg.out_dir;
    const auto restricted = restrict_to_layout(scene.text_spec, scene.layout, cfg.confine);
    print_warnings(restricted.warnings, err);
    write_mixture(dir / "text-mixture.json", scene.text_spec);
    write_mixture(dir / "layout-mixture.json", restricted.spec);
    write_text(dir / "layout.json", layout_to_json(scene.layout).dump(2) + "\n");
    write_text(dir / "resolved-config.yaml", resolved_config_yaml(cfg));
    if (cfg.denoiser == DenoiserKind::micro) {
        write_micro_params(dir / "micro-params.rct",
                           init_micro_params(cfg.micro.dims, cfg.micro.param_seed, cfg.micro.init_scale));
    }
    out << json{{"dir", dir.string()},
                {"objects", scene.text_spec.objects.size()},
                {"text_components", scene.text_spec.components.size()},
                {"layout_components", restricted.spec.components.size()}}
               .dump()
        << "\n";
    return kExitOk;
}

int cmd_layout(const Overrides& o, const std::string& prompt, const std::optional<std::string>& backend,
               const CLI::App* app, std::ostream& out, std::ostream& err) {
    const RunConfig cfg   = resolve(o, app);
    const std::string p   = prompt.empty() ? cfg.prompt : prompt;
    const LayoutBackend b = backend ? parse_layout_backend(*backend)
                                    : (cfg.condition.source == ConditionSource::llm ? LayoutBackend::llm
                                                                                    : LayoutBackend::stub);
    const GeneratedLayout g = generate_layout(p, b, cfg.llm);
    print_warnings(g.warnings, err);
    out << layout_to_json(g.layout).dump(2) << "\n";
    return kExitOk;
}

json error_json(const std::string& type, const std::string& module, const std::string& message) {
    return {{"error", {{"type", type}, {"module", module}, {"message", message}}}};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Compositional diffusion sampling with a dynamic per-pixel noise balancer", "realcompo"};
    app.require_subcommand(1);
    Overrides o;
    GradcheckFlags gflags;
    int attn_step = 0;
    std::string layout_prompt;
    std::optional<std::string> layout_backend;

    auto* generate = app.add_subcommand("generate", "Run one sampling trajectory and write sample, metrics, trajectory");
    add_common_flags(generate, o, true);
    auto* sweep = app.add_subcommand("sweep-beta", "Gate-strength sweep of the spatial branch (no balancing)");
    add_common_flags(sweep, o, true);
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of the coefficient gradient and attention VJPs");
    add_common_flags(gradcheck, o, false);
    gradcheck->add_option("--denoiser", gflags.denoiser, "analytic|micro|all")->capture_default_str();
    gradcheck->add_option("--step", gflags.step, "Step the instance is taken at")->capture_default_str();
    gradcheck->add_option("--size", gflags.size, "Latent height and width")->capture_default_str();
    gradcheck->add_option("--eta", gflags.eta, "DDIM stochasticity of the checked step");
    auto* ablation = app.add_subcommand("ablate", "Dynamic balancer vs frozen equal weights over seeds");
    add_common_flags(ablation, o, true);
    auto* dump = app.add_subcommand("dump-attn", "Write per-token attention maps of both branches at a step");
    add_common_flags(dump, o, true);
    dump->add_option("--step", attn_step, "Step to capture (0 = final sample)")->capture_default_str();
    auto* testbed = app.add_subcommand("make-testbed", "Write the testbed mixtures and layout for a config");
    add_common_flags(testbed, o, false);
    auto* layout = app.add_subcommand("layout", "Generate a layout from a prompt (stub or LLM)");
    add_common_flags(layout, o, false);
    layout->add_option("--prompt", layout_prompt, "Prompt text (defaults to the config prompt)");
    layout->add_option("--backend", layout_backend, "stub|llm");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    const CLI::App* active = app.get_subcommands().front();
    try {
        if (generate->parsed()) {
            return cmd_generate(o, generate, out, err);
        }
        if (sweep->parsed()) {
            return cmd_sweep(o, sweep, out);
        }
        if (gradcheck->parsed()) {
            return cmd_gradcheck(o, gflags, gradcheck, out);
        }
        if (ablation->parsed()) {
            return cmd_ablate(o, ablation, out);
        }
        if (dump->parsed()) {
            return cmd_dump_attn(o, attn_step, dump, out);
        }
        if (testbed->parsed()) {
            return cmd_make_testbed(o, testbed, out, err);
        }
        if (layout->parsed()) {
            return cmd_layout(o, layout_prompt, layout_backend, layout, out, err);
        }
    } catch (const UsageFailure& u) {
        err << error_json("usage", "cli", u.message).dump() << "\n" << u.app->help();
        return kExitUsage;
    } catch (const ParseError& e) {
        json j = error_json("parse", e.module(), e.what());
        j["error"]["raw"] = e.raw();
        err << j.dump() << "\n";
        return kExitFailed;
    } catch (const ConfigError& e) {
        err << error_json("config", e.module(), e.what()).dump() << "\n";
        return kExitUsage;
    } catch (const NetworkError& e) {
        err << error_json("network", e.module(), e.what()).dump() << "\n";
        return kExitFailed;
    } catch (const NonFiniteError& e) {
        err << error_json("non_finite", e.module(), e.what()).dump() << "\n";
        return kExitFailed;
    } catch (const Error& e) {
        err << error_json("runtime", e.module(), e.what()).dump() << "\n";
        return kExitFailed;
    } catch (const std::exception& e) {
        err << error_json("internal", active->get_name(), e.what()).dump() << "\n";
        return kExitFailed;
    }
    return kExitUsage;
}

}  // namespace realcompo::cli
