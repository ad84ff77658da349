#include "config.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdio>
#include <set>

#include "realcompo/errors.hpp"
#include "realcompo/io.hpp"
#include "realcompo/rng.hpp"

namespace realcompo::cli {

namespace {

// Map node with key bookkeeping, so typos surface as errors.
class Section {
public:
    Section(YAML::Node node, std::string where) : node_(std::move(node)), where_(std::move(where)) {
        if (node_ && !node_.IsNull() && !node_.IsMap()) {
            throw ConfigError("cli", where_ + " must be a mapping");
        }
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        used_.insert(key);
        if (!node_ || !node_[key] || node_[key].IsNull()) {
            return;
        }
        try {
            out = node_[key].template as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError("cli", "config key " + path(key) + " has the wrong type");
        }
    }

    YAML::Node child(const std::string& key) {
        used_.insert(key);
        return node_ ? node_[key] : YAML::Node();
    }

    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

    void finish() const {
        if (!node_ || !node_.IsMap()) {
            return;
        }
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (used_.count(key) == 0) {
                throw ConfigError("cli", "unknown config key '" + path(key) + "'");
            }
        }
    }

private:
    YAML::Node node_;
    std::string where_;
    std::set<std::string> used_;
};

std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
    if (p.empty() || base.empty() || std::filesystem::path(p).is_absolute()) {
        return p;
    }
    return (base / p).lexically_normal().string();
}

void parse_condition(const YAML::Node& node, ConditionConfig& c, const std::filesystem::path& base) {
    if (!node || node.IsNull()) {
        return;
    }
    if (node.IsScalar()) {
        const auto s     = node.as<std::string>();
        const auto colon = s.find(':');
        c.source         = parse_condition_source(s.substr(0, colon));
        if (colon != std::string::npos) {
            c.path = resolve_path(s.substr(colon + 1), base);
        }
        return;
    }
    Section sec(node, "condition");
    std::string source = to_string(c.source);
    sec.get("source", source);
    c.source = parse_condition_source(source);
    sec.get("path", c.path);
    c.path = resolve_path(c.path, base);
    sec.get("labels", c.labels);
    sec.get("keypoint_pad", c.keypoint_pad);
    sec.finish();
}

std::string fmt(double v) {
    char buf[32];
    for (int precision : {15, 16, 17}) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, v);
        if (std::strtod(buf, nullptr) == v) {
            break;
        }
    }
    return buf;
}

}  // namespace

RunConfig parse_config(const std::string& yaml_text, const std::filesystem::path& base_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw ConfigError("cli", std::string("config is not valid YAML: ") + e.what());
    }
    RunConfig cfg;
    if (!root || root.IsNull()) {
        return cfg;
    }
    Section top(root, "");
    top.get("seed", cfg.seed);
    top.get("prompt", cfg.prompt);
    top.get("threads", cfg.threads);
    top.get("realism_bandwidth", cfg.realism_bandwidth);
    // Snapshots record the generator; replaying under a different one would not reproduce.
    std::string rng = kRngName;
    top.get("rng", rng);
    if (rng != kRngName) {
        throw ConfigError("cli", "config was written for rng '" + rng + "', this build uses '" + kRngName + "'");
    }

    if (YAML::Node tb = top.child("testbed"); tb && tb.IsScalar()) {
        if (tb.as<std::string>() != "blobworld") {
            throw ConfigError("cli", "unknown testbed '" + tb.as<std::string>() + "' (expected blobworld)");
        }
    } else {
        Section s(tb, "testbed");
        std::string kind = "blobworld";
        s.get("kind", kind);
        if (kind != "blobworld") {
            throw ConfigError("cli", "unknown testbed '" + kind + "' (expected blobworld)");
        }
        s.get("height", cfg.testbed.height);
        s.get("width", cfg.testbed.width);
        s.get("channels", cfg.testbed.channels);
        s.get("blob_radius", cfg.testbed.blob_radius);
        s.get("anchor_grid", cfg.testbed.anchor_grid);
        s.get("confine", cfg.confine);
        s.finish();
        cfg.micro.dims.channels = cfg.testbed.channels;
    }
    {
        Section s(top.child("schedule"), "schedule");
        s.get("steps", cfg.schedule.steps);
        s.get("train_steps", cfg.schedule.train_steps);
        s.get("beta_start", cfg.schedule.beta_start);
        s.get("beta_end", cfg.schedule.beta_end);
        s.get("eta", cfg.schedule.eta);
        s.finish();
    }
    if (YAML::Node dn = top.child("denoiser"); dn && dn.IsScalar()) {
        cfg.denoiser = parse_denoiser_kind(dn.as<std::string>());
    } else {
        Section s(dn, "denoiser");
        std::string kind = to_string(cfg.denoiser);
        s.get("kind", kind);
        cfg.denoiser = parse_denoiser_kind(kind);
        Section m(s.child("micro"), "denoiser.micro");
        m.get("d_f", cfg.micro.dims.d_f);
        m.get("d_k", cfg.micro.dims.d_k);
        m.get("d_v", cfg.micro.dims.d_v);
        m.get("param_seed", cfg.micro.param_seed);
        m.get("init_scale", cfg.micro.init_scale);
        m.get("params_file", cfg.micro.params_path);
        cfg.micro.params_path = resolve_path(cfg.micro.params_path, base_dir);
        m.get("mask_bias", cfg.micro.mask_bias);
        m.get("train_iterations", cfg.micro.train_iterations);
        m.finish();
        s.finish();
    }
    if (YAML::Node t0 = top.child("t0"); t0 && t0.IsScalar()) {
        if (t0.as<std::string>() == "T") {
            cfg.t0 = -1;
        } else {
            try {
                cfg.t0 = t0.as<int>();
            } catch (const YAML::Exception&) {
                throw ConfigError("cli", "t0 must be an integer step or T");
            }
        }
    }
    {
        Section s(top.child("balancer"), "balancer");
        s.get("rho", cfg.balancer.rho);
        std::string decay = to_string(cfg.balancer.rho_decay);
        s.get("rho_decay", decay);
        cfg.balancer.rho_decay = parse_rho_decay(decay);
        s.get("inner_updates", cfg.balancer.inner_updates);
        std::string gm = to_string(cfg.balancer.gradient_mode);
        s.get("gradient_mode", gm);
        cfg.balancer.gradient_mode = parse_gradient_mode(gm);
        std::string jm = to_string(cfg.balancer.jacobian_mode);
        s.get("jacobian_mode", jm);
        cfg.balancer.jacobian_mode = parse_jacobian_mode(jm);
        s.finish();
    }
    parse_condition(top.child("condition"), cfg.condition, base_dir);
    {
        Section s(top.child("llm"), "llm");
        s.get("base_url", cfg.llm.base_url);
        s.get("model", cfg.llm.model);
        s.get("api_key_env", cfg.llm.api_key_env);
        s.get("timeout_s", cfg.llm.timeout_s);
        s.get("max_retries", cfg.llm.max_retries);
        s.get("template", cfg.llm.template_path);
        cfg.llm.template_path = resolve_path(cfg.llm.template_path, base_dir);
        s.finish();
    }
    {
        Section s(top.child("sweep"), "sweep");
        s.get("betas", cfg.betas);
        s.get("cutoff_step", cfg.gate.cutoff_step);
        s.finish();
    }
    if (YAML::Node sd = top.child("seeds"); sd && sd.IsScalar()) {
        top.get("seeds", cfg.num_seeds);
    } else {
        Section s(sd, "seeds");
        s.get("first", cfg.first_seed);
        s.get("count", cfg.num_seeds);
        s.finish();
    }
    {
        Section s(top.child("output"), "output");
        s.get("dir", cfg.out_dir);
        s.get("export_grids", cfg.export_grids);
        s.finish();
    }
    top.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) {
        throw ConfigError("cli", "config file not found: " + path.string());
    }
    return parse_config(read_text(path), path.parent_path());
}

std::string resolved_config_yaml(const RunConfig& cfg) {
    YAML::Emitter e;
    e << YAML::BeginMap;
    e << YAML::Key << "seed" << YAML::Value << cfg.seed;
    e << YAML::Key << "prompt" << YAML::Value << YAML::DoubleQuoted << cfg.prompt;
    e << YAML::Key << "threads" << YAML::Value << cfg.threads;
    e << YAML::Key << "realism_bandwidth" << YAML::Value << fmt(cfg.realism_bandwidth);
    e << YAML::Key << "rng" << YAML::Value << kRngName;

    e << YAML::Key << "testbed" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "kind" << YAML::Value << "blobworld";
    e << YAML::Key << "height" << YAML::Value << cfg.testbed.height;
    e << YAML::Key << "width" << YAML::Value << cfg.testbed.width;
    e << YAML::Key << "channels" << YAML::Value << cfg.testbed.channels;
    e << YAML::Key << "blob_radius" << YAML::Value << fmt(cfg.testbed.blob_radius);
    e << YAML::Key << "anchor_grid" << YAML::Value << cfg.testbed.anchor_grid;
    e << YAML::Key << "confine" << YAML::Value << cfg.confine;
    e << YAML::EndMap;

    e << YAML::Key << "schedule" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "steps" << YAML::Value << cfg.schedule.steps;
    e << YAML::Key << "train_steps" << YAML::Value << cfg.schedule.train_steps;
    e << YAML::Key << "beta_start" << YAML::Value << fmt(cfg.schedule.beta_start);
    e << YAML::Key << "beta_end" << YAML::Value << fmt(cfg.schedule.beta_end);
    e << YAML::Key << "eta" << YAML::Value << fmt(cfg.schedule.eta);
    e << YAML::EndMap;

    e << YAML::Key << "denoiser" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "kind" << YAML::Value << to_string(cfg.denoiser);
    e << YAML::Key << "micro" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "d_f" << YAML::Value << cfg.micro.dims.d_f;
    e << YAML::Key << "d_k" << YAML::Value << cfg.micro.dims.d_k;
    e << YAML::Key << "d_v" << YAML::Value << cfg.micro.dims.d_v;
    e << YAML::Key << "param_seed" << YAML::Value << cfg.micro.param_seed;
    e << YAML::Key << "init_scale" << YAML::Value << fmt(cfg.micro.init_scale);
    e << YAML::Key << "params_file" << YAML::Value << YAML::DoubleQuoted << cfg.micro.params_path;
    e << YAML::Key << "mask_bias" << YAML::Value << fmt(cfg.micro.mask_bias);
    e << YAML::Key << "train_iterations" << YAML::Value << cfg.micro.train_iterations;
    e << YAML::EndMap << YAML::EndMap;

    e << YAML::Key << "t0" << YAML::Value << cfg.resolved_t0();

    e << YAML::Key << "balancer" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "rho" << YAML::Value << fmt(cfg.balancer.rho);
    e << YAML::Key << "rho_decay" << YAML::Value << to_string(cfg.balancer.rho_decay);
    e << YAML::Key << "inner_updates" << YAML::Value << cfg.balancer.inner_updates;
    e << YAML::Key << "gradient_mode" << YAML::Value << to_string(cfg.balancer.gradient_mode);
    e << YAML::Key << "jacobian_mode" << YAML::Value << to_string(cfg.balancer.jacobian_mode);
    e << YAML::EndMap;

    e << YAML::Key << "condition" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "source" << YAML::Value << to_string(cfg.condition.source);
    e << YAML::Key << "path" << YAML::Value << YAML::DoubleQuoted << cfg.condition.path;
    e << YAML::Key << "labels" << YAML::Value << YAML::Flow << cfg.condition.labels;
    e << YAML::Key << "keypoint_pad" << YAML::Value << fmt(cfg.condition.keypoint_pad);
    e << YAML::EndMap;

    e << YAML::Key << "llm" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "base_url" << YAML::Value << cfg.llm.base_url;
    e << YAML::Key << "model" << YAML::Value << cfg.llm.model;
    e << YAML::Key << "api_key_env" << YAML::Value << cfg.llm.api_key_env;
    e << YAML::Key << "timeout_s" << YAML::Value << fmt(cfg.llm.timeout_s);
    e << YAML::Key << "max_retries" << YAML::Value << cfg.llm.max_retries;
    e << YAML::Key << "template" << YAML::Value << YAML::DoubleQuoted << cfg.llm.template_path;
    e << YAML::EndMap;

    e << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "betas" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (double b : cfg.betas) {
        e << fmt(b);
    }
    e << YAML::EndSeq;
    e << YAML::Key << "cutoff_step" << YAML::Value << cfg.gate.cutoff_step;
    e << YAML::EndMap;

    e << YAML::Key << "seeds" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "first" << YAML::Value << cfg.first_seed;
    e << YAML::Key << "count" << YAML::Value << cfg.num_seeds;
    e << YAML::EndMap;

    e << YAML::Key << "output" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "dir" << YAML::Value << YAML::DoubleQuoted << cfg.out_dir;
    e << YAML::Key << "export_grids" << YAML::Value << cfg.export_grids;
    e << YAML::EndMap;
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
}

std::string run_hash(const RunConfig& cfg) {
    RunConfig c = cfg;
    c.out_dir.clear();
    c.threads = 0;
    const std::string text = resolved_config_yaml(c);
    return hex_digest(text.data(), text.size());
}

}  // namespace realcompo::cli
