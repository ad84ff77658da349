#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "realcompo/attention.hpp"
#include "realcompo/balancer.hpp"
#include "realcompo/conditions.hpp"
#include "realcompo/denoisers.hpp"
#include "realcompo/layoutgen.hpp"
#include "realcompo/micro.hpp"
#include "realcompo/mixture.hpp"
#include "realcompo/schedule.hpp"

namespace realcompo {

enum class DenoiserKind { analytic, micro };

const char* to_string(DenoiserKind k);
DenoiserKind parse_denoiser_kind(const std::string& s);

enum class ConditionSource { stub, llm, layout, keypoints, segmentation };

const char* to_string(ConditionSource s);
ConditionSource parse_condition_source(const std::string& s);

struct ConditionConfig {
    ConditionSource source = ConditionSource::stub;
    std::string path;         // layout / keypoint JSON or segmentation PGM
    std::vector<int> labels;  // segmentation labels to use; empty = all nonzero
    double keypoint_pad = kDefaultTransferPad;
};

struct MicroConfig {
    MicroDims dims;
    std::uint64_t param_seed = 0;
    double init_scale        = 1.0;
    std::string params_path;  // parameter archive; empty = seeded init
    double mask_bias     = kDefaultMaskBias;
    int train_iterations = 0;  // head-only fit on the testbed before sampling
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string prompt = "a red cube and a blue ball";
    ScheduleParams schedule;
    BlobworldParams testbed;
    bool confine          = true;
    DenoiserKind denoiser = DenoiserKind::analytic;
    MicroConfig micro;
    int t0 = -1;  // -1 = T (balance every step)
    BalancerConfig balancer;
    ConditionConfig condition;
    LlmEndpointConfig llm;
    GateConfig gate;  // sweep-beta only; beta is overridden per sweep entry
    std::vector<double> betas{0.0, 0.25, 0.5, 0.75, 1.0};
    std::uint64_t first_seed = 0;
    int num_seeds            = 50;
    double realism_bandwidth = 0.05;
    int threads              = 0;  // 0 = hardware concurrency
    std::string out_dir      = "runs";
    bool export_grids        = false;

    int resolved_t0() const { return t0 < 0 ? schedule.steps : t0; }
    std::vector<std::uint64_t> seed_list() const;
    void validate() const;
};

// Everything a rollout needs that is derived from the prompt and condition.
struct Scene {
    TokenSequence tokens;
    Layout layout;            // bound to tokens
    MixtureSpec text_spec;    // blobworld over the layout's objects
    std::vector<std::string> warnings;
};

Scene build_scene(const RunConfig& cfg);
// Same, with an already resolved layout (labels are bound here).
Scene build_scene(const RunConfig& cfg, Layout layout);

// Resolves the configured condition source to a layout (transfer for
// keypoints / segmentation, layoutgen for stub / llm).
Layout resolve_condition(const RunConfig& cfg, std::vector<std::string>& warnings);

struct DenoiserPair {
    std::shared_ptr<const Denoiser> text;
    std::shared_ptr<const Denoiser> spatial;
};

DenoiserPair make_denoisers(const RunConfig& cfg, const Scene& scene, const NoiseSchedule& sched);

struct StepRecord {
    int t = 0;
    double loss = 0.0;  // before the step's update
    std::optional<double> grad_l2_text;
    std::optional<double> grad_l2_spatial;
    double mean_xi_text = 0.5;  // after the update
    double wall_ms      = 0.0;
};

struct StepNoise {
    int t = 0;
    bool balanced = false;
    Latent applied;
    Latent spatial;
};

struct StepGrids {
    int t = 0;
    Grid xi_text;
    Grid xi_spatial;
    Grid grad_text;
    Grid grad_spatial;
};

struct RolloutOptions {
    std::uint64_t seed = 0;
    int t0             = -1;  // -1 = T
    BalancerConfig balancer;
    bool record_noise = false;
    bool record_grids = false;
    std::string diagnostics_dir;  // where a non-finite latent is dumped; empty = nowhere
    // Called with z_t before step t is taken, and with (0, z_0) at the end.
    std::function<void(int, const Latent&)> observer;
};

struct Rollout {
    Latent sample;
    std::vector<StepRecord> trajectory;
    std::vector<StepNoise> noise;
    std::vector<StepGrids> grids;
    CoeMap coe;
};

// Compositional denoising: steps t > t0 use the spatial branch alone, steps
// t <= t0 balance the two branches and update the coefficients once per
// inner update from the alignment loss at the provisional z_{t-1}.
Rollout rollout(const Denoiser& text, const Denoiser& spatial, const TokenSequence& tokens, const Layout& layout,
                const NoiseSchedule& sched, const RolloutOptions& opts);

struct ObjectMetrics {
    std::string object;
    int token_index = -1;
    double in_box_mass = 0.0;
    bool zero_signal   = false;
    double attn_in_box = 0.0;  // mean of the two branch ratios
    double attn_in_box_text    = 0.0;
    double attn_in_box_spatial = 0.0;
};

struct Metrics {
    std::vector<ObjectMetrics> objects;
    double mean_in_box_mass = 0.0;
    double mean_attn_in_box = 0.0;
    std::optional<double> realism_proxy;
};

// Fraction of each object's color-matched nonnegative signal inside its box.
// Objects with no signal report 0 and set zero_signal.
std::vector<ObjectMetrics> in_box_mass(const Latent& sample, const Layout& layout, const TokenSequence& tokens);

// Metrics of a final sample. Attention ratios come from both branches
// evaluated at the sample with t = 1; realism needs `text_spec`.
Metrics evaluate(const Latent& sample, const Layout& layout, const TokenSequence& tokens, const Denoiser& text,
                 const Denoiser& spatial, const MixtureSpec* text_spec, double bandwidth = 0.05);

struct RunResult {
    Scene scene;
    Rollout rollout;
    Metrics metrics;
};

RunResult run(const RunConfig& cfg, const RolloutOptions* overrides = nullptr);
RunResult run(const RunConfig& cfg, const Scene& scene, const RolloutOptions* overrides = nullptr);

RolloutOptions rollout_options(const RunConfig& cfg);

struct SweepRow {
    double beta = 0.0;
    double mean_in_box_mass = 0.0;
    double mean_realism     = 0.0;
    std::vector<double> in_box_mass;  // per seed
    std::vector<double> realism;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    double spearman = 0.0;  // rank correlation of (beta, mean in_box_mass)
};

// Pure gated-spatial rollouts (no balancing) per beta, same seeds for every beta.
SweepResult sweep_beta(const RunConfig& cfg, const std::vector<double>& betas, const std::vector<std::uint64_t>& seeds);

struct AblationRow {
    std::uint64_t seed = 0;
    Metrics dynamic;
    Metrics frozen;
    Latent dynamic_sample;
    Latent frozen_sample;
    std::vector<StepRecord> dynamic_trajectory;
    std::vector<StepRecord> frozen_trajectory;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    double mean_attn_dynamic = 0.0;
    double mean_attn_frozen  = 0.0;
    double mean_mass_dynamic = 0.0;
    double mean_mass_frozen  = 0.0;
    double mean_realism_dynamic = 0.0;
    double mean_realism_frozen  = 0.0;
};

// Paired runs per seed: the dynamic balancer against frozen xi = 0.5
// (no coefficient updates).
AblationResult ablate(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware
// concurrency). Results are placed by index, so reductions are deterministic.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

nlohmann::json to_json(const StepRecord& r);
nlohmann::json to_json(const Metrics& m);
nlohmann::json to_json(const SweepResult& s);
nlohmann::json to_json(const AblationResult& a);
std::string trajectory_jsonl(const std::vector<StepRecord>& trajectory);

}  // namespace realcompo
