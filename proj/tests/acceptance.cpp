// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oracles.hpp"
#include "realcompo/balancer.hpp"
#include "realcompo/gradcheck.hpp"
#include "realcompo/io.hpp"
#include "realcompo/pipeline.hpp"
#include "realcompo/rng.hpp"

using namespace realcompo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Every argument is passed as a double, so formats use %g/%e/%f only.
template <typename... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, static_cast<double>(args)...);
    return buf;
}

// Alignment loss of a coefficient map, recomputed from the branch noises with
// scalar DDIM and the double-loop loss.
double oracle_loss(const GradcheckInstance& inst, const CoeMap& coe) {
    const double ab_t = inst.sched.alpha_bar(inst.t), ab_p = inst.sched.alpha_bar(inst.t - 1);
    const double sigma = inst.sched.sigma(inst.t);
    const Shape s      = inst.z.shape();
    Latent z_prev(s);
    for (std::size_t p = 0; p < s.pixels(); ++p) {
        const double xt = 1.0 / (1.0 + std::exp(coe.spatial[p] - coe.text[p]));
        for (int c = 0; c < s.depth; ++c) {
            const std::size_t i = p * s.depth + c;
            const double eps    = xt * inst.eps_text[i] + (1.0 - xt) * inst.eps_spatial[i];
            z_prev[i] = oracle::ddim(inst.z[i], eps, ab_t, ab_p, sigma, sigma > 0 ? inst.ddim_noise[i] : 0.0);
        }
    }
    std::vector<oracle::BoxToken> boxes;
    for (const auto& b : inst.layout.boxes) {
        boxes.push_back({b, b.token_index});
    }
    const AttnMaps at = inst.text->denoise(z_prev, inst.t, inst.tokens, nullptr).attn;
    const AttnMaps as = inst.spatial->denoise(z_prev, inst.t, inst.tokens, &inst.layout).attn;
    return oracle::branch_loss(at, boxes) + oracle::branch_loss(as, boxes);
}

// 1. xi^text + xi^spatial = 1 per pixel on every balanced step.
Outcome softmax_normalization() {
    RunConfig cfg;
    cfg.seed = 1;
    RolloutOptions o = rollout_options(cfg);
    o.record_grids   = true;
    const RunResult r = run(cfg, &o);
    double worst      = 0.0;
    for (const auto& g : r.rollout.grids) {
        for (std::size_t i = 0; i < g.xi_text.size(); ++i) {
            worst = std::max(worst, std::abs(g.xi_text[i] + g.xi_spatial[i] - 1.0));
        }
    }
    const bool all_steps = r.rollout.grids.size() == 50;
    return {all_steps && worst <= 1e-6,
            fmt("%g balanced steps, max |xi_text + xi_spatial - 1| = %.2e (tol 1e-6)",
                static_cast<double>(r.rollout.grids.size()), worst)};
}

// 2. full-mode coefficient gradient against central differences, 8x8, both denoisers.
Outcome gradient_correctness() {
    std::string detail;
    bool pass = true;
    for (DenoiserKind kind : {DenoiserKind::analytic, DenoiserKind::micro}) {
        GradcheckParams p;
        p.size                       = 8;
        const GradcheckInstance inst = make_gradcheck_instance(kind, p);
        if (inst.layout.boxes.size() != 2) {
            return {false, "instance does not have two boxes"};
        }
        const CoeGradient g = coe_gradient(inst.context(), inst.coe, GradientMode::full, JacobianMode::paper);
        const double h      = 1e-3;
        std::vector<double> fd_t(64), fd_s(64);
        double scale = 0.0;
        for (std::size_t i = 0; i < 64; ++i) {
            for (int b = 0; b < 2; ++b) {
                CoeMap plus = inst.coe, minus = inst.coe;
                (b == 0 ? plus.text : plus.spatial)[i] += h;
                (b == 0 ? minus.text : minus.spatial)[i] -= h;
                const double fd = (oracle_loss(inst, plus) - oracle_loss(inst, minus)) / (2 * h);
                (b == 0 ? fd_t : fd_s)[i] = fd;
                scale = std::max(scale, std::abs(fd));
            }
        }
        double worst = 0.0;
        for (std::size_t i = 0; i < 64; ++i) {
            worst = std::max({worst, fd_relative_error(g.text[i], fd_t[i], 1e-3 * scale),
                              fd_relative_error(g.spatial[i], fd_s[i], 1e-3 * scale)});
        }
        pass = pass && worst <= 1e-3;
        detail += std::string(to_string(kind)) + fmt(" max rel err %.2e over 2x64 cells; ", worst);
    }
    return {pass, detail + "rtol 1e-3"};
}

// 3. loss on uniform attention with a quarter box, and random instances against the double loop.
Outcome loss_oracle() {
    Layout quarter;
    quarter.boxes.resize(1);
    quarter.boxes[0].x1 = quarter.boxes[0].y1 = 0.5;
    quarter.boxes[0].token_index              = 1;
    const AttnMaps uniform(16, 16, 3, 1.0 / 3.0);
    const double exact = alignment_loss(uniform, uniform, layout_masks(quarter, 16, 16));

    Rng rng(3, Stream::instances);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = 2 + static_cast<int>(rng.below(15)), w = 2 + static_cast<int>(rng.below(15));
        const int n = 2 + static_cast<int>(rng.below(4));
        Layout l;
        std::vector<oracle::BoxToken> bt;
        const int boxes = 1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(n - 1)));
        for (int b = 0; b < boxes; ++b) {
            Box box;
            const double xa = rng.uniform(), xb = rng.uniform(), ya = rng.uniform(), yb = rng.uniform();
            box.x0 = std::min(xa, xb);
            box.x1 = std::max(xa, xb);
            box.y0 = std::min(ya, yb);
            box.y1 = std::max(ya, yb);
            box.token_index = b + 1;
            l.boxes.push_back(box);
            bt.push_back({box, b + 1});
        }
        AttnMaps a[2] = {AttnMaps(h, w, n), AttnMaps(h, w, n)};
        for (auto& m : a) {
            for (std::size_t p = 0; p < m.pixels(); ++p) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) {
                    m.at(p, j) = std::exp(3.0 * rng.normal());
                    s += m.at(p, j);
                }
                for (int j = 0; j < n; ++j) {
                    m.at(p, j) /= s;
                }
            }
        }
        // Snapped boxes aside, the oracle rasterizer is the definition.
        bool snapped = false;
        for (const auto& b : l.boxes) {
            snapped = snapped || oracle::rasterize(b, h, w).count() == 0;
        }
        if (snapped) {
            continue;
        }
        const double got  = alignment_loss(a[0], a[1], layout_masks(l, h, w));
        const double want = oracle::branch_loss(a[0], bt) + oracle::branch_loss(a[1], bt);
        worst             = std::max(worst, std::abs(got - want));
    }
    return {exact == 1.5 && worst <= 1e-9,
            fmt("quarter-box loss = %.17g (want 1.5 exactly); max |L - oracle| = %.2e over random instances (tol 1e-9)",
                exact, worst)};
}

// 4. one full-mode update with rho = 0.1 lowers the loss on the 16x16 testbed.
// Instances whose predicted first-order decrease rho*|g|^2 is below 1e-12 are
// redrawn: there L is flat to double precision and no change is measurable.
Outcome descent() {
    const double rho = 0.1, resolvable = 1e-12;
    Rng pick(4, Stream::instances);
    int descended = 0, used = 0, skipped = 0;
    for (std::uint64_t seed = 5000; used < 100 && seed < 6000; ++seed) {
        GradcheckParams p;
        p.size = 16;
        p.seed = seed;
        p.t    = 2 + static_cast<int>(pick.below(48));
        const GradcheckInstance inst = make_gradcheck_instance(DenoiserKind::analytic, p);
        const CoeGradient g = coe_gradient(inst.context(), inst.coe, GradientMode::full, JacobianMode::paper);
        double g2 = 0.0;
        for (std::size_t i = 0; i < g.text.size(); ++i) {
            g2 += g.text[i] * g.text[i] + g.spatial[i] * g.spatial[i];
        }
        if (rho * g2 < resolvable) {
            ++skipped;
            continue;
        }
        ++used;
        const CoeMap next = update_coe(inst.coe, g.text, g.spatial, rho);
        descended += oracle_loss(inst, next) < oracle_loss(inst, inst.coe);
    }
    return {used == 100 && descended >= 95,
            fmt("%g of %g instances descended (need >= 95 of 100); %g flat instances redrawn", descended, used,
                skipped)};
}

// 5. DDIM with exact Gaussian eps reproduces the target moments.
struct Moments {
    double mean_err      = 0.0;  // worst entry
    double var_err       = 0.0;  // pooled over entries
    double var_entry_err = 0.0;  // worst entry
};

Moments gaussian_moments(int steps, const Latent& mean, double variance, int n) {
    ScheduleParams sp;
    sp.steps                  = steps;
    const NoiseSchedule sched = NoiseSchedule::linear(sp);
    std::vector<double> s1(mean.size(), 0.0), s2(mean.size(), 0.0);
    for (int k = 0; k < n; ++k) {
        Latent z(mean.shape());
        Rng(static_cast<std::uint64_t>(k), Stream::initial_latent).fill_normal(z);
        for (int t = sched.steps(); t >= 1; --t) {
            z = ddim_step(z, gaussian_eps(z, sched.alpha_bar(t), mean, variance), t, sched);
        }
        for (std::size_t i = 0; i < z.size(); ++i) {
            s1[i] += z[i];
            s2[i] += z[i] * z[i];
        }
    }
    Moments out;
    double pooled = 0.0;
    for (std::size_t i = 0; i < s1.size(); ++i) {
        const double m    = s1[i] / n;
        const double v    = (s2[i] - n * m * m) / (n - 1);
        out.mean_err      = std::max(out.mean_err, std::abs(m - mean[i]) / std::abs(mean[i]));
        out.var_entry_err = std::max(out.var_entry_err, std::abs(v - variance) / variance);
        pooled += v / static_cast<double>(s1.size());
    }
    out.var_err = std::abs(pooled - variance) / variance;
    return out;
}

// Gated on the full 1000-step grid. The 50-step sampler is reported too: for a
// Gaussian target deterministic DDIM is a linear map per step and its exact
// output variance at 50 steps is 11.1% low, so that run cannot meet 5%.
Outcome sampler_fidelity() {
    const double variance = 0.25;
    Latent mean(4, 4, 3);
    Rng mr(5, Stream::params);
    for (double& m : mean.data()) {
        m = mr.uniform(2.0, 3.0);
    }
    const Moments fine   = gaussian_moments(1000, mean, variance, 1000);
    const Moments coarse = gaussian_moments(50, mean, variance, 1000);
    return {fine.mean_err <= 0.05 && fine.var_err <= 0.05,
            fmt("1000 steps: mean max rel err %.2e, covariance diagonal rel err %.2e (per-entry max %.2e); "
                "50 steps: %.2e, %.2e; tol 5%%",
                fine.mean_err, fine.var_err, fine.var_entry_err, coarse.mean_err, coarse.var_err)};
}

// 6. beta sweep: in-box mass rank-monotone, realism lower at full injection.
Outcome beta_sweep() {
    RunConfig cfg;
    const SweepResult s = sweep_beta(cfg, cfg.betas, cfg.seed_list());
    const double r0 = s.rows.front().mean_realism, r1 = s.rows.back().mean_realism;
    std::string masses;
    for (const auto& row : s.rows) {
        masses += fmt("%.3f ", row.mean_in_box_mass);
    }
    return {s.spearman > 0.9 && r1 < r0,
            "in_box_mass by beta: " + masses + fmt("; spearman %.3f (need > 0.9); realism beta=1 %.2f < beta=0 %.2f",
                                                   s.spearman, r1, r0)};
}

// 7. dynamic balancer against frozen equal weights.
Outcome ablation() {
    RunConfig cfg;
    const AblationResult a = ablate(cfg, cfg.seed_list());
    return {a.rows.size() == 50 && a.mean_attn_dynamic > a.mean_attn_frozen,
            fmt("mean attn_in_box dynamic %.4f vs frozen %.4f over %g seeds", a.mean_attn_dynamic, a.mean_attn_frozen,
                static_cast<double>(a.rows.size()))};
}

// 8. t0 = T/2: spatial-only noise above t0, exactly t0 balanced records.
Outcome two_phase() {
    RunConfig cfg;
    cfg.seed = 8;
    cfg.t0   = cfg.schedule.steps / 2;
    RolloutOptions o = rollout_options(cfg);
    o.record_noise   = true;
    const RunResult r = run(cfg, &o);
    int spatial_steps = 0, identical = 0;
    for (const auto& n : r.rollout.noise) {
        if (n.t > cfg.t0) {
            ++spatial_steps;
            identical += !n.balanced && n.applied.data().size() == n.spatial.data().size() &&
                         std::equal(n.applied.data().begin(), n.applied.data().end(), n.spatial.data().begin(),
                                    [](double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; });
        }
    }
    bool balanced_ok = true;
    for (const auto& rec : r.rollout.trajectory) {
        balanced_ok = balanced_ok && rec.t <= cfg.t0;
    }
    const int records = static_cast<int>(r.rollout.trajectory.size());
    return {spatial_steps == 25 && identical == 25 && records == cfg.t0 && balanced_ok,
            fmt("%g/%g spatial-phase steps bitwise equal to the spatial eps; %g balanced records (want %g)", identical,
                spatial_steps, records, cfg.t0)};
}

// 9. transfer function properties on random keypoint and segmentation conditions.
Outcome transfer_properties() {
    Rng rng(9, Stream::instances);
    int failures = 0, conditions = 0;
    for (; conditions < 1000; ++conditions) {
        if (conditions % 2 == 0) {
            KeypointSet ks;
            const int groups = 1 + static_cast<int>(rng.below(4));
            for (int g = 0; g < groups; ++g) {
                KeypointGroup grp{g + 1, "g" + std::to_string(g), {}};
                const int n = 1 + static_cast<int>(rng.below(8));
                for (int i = 0; i < n; ++i) {
                    // Some points on a coarse lattice so that degenerate extents occur.
                    const bool lattice = rng.below(4) == 0;
                    grp.points.push_back({lattice ? rng.below(5) / 4.0 : rng.uniform(),
                                          lattice ? rng.below(5) / 4.0 : rng.uniform()});
                }
                ks.groups.push_back(grp);
            }
            const Layout l = transfer(ks, kDefaultTransferPad);
            for (int g = 0; g < groups; ++g) {
                double x0 = 1, x1 = 0, y0 = 1, y1 = 0;
                for (const auto& p : ks.groups[g].points) {
                    x0 = std::min(x0, p[0]);
                    x1 = std::max(x1, p[0]);
                    y0 = std::min(y0, p[1]);
                    y1 = std::max(y1, p[1]);
                    failures += !l.boxes[g].contains(p[0], p[1]);
                }
                if (x1 == x0) {
                    x0 = std::max(0.0, x0 - kDefaultTransferPad);
                    x1 = std::min(1.0, x1 + kDefaultTransferPad);
                }
                if (y1 == y0) {
                    y0 = std::max(0.0, y0 - kDefaultTransferPad);
                    y1 = std::min(1.0, y1 + kDefaultTransferPad);
                }
                const Box& b = l.boxes[g];
                failures += !(b.x0 == x0 && b.x1 == x1 && b.y0 == y0 && b.y1 == y1) || b.token_index != g + 1;
            }
        } else {
            const int h = 1 + static_cast<int>(rng.below(32)), w = 1 + static_cast<int>(rng.below(32));
            SegmentationMap seg{h, w, std::vector<int>(static_cast<std::size_t>(h) * w, 0)};
            const int labels = 1 + static_cast<int>(rng.below(4));
            for (int lab = 1; lab <= labels; ++lab) {
                // Random scattered cells, so segments need not be rectangles or connected.
                const int cells = 1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(h * w)));
                for (int k = 0; k < cells; ++k) {
                    seg.labels[rng.below(static_cast<std::uint32_t>(h * w))] = lab;
                }
            }
            std::vector<int> present;
            for (int lab = 1; lab <= labels; ++lab) {
                if (std::find(seg.labels.begin(), seg.labels.end(), lab) != seg.labels.end()) {
                    present.push_back(lab);
                }
            }
            const Layout l = transfer(seg);
            failures += l.boxes.size() != present.size();
            for (std::size_t k = 0; k < std::min(l.boxes.size(), present.size()); ++k) {
                const Box& b = l.boxes[k];
                int rmin = h, rmax = -1, cmin = w, cmax = -1;
                for (int r = 0; r < h; ++r) {
                    for (int c = 0; c < w; ++c) {
                        if (seg.at(r, c) != present[k]) {
                            continue;
                        }
                        rmin = std::min(rmin, r);
                        rmax = std::max(rmax, r);
                        cmin = std::min(cmin, c);
                        cmax = std::max(cmax, c);
                        const bool inside = static_cast<double>(c) / w >= b.x0 && static_cast<double>(c + 1) / w <= b.x1 &&
                                            static_cast<double>(r) / h >= b.y0 && static_cast<double>(r + 1) / h <= b.y1;
                        failures += !inside || !rasterize(b, h, w).at(r, c);
                    }
                }
                failures += b.token_index != present[k] || b.x0 != static_cast<double>(cmin) / w ||
                            b.x1 != static_cast<double>(cmax + 1) / w || b.y0 != static_cast<double>(rmin) / h ||
                            b.y1 != static_cast<double>(rmax + 1) / h;
            }
        }
    }
    return {failures == 0, fmt("%g random conditions, %g violations", conditions, failures)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 10. two CLI runs with --seed 7 give identical bytes.
Outcome determinism() {
    const fs::path root = fs::absolute("acceptance-determinism");
    fs::remove_all(root);
    fs::create_directories(root);
    {
        std::ofstream cfg(root / "run.yaml");
        cfg << "testbed: blobworld\nprompt: a red cube and a blue ball\ncondition: stub\n";
    }
    std::vector<fs::path> dirs;
    for (const char* tag : {"a", "b"}) {
        const std::string cmd = std::string("\"") + REALCOMPO_BIN + "\" generate --config \"" +
                                (root / "run.yaml").string() + "\" --seed 7 --out \"" + (root / tag).string() +
                                "\" > \"" + (root / tag).string() + ".log\" 2>&1";
        if (std::system(cmd.c_str()) != 0) {
            return {false, "generate failed: " + slurp(root / (std::string(tag) + ".log"))};
        }
        for (const auto& e : fs::directory_iterator(root / tag)) {
            dirs.push_back(e.path());
        }
    }
    if (dirs.size() != 2) {
        return {false, "expected one run directory per invocation"};
    }
    const std::string ta = slurp(dirs[0] / "sample.rct"), tb = slurp(dirs[1] / "sample.rct");
    const std::string ma = slurp(dirs[0] / "metrics.json"), mb = slurp(dirs[1] / "metrics.json");
    const bool same = !ta.empty() && ta == tb && !ma.empty() && ma == mb &&
                      nlohmann::json::parse(ma) == nlohmann::json::parse(mb);
    fs::remove_all(root);
    return {same, "sample.rct " + std::to_string(ta.size()) + " bytes; sample.rct identical: " +
                      (ta == tb ? "yes" : "no") + "; metrics.json identical: " + (ma == mb ? "yes" : "no")};
}

// 11. every balanced step logs finite per-branch gradient norms; the JSONL is complete.
Outcome gradient_trajectories() {
    RunConfig cfg;
    cfg.seed          = 11;
    const RunResult r = run(cfg);
    const std::string jsonl = trajectory_jsonl(r.rollout.trajectory);
    std::istringstream in(jsonl);
    int expected_t = cfg.schedule.steps, rows = 0, bad = 0;
    for (std::string line; std::getline(in, line); ++rows, --expected_t) {
        const auto j = nlohmann::json::parse(line);
        bad += j.at("t").get<int>() != expected_t;
        for (const char* key : {"loss", "grad_l2_text", "grad_l2_spatial", "mean_xi_text"}) {
            bad += !j.contains(key) || !j[key].is_number() || !std::isfinite(j[key].get<double>());
        }
    }
    return {rows == cfg.schedule.steps && bad == 0,
            fmt("%g JSONL rows for t = %g..1, %g missing or non-finite values", rows, cfg.schedule.steps, bad)};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double limit_s;
        std::function<Outcome()> check;
    };
    const std::vector<Criterion> criteria{
        {1, "softmax normalization", 10, softmax_normalization},
        {2, "gradient correctness (full mode, FD)", 120, gradient_correctness},
        {3, "alignment loss oracle", 1, loss_oracle},
        {4, "descent property", 120, descent},
        {5, "sampler fidelity", 60, sampler_fidelity},
        {6, "beta sweep", 300, beta_sweep},
        {7, "balancer ablation", 600, ablation},
        {8, "two-phase contract", 10, two_phase},
        {9, "transfer function properties", 5, transfer_properties},
        {10, "determinism", 30, determinism},
        {11, "gradient-magnitude trajectories", 10, gradient_trajectories},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs <= c.limit_s;
        const bool pass    = o.pass && in_time;
        failed += !pass;
        std::printf("%s [%2d] %s: %s (%.2f s, limit %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                    o.detail.c_str(), secs, c.limit_s, in_time ? "" : ", exceeded");
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
