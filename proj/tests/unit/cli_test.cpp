#include <doctest.h>

#include <filesystem>
#include <sstream>

#include <json.hpp>
#include <unistd.h>

#include "cli.hpp"
#include "config.hpp"
#include "realcompo/errors.hpp"
#include "realcompo/io.hpp"

using namespace realcompo;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Invocation {
    int code = -1;
    std::string out;
    std::string err;
};

Invocation invoke(std::vector<std::string> args) {
    std::ostringstream out, err;
    Invocation r;
    r.code = cli::run_cli(args, out, err);
    r.out  = out.str();
    r.err  = err.str();
    return r;
}

struct Workspace {
    Workspace() : root(fs::temp_directory_path() / ("realcompo-cli-" + std::to_string(::getpid()))) {
        fs::create_directories(root);
        write_text(root / "run.yaml",
                   "testbed:\n  kind: blobworld\n  height: 8\n  width: 8\n  blob_radius: 2.0\n"
                   "prompt: a red cube and a blue ball\n"
                   "condition: stub\n"
                   "schedule:\n  steps: 10\n"
                   "seeds: 2\n"
                   "output:\n  dir: " +
                       (root / "out").string() + "\n");
    }
    ~Workspace() { fs::remove_all(root); }
    std::string config() const { return (root / "run.yaml").string(); }
    fs::path root;
};

std::vector<json> parse_jsonl(const std::string& text) {
    std::vector<json> rows;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        rows.push_back(json::parse(line));
    }
    return rows;
}

}  // namespace

TEST_CASE("config parsing") {
    const RunConfig minimal = cli::parse_config("testbed: blobworld\nprompt: a cup and a dog\ncondition: stub\n");
    CHECK(minimal.prompt == "a cup and a dog");
    CHECK(minimal.resolved_t0() == 50);
    CHECK(minimal.condition.source == ConditionSource::stub);

    const RunConfig full = cli::parse_config(
        "seed: 4\nt0: T\nbalancer:\n  rho: 0.2\n  gradient_mode: full\n  inner_updates: 0\n"
        "denoiser:\n  kind: micro\n  micro:\n    d_f: 8\n    param_seed: 3\n"
        "condition:\n  source: layout\n  path: boxes.json\n"
        "llm:\n  api_key_env: MY_KEY\n  model: local\n",
        "/data");
    CHECK(full.seed == 4);
    CHECK(full.resolved_t0() == 50);
    CHECK(full.balancer.rho == 0.2);
    CHECK(full.balancer.gradient_mode == GradientMode::full);
    CHECK(full.balancer.inner_updates == 0);
    CHECK(full.denoiser == DenoiserKind::micro);
    CHECK(full.micro.dims.d_f == 8);
    CHECK(full.condition.path == "/data/boxes.json");
    CHECK(full.llm.api_key_env == "MY_KEY");

    CHECK_THROWS_AS(cli::parse_config("colour: red\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_config("balancer:\n  rho: fast\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_config("llm:\n  api_key: sk-123\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_config("t0: 80\n"), ConfigError);

    // The resolved snapshot replays to the same config.
    const std::string yaml = cli::resolved_config_yaml(full);
    CHECK(cli::resolved_config_yaml(cli::parse_config(yaml)) == yaml);
    CHECK(cli::run_hash(full) == cli::run_hash(cli::parse_config(yaml)));
    RunConfig moved = full;
    moved.out_dir   = "elsewhere";
    CHECK(cli::run_hash(moved) == cli::run_hash(full));
    moved.seed = 5;
    CHECK(cli::run_hash(moved) != cli::run_hash(full));
}

TEST_CASE("usage errors") {
    const Invocation missing = invoke({"generate", "--config", "/nonexistent/run.yaml"});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("Usage") != std::string::npos);
    const json first = json::parse(missing.err.substr(0, missing.err.find('\n')));
    CHECK(first["error"]["type"] == "usage");

    CHECK(invoke({"generate"}).code == 2);
    CHECK(invoke({}).code == 2);
    CHECK(invoke({"paint"}).code == 2);
    CHECK(invoke({"--help"}).code == 0);

    Workspace ws;
    const Invocation bad = invoke({"generate", "--config", ws.config(), "--gradient-mode", "sideways"});
    CHECK(bad.code == 2);
    CHECK(json::parse(bad.err)["error"]["type"] == "config");
}

TEST_CASE("generate") {
    Workspace ws;
    const Invocation a = invoke({"generate", "--config", ws.config(), "--seed", "7"});
    REQUIRE(a.code == 0);
    const Invocation b = invoke({"generate", "--config", ws.config(), "--seed", "7"});
    REQUIRE(b.code == 0);
    const json ja = json::parse(a.out), jb = json::parse(b.out);
    CHECK(ja["sample_digest"] == jb["sample_digest"]);
    CHECK(ja["balanced_steps"] == 10);

    const fs::path dir = ja["run_dir"].get<std::string>();
    for (const char* f : {"resolved-config.yaml", "layout.json", "sample.rct", "sample.png", "metrics.json",
                          "trajectory.jsonl"}) {
        CHECK(fs::exists(dir / f));
    }
    CHECK(latent_digest(read_latent(dir / "sample.rct")) == ja["sample_digest"]);
    const json metrics = json::parse(read_text(dir / "metrics.json"));
    REQUIRE(metrics["objects"].size() == 2);
    for (const auto& o : metrics["objects"]) {
        CHECK(o["in_box_mass"].is_number());
    }
    const auto traj = parse_jsonl(read_text(dir / "trajectory.jsonl"));
    REQUIRE(traj.size() == 10);
    CHECK(traj.front()["t"] == 10);
    CHECK(traj.back()["t"] == 1);

    // The snapshot alone replays the run.
    const Invocation c = invoke({"generate", "--config", (dir / "resolved-config.yaml").string()});
    REQUIRE(c.code == 0);
    CHECK(json::parse(c.out)["sample_digest"] == ja["sample_digest"]);

    const Invocation d = invoke({"generate", "--config", ws.config(), "--seed", "8"});
    CHECK(json::parse(d.out)["sample_digest"] != ja["sample_digest"]);
    CHECK(json::parse(d.out)["run_dir"] != ja["run_dir"]);

    const Invocation pure = invoke({"generate", "--config", ws.config(), "--t0", "0"});
    REQUIRE(pure.code == 0);
    CHECK(json::parse(pure.out)["balanced_steps"] == 0);
}

TEST_CASE("gradcheck") {
    const Invocation ok = invoke({"gradcheck", "--denoiser", "analytic", "--size", "6"});
    CHECK(ok.code == 0);
    CHECK(ok.out.find("FAIL") == std::string::npos);
    CHECK(ok.out.find("PASS coe_gradient") != std::string::npos);

    const Invocation micro = invoke({"gradcheck", "--denoiser", "micro", "--size", "6"});
    CHECK(micro.code == 0);

    const Invocation broken =
        invoke({"gradcheck", "--denoiser", "analytic", "--size", "6", "--eta", "1", "--jacobian-mode", "consistent"});
    CHECK(broken.code == 1);
    CHECK(broken.out.find("FAIL coe_gradient") != std::string::npos);
    CHECK(broken.out.find("worst: ") != std::string::npos);
    CHECK(broken.out.find("cell (") != std::string::npos);
}

TEST_CASE("ablate, sweep and the other subcommands") {
    Workspace ws;
    const Invocation one = invoke({"ablate", "--config", ws.config(), "--seeds", "1"});
    REQUIRE(one.code == 0);
    const fs::path out = ws.root / "out";
    fs::path abl;
    for (const auto& e : fs::directory_iterator(out)) {
        if (e.path().filename().string().rfind("ablate-", 0) == 0) {
            abl = e.path();
        }
    }
    REQUIRE_FALSE(abl.empty());
    const json rep = json::parse(read_text(abl / "ablation.json"));
    CHECK(rep["rows"].size() == 1);
    CHECK(fs::exists(abl / "samples" / "seed0-dynamic.rct"));
    CHECK(fs::exists(abl / "samples" / "seed0-frozen.rct"));
    for (const auto& row : parse_jsonl(read_text(abl / "trajectories" / "seed0-frozen.jsonl"))) {
        CHECK_FALSE(row.contains("grad_l2_text"));
        CHECK_FALSE(row.contains("grad_l2_spatial"));
    }
    for (const auto& row : parse_jsonl(read_text(abl / "trajectories" / "seed0-dynamic.jsonl"))) {
        CHECK(row.contains("grad_l2_text"));
    }

    const Invocation sweep = invoke({"sweep-beta", "--config", ws.config(), "--beta-list", "0,1", "--seeds", "2"});
    REQUIRE(sweep.code == 0);
    CHECK(sweep.out.find("spearman") != std::string::npos);
    CHECK(invoke({"sweep-beta", "--config", ws.config(), "--beta-list", "0,x"}).code == 2);

    const Invocation dump = invoke({"dump-attn", "--config", ws.config(), "--step", "5"});
    CHECK(dump.code == 0);

    const Invocation tb = invoke({"make-testbed", "--config", ws.config(), "--out", (ws.root / "tb").string()});
    REQUIRE(tb.code == 0);
    const json tbj = json::parse(tb.out);
    CHECK(fs::exists(fs::path(tbj["dir"].get<std::string>()) / "text-mixture.json"));

    const Invocation lay = invoke({"layout", "--prompt", "a dog and a tree", "--backend", "stub"});
    REQUIRE(lay.code == 0);
    CHECK(json::parse(lay.out).size() == 2);
    const Invocation nothing = invoke({"layout", "--prompt", "an idea", "--backend", "stub"});
    CHECK(nothing.code == 2);
}
