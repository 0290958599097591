#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#ifdef _WIN32
#error "posix only"
#endif
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

std::string cli() {
    const char* p = std::getenv("UNICLI_BIN");
    REQUIRE_MESSAGE(p != nullptr, "UNICLI_BIN must point at the unicli binary");
    return p;
}

int run(const std::string& args) {
    std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing file: ", p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("uniperc_cli_" + std::to_string(std::rand()) + std::to_string(std::rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& s) const { return (path / s).string(); }
};

const std::string kGenFlags =
    " --scenes 2 --val 1 --width 32 --height 32 --cam-speed 0.3 --wall-z 8 --seed 5";
const std::string kTrainFlags =
    " --seed 5 --scale 0.0001 --no-seg --no-flow-mask --stages 1 --d-min 0.05 --d-max 20";

}  // namespace

TEST_CASE("bad invocations exit with a usage error") {
    CHECK(run("") == 2);
    CHECK(run("frobnicate") == 2);
    CHECK(run("train") == 2);        // missing required --data/--run
    CHECK(run("gen-data") == 2);     // missing required --out
    CHECK(run("eval-seg --ckpt x --data y --task amodal") == 2);  // not a task
}

TEST_CASE("gen-data lays out a loadable dataset deterministically") {
    TempDir tmp;
    CHECK(run("gen-data --out " + tmp / "a" + kGenFlags) == 0);
    CHECK(run("gen-data --out " + tmp / "b" + kGenFlags) == 0);

    CHECK(fs::exists(tmp.path / "a" / "manifest.json"));
    CHECK(fs::exists(tmp.path / "a" / "scenes" / "scene_0000" / "frame_1.png"));
    auto manifest = nlohmann::json::parse(std::ifstream(tmp.path / "a" / "manifest.json"));
    CHECK(manifest.at("train_scenes").size() == 2);
    CHECK(manifest.at("val_scenes").size() == 1);

    for (const char* f : {"scenes/scene_0000/frame_0.png", "scenes/scene_0000/gt.nta",
                          "scenes/scene_0002/gt.nta", "manifest.json"})
        CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));

    // a different seed changes the rendered frames
    CHECK(run("gen-data --out " + tmp / "c" +
              " --scenes 2 --val 1 --width 32 --height 32 --cam-speed 0.3 --wall-z 8 --seed 6") ==
          0);
    CHECK(slurp(tmp.path / "a" / "scenes/scene_0000/frame_0.png") !=
          slurp(tmp.path / "c" / "scenes/scene_0000/frame_0.png"));
}

TEST_CASE("train writes config, per-step log and exactly the requested stage checkpoints") {
    TempDir tmp;
    REQUIRE(run("gen-data --out " + tmp / "ds" + kGenFlags) == 0);
    REQUIRE(run("train --data " + tmp / "ds" + " --run " + tmp / "run" + kTrainFlags) == 0);

    CHECK(fs::exists(tmp.path / "run" / "config.json"));
    CHECK(fs::exists(tmp.path / "run" / "checkpoints" / "stage1.ckpt"));
    CHECK_FALSE(fs::exists(tmp.path / "run" / "checkpoints" / "stage2.ckpt"));

    auto cfg = nlohmann::json::parse(std::ifstream(tmp.path / "run" / "config.json"));
    CHECK(cfg.at("command") == "train");
    CHECK(cfg.at("train").at("schedule").at("stages").size() == 1);

    // one json line per step, carrying the loss breakdown
    std::ifstream log(tmp.path / "run" / "logs" / "steps.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("total"));
        CHECK(j.contains("stage"));
        ++lines;
    }
    long expect = cfg.at("train").at("schedule").at("stages")[0].at("steps").get<long>();
    double scale = cfg.at("train").at("schedule").at("scale").get<double>();
    CHECK(lines == std::max(1l, std::lround(expect * scale)));
}

TEST_CASE("rerunning from the persisted config reproduces the checkpoint bit-for-bit") {
    TempDir tmp;
    REQUIRE(run("gen-data --out " + tmp / "ds" + kGenFlags) == 0);
    REQUIRE(run("train --data " + tmp / "ds" + " --run " + tmp / "r1" + kTrainFlags) == 0);
    REQUIRE(run("train --data " + tmp / "ds" + " --run " + tmp / "r2" + " --config " +
                tmp / "r1/config.json") == 0);
    CHECK(slurp(tmp.path / "r1" / "checkpoints" / "stage1.ckpt") ==
          slurp(tmp.path / "r2" / "checkpoints" / "stage1.ckpt"));
    // the replayed run records the same training configuration
    auto a = nlohmann::json::parse(std::ifstream(tmp.path / "r1" / "config.json"));
    auto b = nlohmann::json::parse(std::ifstream(tmp.path / "r2" / "config.json"));
    CHECK(a.at("train") == b.at("train"));
}

TEST_CASE("eval-depth runs on a fresh checkpoint and respects --split") {
    TempDir tmp;
    REQUIRE(run("gen-data --out " + tmp / "ds" + kGenFlags) == 0);
    REQUIRE(run("train --data " + tmp / "ds" + " --run " + tmp / "run" + kTrainFlags) == 0);
    std::string ckpt = tmp / "run/checkpoints/stage1.ckpt";
    CHECK(run("eval-depth --ckpt " + ckpt + " --data " + tmp / "ds" + " --split val") == 0);
    CHECK(run("eval-depth --ckpt " + ckpt + " --data " + tmp / "ds" + " --split train") == 0);
    CHECK(run("eval-seg --ckpt " + ckpt + " --data " + tmp / "ds" + " --task panoptic") == 0);
}

TEST_CASE("grad-check passes clean and catches a deliberately flipped gradient") {
    CHECK(run("grad-check --seed 3") == 0);
    CHECK(run("grad-check --seed 3 --flip photometric_loss") == 1);
}
