#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "fpvt/cli.hpp"
#include "fpvt/config.hpp"
#include "oracles.hpp"

using namespace fpvt;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"(# tiny 64-bit run
model.precision = f64
model.input_size = 16
model.embed_dim = 8
stage1.channels = 8
stage1.expand = 2
stage2.channels = 8
stage2.expand = 2
data.identities = 6
data.samples = 4
fdr.groups = 3
train.batch = 4
train.steps = 3
)";

struct Result {
    int code;
    std::string out, err;
};

Result cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("fpvt_cli_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name, const std::string& content) const {
        std::ofstream(path / name) << content;
        return (path / name).string();
    }
    std::string str(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::int64_t value_after(const std::string& text, const std::string& key) {
    const auto pos = text.find(key);
    REQUIRE(pos != std::string::npos);
    return std::stoll(text.substr(pos + key.size()));
}

}  // namespace

TEST_CASE("config: an empty file is the toy configuration") {
    auto cfg = parse_config("");
    const auto toy = ModelConfig::toy();
    REQUIRE(cfg.model.stages.size() == toy.stages.size());
    CHECK(cfg.model.input_h == 32);
    CHECK(cfg.model.embed_dim == toy.embed_dim);
    CHECK(cfg.data.identities == 10);
    CHECK(cfg.data.samples_per_identity == 20);
    CHECK(cfg.fdr.groups == 5);
    CHECK(cfg.optim.lr == 3e-4);
    CHECK(cfg.optim.weight_decay == 0.05);
    CHECK(cfg.train.batch == 32);
}

TEST_CASE("config: keys, presets and comments") {
    auto cfg = parse_config("# comment\nmodel.preset = fpvt   # trailing\n\nstage2.heads = 4\noptim.kind = sgd\n");
    CHECK(cfg.model.stages.size() == 4);
    CHECK(cfg.model.stages[1].heads == 4);
    CHECK(cfg.model.input_h == 112);
    CHECK(cfg.optim.kind == OptimizerKind::sgd);
    // Preset applies first even when written last.
    auto late = parse_config("stage1.channels = 16\nmodel.preset = toy\n");
    CHECK(late.model.stages[0].channels == 16);
}

TEST_CASE("config: errors carry the source and line number") {
    auto expect_error = [](const std::string& text, const std::string& needle) {
        try {
            parse_config(text, "cfg.txt");
            FAIL("expected ConfigError for: " << text);
        } catch (const ConfigError& e) {
            CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
        }
    };
    expect_error("model.embed_dim = 8\nmodel.embd_dim = 8\n", "cfg.txt:2: unknown key 'model.embd_dim'");
    expect_error("\n\ntrain.steps = many\n", "cfg.txt:3:");
    expect_error("no equals sign\n", "cfg.txt:1:");
    expect_error("train.batch = 4\ntrain.batch = 5\n", "cfg.txt:2:");
    expect_error("stage3.channels = 8\n", "cfg.txt:1:");
    expect_error("fdr.groups = 10\n", "fdr.groups");
    expect_error("stage2.heads = 3\n", "stage 2");
    expect_error("model.precision = f16\n", "cfg.txt:1:");
}

TEST_CASE("config: canonical text round-trips") {
    auto cfg = parse_config(kSmallConfig);
    cfg.seed = 77;
    cfg.optim.lr = 1.0 / 3.0;
    const auto text = to_text(cfg);
    CHECK(to_text(parse_config(text)) == text);
    CHECK(parse_config(text).optim.lr == 1.0 / 3.0);
}

TEST_CASE("cli: usage errors exit 2") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({"train"}).code == 2);  // --out is required
    auto r = cli({"audit", "--config", "/no/such/file.cfg"});
    CHECK(r.code == 2);
    CHECK(r.err.find("/no/such/file.cfg") != std::string::npos);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("cli train: unreadable config names the offending line") {
    TempDir dir("badcfg");
    auto cfg = dir.file("bad.cfg", "train.steps = 2\nmodel.bogus = 1\n");
    auto r = cli({"train", "--config", cfg, "--out", dir.str("out")});
    CHECK(r.code == 2);
    CHECK(r.err.find("bad.cfg:2") != std::string::npos);
}

TEST_CASE("cli train: zero steps writes only the initial checkpoint") {
    TempDir dir("zero");
    auto cfg = dir.file("small.cfg", kSmallConfig);
    auto r = cli({"train", "--config", cfg, "--out", dir.str("out"), "--steps", "0"});
    CHECK(r.code == 0);
    std::vector<std::string> files;
    for (auto& e : fs::directory_iterator(dir.path / "out")) {
        if (e.path().extension() == ".fpvt") files.push_back(e.path().filename().string());
    }
    CHECK(files == std::vector<std::string>{"step_000000.fpvt"});
}

TEST_CASE("cli train: same seed gives byte-identical checkpoints and logs") {
    TempDir dir("determinism");
    auto cfg = dir.file("small.cfg", kSmallConfig);
    auto a = cli({"train", "--config", cfg, "--out", dir.str("a"), "--seed", "5"});
    auto b = cli({"train", "--config", cfg, "--out", dir.str("b"), "--seed", "5"});
    auto c = cli({"train", "--config", cfg, "--out", dir.str("c"), "--seed", "6"});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    REQUIRE(c.code == 0);
    const auto fa = slurp(dir.path / "a" / "step_000003.fpvt");
    CHECK(!fa.empty());
    CHECK(fa == slurp(dir.path / "b" / "step_000003.fpvt"));
    CHECK(fa != slurp(dir.path / "c" / "step_000003.fpvt"));

    // Log lines agree except for the wall-clock column.
    auto strip = [](const std::string& log) {
        std::istringstream is(log);
        std::string out, line;
        while (std::getline(is, line)) out += line.substr(0, line.rfind(' ')) + "\n";
        return out;
    };
    const auto la = slurp(dir.path / "a" / "train.log");
    CHECK(std::count(la.begin(), la.end(), '\n') == 3);
    CHECK(strip(la) == strip(slurp(dir.path / "b" / "train.log")));
}

TEST_CASE("cli train: resuming continues to the same final checkpoint") {
    TempDir dir("resume");
    auto cfg = dir.file("small.cfg", kSmallConfig);
    REQUIRE(cli({"train", "--config", cfg, "--out", dir.str("full")}).code == 0);
    REQUIRE(cli({"train", "--config", cfg, "--out", dir.str("part"), "--steps", "1"}).code == 0);
    REQUIRE(cli({"train", "--config", cfg, "--out", dir.str("rest"), "--resume", dir.str("part/step_000001.fpvt")}).code == 0);
    CHECK(slurp(dir.path / "full" / "step_000003.fpvt") == slurp(dir.path / "rest" / "step_000003.fpvt"));
}

TEST_CASE("cli audit: totals, module table, reference line and depthwise ratio") {
    auto toy = cli({"audit"});
    REQUIRE(toy.code == 0);
    const auto cfg = parse_config("").resolved();
    Model model(cfg.model);
    std::int64_t by_hand = 0;
    for (const auto& e : model.registry().entries()) {
        if (e.trainable) by_hand += e.tensor.numel();
    }
    CHECK(value_after(toy.out, "total_params=") == by_hand);
    CHECK(toy.out.find("stage1.layer0.attn") != std::string::npos);
    CHECK(toy.out.find("4672 / 36864") != std::string::npos);

    TempDir dir("audit");
    auto def = cli({"audit", "--config", dir.file("fpvt.cfg", "model.preset = fpvt\n")});
    REQUIRE(def.code == 0);
    CHECK(def.out.find("28.2M") != std::string::npos);
    CHECK(def.out.find("not asserted") != std::string::npos);
    CHECK(value_after(def.out, "total_params=") == audit(Model(ModelConfig::fpvt_default())).total_params);
}

TEST_CASE("cli gradcheck: passes by default, fails below float noise and on a corrupted rule") {
    auto ok = cli({"gradcheck"});
    CHECK(ok.code == 0);
    CHECK(ok.out.find("FAIL") == std::string::npos);
    CHECK(ok.out.find("ok   model") != std::string::npos);

    auto tight = cli({"gradcheck", "--tolerance", "1e-12"});
    CHECK(tight.code == 1);
    CHECK(tight.out.find("FAIL matmul") != std::string::npos);
    CHECK(tight.out.find("max_rel_err=") != std::string::npos);
    CHECK(tight.out.find(" at ") != std::string::npos);

    auto fault = cli({"gradcheck", "--inject-fault"});
    CHECK(fault.code == 1);
    CHECK(fault.out.find("FAIL corrupted_identity") != std::string::npos);
    CHECK(fault.out.find("FAIL matmul") == std::string::npos);
}

TEST_CASE("cli eval: separable pairs, malformed lines and chance level") {
    TempDir dir("eval");
    auto cfg = dir.file("clean.cfg", std::string(kSmallConfig) + "data.noise_std = 0\ndata.pose_jitter = 0\n");
    REQUIRE(cli({"train", "--config", cfg, "--out", dir.str("run"), "--steps", "0"}).code == 0);
    const auto ckpt = dir.str("run/step_000000.fpvt");

    // Without noise or jitter every sample of an identity is the same image.
    std::string pairs = "# separable\n";
    for (int i = 0; i < 100; ++i) {
        const int a = i % 6, b = (a + 1 + i % 5) % 6;
        pairs += i % 2 ? std::to_string(a) + " 0 " + std::to_string(a) + " 1 1\n"
                       : std::to_string(a) + " 0 " + std::to_string(b) + " 0 0\n";
    }
    auto sep = cli({"eval", "--ckpt", ckpt, "--pairs", dir.file("sep.txt", pairs), "--folds", "10"});
    CHECK(sep.code == 0);
    CHECK(sep.out.find("mean_accuracy=1.0000") != std::string::npos);
    CHECK(sep.out.find("fold 10 accuracy=") != std::string::npos);

    std::string bad;
    for (int i = 1; i < 17; ++i) bad += "0 0 1 0 0\n";
    bad += "0 0 1 zero 0\n";
    auto mal = cli({"eval", "--ckpt", ckpt, "--pairs", dir.file("bad.txt", bad)});
    CHECK(mal.code == 2);
    CHECK(mal.err.find(":17:") != std::string::npos);

    CHECK(cli({"eval", "--ckpt", dir.str("missing.fpvt"), "--pairs", dir.str("sep.txt")}).code == 2);
}

TEST_CASE("cli eval: random pairs sit near chance") {
    TempDir dir("null");
    auto cfg = dir.file("small.cfg", kSmallConfig);
    REQUIRE(cli({"train", "--config", cfg, "--out", dir.str("run"), "--steps", "0"}).code == 0);
    Rng rng(31);
    std::string pairs;
    for (int i = 0; i < 1000; ++i) {
        pairs += std::to_string(rng.below(6)) + " " + std::to_string(rng.below(50)) + " " + std::to_string(rng.below(6)) +
                 " " + std::to_string(rng.below(50)) + " " + std::to_string(rng.below(2)) + "\n";
    }
    auto r = cli({"eval", "--ckpt", dir.str("run/step_000000.fpvt"), "--pairs", dir.file("null.txt", pairs)});
    REQUIRE(r.code == 0);
    const auto pos = r.out.find("mean_accuracy=");
    const double mean = std::stod(r.out.substr(pos + 14));
    MESSAGE(r.out.substr(pos));
    CHECK(std::abs(mean - 0.5) <= 3 * std::sqrt(0.25 / 1000));
}

TEST_CASE("cli bench: key=value output ending in median_ms") {
    auto r = cli({"bench", "--n", "1", "--warmup", "1"});
    REQUIRE(r.code == 0);
    std::istringstream is(r.out);
    std::string line, last;
    std::map<std::string, std::string> kv;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        for (std::string tok; ls >> tok;) {
            const auto eq = tok.find('=');
            REQUIRE(eq != std::string::npos);
            kv[tok.substr(0, eq)] = tok.substr(eq + 1);
        }
        last = line;
    }
    CHECK(last.rfind("median_ms=", 0) == 0);
    CHECK(std::stod(kv["median_ms"]) > 0.0);
    CHECK(kv["images"] == "1");
    CHECK(cli({"bench", "--n", "0"}).code == 2);
}
