#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "fpvt/checkpoint.hpp"
#include "fpvt/dataset.hpp"
#include "fpvt/trainer.hpp"
#include "fpvt/verification.hpp"
#include "oracles.hpp"

using namespace fpvt;

namespace {

SyntheticFaceSpec small_spec(int size = 16) {
    SyntheticFaceSpec s;
    s.identities = 6;
    s.samples_per_identity = 4;
    s.image_size = size;
    s.seed = 11;
    return s;
}

ModelConfig small_model(Precision p = Precision::f64) {
    auto cfg = ModelConfig::toy();
    cfg.input_h = cfg.input_w = 16;
    cfg.stages[0].channels = 8;
    cfg.stages[1].channels = 8;
    cfg.stages[0].expand = cfg.stages[1].expand = 2;
    cfg.embed_dim = 8;
    cfg.precision = p;
    cfg.seed = 5;
    return cfg;
}

FdrConfig small_fdr(const SyntheticFaceSpec& s, const ModelConfig& m) {
    FdrConfig f;
    f.identities = s.identities;
    f.groups = 3;
    f.dim = m.embed_dim;
    f.seed = 2;
    return f;
}

// Everything a trainer borrows, kept alive together.
struct Rig {
    Dataset data;
    Model model;
    FdrState head;
    Trainer trainer;

    Rig(const SyntheticFaceSpec& s, const ModelConfig& m, TrainConfig t, OptimizerConfig o = {})
        : data(generate_dataset(s, m.precision)),
          model(m),
          head(small_fdr(s, m), m.precision),
          trainer(model, head, data, t, o) {}
};

TrainConfig small_train() {
    TrainConfig t;
    t.batch = 6;
    t.seed = 9;
    return t;
}

}  // namespace

TEST_CASE("rendering is a pure function of dataset settings, identity and sample") {
    auto s = small_spec();
    CHECK(render_face(s, 3, 2) == render_face(s, 3, 2));
    CHECK(render_face(s, 3, 2) != render_face(s, 3, 1));
    CHECK(render_face(s, 3, 2) != render_face(s, 2, 2));
    auto d = generate_dataset(s);
    CHECK(d.images.shape() == Shape{24, 3, 16, 16});
    CHECK(d.labels[5] == 1);
    auto img = render_face(s, 1, 1);
    auto stored = d.image(5);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(stored[i] == static_cast<double>(static_cast<float>(img[i])));
}

TEST_CASE("without noise and jitter all samples of an identity coincide") {
    auto s = small_spec();
    s.noise_std = 0.0;
    s.pose_jitter = 0.0;
    for (int j = 1; j < 4; ++j) CHECK(render_face(s, 2, 0) == render_face(s, 2, j));
}

TEST_CASE("the toy dataset is learnable by a nearest-centroid baseline") {
    SyntheticFaceSpec s;  // 10 identities x 20 samples, 32x32
    CHECK(s.identities == 10);
    CHECK(s.samples_per_identity == 20);
    CHECK(s.image_size == 32);
    const double acc = nearest_centroid_accuracy(generate_dataset(s));
    CHECK(acc > 0.5);
}

TEST_CASE("augment: forced flip is an involution without resizing") {
    Rng rng(1);
    auto img = render_face(small_spec(), 0, 0);
    AugmentConfig cfg{0, 1.0};
    auto once = augment(img, 3, 16, rng, cfg);
    CHECK(once != img);
    CHECK(once == flip_horizontal(img, 3, 16, 16));
    CHECK(augment(once, 3, 16, rng, cfg) == img);
}

TEST_CASE("augment: cropping a constant image gives the constant") {
    Rng rng(2);
    std::vector<double> img(3 * 16 * 16, 0.375);
    for (int i = 0; i < 5; ++i) {
        for (double v : augment(img, 3, 16, rng)) CHECK(v == doctest::Approx(0.375).epsilon(1e-15));
    }
}

TEST_CASE("augment: deterministic under the seed, shape and range preserved") {
    auto img = render_face(small_spec(), 4, 1);
    Rng a(7), b(7);
    CHECK(augment(img, 3, 16, a) == augment(img, 3, 16, b));
    const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
        auto out = augment(img, 3, 16, rng, AugmentConfig{1 + i % 6, 0.5});
        CHECK(out.size() == img.size());
        for (double v : out) {
            CHECK(v >= *lo - 1e-12);
            CHECK(v <= *hi + 1e-12);
        }
    }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(3);
    Checkpoint c;
    c.config_text = "run.seed = 4\nmodel.precision = f64\n";
    c.optimizer_step = 77;
    c.trainer_step = 78;
    const double specials[] = {-0.0, std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::max(), 1.0 / 3.0};
    c.tensors.emplace_back("wide", Tensor({2, 2}, {specials[0], specials[1], specials[2], specials[3]}, Precision::f64));
    c.tensors.emplace_back("narrow", oracle::random_tensor({3, 1, 2}, rng, Precision::f32));
    c.tensors.emplace_back("scalar", Tensor::scalar(-1.5f));
    c.rng_state = rng.state();

    const auto bytes = serialize(c);
    CHECK(bytes.substr(0, 4) == "FPVT");
    auto back = deserialize(bytes);
    CHECK(back.config_text == c.config_text);
    CHECK(back.rng_state == c.rng_state);
    CHECK(back.optimizer_step == 77);
    CHECK(back.trainer_step == 78);
    REQUIRE(back.tensors.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.tensors[i].first == c.tensors[i].first);
        CHECK(back.tensors[i].second.shape() == c.tensors[i].second.shape());
        CHECK(back.tensors[i].second.precision() == c.tensors[i].second.precision());
        CHECK(std::memcmp(back.tensors[i].second.data().data(), c.tensors[i].second.data().data(),
                          c.tensors[i].second.data().size_bytes()) == 0);
    }
    CHECK(std::signbit(back.find("wide")->data()[0]));
    CHECK(serialize(back) == bytes);

    Rng restored;
    restored.set_state(back.rng_state);
    CHECK(restored.next() == rng.next());

    const auto path = std::filesystem::temp_directory_path() / "fpvt_test_roundtrip.fpvt";
    save_checkpoint(path, c);
    CHECK(serialize(load_checkpoint(path)) == bytes);
    std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
    Checkpoint c;
    c.tensors.emplace_back("t", Tensor::zeros({4}));
    auto bytes = serialize(c);
    CHECK_THROWS_AS(deserialize("XXXX" + bytes.substr(4)), CheckpointError);
    CHECK_THROWS_AS(deserialize(bytes.substr(0, bytes.size() - 1)), CheckpointError);
    CHECK_THROWS_AS(deserialize(bytes + "x"), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.fpvt"), CheckpointError);
}

TEST_CASE("lr = 0 leaves the model parameters unchanged") {
    OptimizerConfig o;
    o.lr = 0.0;
    Rig rig(small_spec(), small_model(), small_train(), o);
    std::vector<std::vector<double>> before;
    for (auto& p : rig.model.registry().params()) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    for (int i = 0; i < 3; ++i) rig.trainer.step();
    auto params = rig.model.registry().params();
    for (std::size_t k = 0; k < params.size(); ++k) {
        CHECK(oracle::max_abs_diff(params[k].tensor.data(), before[k]) == 0.0);
    }
}

TEST_CASE("loss on a fixed batch decreases over 50 steps at the default lr") {
    SyntheticFaceSpec s;
    auto m = ModelConfig::toy();
    TrainConfig t;
    t.augment = false;
    t.fixed_batch = {0, 21, 45, 67, 88, 110, 131, 152};
    Dataset data = generate_dataset(s);
    Model model(m);
    FdrConfig f;
    f.dim = m.embed_dim;
    FdrState head(f, m.precision);
    Trainer trainer(model, head, data, t, OptimizerConfig{});
    std::vector<double> loss;
    for (int i = 0; i < 50; ++i) loss.push_back(trainer.step().loss);
    const double first = (loss[0] + loss[1] + loss[2]) / 3, last = (loss[47] + loss[48] + loss[49]) / 3;
    MESSAGE("fixed-batch loss ", first, " -> ", last);
    CHECK(last < first);
    CHECK(last < 0.5 * first);
}

TEST_CASE("resuming from a checkpoint reproduces the next step bit-exactly") {
    const std::string cfg_text = "echo";
    Rig a(small_spec(), small_model(), small_train());
    for (int i = 0; i < 3; ++i) a.trainer.step();
    const auto bytes = serialize(a.trainer.checkpoint(cfg_text));
    const auto next = a.trainer.step();

    Rig b(small_spec(), small_model(), small_train());
    b.trainer.restore(deserialize(bytes));
    CHECK(b.trainer.steps_done() == 3);
    const auto replay = b.trainer.step();
    CHECK(replay.step == next.step);
    CHECK(std::bit_cast<std::uint64_t>(replay.loss) == std::bit_cast<std::uint64_t>(next.loss));
    CHECK(serialize(a.trainer.checkpoint(cfg_text)) == serialize(b.trainer.checkpoint(cfg_text)));
}

TEST_CASE("same seed gives identical logs and checkpoints in 64-bit mode") {
    Rig a(small_spec(), small_model(), small_train()), b(small_spec(), small_model(), small_train());
    for (int i = 0; i < 3; ++i) {
        auto la = a.trainer.step(), lb = b.trainer.step();
        CHECK(la.loss == lb.loss);
        CHECK(la.acc == lb.acc);
    }
    CHECK(serialize(a.trainer.checkpoint("x")) == serialize(b.trainer.checkpoint("x")));
}

TEST_CASE("log lines carry step, loss, accuracy, lr and elapsed time") {
    Rig rig(small_spec(), small_model(), small_train());
    auto log = rig.trainer.step();
    std::istringstream is(log.line());
    long long step = 0;
    double loss = 0, acc = 0, lr = 0, ms = 0;
    is >> step >> loss >> acc >> lr >> ms;
    CHECK_FALSE(is.fail());
    std::string rest;
    CHECK_FALSE(static_cast<bool>(is >> rest));
    CHECK(step == 1);
    CHECK(lr == doctest::Approx(3e-4));
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(ms >= 0.0);
}

TEST_CASE("a non-finite loss aborts with the step index") {
    Rig rig(small_spec(), small_model(), small_train());
    rig.trainer.step();
    rig.trainer.step();
    auto w = rig.model.registry().find("head.weight")->tensor;
    w.mutable_data()[0] = std::numeric_limits<double>::infinity();
    try {
        rig.trainer.step();
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 3);
        CHECK(std::string(e.what()).find("step 3") != std::string::npos);
    }
    CHECK(rig.trainer.steps_done() == 2);
}

TEST_CASE("trainer rejects inconsistent sizes") {
    auto s = small_spec();
    auto m = small_model();
    Dataset data = generate_dataset(s, m.precision);
    Model model(m);
    auto f = small_fdr(s, m);
    f.dim = 5;
    FdrState head(f, m.precision);
    CHECK_THROWS_AS(Trainer(model, head, data, small_train(), {}), ConfigError);
}

TEST_CASE("verification: separable similarities give accuracy 1 in every fold") {
    std::vector<double> sim;
    std::vector<bool> same;
    for (int i = 0; i < 600; ++i) {
        same.push_back(i % 2 == 0);
        sim.push_back(same.back() ? 0.9 : 0.1);
    }
    auto rep = kfold_verification(sim, same, 10);
    REQUIRE(rep.fold_accuracy.size() == 10);
    for (double a : rep.fold_accuracy) CHECK(a == 1.0);
    CHECK(rep.mean == 1.0);
    CHECK(rep.stddev == 0.0);
    for (double t : rep.thresholds) {
        CHECK(t >= 0.1);
        CHECK(t < 0.9);
    }
}

TEST_CASE("verification: random embeddings and labels sit at chance") {
    Rng rng(21);
    std::vector<VerificationPair> pairs;
    for (int i = 0; i < 1000; ++i) {
        pairs.push_back({oracle::random_tensor({16}, rng), oracle::random_tensor({16}, rng), rng.uniform() < 0.5});
    }
    auto rep = kfold_verification(pairs, 10);
    const double sigma = std::sqrt(0.25 / 1000.0);
    MESSAGE("null accuracy ", rep.mean, " +- ", rep.stddev);
    CHECK(std::abs(rep.mean - 0.5) <= 3 * sigma);
}

TEST_CASE("verification: identical embeddings give the majority prior") {
    std::vector<double> sim(100, 1.0);
    std::vector<bool> same;
    for (int i = 0; i < 100; ++i) same.push_back(i % 10 < 3);
    auto rep = kfold_verification(sim, same, 10);
    for (double a : rep.fold_accuracy) CHECK(a == doctest::Approx(0.7));
    CHECK(rep.mean == doctest::Approx(0.7));

    Tensor e({4}, {0.3, -0.1, 0.2, 0.5}, Precision::f64);
    std::vector<VerificationPair> pairs;
    for (int i = 0; i < 100; ++i) pairs.push_back({e, e, i % 10 >= 3});
    CHECK(kfold_verification(pairs, 10).mean == doctest::Approx(0.7));
}

TEST_CASE("verification is invariant to rescaling the embeddings") {
    Rng rng(22);
    std::vector<VerificationPair> pairs, scaled;
    for (int i = 0; i < 200; ++i) {
        auto a = oracle::random_tensor({8}, rng), b = oracle::random_tensor({8}, rng);
        const bool same = rng.uniform() < 0.5;
        pairs.push_back({a, b, same});
        std::vector<double> sa(a.data().begin(), a.data().end()), sb(b.data().begin(), b.data().end());
        for (auto& v : sa) v *= 3.7;
        for (auto& v : sb) v *= 0.02;
        scaled.push_back({Tensor({8}, sa, Precision::f64), Tensor({8}, sb, Precision::f64), same});
    }
    auto r1 = kfold_verification(pairs, 10), r2 = kfold_verification(scaled, 10);
    CHECK(r1.fold_accuracy == r2.fold_accuracy);
    CHECK(r1.thresholds == r2.thresholds);
}

TEST_CASE("verification protocol errors") {
    std::vector<double> sim(30, 0.5);
    std::vector<bool> mixed(30, false);
    mixed[0] = mixed[29] = true;
    CHECK_THROWS_AS(kfold_verification(sim, mixed, 7), ProtocolError);
    CHECK_THROWS_AS(kfold_verification(sim, mixed, 1), ProtocolError);
    CHECK_THROWS_AS(kfold_verification(sim, std::vector<bool>(30, true), 10), ProtocolError);
    // Only fold 1 holds a "same" pair, so its training split has a single label.
    std::vector<bool> one(30, false);
    one[1] = true;
    CHECK_THROWS_AS(kfold_verification(sim, one, 10), ProtocolError);
}

TEST_CASE("pairs files: comments, blank lines and malformed lines") {
    std::istringstream ok("# header\n0 1 0 2 1\n\n3 0 4 0 0   # trailing\n");
    auto pairs = parse_pairs(ok, "p.txt");
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].same);
    CHECK(pairs[1].id_b == 4);
    CHECK_FALSE(pairs[1].same);

    std::string text;
    for (int i = 1; i < 17; ++i) text += "0 0 1 1 0\n";
    text += "0 0 1 x 0\n";
    std::istringstream bad(text);
    try {
        parse_pairs(bad, "p.txt");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 17);
        CHECK(std::string(e.what()).find("p.txt:17") == 0);
    }
    std::istringstream label("0 0 1 1 2\n");
    CHECK_THROWS_AS(parse_pairs(label, "p"), ParseError);
    std::istringstream fields("0 0 1 1\n");
    CHECK_THROWS_AS(parse_pairs(fields, "p"), ParseError);
}

TEST_CASE("bench: zero images is an error; the toy model is faster than the default") {
    Model toy(ModelConfig::toy());
    CHECK_THROWS_AS(bench_inference(toy, 0, 0), std::invalid_argument);
    auto t = bench_inference(toy, 3, 1);
    CHECK(t.images == 3);
    CHECK(t.median_ms > 0.0);
    CHECK(t.p95_ms >= t.median_ms);
    Model full(ModelConfig::fpvt_default());
    auto f = bench_inference(full, 1, 0);
    MESSAGE("toy ", t.median_ms, " ms, default ", f.median_ms, " ms");
    CHECK(t.median_ms < f.median_ms);
}
