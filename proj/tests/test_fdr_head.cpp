#include <cmath>
#include <set>

#include "doctest.h"
#include "fpvt/fdr_head.hpp"
#include "fpvt/gradcheck.hpp"
#include "fpvt/ops.hpp"
#include "oracles.hpp"

using namespace fpvt;

namespace {

FdrState make_state(int n, int m, int d, std::uint64_t seed = 0) {
    FdrConfig cfg;
    cfg.identities = n;
    cfg.groups = m;
    cfg.dim = d;
    cfg.seed = seed;
    return FdrState(cfg, Precision::f64);
}

// First identity mapped to each group.
std::vector<int> representatives(const FdrState& s) {
    std::vector<int> rep(static_cast<std::size_t>(s.config().groups), -1);
    for (int id = 0; id < s.config().identities; ++id) {
        auto& r = rep[static_cast<std::size_t>(s.group_of(id))];
        if (r < 0) r = id;
    }
    return rep;
}

}  // namespace

TEST_CASE("assign_groups requires fewer groups than identities") {
    CHECK_THROWS_AS(assign_groups(4, 4, 0), ConfigError);
    CHECK_THROWS_AS(assign_groups(4, 0, 0), ConfigError);
    CHECK_THROWS_AS(make_state(3, 5, 2), ConfigError);
}

TEST_CASE("assign_groups is deterministic under its seed") {
    CHECK(assign_groups(4, 2, 17) == assign_groups(4, 2, 17));
    bool differs = false;
    for (std::uint64_t s = 0; s < 10 && !differs; ++s) differs = assign_groups(50, 7, s) != assign_groups(50, 7, s + 100);
    CHECK(differs);
}

TEST_CASE("assign_groups is a surjection") {
    auto a = assign_groups(1000, 100, 3);
    REQUIRE(a.size() == 1000);
    std::vector<int> sizes(100, 0);
    for (int g : a) {
        REQUIRE(g >= 0);
        REQUIRE(g < 100);
        ++sizes[static_cast<std::size_t>(g)];
    }
    for (int s : sizes) {
        CHECK(s >= 1);
        CHECK(s <= 1000);
    }
}

TEST_CASE("corresponding_anchor is the weighted group mean") {
    Tensor f({2, 2}, {1, 0, 0, 1}, Precision::f64);
    auto mean = corresponding_anchor(f, {0, 0}, 0, {1, 1});
    CHECK(mean[0] == 0.5);
    CHECK(mean[1] == 0.5);
    auto weighted = corresponding_anchor(f, {0, 0}, 0, {1, 3});
    CHECK(weighted[0] == 0.25);
    CHECK(weighted[1] == 0.75);
    auto single = corresponding_anchor(f, {0, 1}, 1, {1, 1});
    CHECK(single[0] == 0.0);
    CHECK(single[1] == 1.0);
    CHECK_THROWS_AS(corresponding_anchor(f, {0, 0}, 1, {1, 1}), std::invalid_argument);
}

TEST_CASE("alpha scaling leaves the anchor unchanged") {
    Rng rng(1);
    auto f = oracle::random_tensor({5, 3}, rng);
    std::vector<int> groups{0, 1, 0, 0, 1};
    auto base = corresponding_anchor(f, groups, 0, {1, 1, 1, 1, 1});
    auto scaled = corresponding_anchor(f, groups, 0, {2.5, 2.5, 2.5, 2.5, 2.5});
    CHECK(oracle::max_abs_diff(base.data(), scaled.data()) < 1e-15);
}

TEST_CASE("orthonormal free anchors give one-hot logits") {
    auto s = make_state(3, 2, 2);
    s.anchors = Tensor({2, 2}, {1, 0, 0, 1}, Precision::f64);
    auto out = fdr_forward(Tensor({1, 2}, {1, 0}, Precision::f64), s, {});
    CHECK(out.logits.shape() == Shape{1, 2});
    CHECK(out.logits[0] == 1.0);
    CHECK(out.logits[1] == 0.0);
    CHECK(out.corresponding == std::vector<bool>{false, false});
    CHECK(out.targets.empty());
}

TEST_CASE("a labeled sample turns its group column into its own feature") {
    auto s = make_state(3, 2, 2);
    s.anchors = Tensor({2, 2}, {1, 0, 0, 1}, Precision::f64);
    const int id1 = representatives(s)[1];
    auto out = fdr_forward(Tensor({1, 2}, {0.6, 0.8}, Precision::f64), s, {id1});
    CHECK_FALSE(out.corresponding[0]);
    CHECK(out.corresponding[1]);
    CHECK(out.logits[0] == doctest::Approx(0.6));
    CHECK(out.logits[1] == doctest::Approx(1.0));
}

TEST_CASE("corresponding columns equal the group anchor and match a loop oracle") {
    Rng rng(2);
    const int d = 4, m = 3, B = 5;
    auto s = make_state(8, m, d, 9);
    s.anchors = oracle::random_tensor({d, m}, rng);
    auto f = oracle::random_tensor({B, d}, rng);
    auto reps = representatives(s);
    std::vector<int> ids{reps[0], reps[0], reps[2], reps[0], reps[2]};  // group 1 absent
    auto out = fdr_forward(f, s, ids);

    std::vector<int> groups;
    for (int id : ids) groups.push_back(s.group_of(id));
    CHECK(out.targets == groups);
    auto a0 = corresponding_anchor(f, groups, 0, std::vector<double>(B, 1.0));
    for (int r = 0; r < d; ++r) CHECK(out.effective[r * m + 0] == doctest::Approx(a0[r]).epsilon(1e-14));

    // Explicit substitution followed by a triple loop.
    std::vector<double> w(s.anchors.data().begin(), s.anchors.data().end());
    for (int l : {0, 2}) {
        int count = 0;
        std::vector<double> acc(d, 0.0);
        for (int i = 0; i < B; ++i)
            if (groups[static_cast<std::size_t>(i)] == l) {
                ++count;
                for (int r = 0; r < d; ++r) acc[static_cast<std::size_t>(r)] += f[i * d + r];
            }
        for (int r = 0; r < d; ++r) w[static_cast<std::size_t>(r * m + l)] = acc[static_cast<std::size_t>(r)] / count;
    }
    std::vector<double> expected(B * m, 0.0);
    for (int i = 0; i < B; ++i)
        for (int l = 0; l < m; ++l)
            for (int r = 0; r < d; ++r) expected[static_cast<std::size_t>(i * m + l)] += w[static_cast<std::size_t>(r * m + l)] * f[i * d + r];
    CHECK(oracle::max_abs_diff(out.logits.data(), expected) < 1e-6);
    CHECK(out.corresponding == std::vector<bool>{true, false, true});
}

TEST_CASE("substituted and stored columns agree once the column equals its anchor") {
    Rng rng(3);
    const int d = 3, m = 2, B = 4;
    auto s = make_state(6, m, d, 4);
    auto f = oracle::random_tensor({B, d}, rng);
    auto reps = representatives(s);
    std::vector<int> ids{reps[0], reps[1], reps[1], reps[0]};
    auto sub = fdr_forward(f, s, ids);
    s.anchors = sub.effective.detach();
    auto plain = ops::matmul(f, s.anchors);
    CHECK(oracle::max_abs_diff(sub.logits.data(), plain.data()) < 1e-14);
}

TEST_CASE("unknown identities are rejected") {
    auto s = make_state(5, 2, 2);
    CHECK_THROWS_AS(fdr_forward(Tensor::zeros({1, 2}, Precision::f64), s, {7}), std::out_of_range);
    CHECK_THROWS_AS(fdr_forward(Tensor::zeros({1, 3}, Precision::f64), s, {0}), ShapeError);
}

TEST_CASE("alpha hook weights the corresponding anchor") {
    auto s = make_state(3, 2, 2);
    const int id = representatives(s)[0];
    s.alpha = [](const Tensor&) { return std::vector<double>{1.0, 3.0}; };
    Tensor f({2, 2}, {1, 0, 0, 1}, Precision::f64);
    auto out = fdr_forward(f, s, {id, id});
    CHECK(out.effective[0 * 2 + 0] == 0.25);
    CHECK(out.effective[1 * 2 + 0] == 0.75);
}

TEST_CASE("write-back moves corresponding columns toward their anchors") {
    Rng rng(4);
    auto s = make_state(6, 3, 2, 1);
    auto before = s.anchors.clone();
    auto reps = representatives(s);
    auto f = oracle::random_tensor({2, 2}, rng);
    auto out = fdr_forward(f, s, {reps[1], reps[1]});
    write_back(s, out);
    for (int r = 0; r < 2; ++r)
        for (int l = 0; l < 3; ++l) {
            const auto i = r * 3 + l;
            const double expected = l == 1 ? 0.9 * before[i] + 0.1 * out.effective[i] : before[i];
            CHECK(s.anchors[i] == doctest::Approx(expected).epsilon(1e-14));
        }
}

TEST_CASE("output width is m; saving over an n-way classifier is (n - m) d") {
    auto s = make_state(100, 10, 16);
    Rng rng(5);
    auto out = fdr_forward(oracle::random_tensor({3, 16}, rng), s, {1, 50, 99});
    CHECK(out.logits.dim(1) == 10);
    CHECK(fdr_parameter_saving(100, 10, 16) == 1440);
    CHECK(s.anchors.numel() + fdr_parameter_saving(100, 10, 16) == 100 * 16);
}

TEST_CASE("margin softmax loss values") {
    Tensor logits({1, 2}, {std::log(2.0), 0.0}, Precision::f64);
    CHECK(margin_softmax_loss(logits, {0}, 0.0, 1.0).item() == doctest::Approx(-std::log(2.0 / 3.0)).epsilon(1e-12));
    CHECK(-std::log(2.0 / 3.0) == doctest::Approx(0.405).epsilon(1e-3));

    Tensor f({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, Precision::f64);
    auto cos = cosine_logits(f, f);
    CHECK(margin_softmax_loss(cos, {0, 1, 2}, 0.0, 64.0).item() < 1e-3);

    CHECK_THROWS_AS(margin_softmax_loss(logits, {2}, 0.5, 64.0), std::out_of_range);
}

TEST_CASE("margin raises the loss for the target column") {
    Rng rng(6);
    auto cos = oracle::random_tensor({4, 5}, rng);
    std::vector<int> t{0, 3, 4, 1};
    CHECK(margin_softmax_loss(cos, t, 0.5, 8.0).item() > margin_softmax_loss(cos, t, 0.0, 8.0).item());
}

TEST_CASE("margin softmax through the head passes a gradient check") {
    Rng rng(7);
    const int d = 4, m = 3, B = 6;
    auto s = make_state(9, m, d, 2);
    s.anchors = oracle::param({d, m}, rng);
    auto f = oracle::param({B, d}, rng);
    auto reps = representatives(s);
    std::vector<int> ids{reps[0], reps[2], reps[0], reps[2], reps[0], reps[2]};
    auto rep = check_gradients(
        "fdr", [&] {
            auto out = fdr_forward(f, s, ids);
            return margin_softmax_loss(cosine_logits(f, out.effective), out.targets, 0.5, 4.0);
        },
        {f, s.anchors});
    CHECK(rep.checked > 0);
    CHECK_MESSAGE(rep.passed, rep.worst_tensor, "[", rep.worst_index, "] rel ", rep.max_rel_error);
}
