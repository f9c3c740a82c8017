#include "fpvt/verification.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <sstream>

namespace fpvt {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

namespace {

constexpr int kGrid = 2000;

double grid_threshold(int i) { return static_cast<double>(i) / 1000.0 - 1.0; }

double accuracy_at(const std::vector<double>& sim, const std::vector<bool>& same, const std::vector<std::size_t>& idx,
                   double t) {
    std::size_t ok = 0;
    for (auto i : idx) ok += (sim[i] > t) == same[i];
    return static_cast<double>(ok) / static_cast<double>(idx.size());
}

}  // namespace

EvalReport kfold_verification(const std::vector<double>& similarity, const std::vector<bool>& same, int k) {
    const std::size_t n = similarity.size();
    if (same.size() != n) throw ProtocolError("verification: similarity and label counts differ");
    if (k < 2) throw ProtocolError("verification: need at least 2 folds");
    if (n == 0 || n % static_cast<std::size_t>(k) != 0) {
        throw ProtocolError("verification: " + std::to_string(n) + " pairs do not split into " + std::to_string(k) +
                            " equal folds");
    }
    for (double s : similarity) {
        if (!std::isfinite(s)) throw ProtocolError("verification: non-finite similarity");
    }
    const std::size_t fold = n / static_cast<std::size_t>(k);
    EvalReport rep;
    for (int f = 0; f < k; ++f) {
        std::vector<std::size_t> train, test;
        bool has_same = false, has_diff = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (i / fold == static_cast<std::size_t>(f)) {
                test.push_back(i);
            } else {
                train.push_back(i);
                (same[i] ? has_same : has_diff) = true;
            }
        }
        if (!has_same || !has_diff) {
            throw ProtocolError("verification: training split for fold " + std::to_string(f + 1) +
                                " contains a single label");
        }
        double best_acc = -1.0, best_t = 0.0;
        for (int i = 0; i <= kGrid; ++i) {
            const double t = grid_threshold(i);
            const double acc = accuracy_at(similarity, same, train, t);
            if (acc > best_acc) best_acc = acc, best_t = t;
        }
        rep.thresholds.push_back(best_t);
        rep.fold_accuracy.push_back(accuracy_at(similarity, same, test, best_t));
    }
    for (double a : rep.fold_accuracy) rep.mean += a;
    rep.mean /= k;
    for (double a : rep.fold_accuracy) rep.stddev += (a - rep.mean) * (a - rep.mean);
    rep.stddev = std::sqrt(rep.stddev / k);
    return rep;
}

EvalReport kfold_verification(const std::vector<VerificationPair>& pairs, int k) {
    std::vector<double> sim;
    std::vector<bool> same;
    for (const auto& p : pairs) {
        if (p.a.numel() != p.b.numel()) throw ShapeError("verification: embedding dimensions differ within a pair");
        sim.push_back(cosine_similarity(p.a.data(), p.b.data()));
        same.push_back(p.same);
    }
    return kfold_verification(sim, same, k);
}

std::vector<PairRecord> parse_pairs(std::istream& in, const std::string& source) {
    std::vector<PairRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> fields;
        for (std::string f; ls >> f;) fields.push_back(f);
        if (fields.empty()) continue;
        if (fields.size() != 5) {
            throw ParseError(source, line_no, "expected 5 fields 'idA sampleA idB sampleB label', got " +
                                                  std::to_string(fields.size()));
        }
        int v[5];
        for (int i = 0; i < 5; ++i) {
            std::size_t used = 0;
            try {
                v[i] = std::stoi(fields[static_cast<std::size_t>(i)], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != fields[static_cast<std::size_t>(i)].size() || v[i] < 0) {
                throw ParseError(source, line_no, "field " + std::to_string(i + 1) + " '" +
                                                      fields[static_cast<std::size_t>(i)] + "' is not a non-negative integer");
            }
        }
        if (v[4] > 1) throw ParseError(source, line_no, "label must be 0 or 1");
        out.push_back({v[0], v[1], v[2], v[3], v[4] == 1});
    }
    return out;
}

BenchStats bench_inference(Model& model, int n_images, int warmup, std::uint64_t seed) {
    if (n_images < 1) throw std::invalid_argument("bench: number of images must be >= 1");
    if (warmup < 0) throw std::invalid_argument("bench: warmup must be >= 0");
    const auto& cfg = model.config();
    Rng rng(seed);
    std::vector<double> px(static_cast<std::size_t>(cfg.in_channels) * cfg.input_h * cfg.input_w);
    for (auto& v : px) v = rng.uniform(-1.0, 1.0);
    Tensor image({1, cfg.in_channels, cfg.input_h, cfg.input_w}, px, cfg.precision);

    NoGradGuard no_grad;
    const bool was_training = model.training();
    model.set_training(false);
    for (int i = 0; i < warmup; ++i) model.embed(image);
    std::vector<double> ms;
    for (int i = 0; i < n_images; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        model.embed(image);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    model.set_training(was_training);
    std::sort(ms.begin(), ms.end());
    BenchStats s;
    s.images = n_images;
    const auto n = ms.size();
    s.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    s.p95_ms = ms[std::min(n - 1, static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1)];
    return s;
}

}  // namespace fpvt
