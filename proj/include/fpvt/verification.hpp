#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fpvt/pyramid.hpp"
#include "fpvt/tensor.hpp"

namespace fpvt {

struct VerificationPair {
    Tensor a;  // [d]
    Tensor b;  // [d]
    bool same = false;
};

struct EvalReport {
    std::vector<double> fold_accuracy;
    std::vector<double> thresholds;
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation over folds
};

class ProtocolError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

// k contiguous folds. For each fold the threshold t on the grid
// -1, -0.999, ..., 1 (first best) maximizing "same iff sim > t" accuracy on the
// other folds is applied to the held-out fold.
EvalReport kfold_verification(const std::vector<double>& similarity, const std::vector<bool>& same, int k);
EvalReport kfold_verification(const std::vector<VerificationPair>& pairs, int k);

// One line of a pairs file: "idA sampleA idB sampleB label".
struct PairRecord {
    int id_a = 0, sample_a = 0, id_b = 0, sample_b = 0;
    bool same = false;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& source, int line, const std::string& what)
        : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

// Whitespace separated, '#' starts a comment, blank lines ignored.
std::vector<PairRecord> parse_pairs(std::istream& in, const std::string& source);

struct BenchStats {
    std::int64_t images = 0;
    double median_ms = 0.0;
    double p95_ms = 0.0;
};

// Per-image eval-mode latency over n_images single-image forwards after
// `warmup` discarded runs. Throws std::invalid_argument when n_images < 1.
BenchStats bench_inference(Model& model, int n_images, int warmup, std::uint64_t seed = 0);

}  // namespace fpvt
