#pragma once

#include <cstdint>
#include <vector>

#include "fpvt/rng.hpp"
#include "fpvt/tensor.hpp"

namespace fpvt {

// Parametric stand-in for a face dataset: each identity is a mixture of
// oriented Gaussian blobs; each sample of it is shifted, rotated and noised.
struct SyntheticFaceSpec {
    int identities = 10;
    int samples_per_identity = 20;
    int image_size = 32;
    int channels = 3;
    double noise_std = 0.3;
    double pose_jitter = 0.3;  // max shift as a fraction of the side; rotation up to jitter radians
    std::uint64_t seed = 0;

    void validate() const;
};

// Pixels [channels * size * size], planar. A pure function of its arguments.
std::vector<double> render_face(const SyntheticFaceSpec& spec, int identity, int sample);

struct Dataset {
    Tensor images;            // [N, C, S, S]
    std::vector<int> labels;  // identity of each image
    SyntheticFaceSpec spec;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    // Image i as [C, S, S].
    std::vector<double> image(std::int64_t i) const;
};

// Identity-major order: image i is identity i / samples, sample i % samples.
Dataset generate_dataset(const SyntheticFaceSpec& spec, Precision precision = Precision::f32);

struct AugmentConfig {
    int pad = 4;            // resize to size + pad before cropping back
    double flip_prob = 0.5;
};

// Bilinear resize of a planar [C, H, W] image to [C, out_h, out_w], corners aligned.
std::vector<double> resize_bilinear(const std::vector<double>& img, int channels, int h, int w, int out_h, int out_w);
std::vector<double> flip_horizontal(const std::vector<double>& img, int channels, int h, int w);

// Resize to size + pad, random crop back to size, horizontal flip with
// probability flip_prob. Shape is preserved; values stay within the input range.
std::vector<double> augment(const std::vector<double>& img, int channels, int size, Rng& rng, const AugmentConfig& cfg = {});

// Accuracy of assigning every image to the nearest per-identity pixel mean.
double nearest_centroid_accuracy(const Dataset& data);

}  // namespace fpvt
