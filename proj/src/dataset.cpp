#include "fpvt/dataset.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace fpvt {

namespace {

constexpr int kBlobs = 6;

struct Blob {
    double cx, cy, sx, sy, angle;
    double amp[4];
};

std::vector<Blob> identity_blobs(const SyntheticFaceSpec& spec, int identity) {
    Rng rng(Rng::mix(spec.seed, 0x1d000000ULL + static_cast<std::uint64_t>(identity)));
    std::vector<Blob> blobs(kBlobs);
    for (auto& b : blobs) {
        b.cx = rng.uniform(0.2, 0.8);
        b.cy = rng.uniform(0.2, 0.8);
        b.sx = rng.uniform(0.06, 0.22);
        b.sy = rng.uniform(0.06, 0.22);
        b.angle = rng.uniform(0.0, std::numbers::pi);
        for (double& a : b.amp) a = rng.uniform(-1.0, 1.0);
    }
    return blobs;
}

}  // namespace

void SyntheticFaceSpec::validate() const {
    if (identities < 2) throw ConfigError("dataset: need at least 2 identities");
    if (samples_per_identity < 1) throw ConfigError("dataset: samples per identity must be >= 1");
    if (image_size < 4) throw ConfigError("dataset: image size must be >= 4");
    if (channels < 1 || channels > 4) throw ConfigError("dataset: channels must be in [1, 4]");
    if (noise_std < 0 || pose_jitter < 0) throw ConfigError("dataset: noise and jitter must be non-negative");
}

std::vector<double> render_face(const SyntheticFaceSpec& spec, int identity, int sample) {
    const auto blobs = identity_blobs(spec, identity);
    Rng rng(Rng::mix(Rng::mix(spec.seed, static_cast<std::uint64_t>(identity)), 0x5a000000ULL + static_cast<std::uint64_t>(sample)));
    const double dx = rng.uniform(-spec.pose_jitter, spec.pose_jitter);
    const double dy = rng.uniform(-spec.pose_jitter, spec.pose_jitter);
    const double rot = rng.uniform(-spec.pose_jitter, spec.pose_jitter);
    const double cr = std::cos(rot), sr = std::sin(rot);

    const int S = spec.image_size, C = spec.channels;
    std::vector<double> img(static_cast<std::size_t>(C) * S * S, 0.0);
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            // Inverse pose: rotate about the centre, then shift.
            const double u = (x + 0.5) / S - 0.5 - dx, v = (y + 0.5) / S - 0.5 - dy;
            const double px = cr * u + sr * v + 0.5, py = -sr * u + cr * v + 0.5;
            for (const auto& b : blobs) {
                const double ca = std::cos(b.angle), sa = std::sin(b.angle);
                const double ax = (px - b.cx) * ca + (py - b.cy) * sa, ay = -(px - b.cx) * sa + (py - b.cy) * ca;
                const double g = std::exp(-0.5 * (ax * ax / (b.sx * b.sx) + ay * ay / (b.sy * b.sy)));
                for (int c = 0; c < C; ++c) img[(static_cast<std::size_t>(c) * S + y) * S + x] += b.amp[c] * g;
            }
        }
    }
    if (spec.noise_std > 0) {
        for (auto& p : img) p += spec.noise_std * rng.normal();
    }
    return img;
}

std::vector<double> Dataset::image(std::int64_t i) const {
    const auto per = static_cast<std::size_t>(spec.channels) * spec.image_size * spec.image_size;
    auto d = images.data().subspan(static_cast<std::size_t>(i) * per, per);
    return {d.begin(), d.end()};
}

Dataset generate_dataset(const SyntheticFaceSpec& spec, Precision precision) {
    spec.validate();
    const std::int64_t n = static_cast<std::int64_t>(spec.identities) * spec.samples_per_identity;
    std::vector<double> pixels;
    pixels.reserve(static_cast<std::size_t>(n) * spec.channels * spec.image_size * spec.image_size);
    Dataset d;
    d.spec = spec;
    for (int id = 0; id < spec.identities; ++id) {
        for (int s = 0; s < spec.samples_per_identity; ++s) {
            auto img = render_face(spec, id, s);
            pixels.insert(pixels.end(), img.begin(), img.end());
            d.labels.push_back(id);
        }
    }
    d.images = Tensor({n, spec.channels, spec.image_size, spec.image_size}, std::move(pixels), precision);
    return d;
}

std::vector<double> resize_bilinear(const std::vector<double>& img, int channels, int h, int w, int out_h, int out_w) {
    std::vector<double> out(static_cast<std::size_t>(channels) * out_h * out_w);
    auto src = [](int i, int dst, int n) { return dst == 1 ? 0.0 : static_cast<double>(i) * (n - 1) / (dst - 1); };
    for (int c = 0; c < channels; ++c) {
        const double* plane = img.data() + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < out_h; ++y) {
            const double sy = src(y, out_h, h);
            const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - y0;
            for (int x = 0; x < out_w; ++x) {
                const double sx = src(x, out_w, w);
                const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, w - 1);
                const double fx = sx - x0;
                const double top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                const double bot = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                out[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = fy == 0.0 ? top : top + fy * (bot - top);
            }
        }
    }
    return out;
}

std::vector<double> flip_horizontal(const std::vector<double>& img, int channels, int h, int w) {
    std::vector<double> out(img.size());
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                out[(static_cast<std::size_t>(c) * h + y) * w + x] = img[(static_cast<std::size_t>(c) * h + y) * w + (w - 1 - x)];
            }
    return out;
}

std::vector<double> augment(const std::vector<double>& img, int channels, int size, Rng& rng, const AugmentConfig& cfg) {
    if (cfg.pad < 0) throw ConfigError("augment: pad must be >= 0");
    if (img.size() != static_cast<std::size_t>(channels) * size * size) {
        throw ShapeError("augment: image has " + std::to_string(img.size()) + " values, expected " +
                         std::to_string(channels * size * size));
    }
    const int big = size + cfg.pad;
    const auto resized = resize_bilinear(img, channels, size, size, big, big);
    const int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.pad) + 1));
    const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.pad) + 1));
    std::vector<double> crop(img.size());
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                crop[(static_cast<std::size_t>(c) * size + y) * size + x] =
                    resized[(static_cast<std::size_t>(c) * big + y + oy) * big + x + ox];
            }
    if (rng.uniform() < cfg.flip_prob) return flip_horizontal(crop, channels, size, size);
    return crop;
}

double nearest_centroid_accuracy(const Dataset& data) {
    const auto n = data.size();
    const auto per = static_cast<std::size_t>(data.images.numel() / n);
    const int ids = data.spec.identities;
    std::vector<double> centroids(static_cast<std::size_t>(ids) * per, 0.0);
    std::vector<int> counts(static_cast<std::size_t>(ids), 0);
    auto px = data.images.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto l = static_cast<std::size_t>(data.labels[static_cast<std::size_t>(i)]);
        ++counts[l];
        for (std::size_t k = 0; k < per; ++k) centroids[l * per + k] += px[static_cast<std::size_t>(i) * per + k];
    }
    for (std::size_t l = 0; l < counts.size(); ++l)
        for (std::size_t k = 0; k < per; ++k) centroids[l * per + k] /= std::max(counts[l], 1);
    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int arg = -1;
        for (int l = 0; l < ids; ++l) {
            double dist = 0.0;
            for (std::size_t k = 0; k < per; ++k) {
                const double e = px[static_cast<std::size_t>(i) * per + k] - centroids[static_cast<std::size_t>(l) * per + k];
                dist += e * e;
            }
            if (dist < best) best = dist, arg = l;
        }
        correct += arg == data.labels[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace fpvt
