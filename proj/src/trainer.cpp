#include "fpvt/trainer.hpp"

#include <cstdio>

#include "fpvt/ops.hpp"

namespace fpvt {

namespace {

std::vector<NamedTensor> optimized(const Model& model, const FdrState& head) {
    auto params = model.registry().params();
    Tensor anchors = head.anchors;
    if (!anchors.requires_grad()) anchors.requires_grad_(true);
    params.push_back({"fdr.anchors", anchors, true});
    return params;
}

int argmax_row(std::span<const double> row) {
    int best = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
        if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    }
    return best;
}

}  // namespace

std::string StepLog::line() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%lld %.6f %.4f %.6g %.1f", static_cast<long long>(step), loss, acc, lr, elapsed_ms);
    return buf;
}

Trainer::Trainer(Model& model, FdrState& head, const Dataset& data, const TrainConfig& cfg, const OptimizerConfig& optim)
    : model_(model),
      head_(head),
      data_(data),
      cfg_(cfg),
      optim_(optim, optimized(model, head)),
      rng_(Rng::mix(cfg.seed, 0x747261696eULL)),
      start_(std::chrono::steady_clock::now()) {
    if (cfg_.batch < 1) throw ConfigError("train: batch size must be >= 1");
    if (cfg_.steps < 0) throw ConfigError("train: steps must be >= 0");
    if (head_.config().dim != model_.config().embed_dim) {
        throw ConfigError("train: FDR dimension " + std::to_string(head_.config().dim) + " does not match embedding " +
                          std::to_string(model_.config().embed_dim));
    }
    if (head_.config().identities != data_.spec.identities) {
        throw ConfigError("train: FDR identity count does not match the dataset");
    }
    if (data_.spec.image_size != model_.config().input_h || data_.spec.image_size != model_.config().input_w ||
        data_.spec.channels != model_.config().in_channels) {
        throw ConfigError("train: dataset images do not match the model input");
    }
}

Tensor Trainer::make_batch(const std::vector<std::int64_t>& index) {
    const int S = data_.spec.image_size, C = data_.spec.channels;
    std::vector<double> pixels;
    pixels.reserve(index.size() * static_cast<std::size_t>(C * S * S));
    for (auto i : index) {
        auto img = data_.image(i);
        if (cfg_.augment) img = augment(img, C, S, rng_, cfg_.augment_cfg);
        pixels.insert(pixels.end(), img.begin(), img.end());
    }
    return Tensor({static_cast<std::int64_t>(index.size()), C, S, S}, std::move(pixels), model_.config().precision);
}

StepLog Trainer::step() {
    const std::int64_t step_no = step_ + 1;
    std::vector<std::int64_t> index = cfg_.fixed_batch;
    if (index.empty()) {
        index.resize(static_cast<std::size_t>(cfg_.batch));
        for (auto& i : index) i = static_cast<std::int64_t>(rng_.below(static_cast<std::uint64_t>(data_.size())));
    }
    std::vector<int> ids;
    for (auto i : index) {
        if (i < 0 || i >= data_.size()) throw std::out_of_range("train: batch index " + std::to_string(i) + " out of range");
        ids.push_back(data_.labels[static_cast<std::size_t>(i)]);
    }
    auto images = make_batch(index);

    model_.set_training(true);
    StepLog log;
    try {
        auto features = model_.embed(images);
        auto out = fdr_forward(features, head_, ids);
        auto cos = cosine_logits(features, out.effective);
        auto loss = margin_softmax_loss(cos, out.targets, head_.config().margin, head_.config().scale);
        int correct = 0;
        const auto m = static_cast<std::size_t>(cos.dim(1));
        for (std::size_t b = 0; b < ids.size(); ++b) {
            correct += argmax_row(cos.data().subspan(b * m, m)) == out.targets[b];
        }
        log.loss = loss.item();
        log.acc = static_cast<double>(correct) / static_cast<double>(ids.size());
        backward(loss);
        optim_.step();
        write_back(head_, out);
        optim_.zero_grad();
    } catch (const NumericError& e) {
        Tape::current().clear();
        optim_.zero_grad();
        throw DivergenceError(step_no, e.what());
    }
    step_ = step_no;
    log.step = step_no;
    log.lr = optim_.config().lr;
    log.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    return log;
}

double Trainer::evaluate_accuracy() {
    NoGradGuard no_grad;
    const bool was_training = model_.training();
    model_.set_training(false);
    const std::int64_t n = data_.size();
    std::int64_t correct = 0;
    const std::int64_t chunk = 50;
    for (std::int64_t start = 0; start < n; start += chunk) {
        std::vector<std::int64_t> index;
        for (std::int64_t i = start; i < std::min(n, start + chunk); ++i) index.push_back(i);
        const bool aug = cfg_.augment;
        cfg_.augment = false;
        auto images = make_batch(index);
        cfg_.augment = aug;
        auto cos = cosine_logits(model_.embed(images), head_.anchors);
        const auto m = static_cast<std::size_t>(cos.dim(1));
        for (std::size_t b = 0; b < index.size(); ++b) {
            const int target = head_.group_of(data_.labels[static_cast<std::size_t>(index[b])]);
            correct += argmax_row(cos.data().subspan(b * m, m)) == target;
        }
    }
    model_.set_training(was_training);
    return static_cast<double>(correct) / static_cast<double>(n);
}

std::vector<NamedTensor> Trainer::state_tensors() const {
    auto all = model_.registry().entries();
    all.push_back({"fdr.anchors", head_.anchors, true});
    return all;
}

Checkpoint Trainer::checkpoint(const std::string& config_text) const {
    Checkpoint ckpt;
    ckpt.config_text = config_text;
    ckpt.rng_state = rng_.state();
    ckpt.optimizer_step = static_cast<std::uint64_t>(optim_.step_count());
    ckpt.trainer_step = static_cast<std::uint64_t>(step_);
    for (const auto& e : state_tensors()) ckpt.tensors.emplace_back(e.name, e.tensor.detach());
    for (const auto& e : optim_.state_tensors()) ckpt.tensors.emplace_back(e.name, e.tensor.detach());
    return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
    for (auto& e : state_tensors()) {
        const Tensor* src = ckpt.find(e.name);
        if (!src) throw CheckpointError("checkpoint lacks tensor '" + e.name + "'");
        if (src->shape() != e.tensor.shape()) {
            throw CheckpointError("tensor '" + e.name + "' has shape " + shape_str(src->shape()) + ", model expects " +
                                  shape_str(e.tensor.shape()));
        }
        auto dst = e.tensor.mutable_data();
        std::copy(src->data().begin(), src->data().end(), dst.begin());
    }
    optim_.load_state(static_cast<std::int64_t>(ckpt.optimizer_step),
                      [&](const std::string& name) { return ckpt.find(name); });
    rng_.set_state(ckpt.rng_state);
    step_ = static_cast<std::int64_t>(ckpt.trainer_step);
}

}  // namespace fpvt
