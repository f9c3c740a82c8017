#include "fpvt/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace fpvt {

namespace {

template <typename T>
void put(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_string(std::string& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
public:
    explicit Reader(const std::string& b) : bytes_(b) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return v;
    }

    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return &t;
    }
    return nullptr;
}

std::string serialize(const Checkpoint& ckpt) {
    std::string out = "FPVT";
    put<std::uint32_t>(out, Checkpoint::kVersion);
    put_string(out, ckpt.config_text);
    put_string(out, ckpt.rng_state);
    put<std::uint64_t>(out, ckpt.optimizer_step);
    put<std::uint64_t>(out, ckpt.trainer_step);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_string(out, name);
        const bool wide = t.precision() == Precision::f64;
        out.push_back(static_cast<char>(wide ? 1 : 0));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : t.data()) {
            if (wide) {
                put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
            } else {
                put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            }
        }
    }
    return out;
}

Checkpoint deserialize(const std::string& bytes) {
    if (bytes.size() < 4 || bytes.compare(0, 4, "FPVT") != 0) throw CheckpointError("not a checkpoint (bad magic bytes)");
    const std::string tail = bytes.substr(4);
    Reader in(tail);
    const auto version = in.get<std::uint32_t>();
    if (version != Checkpoint::kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.config_text = in.get_string();
    ckpt.rng_state = in.get_string();
    ckpt.optimizer_step = in.get<std::uint64_t>();
    ckpt.trainer_step = in.get<std::uint64_t>();
    const auto count = in.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < count; ++k) {
        auto name = in.get_string();
        const auto dtype = in.get<std::uint8_t>();
        if (dtype > 1) throw CheckpointError("tensor '" + name + "': unknown dtype " + std::to_string(dtype));
        const auto rank = in.get<std::uint32_t>();
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(in.get<std::uint32_t>());
        std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& v : values) {
            v = dtype == 1 ? std::bit_cast<double>(in.get<std::uint64_t>())
                           : static_cast<double>(std::bit_cast<float>(in.get<std::uint32_t>()));
        }
        ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values), dtype == 1 ? Precision::f64 : Precision::f32));
    }
    if (!in.done()) throw CheckpointError("trailing bytes after the last tensor record");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = serialize(ckpt);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot write " + tmp);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw CheckpointError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return deserialize(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace fpvt
