#include "fpvt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace fpvt::ops {

namespace {

Tensor finish(const char* op, Shape shape, std::vector<double> values, Precision p) {
    auto out = make_result(std::move(shape), std::move(values), p);
    check_finite(out, op);
    return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
    if (x.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
    }
}

template <typename Fn>
void maybe_record(const char* op, std::vector<Tensor> inputs, Tensor& out, Fn&& fn) {
    auto& tape = Tape::current();
    if (!tape.recording()) return;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (!any) return;
    tape.record(op, std::move(inputs), out, std::forward<Fn>(fn));
}

bool wants(const Tensor& t) { return t.defined() && t.requires_grad(); }

Precision prec(const Tensor& a, const Tensor& b) { return promote(a.precision(), b.precision()); }

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(std::int64_t M, std::int64_t K, std::int64_t N, const double* A, const double* B, double* C) {
    for (std::int64_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        const double* a = A + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const double av = a[k];
            if (av == 0.0) continue;
            const double* b = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,K] += G[M,N] * B[K,N]^T
void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const double* G, const double* B, double* C) {
    for (std::int64_t i = 0; i < M; ++i) {
        const double* g = G + i * N;
        double* c = C + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const double* b = B + k * N;
            double acc = 0.0;
            for (std::int64_t j = 0; j < N; ++j) acc += g[j] * b[j];
            c[k] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * G[M,N]
void gemm_tn(std::int64_t M, std::int64_t K, std::int64_t N, const double* A, const double* G, double* C) {
    for (std::int64_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        const double* g = G + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const double av = a[k];
            if (av == 0.0) continue;
            double* c = C + k * N;
            for (std::int64_t j = 0; j < N; ++j) c[j] += av * g[j];
        }
    }
}

}  // namespace

// ---------------------------------------------------------------- structure

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> v(x.data().begin(), x.data().end());
    auto out = finish("reshape", std::move(shape), std::move(v), x.precision());
    maybe_record("reshape", {x}, out, [x](std::span<const double> g) { accumulate_grad(x, g); });
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
    const auto& in_shape = x.shape();
    const std::size_t rank = in_shape.size();
    if (dims.size() != rank) throw ShapeError("permute: " + std::to_string(dims.size()) + " axes for " + shape_str(in_shape));
    std::vector<bool> seen(rank, false);
    for (int d : dims) {
        if (d < 0 || static_cast<std::size_t>(d) >= rank || seen[static_cast<std::size_t>(d)]) {
            throw ShapeError("permute: invalid axis order for " + shape_str(in_shape));
        }
        seen[static_cast<std::size_t>(d)] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[static_cast<std::size_t>(dims[i])];

    std::vector<std::int64_t> in_stride(rank, 1);
    for (std::size_t i = rank - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in_shape[i];

    const auto n = x.numel();
    auto src_index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
    std::vector<std::int64_t> counter(rank, 0);
    for (std::int64_t flat = 0; flat < n; ++flat) {
        std::int64_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) src += counter[i] * in_stride[static_cast<std::size_t>(dims[i])];
        (*src_index)[static_cast<std::size_t>(flat)] = src;
        for (std::size_t i = rank; i-- > 0;) {
            if (++counter[i] < out_shape[i]) break;
            counter[i] = 0;
        }
    }
    auto xd = x.data();
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = xd[static_cast<std::size_t>((*src_index)[static_cast<std::size_t>(i)])];
    auto out = finish("permute", std::move(out_shape), std::move(v), x.precision());
    maybe_record("permute", {x}, out, [x, src_index](std::span<const double> g) {
        std::vector<double> gx(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>((*src_index)[i])] += g[i];
        accumulate_grad(x, gx);
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() == 2) return permute(x, {1, 0});
    if (x.rank() == 3) return permute(x, {0, 2, 1});
    throw ShapeError("transpose: expected rank 2 or 3, got " + shape_str(x.shape()));
}

// -------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    auto ad = a.data(), bd = b.data();
    std::vector<double> v(ad.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ad[i] + bd[i];
    auto out = finish("add", a.shape(), std::move(v), prec(a, b));
    maybe_record("add", {a, b}, out, [a, b](std::span<const double> g) {
        accumulate_grad(a, g);
        accumulate_grad(b, g);
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    auto ad = a.data(), bd = b.data();
    std::vector<double> v(ad.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ad[i] - bd[i];
    auto out = finish("sub", a.shape(), std::move(v), prec(a, b));
    maybe_record("sub", {a, b}, out, [a, b](std::span<const double> g) {
        accumulate_grad(a, g);
        if (wants(b)) {
            std::vector<double> gb(g.begin(), g.end());
            for (auto& e : gb) e = -e;
            accumulate_grad(b, gb);
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    auto ad = a.data(), bd = b.data();
    std::vector<double> v(ad.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ad[i] * bd[i];
    auto out = finish("mul", a.shape(), std::move(v), prec(a, b));
    maybe_record("mul", {a, b}, out, [a, b](std::span<const double> g) {
        auto ad = a.data(), bd = b.data();
        if (wants(a)) {
            std::vector<double> ga(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bd[i];
            accumulate_grad(a, ga);
        }
        if (wants(b)) {
            std::vector<double> gb(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * ad[i];
            accumulate_grad(b, gb);
        }
    });
    return out;
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
        throw ShapeError("add_broadcast: " + shape_str(bs) + " is not a trailing suffix of " + shape_str(as));
    }
    const auto inner = static_cast<std::size_t>(b.numel());
    auto ad = a.data(), bd = b.data();
    std::vector<double> v(ad.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ad[i] + bd[i % inner];
    auto out = finish("add_broadcast", as, std::move(v), prec(a, b));
    maybe_record("add_broadcast", {a, b}, out, [a, b, inner](std::span<const double> g) {
        accumulate_grad(a, g);
        if (wants(b)) {
            std::vector<double> gb(inner, 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
            accumulate_grad(b, gb);
        }
    });
    return out;
}

Tensor scale(const Tensor& x, double s) {
    auto xd = x.data();
    std::vector<double> v(xd.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = xd[i] * s;
    auto out = finish("scale", x.shape(), std::move(v), x.precision());
    maybe_record("scale", {x}, out, [x, s](std::span<const double> g) {
        std::vector<double> gx(g.begin(), g.end());
        for (auto& e : gx) e *= s;
        accumulate_grad(x, gx);
    });
    return out;
}

Tensor add_scalar(const Tensor& x, double s) {
    auto xd = x.data();
    std::vector<double> v(xd.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = xd[i] + s;
    auto out = finish("add_scalar", x.shape(), std::move(v), x.precision());
    maybe_record("add_scalar", {x}, out, [x](std::span<const double> g) { accumulate_grad(x, g); });
    return out;
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu_exact(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_tanh(double x) {
    return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
}

Tensor gelu(const Tensor& x) {
    auto xd = x.data();
    std::vector<double> v(xd.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = gelu_tanh(xd[i]);
    auto out = finish("gelu", x.shape(), std::move(v), x.precision());
    maybe_record("gelu", {x}, out, [x](std::span<const double> g) {
        auto xd = x.data();
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double z = xd[i];
            const double u = kSqrt2OverPi * (z + kGeluC * z * z * z);
            const double t = std::tanh(u);
            const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * z * z);
            gx[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du);
        }
        accumulate_grad(x, gx);
    });
    return out;
}

// --------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
    auto xd = x.data();
    double s = std::accumulate(xd.begin(), xd.end(), 0.0);
    auto out = finish("sum", {1}, {s}, x.precision());
    maybe_record("sum", {x}, out, [x](std::span<const double> g) {
        std::vector<double> gx(static_cast<std::size_t>(x.numel()), g[0]);
        accumulate_grad(x, gx);
    });
    return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_axis(const Tensor& x, int axis) {
    const auto& s = x.shape();
    if (axis < 0 || static_cast<std::size_t>(axis) >= s.size()) {
        throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    const std::int64_t n = s[static_cast<std::size_t>(axis)];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != static_cast<std::size_t>(axis)) out_shape.push_back(s[i]);
    }
    if (out_shape.empty()) out_shape.push_back(1);
    auto xd = x.data();
    std::vector<double> v(static_cast<std::size_t>(outer * inner), 0.0);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < n; ++k)
            for (std::int64_t i = 0; i < inner; ++i)
                v[static_cast<std::size_t>(o * inner + i)] += xd[static_cast<std::size_t>((o * n + k) * inner + i)];
    for (auto& e : v) e /= static_cast<double>(n);
    auto out = finish("mean_axis", std::move(out_shape), std::move(v), x.precision());
    maybe_record("mean_axis", {x}, out, [x, outer, inner, n](std::span<const double> g) {
        std::vector<double> gx(static_cast<std::size_t>(x.numel()));
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t k = 0; k < n; ++k)
                for (std::int64_t i = 0; i < inner; ++i)
                    gx[static_cast<std::size_t>((o * n + k) * inner + i)] =
                        g[static_cast<std::size_t>(o * inner + i)] / static_cast<double>(n);
        accumulate_grad(x, gx);
    });
    return out;
}

// ----------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
    };
    std::int64_t batch = 1, M = 0, K = 0, N = 0;
    bool shared_b = false;
    Shape out_shape;
    if (as.size() == 2 && bs.size() == 2) {
        M = as[0], K = as[1], N = bs[1];
        if (bs[0] != K) throw mismatch();
        out_shape = {M, N};
        shared_b = true;
    } else if (as.size() == 3 && bs.size() == 3) {
        batch = as[0], M = as[1], K = as[2], N = bs[2];
        if (bs[0] != batch || bs[1] != K) throw mismatch();
        out_shape = {batch, M, N};
    } else if (as.size() == 3 && bs.size() == 2) {
        batch = as[0], M = as[1], K = as[2], N = bs[1];
        if (bs[0] != K) throw mismatch();
        out_shape = {batch, M, N};
        shared_b = true;
    } else {
        throw mismatch();
    }
    const double* A = a.data().data();
    const double* B = b.data().data();
    std::vector<double> v(static_cast<std::size_t>(batch * M * N), 0.0);
    for (std::int64_t t = 0; t < batch; ++t) {
        gemm_nn(M, K, N, A + t * M * K, B + (shared_b ? 0 : t * K * N), v.data() + t * M * N);
    }
    auto out = finish("matmul", std::move(out_shape), std::move(v), prec(a, b));
    maybe_record("matmul", {a, b}, out, [a, b, batch, M, K, N, shared_b](std::span<const double> g) {
        const double* A = a.data().data();
        const double* B = b.data().data();
        if (wants(a)) {
            std::vector<double> ga(static_cast<std::size_t>(batch * M * K), 0.0);
            for (std::int64_t t = 0; t < batch; ++t)
                gemm_nt(M, N, K, g.data() + t * M * N, B + (shared_b ? 0 : t * K * N), ga.data() + t * M * K);
            accumulate_grad(a, ga);
        }
        if (wants(b)) {
            std::vector<double> gb(static_cast<std::size_t>(b.numel()), 0.0);
            for (std::int64_t t = 0; t < batch; ++t)
                gemm_tn(M, K, N, A + t * M * K, g.data() + t * M * N, gb.data() + (shared_b ? 0 : t * K * N));
            accumulate_grad(b, gb);
        }
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank("linear weight", w, 2);
    const auto& xs = x.shape();
    const auto in = xs.back();
    if (w.dim(0) != in) {
        throw ShapeError("linear: input " + shape_str(xs) + " does not match weight " + shape_str(w.shape()));
    }
    Shape flat{x.numel() / in, in};
    auto y = matmul(xs.size() == 2 ? x : reshape(x, flat), w);
    if (bias.defined()) y = add_broadcast(y, bias);
    if (xs.size() == 2) return y;
    Shape out_shape = xs;
    out_shape.back() = w.dim(1);
    return reshape(y, std::move(out_shape));
}

// ------------------------------------------ normalization and activations

Tensor softmax_rows(const Tensor& x) {
    const auto cols = static_cast<std::size_t>(x.shape().back());
    const std::size_t rows = static_cast<std::size_t>(x.numel()) / cols;
    auto xd = x.data();
    std::vector<double> v(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xd.data() + r * cols;
        double* o = v.data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
    }
    auto out = finish("softmax_rows", x.shape(), v, x.precision());
    maybe_record("softmax_rows", {x}, out, [x, y = std::move(v), rows, cols](std::span<const double> g) {
        std::vector<double> gx(g.size());
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
        }
        accumulate_grad(x, gx);
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const auto C = x.shape().back();
    if (gain.numel() != C || bias.numel() != C) {
        throw ShapeError("layer_norm: affine parameters " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match channel axis of " + shape_str(x.shape()));
    }
    const auto cols = static_cast<std::size_t>(C);
    const std::size_t rows = static_cast<std::size_t>(x.numel()) / cols;
    auto xd = x.data(), gd = gain.data(), bd = bias.data();
    std::vector<double> xhat(xd.size()), inv_std(rows), v(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xd.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += in[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            xhat[r * cols + c] = (in[c] - mu) * inv_std[r];
            v[r * cols + c] = xhat[r * cols + c] * gd[c] + bd[c];
        }
    }
    Precision p = promote(x.precision(), gain.precision());
    auto out = finish("layer_norm", x.shape(), std::move(v), p);
    maybe_record("layer_norm", {x, gain, bias}, out,
                 [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](std::span<const double> g) {
                     auto gd = gain.data();
                     if (wants(x)) {
                         std::vector<double> gx(g.size());
                         for (std::size_t r = 0; r < rows; ++r) {
                             double m1 = 0.0, m2 = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) {
                                 const double dxh = g[r * cols + c] * gd[c];
                                 m1 += dxh;
                                 m2 += dxh * xhat[r * cols + c];
                             }
                             m1 /= static_cast<double>(cols);
                             m2 /= static_cast<double>(cols);
                             for (std::size_t c = 0; c < cols; ++c) {
                                 const double dxh = g[r * cols + c] * gd[c];
                                 gx[r * cols + c] = inv_std[r] * (dxh - m1 - xhat[r * cols + c] * m2);
                             }
                         }
                         accumulate_grad(x, gx);
                     }
                     if (wants(gain) || wants(bias)) {
                         std::vector<double> gg(cols, 0.0), gb(cols, 0.0);
                         for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < cols; ++c) {
                                 gg[c] += g[r * cols + c] * xhat[r * cols + c];
                                 gb[c] += g[r * cols + c];
                             }
                         accumulate_grad(gain, gg);
                         accumulate_grad(bias, gb);
                     }
                 });
    return out;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    const auto cols = static_cast<std::size_t>(x.shape().back());
    const std::size_t rows = static_cast<std::size_t>(x.numel()) / cols;
    auto xd = x.data();
    std::vector<double> v(xd.size()), norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ss += xd[r * cols + c] * xd[r * cols + c];
        norms[r] = std::sqrt(ss + eps);
        for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = xd[r * cols + c] / norms[r];
    }
    auto out = finish("l2_normalize_rows", x.shape(), v, x.precision());
    maybe_record("l2_normalize_rows", {x}, out,
                 [x, y = std::move(v), norms = std::move(norms), rows, cols](std::span<const double> g) {
                     std::vector<double> gx(g.size());
                     for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                         for (std::size_t c = 0; c < cols; ++c)
                             gx[r * cols + c] = (g[r * cols + c] - y[r * cols + c] * dot) / norms[r];
                     }
                     accumulate_grad(x, gx);
                 });
    return out;
}

BatchNormState BatchNormState::init(std::int64_t channels, Precision precision) {
    BatchNormState s;
    s.running_mean = Tensor::zeros({channels}, precision);
    s.running_var = Tensor::full({channels}, 1.0, precision);
    return s;
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, const Tensor& gain, const Tensor& bias, bool training) {
    require_rank("batch_norm", x, 4);
    const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gain.numel() != C || bias.numel() != C || state.running_mean.numel() != C) {
        throw ShapeError("batch_norm: parameters do not match channel count of " + shape_str(x.shape()));
    }
    const std::int64_t count = B * HW;
    if (training && count < 2) {
        throw NumericError("batch_norm: training mode needs at least 2 values per channel, got " +
                           std::to_string(count) + " (use inference mode for single samples)");
    }
    auto xd = x.data(), gd = gain.data(), bd = bias.data();
    std::vector<double> mu(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
    auto at = [&](std::int64_t b, std::int64_t c, std::int64_t s) {
        return static_cast<std::size_t>((b * C + c) * HW + s);
    };
    if (training) {
        auto rm = state.running_mean.mutable_data();
        auto rv = state.running_var.mutable_data();
        const Precision sp = state.running_mean.precision();
        for (std::int64_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t s = 0; s < HW; ++s) m += xd[at(b, c, s)];
            m /= static_cast<double>(count);
            double var = 0.0;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t s = 0; s < HW; ++s) var += (xd[at(b, c, s)] - m) * (xd[at(b, c, s)] - m);
            const double unbiased = var / static_cast<double>(count - 1);
            var /= static_cast<double>(count);
            mu[static_cast<std::size_t>(c)] = m;
            inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + state.eps);
            auto ci = static_cast<std::size_t>(c);
            rm[ci] = round_to(sp, (1.0 - state.momentum) * rm[ci] + state.momentum * m);
            rv[ci] = round_to(sp, (1.0 - state.momentum) * rv[ci] + state.momentum * unbiased);
        }
    } else {
        auto rm = state.running_mean.data();
        auto rv = state.running_var.data();
        for (std::int64_t c = 0; c < C; ++c) {
            mu[static_cast<std::size_t>(c)] = rm[static_cast<std::size_t>(c)];
            inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(rv[static_cast<std::size_t>(c)] + state.eps);
        }
    }
    std::vector<double> xhat(xd.size()), v(xd.size());
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t s = 0; s < HW; ++s) {
                auto i = at(b, c, s);
                auto ci = static_cast<std::size_t>(c);
                xhat[i] = (xd[i] - mu[ci]) * inv_std[ci];
                v[i] = xhat[i] * gd[ci] + bd[ci];
            }
    auto out = finish("batch_norm", x.shape(), std::move(v), promote(x.precision(), gain.precision()));
    maybe_record("batch_norm", {x, gain, bias}, out,
                 [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, HW, count,
                  training](std::span<const double> g) {
                     auto gd = gain.data();
                     auto at = [&](std::int64_t b, std::int64_t c, std::int64_t s) {
                         return static_cast<std::size_t>((b * C + c) * HW + s);
                     };
                     std::vector<double> gg(static_cast<std::size_t>(C), 0.0), gb(static_cast<std::size_t>(C), 0.0);
                     for (std::int64_t b = 0; b < B; ++b)
                         for (std::int64_t c = 0; c < C; ++c)
                             for (std::int64_t s = 0; s < HW; ++s) {
                                 auto i = at(b, c, s);
                                 gg[static_cast<std::size_t>(c)] += g[i] * xhat[i];
                                 gb[static_cast<std::size_t>(c)] += g[i];
                             }
                     if (wants(x)) {
                         std::vector<double> gx(g.size());
                         for (std::int64_t c = 0; c < C; ++c) {
                             auto ci = static_cast<std::size_t>(c);
                             const double k = gd[ci] * inv_std[ci];
                             const double m1 = gb[ci] / static_cast<double>(count);
                             const double m2 = gg[ci] / static_cast<double>(count);
                             for (std::int64_t b = 0; b < B; ++b)
                                 for (std::int64_t s = 0; s < HW; ++s) {
                                     auto i = at(b, c, s);
                                     gx[i] = training ? k * (g[i] - m1 - xhat[i] * m2) : k * g[i];
                                 }
                         }
                         accumulate_grad(x, gx);
                     }
                     accumulate_grad(gain, gg);
                     accumulate_grad(bias, gb);
                 });
    return out;
}

// ------------------------------------------------- convolution and pooling

namespace {

struct ConvGeom {
    std::int64_t B, C, H, W, P, K, stride, pad, Ho, Wo;
};

// cols[(c*K + ky)*K + kx][oy*Wo + ox]
void im2col(const ConvGeom& g, const double* img, double* cols) {
    const auto S = g.Ho * g.Wo;
    for (std::int64_t c = 0; c < g.C; ++c)
        for (std::int64_t ky = 0; ky < g.K; ++ky)
            for (std::int64_t kx = 0; kx < g.K; ++kx) {
                double* row = cols + ((c * g.K + ky) * g.K + kx) * S;
                for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
                    const auto iy = oy * g.stride - g.pad + ky;
                    for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
                        const auto ix = ox * g.stride - g.pad + kx;
                        row[oy * g.Wo + ox] =
                            (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) ? img[(c * g.H + iy) * g.W + ix] : 0.0;
                    }
                }
            }
}

void col2im(const ConvGeom& g, const double* cols, double* img) {
    const auto S = g.Ho * g.Wo;
    for (std::int64_t c = 0; c < g.C; ++c)
        for (std::int64_t ky = 0; ky < g.K; ++ky)
            for (std::int64_t kx = 0; kx < g.K; ++kx) {
                const double* row = cols + ((c * g.K + ky) * g.K + kx) * S;
                for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
                    const auto iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.H) continue;
                    for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
                        const auto ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.W) img[(c * g.H + iy) * g.W + ix] += row[oy * g.Wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    require_rank("conv2d input", input, 4);
    require_rank("conv2d weight", weight, 4);
    if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
    ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
               stride, padding, 0, 0};
    if (weight.dim(1) != g.C || weight.dim(3) != g.K) {
        throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
    }
    if (g.K > g.H + 2 * g.pad || g.K > g.W + 2 * g.pad) {
        throw ShapeError("conv2d: kernel " + std::to_string(g.K) + " larger than padded input " +
                         shape_str(input.shape()) + " with padding " + std::to_string(padding));
    }
    if (bias.defined() && bias.numel() != g.P) throw ShapeError("conv2d: bias " + shape_str(bias.shape()));
    g.Ho = (g.H + 2 * g.pad - g.K) / g.stride + 1;
    g.Wo = (g.W + 2 * g.pad - g.K) / g.stride + 1;
    const auto S = g.Ho * g.Wo, CKK = g.C * g.K * g.K;

    std::vector<double> cols(static_cast<std::size_t>(CKK * S));
    std::vector<double> v(static_cast<std::size_t>(g.B * g.P * S), 0.0);
    const double* X = input.data().data();
    const double* Wt = weight.data().data();
    for (std::int64_t b = 0; b < g.B; ++b) {
        im2col(g, X + b * g.C * g.H * g.W, cols.data());
        double* o = v.data() + b * g.P * S;
        gemm_nn(g.P, CKK, S, Wt, cols.data(), o);
        if (bias.defined()) {
            auto bd = bias.data();
            for (std::int64_t p = 0; p < g.P; ++p)
                for (std::int64_t s = 0; s < S; ++s) o[p * S + s] += bd[static_cast<std::size_t>(p)];
        }
    }
    Precision p = promote(input.precision(), weight.precision());
    auto out = finish("conv2d", {g.B, g.P, g.Ho, g.Wo}, std::move(v), p);
    maybe_record("conv2d", {input, weight, bias}, out, [input, weight, bias, g, S, CKK](std::span<const double> gout) {
        const double* X = input.data().data();
        const double* Wt = weight.data().data();
        std::vector<double> cols(static_cast<std::size_t>(CKK * S));
        std::vector<double> gw(wants(weight) ? static_cast<std::size_t>(weight.numel()) : 0, 0.0);
        std::vector<double> gx(wants(input) ? static_cast<std::size_t>(input.numel()) : 0, 0.0);
        for (std::int64_t b = 0; b < g.B; ++b) {
            const double* go = gout.data() + b * g.P * S;
            if (wants(weight)) {
                im2col(g, X + b * g.C * g.H * g.W, cols.data());
                gemm_nt(g.P, S, CKK, go, cols.data(), gw.data());
            }
            if (wants(input)) {
                std::fill(cols.begin(), cols.end(), 0.0);
                gemm_tn(g.P, CKK, S, Wt, go, cols.data());
                col2im(g, cols.data(), gx.data() + b * g.C * g.H * g.W);
            }
        }
        if (wants(weight)) accumulate_grad(weight, gw);
        if (wants(input)) accumulate_grad(input, gx);
        if (wants(bias)) {
            std::vector<double> gb(static_cast<std::size_t>(g.P), 0.0);
            for (std::int64_t b = 0; b < g.B; ++b)
                for (std::int64_t p = 0; p < g.P; ++p)
                    for (std::int64_t s = 0; s < S; ++s) gb[static_cast<std::size_t>(p)] += gout[static_cast<std::size_t>((b * g.P + p) * S + s)];
            accumulate_grad(bias, gb);
        }
    });
    return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, int padding) {
    require_rank("depthwise_conv2d input", input, 4);
    require_rank("depthwise_conv2d weight", weight, 3);
    const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const auto K = weight.dim(1);
    if (weight.dim(0) != C || weight.dim(2) != K) {
        throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
    }
    if (K % 2 == 0) throw ShapeError("depthwise_conv2d: even kernel size " + std::to_string(K) + " cannot preserve spatial size");
    if (padding != (K - 1) / 2) {
        throw ShapeError("depthwise_conv2d: padding must be (K-1)/2 = " + std::to_string((K - 1) / 2));
    }
    const auto pad = static_cast<std::int64_t>(padding);
    const double* X = input.data().data();
    const double* Wt = weight.data().data();
    std::vector<double> v(static_cast<std::size_t>(input.numel()), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* img = X + (b * C + c) * H * W;
            const double* f = Wt + c * K * K;
            double* o = v.data() + (b * C + c) * H * W;
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    double acc = 0.0;
                    for (std::int64_t ky = 0; ky < K; ++ky) {
                        const auto iy = y - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (std::int64_t kx = 0; kx < K; ++kx) {
                            const auto ix = x - pad + kx;
                            if (ix >= 0 && ix < W) acc += f[ky * K + kx] * img[iy * W + ix];
                        }
                    }
                    o[y * W + x] = acc;
                }
        }
    auto out = finish("depthwise_conv2d", input.shape(), std::move(v), promote(input.precision(), weight.precision()));
    maybe_record("depthwise_conv2d", {input, weight}, out, [input, weight, B, C, H, W, K, pad](std::span<const double> g) {
        const double* X = input.data().data();
        const double* Wt = weight.data().data();
        std::vector<double> gx(static_cast<std::size_t>(input.numel()), 0.0);
        std::vector<double> gw(static_cast<std::size_t>(weight.numel()), 0.0);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                const double* img = X + (b * C + c) * H * W;
                const double* f = Wt + c * K * K;
                const double* go = g.data() + (b * C + c) * H * W;
                double* gi = gx.data() + (b * C + c) * H * W;
                double* gf = gw.data() + c * K * K;
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t x = 0; x < W; ++x) {
                        const double gv = go[y * W + x];
                        if (gv == 0.0) continue;
                        for (std::int64_t ky = 0; ky < K; ++ky) {
                            const auto iy = y - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (std::int64_t kx = 0; kx < K; ++kx) {
                                const auto ix = x - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                gf[ky * K + kx] += gv * img[iy * W + ix];
                                gi[iy * W + ix] += gv * f[ky * K + kx];
                            }
                        }
                    }
            }
        accumulate_grad(input, gx);
        accumulate_grad(weight, gw);
    });
    return out;
}

Tensor pointwise_conv(const Tensor& input, const Tensor& mix, const Tensor& bias) {
    require_rank("pointwise_conv input", input, 4);
    require_rank("pointwise_conv mix", mix, 2);
    const auto B = input.dim(0), Cin = input.dim(1), S = input.dim(2) * input.dim(3);
    const auto Cout = mix.dim(0);
    if (mix.dim(1) != Cin) {
        throw ShapeError("pointwise_conv: mix " + shape_str(mix.shape()) + " expects " + std::to_string(mix.dim(1)) +
                         " input channels, got " + shape_str(input.shape()));
    }
    if (bias.defined() && bias.numel() != Cout) throw ShapeError("pointwise_conv: bias " + shape_str(bias.shape()));
    const double* X = input.data().data();
    const double* M = mix.data().data();
    std::vector<double> v(static_cast<std::size_t>(B * Cout * S), 0.0);
    for (std::int64_t b = 0; b < B; ++b) {
        double* o = v.data() + b * Cout * S;
        gemm_nn(Cout, Cin, S, M, X + b * Cin * S, o);
        if (bias.defined()) {
            auto bd = bias.data();
            for (std::int64_t p = 0; p < Cout; ++p)
                for (std::int64_t s = 0; s < S; ++s) o[p * S + s] += bd[static_cast<std::size_t>(p)];
        }
    }
    auto out = finish("pointwise_conv", {B, Cout, input.dim(2), input.dim(3)}, std::move(v),
                      promote(input.precision(), mix.precision()));
    maybe_record("pointwise_conv", {input, mix, bias}, out, [input, mix, bias, B, Cin, Cout, S](std::span<const double> g) {
        const double* X = input.data().data();
        const double* M = mix.data().data();
        if (wants(input)) {
            std::vector<double> gx(static_cast<std::size_t>(input.numel()), 0.0);
            for (std::int64_t b = 0; b < B; ++b) gemm_tn(Cout, Cin, S, M, g.data() + b * Cout * S, gx.data() + b * Cin * S);
            accumulate_grad(input, gx);
        }
        if (wants(mix)) {
            std::vector<double> gm(static_cast<std::size_t>(mix.numel()), 0.0);
            for (std::int64_t b = 0; b < B; ++b) gemm_nt(Cout, S, Cin, g.data() + b * Cout * S, X + b * Cin * S, gm.data());
            accumulate_grad(mix, gm);
        }
        if (wants(bias)) {
            std::vector<double> gb(static_cast<std::size_t>(Cout), 0.0);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t p = 0; p < Cout; ++p)
                    for (std::int64_t s = 0; s < S; ++s) gb[static_cast<std::size_t>(p)] += g[static_cast<std::size_t>((b * Cout + p) * S + s)];
            accumulate_grad(bias, gb);
        }
    });
    return out;
}

Tensor adaptive_max_pool2d(const Tensor& input, int out_h, int out_w) {
    require_rank("adaptive_max_pool2d", input, 4);
    const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (out_h < 1 || out_w < 1 || out_h > H || out_w > W) {
        throw ShapeError("adaptive_max_pool2d: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " exceeds input " + shape_str(input.shape()));
    }
    const double* X = input.data().data();
    std::vector<double> v(static_cast<std::size_t>(B * C * out_h * out_w));
    auto arg = std::make_shared<std::vector<std::int64_t>>(v.size());
    std::size_t o = 0;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* img = X + bc * H * W;
        for (std::int64_t i = 0; i < out_h; ++i) {
            const auto y0 = i * H / out_h, y1 = (i + 1) * H / out_h;
            for (std::int64_t j = 0; j < out_w; ++j, ++o) {
                const auto x0 = j * W / out_w, x1 = (j + 1) * W / out_w;
                std::int64_t best = y0 * W + x0;
                for (auto y = y0; y < y1; ++y)
                    for (auto x = x0; x < x1; ++x)
                        if (img[y * W + x] > img[best]) best = y * W + x;
                v[o] = img[best];
                (*arg)[o] = bc * H * W + best;
            }
        }
    }
    auto out = finish("adaptive_max_pool2d", {B, C, out_h, out_w}, std::move(v), input.precision());
    maybe_record("adaptive_max_pool2d", {input}, out, [input, arg](std::span<const double> g) {
        std::vector<double> gx(static_cast<std::size_t>(input.numel()), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>((*arg)[i])] += g[i];
        accumulate_grad(input, gx);
    });
    return out;
}

// ------------------------------------------------------------------- losses

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    require_rank("cross_entropy", logits, 2);
    const auto B = static_cast<std::size_t>(logits.dim(0));
    const auto M = static_cast<std::size_t>(logits.dim(1));
    if (targets.size() != B) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(B) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= M) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(M) + ")");
        }
    }
    auto ld = logits.data();
    std::vector<double> probs(ld.size());
    double loss = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
        const double* in = ld.data() + r * M;
        const double mx = *std::max_element(in, in + M);
        double z = 0.0;
        for (std::size_t c = 0; c < M; ++c) z += (probs[r * M + c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < M; ++c) probs[r * M + c] /= z;
        loss -= in[static_cast<std::size_t>(targets[r])] - mx - std::log(z);
    }
    loss /= static_cast<double>(B);
    auto out = finish("cross_entropy", {1}, {loss}, logits.precision());
    maybe_record("cross_entropy", {logits}, out, [logits, probs = std::move(probs), targets, B, M](std::span<const double> g) {
        std::vector<double> gl(probs);
        for (std::size_t r = 0; r < B; ++r) gl[r * M + static_cast<std::size_t>(targets[r])] -= 1.0;
        for (auto& e : gl) e *= g[0] / static_cast<double>(B);
        accumulate_grad(logits, gl);
    });
    return out;
}

}  // namespace fpvt::ops
