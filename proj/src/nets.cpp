#include "granflow/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>

#include <Eigen/Core>

#include "granflow/archive.hpp"
#include "granflow/json_util.hpp"
#include "granflow/random.hpp"

namespace granflow::nets {

std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::Backbone: return "backbone";
        case ModelKind::Surrogate: return "forward";
        case ModelKind::Decoder: return "decoder";
        case ModelKind::Baseline: return "baseline";
    }
    return "?";
}

ModelKind parse_kind(const std::string& s) {
    if (s == "backbone") return ModelKind::Backbone;
    if (s == "forward" || s == "surrogate") return ModelKind::Surrogate;
    if (s == "decoder") return ModelKind::Decoder;
    if (s == "baseline") return ModelKind::Baseline;
    throw ConfigError("unknown model kind '" + s + "' (expected backbone, forward, decoder or baseline)");
}

ArchDescriptor ArchDescriptor::for_kind(ModelKind kind, std::vector<int> widths) {
    ArchDescriptor a;
    a.kind = kind;
    a.widths = std::move(widths);
    a.embed_dim = a.widths.empty() ? 0 : *std::min_element(a.widths.begin(), a.widths.end());
    a.use_tau = kind == ModelKind::Backbone;
    switch (kind) {
        case ModelKind::Backbone: a.in_channels = 3, a.out_channels = 3; break;
        case ModelKind::Surrogate: a.in_channels = 3, a.out_channels = 2; break;
        case ModelKind::Decoder: a.in_channels = 3, a.out_channels = 3; break;
        case ModelKind::Baseline: a.in_channels = 2, a.out_channels = 3; break;
    }
    return a;
}

void ArchDescriptor::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("arch: " + m); };
    if (widths.empty()) fail("widths must be non-empty");
    for (std::size_t i = 0; i < widths.size(); ++i) {
        if (widths[i] < 1) fail("widths must be positive");
        if (i > 0 && widths[i] < widths[i - 1]) fail("widths must be non-decreasing");
    }
    if (blocks_per_stage < 1) fail("blocks_per_stage must be >= 1");
    if (embed_dim < 1) fail("embed_dim must be >= 1");
    if (vocab < 1) fail("vocab must be >= 1");
    const ArchDescriptor ref = for_kind(kind, widths);
    if (in_channels != ref.in_channels || out_channels != ref.out_channels) {
        fail(to_string(kind) + " must map " + std::to_string(ref.in_channels) + " -> " +
             std::to_string(ref.out_channels) + " channels");
    }
    if (use_tau != ref.use_tau) fail("only the backbone takes a tau embedding");
}

void to_json(nlohmann::json& j, const ArchDescriptor& a) {
    j = nlohmann::json{{"kind", to_string(a.kind)},       {"in_channels", a.in_channels},
                       {"out_channels", a.out_channels},  {"widths", a.widths},
                       {"blocks_per_stage", a.blocks_per_stage}, {"embed_dim", a.embed_dim},
                       {"use_tau", a.use_tau},            {"vocab", a.vocab}};
}

void from_json(const nlohmann::json& j, ArchDescriptor& a) {
    SectionReader r(j, "arch");
    std::string kind = to_string(a.kind);
    r.get("kind", kind);
    a = ArchDescriptor::for_kind(parse_kind(kind), a.widths);
    r.get("widths", a.widths);
    a.embed_dim = *std::min_element(a.widths.begin(), a.widths.end());
    r.get("in_channels", a.in_channels);
    r.get("out_channels", a.out_channels);
    r.get("blocks_per_stage", a.blocks_per_stage);
    r.get("embed_dim", a.embed_dim);
    r.get("use_tau", a.use_tau);
    r.get("vocab", a.vocab);
    r.finish();
    a.validate();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;

// Eigen peels unaligned heads off vectorized loops, so every mapped buffer is
// kept at Eigen's alignment to make results independent of heap addresses.
template <typename T>
using AVec = std::vector<T, Eigen::aligned_allocator<T>>;

int group_count(int c) {
    int g = std::max(1, std::min(8, c / 4));
    while (c % g != 0) --g;
    return g;
}

// Activation in channel-major layout (C, B, H, W): each channel row holds all
// samples, so convolutions become one GEMM over the whole batch.
template <typename T>
struct Act {
    int c = 0, b = 0, h = 0, w = 0;
    AVec<T> v;

    Act() = default;
    Act(int c_, int b_, int h_, int w_) : c(c_), b(b_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * b_ * h_ * w_) {}
    std::size_t cols() const { return static_cast<std::size_t>(b) * h * w; }
    Map<T> mat() { return Map<T>(v.data(), c, static_cast<Eigen::Index>(cols())); }
    CMap<T> mat() const { return CMap<T>(v.data(), c, static_cast<Eigen::Index>(cols())); }
};

// Parameter offsets are handed out in construction order.
struct Alloc {
    std::size_t next = 0;
    std::size_t take(std::size_t n) {
        const std::size_t at = next;
        next += n;
        return at;
    }
};

template <typename T>
struct Conv {
    int cin = 0, cout = 0, k = 3, stride = 1;
    std::size_t w = 0, bias = 0;
    int in_h = 0, in_w = 0, out_h = 0, out_w = 0, batch = 0;
    RowMat<T> col;

    Conv() = default;
    Conv(Alloc& a, int ci, int co, int k_, int s) : cin(ci), cout(co), k(k_), stride(s) {
        w = a.take(static_cast<std::size_t>(co) * ci * k * k);
        bias = a.take(co);
    }
    int pad() const { return k / 2; }
    // Output columns whose input column ox * stride + kx - pad lies inside the row.
    std::pair<int, int> valid_cols(int kx) const {
        int lo = 0;
        while (lo < out_w && lo * stride + kx - pad() < 0) ++lo;
        int hi = out_w;
        while (hi > lo && (hi - 1) * stride + kx - pad() >= in_w) --hi;
        return {lo, hi};
    }

    Act<T> forward(const T* P, const Act<T>& x) {
        batch = x.b, in_h = x.h, in_w = x.w;
        out_h = (in_h + 2 * pad() - k) / stride + 1;
        out_w = (in_w + 2 * pad() - k) / stride + 1;
        const Eigen::Index ncol = static_cast<Eigen::Index>(batch) * out_h * out_w;
        if (k == 1 && stride == 1) {
            col = x.mat();
        } else {
            col.setZero(static_cast<Eigen::Index>(cin) * k * k, ncol);
            for (int ci = 0; ci < cin; ++ci) {
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        T* row = col.data() + ((ci * k + ky) * k + kx) * ncol;
                        const auto [lo, hi] = valid_cols(kx);
                        for (int b = 0; b < batch; ++b) {
                            const T* src = x.v.data() + (static_cast<std::size_t>(ci) * batch + b) * in_h * in_w;
                            for (int oy = 0; oy < out_h; ++oy) {
                                const int iy = oy * stride + ky - pad();
                                T* dst = row + (static_cast<std::size_t>(b) * out_h + oy) * out_w;
                                if (iy < 0 || iy >= in_h) continue;
                                const int off = iy * in_w + kx - pad();
                                if (stride == 1) {
                                    for (int ox = lo; ox < hi; ++ox) dst[ox] = src[off + ox];
                                } else {
                                    for (int ox = lo; ox < hi; ++ox) dst[ox] = src[off + ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        Act<T> y(cout, batch, out_h, out_w);
        const CMap<T> W(P + w, cout, static_cast<Eigen::Index>(cin) * k * k);
        y.mat().noalias() = W * col;
        const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(P + bias, cout);
        y.mat().colwise() += bv;
        return y;
    }

    Act<T> backward(const T* P, T* dP, const Act<T>& dy, bool need_input = true) {
        const Eigen::Index kk = static_cast<Eigen::Index>(cin) * k * k;
        if (dP) {
            Map<T> dW(dP + w, cout, kk);
            dW.noalias() += dy.mat() * col.transpose();
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(dP + bias, cout);
            db += dy.mat().rowwise().sum();
        }
        Act<T> dx;
        if (!need_input) return dx;
        dx = Act<T>(cin, batch, in_h, in_w);
        const CMap<T> W(P + w, cout, kk);
        if (k == 1 && stride == 1) {
            dx.mat().noalias() = W.transpose() * dy.mat();
            return dx;
        }
        const RowMat<T> dcol = W.transpose() * dy.mat();
        const Eigen::Index ncol = dcol.cols();
        for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const T* row = dcol.data() + ((ci * k + ky) * k + kx) * ncol;
                    const auto [lo, hi] = valid_cols(kx);
                    for (int b = 0; b < batch; ++b) {
                        T* dst = dx.v.data() + (static_cast<std::size_t>(ci) * batch + b) * in_h * in_w;
                        for (int oy = 0; oy < out_h; ++oy) {
                            const int iy = oy * stride + ky - pad();
                            if (iy < 0 || iy >= in_h) continue;
                            const T* src = row + (static_cast<std::size_t>(b) * out_h + oy) * out_w;
                            const int off = iy * in_w + kx - pad();
                            if (stride == 1) {
                                for (int ox = lo; ox < hi; ++ox) dst[off + ox] += src[ox];
                            } else {
                                for (int ox = lo; ox < hi; ++ox) dst[off + ox * stride] += src[ox];
                            }
                        }
                    }
                }
            }
        }
        return dx;
    }
};

// 2x2 transposed convolution with stride 2; weight layout (cout*4, cin).
template <typename T>
struct UpConv {
    int cin = 0, cout = 0;
    std::size_t w = 0, bias = 0;
    Act<T> x;

    UpConv() = default;
    UpConv(Alloc& a, int ci, int co) : cin(ci), cout(co) {
        w = a.take(static_cast<std::size_t>(co) * 4 * ci);
        bias = a.take(co);
    }

    Act<T> forward(const T* P, const Act<T>& in) {
        x = in;
        const CMap<T> W(P + w, cout * 4, cin);
        const RowMat<T> z = W * x.mat();
        Act<T> y(cout, x.b, 2 * x.h, 2 * x.w);
        for (int co = 0; co < cout; ++co) {
            for (int q = 0; q < 4; ++q) {
                const int dy = q / 2, dx = q % 2;
                const T* src = z.data() + static_cast<std::size_t>(co * 4 + q) * z.cols();
                for (int b = 0; b < x.b; ++b) {
                    T* dst = y.v.data() + (static_cast<std::size_t>(co) * x.b + b) * y.h * y.w;
                    for (int i = 0; i < x.h; ++i) {
                        for (int j = 0; j < x.w; ++j) {
                            dst[(2 * i + dy) * y.w + 2 * j + dx] = src[(static_cast<std::size_t>(b) * x.h + i) * x.w + j] + P[bias + co];
                        }
                    }
                }
            }
        }
        return y;
    }

    Act<T> backward(const T* P, T* dP, const Act<T>& dy) {
        RowMat<T> dz(cout * 4, static_cast<Eigen::Index>(x.cols()));
        for (int co = 0; co < cout; ++co) {
            for (int q = 0; q < 4; ++q) {
                const int oy = q / 2, ox = q % 2;
                T* dst = dz.data() + static_cast<std::size_t>(co * 4 + q) * dz.cols();
                for (int b = 0; b < x.b; ++b) {
                    const T* src = dy.v.data() + (static_cast<std::size_t>(co) * x.b + b) * dy.h * dy.w;
                    for (int i = 0; i < x.h; ++i) {
                        for (int j = 0; j < x.w; ++j) {
                            dst[(static_cast<std::size_t>(b) * x.h + i) * x.w + j] = src[(2 * i + oy) * dy.w + 2 * j + ox];
                        }
                    }
                }
            }
        }
        if (dP) {
            Map<T> dW(dP + w, cout * 4, cin);
            dW.noalias() += dz * x.mat().transpose();
            for (int co = 0; co < cout; ++co) dP[bias + co] += dy.mat().row(co).sum();
        }
        Act<T> dx(cin, x.b, x.h, x.w);
        const CMap<T> W(P + w, cout * 4, cin);
        dx.mat().noalias() = W.transpose() * dz;
        return dx;
    }
};

template <typename T>
struct GroupNorm {
    int c = 0, groups = 1;
    std::size_t gamma = 0, beta = 0;
    Act<T> xhat;
    AVec<T> rstd;
    static constexpr double kEps = 1e-5;

    GroupNorm() = default;
    GroupNorm(Alloc& a, int ch) : c(ch), groups(group_count(ch)) {
        gamma = a.take(ch);
        beta = a.take(ch);
    }

    Act<T> forward(const T* P, const Act<T>& x) {
        xhat = Act<T>(x.c, x.b, x.h, x.w);
        Act<T> y(x.c, x.b, x.h, x.w);
        const int cg = c / groups;
        const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
        rstd.assign(static_cast<std::size_t>(groups) * x.b, T(0));
        for (int b = 0; b < x.b; ++b) {
            for (int g = 0; g < groups; ++g) {
                double sum = 0.0, sq = 0.0;
                for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
                    const T* p = x.v.data() + (static_cast<std::size_t>(ci) * x.b + b) * hw;
                    for (std::size_t k = 0; k < hw; ++k) sum += p[k];
                }
                const double n = static_cast<double>(cg * hw);
                const double mean = sum / n;
                for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
                    const T* p = x.v.data() + (static_cast<std::size_t>(ci) * x.b + b) * hw;
                    for (std::size_t k = 0; k < hw; ++k) sq += (p[k] - mean) * (p[k] - mean);
                }
                const T r = static_cast<T>(1.0 / std::sqrt(sq / n + kEps));
                rstd[static_cast<std::size_t>(b) * groups + g] = r;
                const T m = static_cast<T>(mean);
                for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
                    const std::size_t off = (static_cast<std::size_t>(ci) * x.b + b) * hw;
                    const T ga = P[gamma + ci], be = P[beta + ci];
                    for (std::size_t k = 0; k < hw; ++k) {
                        const T xh = (x.v[off + k] - m) * r;
                        xhat.v[off + k] = xh;
                        y.v[off + k] = ga * xh + be;
                    }
                }
            }
        }
        return y;
    }

    Act<T> backward(const T* P, T* dP, const Act<T>& dy) {
        Act<T> dx(xhat.c, xhat.b, xhat.h, xhat.w);
        const int cg = c / groups;
        const std::size_t hw = static_cast<std::size_t>(xhat.h) * xhat.w;
        if (dP) {
            for (int ci = 0; ci < c; ++ci) {
                double dg = 0.0, db = 0.0;
                const std::size_t off = static_cast<std::size_t>(ci) * xhat.b * hw;
                for (std::size_t k = 0; k < xhat.b * hw; ++k) {
                    dg += dy.v[off + k] * xhat.v[off + k];
                    db += dy.v[off + k];
                }
                dP[gamma + ci] += static_cast<T>(dg);
                dP[beta + ci] += static_cast<T>(db);
            }
        }
        for (int b = 0; b < xhat.b; ++b) {
            for (int g = 0; g < groups; ++g) {
                double s1 = 0.0, s2 = 0.0;
                for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
                    const std::size_t off = (static_cast<std::size_t>(ci) * xhat.b + b) * hw;
                    const T ga = P[gamma + ci];
                    for (std::size_t k = 0; k < hw; ++k) {
                        const double d = dy.v[off + k] * ga;
                        s1 += d;
                        s2 += d * xhat.v[off + k];
                    }
                }
                const double n = static_cast<double>(cg * hw);
                const T m1 = static_cast<T>(s1 / n), m2 = static_cast<T>(s2 / n);
                const T r = rstd[static_cast<std::size_t>(b) * groups + g];
                for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
                    const std::size_t off = (static_cast<std::size_t>(ci) * xhat.b + b) * hw;
                    const T ga = P[gamma + ci];
                    for (std::size_t k = 0; k < hw; ++k) {
                        dx.v[off + k] = r * (dy.v[off + k] * ga - m1 - xhat.v[off + k] * m2);
                    }
                }
            }
        }
        return dx;
    }
};

template <typename T>
T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
struct Silu {
    using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
    using VMap = Eigen::Map<Vec, Eigen::AlignedMax>;
    using CVMap = Eigen::Map<const Vec, Eigen::AlignedMax>;
    AVec<T> x, sig;

    Act<T> forward(const Act<T>& in) {
        const auto n = static_cast<Eigen::Index>(in.v.size());
        x = in.v;
        sig.resize(in.v.size());
        CVMap xv(x.data(), n);
        VMap sv(sig.data(), n);
        sv = T(1) / (T(1) + (-xv).exp());
        Act<T> y(in.c, in.b, in.h, in.w);
        VMap(y.v.data(), n) = xv * sv;
        return y;
    }
    Act<T> backward(const Act<T>& dy) {
        const auto n = static_cast<Eigen::Index>(x.size());
        Act<T> dx(dy.c, dy.b, dy.h, dy.w);
        CVMap xv(x.data(), n), sv(sig.data(), n);
        VMap(dx.v.data(), n) = CVMap(dy.v.data(), n) * sv * (T(1) + xv * (T(1) - sv));
        return dx;
    }
};

// Rows are samples: y (B x out) = x (B x in) W^T + b.
template <typename T>
struct Linear {
    int in = 0, out = 0;
    std::size_t w = 0, bias = 0;
    RowMat<T> x;

    Linear() = default;
    Linear(Alloc& a, int i, int o) : in(i), out(o) {
        w = a.take(static_cast<std::size_t>(i) * o);
        bias = a.take(o);
    }
    RowMat<T> forward(const T* P, const RowMat<T>& xin) {
        x = xin;
        const CMap<T> W(P + w, out, in);
        RowMat<T> y = x * W.transpose();
        const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(P + bias, out);
        y.rowwise() += bv;
        return y;
    }
    RowMat<T> backward(const T* P, T* dP, const RowMat<T>& dy) {
        if (dP) {
            Map<T> dW(dP + w, out, in);
            dW.noalias() += dy.transpose() * x;
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(dP + bias, out);
            db += dy.colwise().sum();
        }
        const CMap<T> W(P + w, out, in);
        return dy * W;
    }
};

template <typename T>
struct ResBlock {
    GroupNorm<T> gn1, gn2;
    Silu<T> act1, act2;
    Conv<T> conv1, conv2;
    Linear<T> emb;
    std::optional<Conv<T>> skip;

    ResBlock(Alloc& a, int cin, int cout, int embed) {
        gn1 = GroupNorm<T>(a, cin);
        conv1 = Conv<T>(a, cin, cout, 3, 1);
        emb = Linear<T>(a, embed, cout);
        gn2 = GroupNorm<T>(a, cout);
        conv2 = Conv<T>(a, cout, cout, 3, 1);
        if (cin != cout) skip.emplace(a, cin, cout, 1, 1);
    }

    Act<T> forward(const T* P, const Act<T>& x, const RowMat<T>& semb) {
        Act<T> h = conv1.forward(P, act1.forward(gn1.forward(P, x)));
        const RowMat<T> e = emb.forward(P, semb);  // B x cout
        const std::size_t hw = static_cast<std::size_t>(h.h) * h.w;
        for (int c = 0; c < h.c; ++c) {
            for (int b = 0; b < h.b; ++b) {
                T* p = h.v.data() + (static_cast<std::size_t>(c) * h.b + b) * hw;
                const T add = e(b, c);
                for (std::size_t k = 0; k < hw; ++k) p[k] += add;
            }
        }
        Act<T> y = conv2.forward(P, act2.forward(gn2.forward(P, h)));
        if (skip) {
            const Act<T> s = skip->forward(P, x);
            for (std::size_t k = 0; k < y.v.size(); ++k) y.v[k] += s.v[k];
        } else {
            for (std::size_t k = 0; k < y.v.size(); ++k) y.v[k] += x.v[k];
        }
        return y;
    }

    Act<T> backward(const T* P, T* dP, const Act<T>& dy, RowMat<T>& d_semb) {
        Act<T> dh = gn2.backward(P, dP, act2.backward(conv2.backward(P, dP, dy)));
        RowMat<T> de(dh.b, dh.c);
        const std::size_t hw = static_cast<std::size_t>(dh.h) * dh.w;
        for (int c = 0; c < dh.c; ++c) {
            for (int b = 0; b < dh.b; ++b) {
                const T* p = dh.v.data() + (static_cast<std::size_t>(c) * dh.b + b) * hw;
                T s = 0;
                for (std::size_t k = 0; k < hw; ++k) s += p[k];
                de(b, c) = s;
            }
        }
        d_semb += emb.backward(P, dP, de);
        Act<T> dx = gn1.backward(P, dP, act1.backward(conv1.backward(P, dP, dh)));
        if (skip) {
            const Act<T> ds = skip->backward(P, dP, dy);
            for (std::size_t k = 0; k < dx.v.size(); ++k) dx.v[k] += ds.v[k];
        } else {
            for (std::size_t k = 0; k < dx.v.size(); ++k) dx.v[k] += dy.v[k];
        }
        return dx;
    }
};

template <typename T>
Act<T> concat(const Act<T>& a, const Act<T>& b) {
    Act<T> out(a.c + b.c, a.b, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
    return out;
}

template <typename T>
void split(const Act<T>& d, int ca, Act<T>& da, Act<T>& db) {
    da = Act<T>(ca, d.b, d.h, d.w);
    db = Act<T>(d.c - ca, d.b, d.h, d.w);
    std::copy(d.v.begin(), d.v.begin() + static_cast<std::ptrdiff_t>(da.v.size()), da.v.begin());
    std::copy(d.v.begin() + static_cast<std::ptrdiff_t>(da.v.size()), d.v.end(), db.v.begin());
}

}  // namespace

template <typename T>
struct UNet<T>::Impl {
    ArchDescriptor arch;
    Alloc alloc;
    Conv<T> conv_in;
    std::vector<std::vector<ResBlock<T>>> enc, dec;
    std::vector<Conv<T>> downs;
    std::vector<UpConv<T>> ups;
    std::optional<ResBlock<T>> mid;
    GroupNorm<T> gn_out;
    Silu<T> act_out;
    Conv<T> conv_out;
    // Embedding: sinusoidal(tau) -> Linear -> SiLU -> Linear, plus a table row per c.
    Linear<T> tau1, tau2;
    RowMat<T> tau_pre;
    std::size_t table = 0;

    // Cached per forward.
    int batch = 0, rows = 0, cols = 0;
    std::vector<int> cs;
    std::vector<int> skip_channels;
    RowMat<T> emb_pre;  // B x E before the shared SiLU
    AVec<T> P, dP;      // aligned copies of the caller's parameters and gradient

    explicit Impl(const ArchDescriptor& a) : arch(a) {
        arch.validate();
        const int E = arch.embed_dim;
        const int L = static_cast<int>(arch.widths.size());
        conv_in = Conv<T>(alloc, arch.in_channels, arch.widths[0], 3, 1);
        if (arch.use_tau) {
            tau1 = Linear<T>(alloc, E, E);
            tau2 = Linear<T>(alloc, E, E);
        }
        table = alloc.take(static_cast<std::size_t>(arch.vocab) * E);
        int ch = arch.widths[0];
        enc.resize(L);
        for (int l = 0; l < L; ++l) {
            for (int k = 0; k < arch.blocks_per_stage; ++k) {
                enc[l].emplace_back(alloc, ch, arch.widths[l], E);
                ch = arch.widths[l];
            }
            if (l + 1 < L) downs.emplace_back(alloc, ch, ch, 3, 2);
        }
        mid.emplace(alloc, ch, ch, E);
        dec.resize(L);
        for (int l = L - 1; l >= 0; --l) {
            ch = ch + arch.widths[l];
            for (int k = 0; k < arch.blocks_per_stage; ++k) {
                dec[l].emplace_back(alloc, ch, arch.widths[l], E);
                ch = arch.widths[l];
            }
            if (l > 0) {
                ups.emplace_back(alloc, ch, arch.widths[l - 1]);
                ch = arch.widths[l - 1];
            }
        }
        gn_out = GroupNorm<T>(alloc, ch);
        conv_out = Conv<T>(alloc, ch, arch.out_channels, 3, 1);
    }

    RowMat<T> embed(const T* P, std::span<const Conditioning> cond) {
        const int E = arch.embed_dim;
        RowMat<T> e = RowMat<T>::Zero(batch, E);
        if (arch.use_tau) {
            RowMat<T> feat(batch, E);
            feat.setZero();
            const int half = E / 2;
            for (int b = 0; b < batch; ++b) {
                const double t = cond[b].tau * 1000.0;
                for (int i = 0; i < half; ++i) {
                    const double f = std::exp(-std::log(10000.0) * i / half);
                    feat(b, i) = static_cast<T>(std::sin(t * f));
                    feat(b, half + i) = static_cast<T>(std::cos(t * f));
                }
            }
            tau_pre = tau1.forward(P, feat);
            e = tau2.forward(P, tau_pre.unaryExpr([](T v) { return silu(v); }));
        }
        for (int b = 0; b < batch; ++b) {
            e.row(b) += CMap<T>(P + table + static_cast<std::size_t>(cs[b]) * E, 1, E);
        }
        return e;
    }

    void embed_backward(const T* P, T* dP, const RowMat<T>& d_emb) {
        const int E = arch.embed_dim;
        if (dP) {
            for (int b = 0; b < batch; ++b) {
                Map<T>(dP + table + static_cast<std::size_t>(cs[b]) * E, 1, E) += d_emb.row(b);
            }
        }
        if (arch.use_tau) {
            const RowMat<T> da = tau2.backward(P, dP, d_emb);
            tau1.backward(P, dP, da.binaryExpr(tau_pre, [](T g, T v) { return g * silu_grad(v); }));
        }
    }

    std::vector<Act<T>> skips;

    Act<T> forward(const T* P, const Act<T>& x, std::span<const Conditioning> cond) {
        batch = x.b;
        cs.resize(batch);
        for (int b = 0; b < batch; ++b) {
            if (cond[b].c < 0 || cond[b].c >= arch.vocab) {
                throw ConfigError("conditioning index " + std::to_string(cond[b].c) + " outside vocabulary");
            }
            if (arch.use_tau && !(cond[b].tau >= 0.0 && cond[b].tau <= 1.0)) {
                throw ConfigError("tau must lie in [0, 1]");
            }
            cs[b] = cond[b].c;
        }
        emb_pre = embed(P, cond);
        RowMat<T> semb = emb_pre.unaryExpr([](T v) { return silu(v); });

        const int L = static_cast<int>(arch.widths.size());
        Act<T> h = conv_in.forward(P, x);
        skips.assign(L, {});
        for (int l = 0; l < L; ++l) {
            for (auto& rb : enc[l]) h = rb.forward(P, h, semb);
            skips[l] = h;
            if (l + 1 < L) h = downs[l].forward(P, h);
        }
        h = mid->forward(P, h, semb);
        skip_channels.assign(L, 0);
        for (int l = L - 1; l >= 0; --l) {
            skip_channels[l] = h.c;
            h = concat(h, skips[l]);
            for (auto& rb : dec[l]) h = rb.forward(P, h, semb);
            if (l > 0) h = ups[L - 1 - l].forward(P, h);
        }
        return conv_out.forward(P, act_out.forward(gn_out.forward(P, h)));
    }

    Act<T> backward(const T* P, T* dP, const Act<T>& dy, bool need_input) {
        const int L = static_cast<int>(arch.widths.size());
        const int E = arch.embed_dim;
        RowMat<T> d_semb = RowMat<T>::Zero(batch, E);
        Act<T> dh = gn_out.backward(P, dP, act_out.backward(conv_out.backward(P, dP, dy)));
        std::vector<Act<T>> dskips(L);
        for (int l = 0; l < L; ++l) {
            if (l > 0) dh = ups[L - 1 - l].backward(P, dP, dh);
            for (auto it = dec[l].rbegin(); it != dec[l].rend(); ++it) dh = it->backward(P, dP, dh, d_semb);
            Act<T> dprev;
            split(dh, skip_channels[l], dprev, dskips[l]);
            dh = std::move(dprev);
        }
        dh = mid->backward(P, dP, dh, d_semb);
        for (int l = L - 1; l >= 0; --l) {
            if (l + 1 < L) dh = downs[l].backward(P, dP, dh);
            for (std::size_t k = 0; k < dh.v.size(); ++k) dh.v[k] += dskips[l].v[k];
            for (auto it = enc[l].rbegin(); it != enc[l].rend(); ++it) dh = it->backward(P, dP, dh, d_semb);
        }
        Act<T> dx = conv_in.backward(P, dP, dh, need_input);
        RowMat<T> d_emb = d_semb.binaryExpr(emb_pre, [](T g, T v) { return g * silu_grad(v); });
        embed_backward(P, dP, d_emb);
        return dx;
    }
};

template <typename T>
UNet<T>::UNet(const ArchDescriptor& arch) : impl_(std::make_unique<Impl>(arch)) {}
template <typename T>
UNet<T>::~UNet() = default;
template <typename T>
UNet<T>::UNet(UNet&&) noexcept = default;
template <typename T>
UNet<T>& UNet<T>::operator=(UNet&&) noexcept = default;

template <typename T>
const ArchDescriptor& UNet<T>::arch() const {
    return impl_->arch;
}

template <typename T>
std::size_t UNet<T>::param_count() const {
    return impl_->alloc.next;
}

template <typename T>
void UNet<T>::forward(std::span<const T> params, std::span<const T> input, int batch, int rows, int cols,
                      std::span<const Conditioning> cond, std::span<T> output) {
    const auto& a = impl_->arch;
    if (params.size() != param_count()) {
        throw ShapeError("expected " + std::to_string(param_count()) + " parameters, got " +
                         std::to_string(params.size()));
    }
    const int m = a.spatial_multiple();
    if (batch < 1 || rows < 1 || cols < 1 || rows % m != 0 || cols % m != 0) {
        throw ShapeError("input spatial shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " must be positive multiples of " + std::to_string(m));
    }
    const std::size_t plane = static_cast<std::size_t>(rows) * cols;
    if (input.size() != static_cast<std::size_t>(batch) * a.in_channels * plane ||
        output.size() != static_cast<std::size_t>(batch) * a.out_channels * plane ||
        cond.size() != static_cast<std::size_t>(batch)) {
        throw ShapeError("input/output/conditioning sizes do not match the descriptor");
    }
    impl_->rows = rows;
    impl_->cols = cols;
    // Batch-major in, channel-major inside.
    Act<T> x(a.in_channels, batch, rows, cols);
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < a.in_channels; ++c) {
            std::copy_n(input.data() + (static_cast<std::size_t>(b) * a.in_channels + c) * plane, plane,
                        x.v.data() + (static_cast<std::size_t>(c) * batch + b) * plane);
        }
    }
    impl_->P.assign(params.begin(), params.end());
    const Act<T> y = impl_->forward(impl_->P.data(), x, cond);
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < a.out_channels; ++c) {
            std::copy_n(y.v.data() + (static_cast<std::size_t>(c) * batch + b) * plane, plane,
                        output.data() + (static_cast<std::size_t>(b) * a.out_channels + c) * plane);
        }
    }
}

template <typename T>
void UNet<T>::backward(std::span<const T> params, std::span<const T> d_output, std::span<T> d_params,
                       std::span<T> d_input) {
    const auto& a = impl_->arch;
    const int batch = impl_->batch;
    const std::size_t plane = static_cast<std::size_t>(impl_->rows) * impl_->cols;
    if (d_output.size() != static_cast<std::size_t>(batch) * a.out_channels * plane) {
        throw ShapeError("cotangent size does not match the last forward pass");
    }
    if (!d_params.empty() && d_params.size() != param_count()) throw ShapeError("parameter gradient has wrong size");
    if (!d_input.empty() && d_input.size() != static_cast<std::size_t>(batch) * a.in_channels * plane) {
        throw ShapeError("input gradient has wrong size");
    }
    Act<T> dy(a.out_channels, batch, impl_->rows, impl_->cols);
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < a.out_channels; ++c) {
            std::copy_n(d_output.data() + (static_cast<std::size_t>(b) * a.out_channels + c) * plane, plane,
                        dy.v.data() + (static_cast<std::size_t>(c) * batch + b) * plane);
        }
    }
    impl_->P.assign(params.begin(), params.end());
    if (!d_params.empty()) impl_->dP.assign(d_params.size(), T(0));
    const Act<T> dx =
        impl_->backward(impl_->P.data(), d_params.empty() ? nullptr : impl_->dP.data(), dy, !d_input.empty());
    for (std::size_t k = 0; k < d_params.size(); ++k) d_params[k] += impl_->dP[k];
    if (d_input.empty()) return;
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < a.in_channels; ++c) {
            std::copy_n(dx.v.data() + (static_cast<std::size_t>(c) * batch + b) * plane, plane,
                        d_input.data() + (static_cast<std::size_t>(b) * a.in_channels + c) * plane);
        }
    }
}

template <typename T>
void UNet<T>::initialize(std::span<T> params, std::uint64_t seed) const {
    if (params.size() != param_count()) throw ShapeError("initialize: wrong parameter count");
    const Impl& plan = *impl_;
    std::fill(params.begin(), params.end(), T(0));
    Rng rng(seed);
    auto uniform = [&](std::size_t off, std::size_t n, int fan_in) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t k = 0; k < n; ++k) params[off + k] = static_cast<T>(bound * u(rng));
    };
    auto conv = [&](const Conv<T>& c) {
        uniform(c.w, static_cast<std::size_t>(c.cout) * c.cin * c.k * c.k, c.cin * c.k * c.k);
    };
    auto lin = [&](const Linear<T>& l) { uniform(l.w, static_cast<std::size_t>(l.in) * l.out, l.in); };
    auto gn = [&](const GroupNorm<T>& g) { std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(g.gamma), g.c, T(1)); };
    auto block = [&](const ResBlock<T>& rb) {
        gn(rb.gn1);
        conv(rb.conv1);
        lin(rb.emb);
        gn(rb.gn2);
        conv(rb.conv2);
        if (rb.skip) conv(*rb.skip);
    };
    const auto& arch = plan.arch;
    conv(plan.conv_in);
    if (arch.use_tau) {
        lin(plan.tau1);
        lin(plan.tau2);
    }
    {
        std::normal_distribution<double> g(0.0, 1.0);
        const std::size_t n = static_cast<std::size_t>(arch.vocab) * arch.embed_dim;
        for (std::size_t k = 0; k < n; ++k) params[plan.table + k] = static_cast<T>(g(rng));
    }
    for (const auto& stage : plan.enc) {
        for (const auto& rb : stage) block(rb);
    }
    for (const auto& d : plan.downs) conv(d);
    block(*plan.mid);
    for (const auto& stage : plan.dec) {
        for (const auto& rb : stage) block(rb);
    }
    for (const auto& u : plan.ups) uniform(u.w, static_cast<std::size_t>(u.cout) * 4 * u.cin, u.cin);
    gn(plan.gn_out);
    // conv_out stays zero, so an untrained model outputs exactly zero.
}

template class UNet<float>;
template class UNet<double>;

std::size_t ArchDescriptor::param_count() const { return UNet<float>(*this).param_count(); }

ModelParams init_params(const ArchDescriptor& arch, std::uint64_t seed) {
    ModelParams mp;
    mp.arch = arch;
    mp.seed = seed;
    UNet<float> net(arch);
    mp.values.resize(net.param_count());
    net.initialize(mp.values, seed);
    return mp;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const nlohmann::json& extra) {
    if (params.values.size() != params.arch.param_count()) throw ShapeError("checkpoint: parameter count mismatch");
    for (float v : params.values) {
        if (!std::isfinite(v)) throw NumericError("checkpoint: non-finite parameter");
    }
    auto data = path;
    data += ".f32";
    auto desc = path;
    desc += ".json";
    io::write_f32(data, std::span<const float>(params.values));
    nlohmann::json j{{"format", "granflow.checkpoint"},
                     {"version", 1},
                     {"arch", params.arch},
                     {"param_count", params.values.size()},
                     {"init_seed", params.seed},
                     {"frozen", params.frozen},
                     {"data", data.filename().string()},
                     {"extra", extra}};
    io::write_json_atomic(desc, j);
}

ModelParams load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra) {
    auto desc = path;
    desc += ".json";
    const auto j = io::read_json(desc);
    ModelParams mp;
    try {
        if (j.at("format") != "granflow.checkpoint") throw ConfigError(desc.string() + ": not a checkpoint");
        if (j.at("version").get<int>() != 1) throw ConfigError(desc.string() + ": unsupported checkpoint version");
        mp.arch = j.at("arch").get<ArchDescriptor>();
        mp.seed = j.at("init_seed").get<std::uint64_t>();
        mp.frozen = j.value("frozen", false);
        mp.values = io::read_f32(desc.parent_path() / j.at("data").get<std::string>());
        if (mp.values.size() != j.at("param_count").get<std::size_t>() ||
            mp.values.size() != mp.arch.param_count()) {
            throw ConfigError(desc.string() + ": parameter block does not match the descriptor");
        }
        if (extra) *extra = j.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(desc.string() + ": " + e.what());
    }
    return mp;
}

Network::Network(const ModelParams& params, Precision precision)
    : arch_(params.arch), precision_(precision), net_f_(params.arch), net_d_(params.arch) {
    if (params.values.size() != net_f_.param_count()) throw ShapeError("network: parameter count mismatch");
    if (precision_ == Precision::F32) {
        pf_ = params.values;
    } else {
        pd_.assign(params.values.begin(), params.values.end());
    }
}

Network::Network(const ArchDescriptor& arch, std::vector<double> params)
    : arch_(arch), precision_(Precision::F64), pd_(std::move(params)), net_f_(arch), net_d_(arch) {
    if (pd_.size() != net_d_.param_count()) throw ShapeError("network: parameter count mismatch");
}

Field Network::forward(const Field& x, Conditioning cond) {
    if (x.channels != arch_.in_channels) {
        throw ShapeError("network: expected " + std::to_string(arch_.in_channels) + " input channels, got " +
                         std::to_string(x.channels));
    }
    rows_ = x.rows;
    cols_ = x.cols;
    Field y(arch_.out_channels, x.rows, x.cols);
    if (precision_ == Precision::F32) {
        std::vector<float> in(x.data.begin(), x.data.end()), out(y.size());
        net_f_.forward(pf_, in, 1, x.rows, x.cols, std::span<const Conditioning>(&cond, 1), out);
        y.data.assign(out.begin(), out.end());
    } else {
        net_d_.forward(pd_, x.data, 1, x.rows, x.cols, std::span<const Conditioning>(&cond, 1), y.data);
    }
    return y;
}

Field Network::input_vjp(const Field& cot) {
    return vjp_impl(cot, nullptr);
}

Field Network::vjp(const Field& cot, std::vector<double>& d_params) { return vjp_impl(cot, &d_params); }

Field Network::vjp_impl(const Field& cot, std::vector<double>* d_params) {
    if (cot.channels != arch_.out_channels || cot.rows != rows_ || cot.cols != cols_) {
        throw ShapeError("network: cotangent shape does not match the last forward output");
    }
    Field dx(arch_.in_channels, rows_, cols_);
    const std::size_t np = net_f_.param_count();
    if (precision_ == Precision::F32) {
        std::vector<float> dy(cot.data.begin(), cot.data.end()), din(dx.size()), dp;
        if (d_params) dp.assign(np, 0.0f);
        net_f_.backward(pf_, dy, dp, din);
        dx.data.assign(din.begin(), din.end());
        if (d_params) d_params->assign(dp.begin(), dp.end());
    } else {
        std::vector<double> dp;
        if (d_params) dp.assign(np, 0.0);
        net_d_.backward(pd_, cot.data, dp, dx.data);
        if (d_params) *d_params = std::move(dp);
    }
    return dx;
}

namespace {

template <typename T>
double adamw_impl(std::span<T> params, std::span<const T> grads, AdamWState& st, double lr, const AdamWConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("adamw: parameter and gradient sizes differ");
    double sq = 0.0;
    for (T g : grads) {
        if (!std::isfinite(static_cast<double>(g))) throw NumericError("adamw: non-finite gradient");
        sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    const double scale = (cfg.clip_norm > 0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
    if (st.m.size() != params.size()) {
        st.m.assign(params.size(), 0.0);
        st.v.assign(params.size(), 0.0);
        st.step = 0;
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double g = static_cast<double>(grads[k]) * scale;
        st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * g;
        st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * g * g;
        const double mhat = st.m[k] / bc1, vhat = st.v[k] / bc2;
        double p = static_cast<double>(params[k]);
        p -= lr * cfg.weight_decay * p;
        p -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        params[k] = static_cast<T>(p);
    }
    return norm;
}

}  // namespace

double adamw_step(std::span<float> params, std::span<const float> grads, AdamWState& state, double lr,
                  const AdamWConfig& cfg) {
    return adamw_impl(params, grads, state, lr, cfg);
}

double adamw_step(std::span<double> params, std::span<const double> grads, AdamWState& state, double lr,
                  const AdamWConfig& cfg) {
    return adamw_impl(params, grads, state, lr, cfg);
}

double cosine_lr(long step, long total, double base, double floor) {
    if (total <= 0) return base;
    const double t = static_cast<double>(std::clamp(step, 0L, total)) / static_cast<double>(total);
    return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace granflow::nets
