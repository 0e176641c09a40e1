#include "pmdm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace pmdm::ops {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Shape shape, const char* op) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.resize(static_cast<std::size_t>(numel(n->shape)));
    n->op = op;
    return n;
}

void attach(const NodePtr& out, std::vector<NodePtr> parents,
            std::function<void(Node&)> backward) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    out->requires_grad = rg;
    if (rg) {
        out->parents = std::move(parents);
        out->backward_fn = std::move(backward);
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_4d(const Tensor& x, const char* op) {
    if (x.shape().size() != 4)
        throw std::invalid_argument(std::string(op) + ": expected NCHW tensor, got " +
                                    shape_str(x.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// GEMM kernels. Inner loops run over contiguous memory so the compiler can
// vectorize them; the k-accumulation order per output element is fixed and
// ascending, which keeps results reproducible run to run.

void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
    for (int m = 0; m < M; ++m) {
        float* c = C + static_cast<std::size_t>(m) * N;
        if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(N));
        const float* arow = A + static_cast<std::size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const float a = arow[k];
            const float* brow = B + static_cast<std::size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += a * brow[n];
        }
    }
}

void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
    for (int m = 0; m < M; ++m) {
        const float* arow = A + static_cast<std::size_t>(m) * K;
        float* c = C + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const float* brow = B + static_cast<std::size_t>(n) * K;
            float acc = 0.0f;
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            c[n] = accumulate ? c[n] + acc : acc;
        }
    }
}

void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
    if (!accumulate) std::memset(C, 0, sizeof(float) * static_cast<std::size_t>(M) * N);
    for (int k = 0; k < K; ++k) {
        const float* arow = A + static_cast<std::size_t>(k) * M;
        const float* brow = B + static_cast<std::size_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const float a = arow[m];
            float* c = C + static_cast<std::size_t>(m) * N;
            for (int n = 0; n < N; ++n) c[n] += a * brow[n];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = make_node(a.shape(), "add");
    const float* pa = a.data();
    const float* pb = b.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] + pb[i];
    auto na = a.node_ptr(), nb = b.node_ptr();
    attach(out, {na, nb}, [na, nb](Node& n) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) na->grad[i] += n.grad[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) nb->grad[i] += n.grad[i];
        }
    });
    return Tensor::wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto out = make_node(a.shape(), "sub");
    const float* pa = a.data();
    const float* pb = b.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] - pb[i];
    auto na = a.node_ptr(), nb = b.node_ptr();
    attach(out, {na, nb}, [na, nb](Node& n) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) na->grad[i] += n.grad[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) nb->grad[i] -= n.grad[i];
        }
    });
    return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = make_node(a.shape(), "mul");
    const float* pa = a.data();
    const float* pb = b.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] * pb[i];
    auto na = a.node_ptr(), nb = b.node_ptr();
    attach(out, {na, nb}, [na, nb](Node& n) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) na->grad[i] += n.grad[i] * nb->data[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) nb->grad[i] += n.grad[i] * na->data[i];
        }
    });
    return Tensor::wrap(out);
}

Tensor scale(const Tensor& a, float s) {
    auto out = make_node(a.shape(), "scale");
    const float* pa = a.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] * s;
    auto na = a.node_ptr();
    attach(out, {na}, [na, s](Node& n) {
        na->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) na->grad[i] += n.grad[i] * s;
    });
    return Tensor::wrap(out);
}

Tensor relu(const Tensor& x) {
    auto out = make_node(x.shape(), "relu");
    const float* px = x.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = px[i] > 0.0f ? px[i] : 0.0f;
    auto nx = x.node_ptr();
    attach(out, {nx}, [nx](Node& n) {
        nx->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (nx->data[i] > 0.0f) nx->grad[i] += n.grad[i];
    });
    return Tensor::wrap(out);
}

Tensor leaky_relu(const Tensor& x, float negative_slope) {
    auto out = make_node(x.shape(), "leaky_relu");
    const float* px = x.data();
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = px[i] > 0.0f ? px[i] : negative_slope * px[i];
    auto nx = x.node_ptr();
    attach(out, {nx}, [nx, negative_slope](Node& n) {
        nx->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            nx->grad[i] += n.grad[i] * (nx->data[i] > 0.0f ? 1.0f : negative_slope);
    });
    return Tensor::wrap(out);
}

Tensor silu(const Tensor& x) {
    auto out = make_node(x.shape(), "silu");
    const float* px = x.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        float s = 1.0f / (1.0f + std::exp(-px[i]));
        out->data[i] = px[i] * s;
    }
    auto nx = x.node_ptr();
    attach(out, {nx}, [nx](Node& n) {
        nx->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            float v = nx->data[i];
            float s = 1.0f / (1.0f + std::exp(-v));
            nx->grad[i] += n.grad[i] * s * (1.0f + v * (1.0f - s));
        }
    });
    return Tensor::wrap(out);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check_4d(a, "concat_channels");
    check_4d(b, "concat_channels");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(sa) +
                                    " vs " + shape_str(sb));
    const int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    auto out = make_node({N, Ca + Cb, H, W}, "concat_channels");
    for (int n = 0; n < N; ++n) {
        std::memcpy(out->data.data() + (static_cast<std::size_t>(n) * (Ca + Cb)) * plane,
                    a.data() + static_cast<std::size_t>(n) * Ca * plane,
                    sizeof(float) * Ca * plane);
        std::memcpy(out->data.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane,
                    b.data() + static_cast<std::size_t>(n) * Cb * plane,
                    sizeof(float) * Cb * plane);
    }
    auto na = a.node_ptr(), nb = b.node_ptr();
    attach(out, {na, nb}, [na, nb, N, Ca, Cb, plane](Node& n) {
        for (int i = 0; i < N; ++i) {
            const float* g = n.grad.data() + (static_cast<std::size_t>(i) * (Ca + Cb)) * plane;
            if (na->requires_grad) {
                na->ensure_grad();
                float* ga = na->grad.data() + static_cast<std::size_t>(i) * Ca * plane;
                for (std::size_t j = 0; j < Ca * plane; ++j) ga[j] += g[j];
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                float* gb = nb->grad.data() + static_cast<std::size_t>(i) * Cb * plane;
                const float* gsrc = g + Ca * plane;
                for (std::size_t j = 0; j < Cb * plane; ++j) gb[j] += gsrc[j];
            }
        }
    });
    return Tensor::wrap(out);
}

Tensor nearest_upsample2x(const Tensor& x) {
    check_4d(x, "nearest_upsample2x");
    const auto& s = x.shape();
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    auto out = make_node({N, C, 2 * H, 2 * W}, "nearest_upsample2x");
    const float* px = x.data();
    float* po = out->data.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const float* in = px + static_cast<std::size_t>(nc) * H * W;
        float* o = po + static_cast<std::size_t>(nc) * 4 * H * W;
        for (int i = 0; i < H; ++i) {
            float* row0 = o + static_cast<std::size_t>(2 * i) * 2 * W;
            float* row1 = row0 + 2 * W;
            for (int j = 0; j < W; ++j) {
                float v = in[i * W + j];
                row0[2 * j] = v;
                row0[2 * j + 1] = v;
                row1[2 * j] = v;
                row1[2 * j + 1] = v;
            }
        }
    }
    auto nx = x.node_ptr();
    attach(out, {nx}, [nx, N, C, H, W](Node& n) {
        nx->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            float* gi = nx->grad.data() + static_cast<std::size_t>(nc) * H * W;
            const float* go = n.grad.data() + static_cast<std::size_t>(nc) * 4 * H * W;
            for (int i = 0; i < H; ++i) {
                const float* row0 = go + static_cast<std::size_t>(2 * i) * 2 * W;
                const float* row1 = row0 + 2 * W;
                for (int j = 0; j < W; ++j)
                    gi[i * W + j] += row0[2 * j] + row0[2 * j + 1] + row1[2 * j] + row1[2 * j + 1];
            }
        }
    });
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Linear / conv

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1)
        throw std::invalid_argument("linear: expected x[N,Din], w[Dout,Din], b[Dout]");
    const int N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
    if (w.dim(1) != Din || b.dim(0) != Dout)
        throw std::invalid_argument("linear: shape mismatch " + shape_str(x.shape()) + " " +
                                    shape_str(w.shape()) + " " + shape_str(b.shape()));
    auto out = make_node({N, Dout}, "linear");
    gemm_nt(N, Dout, Din, x.data(), w.data(), out->data.data(), false);
    for (int i = 0; i < N; ++i)
        for (int o = 0; o < Dout; ++o) out->data[static_cast<std::size_t>(i) * Dout + o] += b.data()[o];
    auto nx = x.node_ptr(), nw = w.node_ptr(), nb = b.node_ptr();
    attach(out, {nx, nw, nb}, [nx, nw, nb, N, Din, Dout](Node& n) {
        if (nx->requires_grad) {
            nx->ensure_grad();
            gemm_nn(N, Din, Dout, n.grad.data(), nw->data.data(), nx->grad.data(), true);
        }
        if (nw->requires_grad) {
            nw->ensure_grad();
            gemm_tn(Dout, Din, N, n.grad.data(), nx->data.data(), nw->grad.data(), true);
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int o = 0; o < Dout; ++o)
                    nb->grad[static_cast<std::size_t>(o)] += n.grad[static_cast<std::size_t>(i) * Dout + o];
        }
    });
    return Tensor::wrap(out);
}

namespace {

struct ConvDims {
    int N, C, H, W, K, kh, kw, stride, pad, OH, OW;
    std::size_t ckk() const { return static_cast<std::size_t>(C) * kh * kw; }
    std::size_t ohw() const { return static_cast<std::size_t>(OH) * OW; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
    check_4d(x, "conv2d");
    if (w.shape().size() != 4 || b.shape().size() != 1)
        throw std::invalid_argument("conv2d: expected w[K,C,kh,kw], b[K]");
    ConvDims d{};
    d.N = x.dim(0);
    d.C = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.K = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = padding;
    if (w.dim(1) != d.C)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(d.C) +
                                    " != kernel channels " + std::to_string(w.dim(1)));
    if (b.dim(0) != d.K) throw std::invalid_argument("conv2d: bias length != K");
    if (d.kh % 2 == 0 || d.kw % 2 == 0) throw std::invalid_argument("conv2d: kernel extents must be odd");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (padding < 0 || padding > d.kh / 2 || padding > d.kw / 2)
        throw std::invalid_argument("conv2d: padding must be in [0, floor(k/2)]");
    d.OH = (d.H + 2 * padding - d.kh) / stride + 1;
    d.OW = (d.W + 2 * padding - d.kw) / stride + 1;
    if (d.OH <= 0 || d.OW <= 0) throw std::invalid_argument("conv2d: kernel larger than padded input");
    return d;
}

void im2col(const float* x, const ConvDims& d, float* cols) {
    const std::size_t ohw = d.ohw();
    for (int c = 0; c < d.C; ++c) {
        const float* plane = x + static_cast<std::size_t>(c) * d.H * d.W;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                float* row = cols + ((static_cast<std::size_t>(c) * d.kh + ki) * d.kw + kj) * ohw;
                for (int oy = 0; oy < d.OH; ++oy) {
                    const int iy = oy * d.stride - d.pad + ki;
                    float* dst = row + static_cast<std::size_t>(oy) * d.OW;
                    if (iy < 0 || iy >= d.H) {
                        std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(d.OW));
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(iy) * d.W;
                    for (int ox = 0; ox < d.OW; ++ox) {
                        const int ix = ox * d.stride - d.pad + kj;
                        dst[ox] = (ix >= 0 && ix < d.W) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const float* cols, const ConvDims& d, float* gx) {
    const std::size_t ohw = d.ohw();
    for (int c = 0; c < d.C; ++c) {
        float* plane = gx + static_cast<std::size_t>(c) * d.H * d.W;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const float* row = cols + ((static_cast<std::size_t>(c) * d.kh + ki) * d.kw + kj) * ohw;
                for (int oy = 0; oy < d.OH; ++oy) {
                    const int iy = oy * d.stride - d.pad + ki;
                    if (iy < 0 || iy >= d.H) continue;
                    const float* src = row + static_cast<std::size_t>(oy) * d.OW;
                    float* dst = plane + static_cast<std::size_t>(iy) * d.W;
                    for (int ox = 0; ox < d.OW; ++ox) {
                        const int ix = ox * d.stride - d.pad + kj;
                        if (ix >= 0 && ix < d.W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

thread_local std::vector<float> g_cols_scratch;

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
    const ConvDims d = conv_dims(x, w, b, stride, padding);
    auto out = make_node({d.N, d.K, d.OH, d.OW}, "conv2d");
    const std::size_t ckk = d.ckk(), ohw = d.ohw();
    std::vector<float>& cols = g_cols_scratch;
    cols.resize(ckk * ohw);
    for (int n = 0; n < d.N; ++n) {
        im2col(x.data() + static_cast<std::size_t>(n) * d.C * d.H * d.W, d, cols.data());
        float* o = out->data.data() + static_cast<std::size_t>(n) * d.K * ohw;
        gemm_nn(d.K, static_cast<int>(ohw), static_cast<int>(ckk), w.data(), cols.data(), o, false);
        for (int k = 0; k < d.K; ++k) {
            const float bk = b.data()[k];
            float* ok = o + static_cast<std::size_t>(k) * ohw;
            for (std::size_t i = 0; i < ohw; ++i) ok[i] += bk;
        }
    }
    auto nx = x.node_ptr(), nw = w.node_ptr(), nb = b.node_ptr();
    attach(out, {nx, nw, nb}, [nx, nw, nb, d](Node& n) {
        const std::size_t ckk = d.ckk(), ohw = d.ohw();
        std::vector<float> cols(ckk * ohw);
        std::vector<float> gcols;
        if (nx->requires_grad) {
            nx->ensure_grad();
            gcols.resize(ckk * ohw);
        }
        if (nw->requires_grad) nw->ensure_grad();
        if (nb->requires_grad) nb->ensure_grad();
        for (int s = 0; s < d.N; ++s) {
            const float* go = n.grad.data() + static_cast<std::size_t>(s) * d.K * ohw;
            if (nw->requires_grad || nx->requires_grad)
                im2col(nx->data.data() + static_cast<std::size_t>(s) * d.C * d.H * d.W, d, cols.data());
            if (nw->requires_grad)
                gemm_nt(d.K, static_cast<int>(ckk), static_cast<int>(ohw), go, cols.data(),
                        nw->grad.data(), true);
            if (nx->requires_grad) {
                gemm_tn(static_cast<int>(ckk), static_cast<int>(ohw), d.K, nw->data.data(), go,
                        gcols.data(), false);
                col2im_add(gcols.data(), d,
                           nx->grad.data() + static_cast<std::size_t>(s) * d.C * d.H * d.W);
            }
            if (nb->requires_grad) {
                for (int k = 0; k < d.K; ++k) {
                    const float* gk = go + static_cast<std::size_t>(k) * ohw;
                    float acc = 0.0f;
                    for (std::size_t i = 0; i < ohw; ++i) acc += gk[i];
                    nb->grad[static_cast<std::size_t>(k)] += acc;
                }
            }
        }
    });
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Normalization

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var,
                    float momentum, float eps, bool training) {
    check_4d(x, "batch_norm2d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.dim(0) != C || beta.dim(0) != C || running_mean.dim(0) != C || running_var.dim(0) != C)
        throw std::invalid_argument("batch_norm2d: parameter length != C");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t m = static_cast<std::size_t>(N) * plane;
    if (training && m <= 1)
        throw std::invalid_argument("batch_norm2d: train mode needs batch*H*W > 1");

    auto out = make_node(x.shape(), "batch_norm2d");
    std::vector<float> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
    if (training) {
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            }
            const double mu = acc / static_cast<double>(m);
            double var = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double dv = p[i] - mu;
                    var += dv * dv;
                }
            }
            var /= static_cast<double>(m);
            mean[static_cast<std::size_t>(c)] = static_cast<float>(mu);
            inv_std[static_cast<std::size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + eps));
            // Unbiased variance goes into the running buffer, matching the
            // usual train/eval convention.
            const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
            float* rm = running_mean.data();
            float* rv = running_var.data();
            rm[c] = (1.0f - momentum) * rm[c] + momentum * static_cast<float>(mu);
            rv[c] = (1.0f - momentum) * rv[c] + momentum * static_cast<float>(unbiased);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean.data()[c];
            inv_std[static_cast<std::size_t>(c)] =
                1.0f / std::sqrt(running_var.data()[c] + eps);
        }
    }

    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float mu = mean[static_cast<std::size_t>(c)];
            const float is = inv_std[static_cast<std::size_t>(c)];
            const float g = gamma.data()[c], bta = beta.data()[c];
            const float* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            float* o = out->data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) o[i] = g * (p[i] - mu) * is + bta;
        }
    }

    auto nx = x.node_ptr(), ng = gamma.node_ptr(), nb = beta.node_ptr();
    attach(out, {nx, ng, nb},
           [nx, ng, nb, N, C, plane, m, mean, inv_std, training](Node& n) {
               // dgamma = sum(dy * xhat), dbeta = sum(dy); train-mode dx also
               // subtracts the batch-statistic terms.
               for (int c = 0; c < C; ++c) {
                   const float mu = mean[static_cast<std::size_t>(c)];
                   const float is = inv_std[static_cast<std::size_t>(c)];
                   const float g = ng->data[static_cast<std::size_t>(c)];
                   double sum_dy = 0.0, sum_dy_xhat = 0.0;
                   for (int s = 0; s < N; ++s) {
                       const float* gy = n.grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                       const float* px = nx->data.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                       for (std::size_t i = 0; i < plane; ++i) {
                           sum_dy += gy[i];
                           sum_dy_xhat += gy[i] * (px[i] - mu) * is;
                       }
                   }
                   if (ng->requires_grad) {
                       ng->ensure_grad();
                       ng->grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy_xhat);
                   }
                   if (nb->requires_grad) {
                       nb->ensure_grad();
                       nb->grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy);
                   }
                   if (nx->requires_grad) {
                       nx->ensure_grad();
                       const float mean_dy = static_cast<float>(sum_dy / static_cast<double>(m));
                       const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(m));
                       for (int s = 0; s < N; ++s) {
                           const float* gy = n.grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                           const float* px = nx->data.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                           float* gx = nx->grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                           if (training) {
                               for (std::size_t i = 0; i < plane; ++i) {
                                   const float xhat = (px[i] - mu) * is;
                                   gx[i] += g * is * (gy[i] - mean_dy - xhat * mean_dy_xhat);
                               }
                           } else {
                               for (std::size_t i = 0; i < plane; ++i) gx[i] += g * is * gy[i];
                           }
                       }
                   }
               }
           });
    return Tensor::wrap(out);
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, float eps) {
    check_4d(x, "group_norm");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (groups < 1 || C % groups != 0)
        throw std::invalid_argument("group_norm: groups must divide C (C=" + std::to_string(C) +
                                    ", groups=" + std::to_string(groups) + ")");
    if (gamma.dim(0) != C || beta.dim(0) != C)
        throw std::invalid_argument("group_norm: parameter length != C");
    const int cpg = C / groups;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t m = static_cast<std::size_t>(cpg) * plane;

    auto out = make_node(x.shape(), "group_norm");
    std::vector<float> mean(static_cast<std::size_t>(N) * groups), inv_std(mean.size());
    for (int s = 0; s < N; ++s) {
        for (int g = 0; g < groups; ++g) {
            const float* base = x.data() + (static_cast<std::size_t>(s) * C + static_cast<std::size_t>(g) * cpg) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += base[i];
            const double mu = acc / static_cast<double>(m);
            double var = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double dv = base[i] - mu;
                var += dv * dv;
            }
            var /= static_cast<double>(m);
            const std::size_t gi = static_cast<std::size_t>(s) * groups + g;
            mean[gi] = static_cast<float>(mu);
            inv_std[gi] = static_cast<float>(1.0 / std::sqrt(var + eps));
        }
    }
    for (int s = 0; s < N; ++s) {
        for (int c = 0; c < C; ++c) {
            const std::size_t gi = static_cast<std::size_t>(s) * groups + c / cpg;
            const float mu = mean[gi], is = inv_std[gi];
            const float gm = gamma.data()[c], bt = beta.data()[c];
            const float* p = x.data() + (static_cast<std::size_t>(s) * C + c) * plane;
            float* o = out->data.data() + (static_cast<std::size_t>(s) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) o[i] = gm * (p[i] - mu) * is + bt;
        }
    }

    auto nx = x.node_ptr(), ng = gamma.node_ptr(), nb = beta.node_ptr();
    attach(out, {nx, ng, nb},
           [nx, ng, nb, N, C, cpg, groups, plane, m, mean, inv_std](Node& n) {
               for (int s = 0; s < N; ++s) {
                   for (int g = 0; g < groups; ++g) {
                       const std::size_t gi = static_cast<std::size_t>(s) * groups + g;
                       const float mu = mean[gi], is = inv_std[gi];
                       double sum_t = 0.0, sum_t_xhat = 0.0;  // t = dy * gamma
                       for (int cc = 0; cc < cpg; ++cc) {
                           const int c = g * cpg + cc;
                           const float gm = ng->data[static_cast<std::size_t>(c)];
                           const float* gy = n.grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                           const float* px = nx->data.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                           for (std::size_t i = 0; i < plane; ++i) {
                               const float t = gy[i] * gm;
                               sum_t += t;
                               sum_t_xhat += t * (px[i] - mu) * is;
                           }
                       }
                       const float mean_t = static_cast<float>(sum_t / static_cast<double>(m));
                       const float mean_t_xhat = static_cast<float>(sum_t_xhat / static_cast<double>(m));
                       for (int cc = 0; cc < cpg; ++cc) {
                           const int c = g * cpg + cc;
                           const float gm = ng->data[static_cast<std::size_t>(c)];
                           const float* gy = n.grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                           const float* px = nx->data.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                           if (nx->requires_grad) {
                               nx->ensure_grad();
                               float* gx = nx->grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                               for (std::size_t i = 0; i < plane; ++i) {
                                   const float xhat = (px[i] - mu) * is;
                                   gx[i] += is * (gy[i] * gm - mean_t - xhat * mean_t_xhat);
                               }
                           }
                           if (ng->requires_grad || nb->requires_grad) {
                               double sdg = 0.0, sdb = 0.0;
                               for (std::size_t i = 0; i < plane; ++i) {
                                   sdg += gy[i] * (px[i] - mu) * is;
                                   sdb += gy[i];
                               }
                               if (ng->requires_grad) {
                                   ng->ensure_grad();
                                   ng->grad[static_cast<std::size_t>(c)] += static_cast<float>(sdg);
                               }
                               if (nb->requires_grad) {
                                   nb->ensure_grad();
                                   nb->grad[static_cast<std::size_t>(c)] += static_cast<float>(sdb);
                               }
                           }
                       }
                   }
               }
           });
    return Tensor::wrap(out);
}

Tensor add_sample_channel_bias(const Tensor& x, const Tensor& bias) {
    check_4d(x, "add_sample_channel_bias");
    if (bias.shape().size() != 2 || bias.dim(0) != x.dim(0) || bias.dim(1) != x.dim(1))
        throw std::invalid_argument("add_sample_channel_bias: bias must be [N,C]");
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    auto out = make_node(x.shape(), "add_sample_channel_bias");
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float bv = bias.data()[static_cast<std::size_t>(n) * C + c];
            const float* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            float* o = out->data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) o[i] = p[i] + bv;
        }
    }
    auto nx = x.node_ptr(), nb = bias.node_ptr();
    attach(out, {nx, nb}, [nx, nb, N, C, plane](Node& n) {
        for (int s = 0; s < N; ++s) {
            for (int c = 0; c < C; ++c) {
                const float* g = n.grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                if (nx->requires_grad) {
                    nx->ensure_grad();
                    float* gx = nx->grad.data() + (static_cast<std::size_t>(s) * C + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) gx[i] += g[i];
                }
                if (nb->requires_grad) {
                    nb->ensure_grad();
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                    nb->grad[static_cast<std::size_t>(s) * C + c] += static_cast<float>(acc);
                }
            }
        }
    });
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor mean_all(const Tensor& x) {
    auto out = make_node({1}, "mean");
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    const double inv_n = 1.0 / static_cast<double>(x.size());
    out->data[0] = static_cast<float>(acc * inv_n);
    auto nx = x.node_ptr();
    attach(out, {nx}, [nx, inv_n](Node& n) {
        nx->ensure_grad();
        const float g = n.grad[0] * static_cast<float>(inv_n);
        for (auto& gv : nx->grad) gv += g;
    });
    return Tensor::wrap(out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    auto out = make_node({1}, "mse");
    const float* pa = a.data();
    const float* pb = b.data();
    const std::size_t n = a.node().data.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pa[i]) - pb[i];
        acc += d * d;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    out->data[0] = static_cast<float>(acc * inv_n);
    auto na = a.node_ptr(), nb = b.node_ptr();
    attach(out, {na, nb}, [na, nb, inv_n](Node& nd) {
        const float g2 = 2.0f * nd.grad[0] * static_cast<float>(inv_n);
        const std::size_t n = na->data.size();
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) na->grad[i] += g2 * (na->data[i] - nb->data[i]);
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) nb->grad[i] -= g2 * (na->data[i] - nb->data[i]);
        }
    });
    return Tensor::wrap(out);
}

}  // namespace pmdm::ops
