#include "inctsp/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace inctsp {

namespace {

void axpy(double a, const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double dot(const double* a, const double* b, int64_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// C[M][N] += A[M][Kd] * B[Kd][N]. Blocked over Kd so the active B panel stays
// cache resident; M is processed in strips of four rows sharing each B row.
void gemm_acc(int64_t M, int64_t N, int64_t Kd, const double* A, const double* B, double* C) {
    constexpr int64_t kBlock = 512;
    for (int64_t k0 = 0; k0 < Kd; k0 += kBlock) {
        const int64_t k1 = std::min(Kd, k0 + kBlock);
        int64_t m = 0;
        for (; m + 4 <= M; m += 4) {
            const double* a0 = A + m * Kd;
            const double* a1 = a0 + Kd;
            const double* a2 = a1 + Kd;
            const double* a3 = a2 + Kd;
            double* c0 = C + m * N;
            double* c1 = c0 + N;
            double* c2 = c1 + N;
            double* c3 = c2 + N;
            for (int64_t k = k0; k < k1; ++k) {
                const double* br = B + k * N;
                const double w0 = a0[k], w1 = a1[k], w2 = a2[k], w3 = a3[k];
                for (int64_t n = 0; n < N; ++n) {
                    c0[n] += w0 * br[n];
                    c1[n] += w1 * br[n];
                    c2[n] += w2 * br[n];
                    c3[n] += w3 * br[n];
                }
            }
        }
        for (; m < M; ++m) {
            const double* am = A + m * Kd;
            double* cm = C + m * N;
            for (int64_t k = k0; k < k1; ++k) axpy(am[k], B + k * N, cm, N);
        }
    }
}

struct ConvDims {
    int64_t B, Ci, H, W, Co, kh, kw, sh, sw, pt, pl, Ho, Wo;
    int64_t K() const { return Ci * kh * kw; }
    int64_t N() const { return Ho * Wo; }
};

void spatial_out(Padding pad, int64_t in, int64_t k, int64_t s, const char* what, int64_t& out, int64_t& pad_lo) {
    if (pad == Padding::valid) {
        if (k > in)
            throw std::invalid_argument(std::string(what) + ": kernel " + std::to_string(k) +
                                        " larger than input extent " + std::to_string(in) + " under valid padding");
        out = (in - k) / s + 1;
        pad_lo = 0;
    } else {
        out = (in + s - 1) / s;
        const int64_t total = std::max<int64_t>(0, (out - 1) * s + k - in);
        pad_lo = total / 2;  // extra padding goes to the high-index side
    }
}

// col[k][n], k = (ci*kh + u)*kw + v, n = oh*Wo + ow; zero outside the input.
void im2col(const double* in, double* col, const ConvDims& d) {
    const int64_t N = d.N();
    for (int64_t ci = 0; ci < d.Ci; ++ci) {
        for (int64_t u = 0; u < d.kh; ++u) {
            for (int64_t v = 0; v < d.kw; ++v) {
                double* crow = col + ((ci * d.kh + u) * d.kw + v) * N;
                for (int64_t oh = 0; oh < d.Ho; ++oh) {
                    const int64_t ih = oh * d.sh - d.pt + u;
                    double* cr = crow + oh * d.Wo;
                    if (ih < 0 || ih >= d.H) {
                        std::fill(cr, cr + d.Wo, 0.0);
                        continue;
                    }
                    const double* irow = in + (ci * d.H + ih) * d.W;
                    if (d.sw == 1) {
                        const int64_t ow0 = std::max<int64_t>(0, d.pl - v);
                        const int64_t ow1 = std::min(d.Wo, d.W + d.pl - v);
                        std::fill(cr, cr + std::min(ow0, d.Wo), 0.0);
                        if (ow1 > ow0) std::memcpy(cr + ow0, irow + ow0 - d.pl + v, size_t(ow1 - ow0) * sizeof(double));
                        if (ow1 < d.Wo) std::fill(cr + std::max<int64_t>(ow1, 0), cr + d.Wo, 0.0);
                    } else {
                        for (int64_t ow = 0; ow < d.Wo; ++ow) {
                            const int64_t iw = ow * d.sw - d.pl + v;
                            cr[ow] = (iw >= 0 && iw < d.W) ? irow[iw] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

// dIn[ci][ih][iw] += dcol[k][n], the scatter adjoint of im2col.
void col2im_acc(const double* dcol, double* din, const ConvDims& d) {
    const int64_t N = d.N();
    for (int64_t ci = 0; ci < d.Ci; ++ci) {
        for (int64_t u = 0; u < d.kh; ++u) {
            for (int64_t v = 0; v < d.kw; ++v) {
                const double* crow = dcol + ((ci * d.kh + u) * d.kw + v) * N;
                for (int64_t oh = 0; oh < d.Ho; ++oh) {
                    const int64_t ih = oh * d.sh - d.pt + u;
                    if (ih < 0 || ih >= d.H) continue;
                    double* irow = din + (ci * d.H + ih) * d.W;
                    const double* cr = crow + oh * d.Wo;
                    if (d.sw == 1) {
                        const int64_t ow0 = std::max<int64_t>(0, d.pl - v);
                        const int64_t ow1 = std::min(d.Wo, d.W + d.pl - v);
                        if (ow1 > ow0) axpy(1.0, cr + ow0, irow + ow0 - d.pl + v, ow1 - ow0);
                    } else {
                        for (int64_t ow = 0; ow < d.Wo; ++ow) {
                            const int64_t iw = ow * d.sw - d.pl + v;
                            if (iw >= 0 && iw < d.W) irow[iw] += cr[ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tape::NodeId Tape::push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

bool Tape::any_requires(const std::vector<NodeId>& ids) const {
    for (NodeId id : ids)
        if (node(id).requires_grad) return true;
    return false;
}

const Tensor& Tape::value(NodeId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw std::out_of_range("bad tape node id");
    return node(id).value;
}

Tape::NodeId Tape::input(const Tensor& x, bool track) {
    if (input_id_ >= 0) throw std::logic_error("tape already has a designated input leaf");
    Node n;
    n.op = Op::leaf;
    n.role = LeafRole::input;
    n.value = x;
    n.requires_grad = track;
    input_id_ = static_cast<NodeId>(nodes_.size());
    return push(std::move(n));
}

Tape::NodeId Tape::param(std::string name, const Tensor& value) {
    Node n;
    n.op = Op::leaf;
    n.role = LeafRole::param;
    n.name = std::move(name);
    n.value = value;
    n.requires_grad = true;
    return push(std::move(n));
}

Tape::NodeId Tape::constant(const Tensor& value) {
    Node n;
    n.op = Op::leaf;
    n.role = LeafRole::constant;
    n.value = value;
    n.requires_grad = false;
    return push(std::move(n));
}

Tape::NodeId Tape::conv2d(NodeId in, NodeId weight, NodeId bias, Padding pad, int stride_h, int stride_w) {
    const Tensor& x = node(in).value;
    const Tensor& w = node(weight).value;
    const Tensor& b = node(bias).value;
    if (x.rank() != 4) throw std::invalid_argument("conv2d: input must be rank 4, got " + shape_str(x.shape()));
    if (w.rank() != 4) throw std::invalid_argument("conv2d: weight must be rank 4, got " + shape_str(w.shape()));
    if (stride_h < 1 || stride_w < 1) throw std::invalid_argument("conv2d: strides must be positive");
    ConvDims d;
    d.B = x.dim(0);
    d.Ci = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Co = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.sh = stride_h;
    d.sw = stride_w;
    if (w.dim(1) != d.Ci)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, input has " +
                                    std::to_string(d.Ci));
    if (b.rank() != 1 || b.dim(0) != d.Co)
        throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape()) + " does not match " +
                                    std::to_string(d.Co) + " filters");
    spatial_out(pad, d.H, d.kh, d.sh, "conv2d height", d.Ho, d.pt);
    spatial_out(pad, d.W, d.kw, d.sw, "conv2d width", d.Wo, d.pl);

    const int64_t K = d.K(), N = d.N();
    Tensor out({d.B, d.Co, d.Ho, d.Wo});
    std::vector<double> col(size_t(K) * size_t(N));
    for (int64_t bi = 0; bi < d.B; ++bi) {
        im2col(x.data() + bi * d.Ci * d.H * d.W, col.data(), d);
        double* op = out.data() + bi * d.Co * N;
        for (int64_t co = 0; co < d.Co; ++co) std::fill(op + co * N, op + (co + 1) * N, b[co]);
        gemm_acc(d.Co, N, K, w.data(), col.data(), op);
    }

    Node n;
    n.op = Op::conv2d;
    n.inputs = {in, weight, bias};
    n.requires_grad = any_requires(n.inputs);
    n.value = std::move(out);
    n.state = ConvState{d.sh, d.sw, d.pt, d.pl};
    return push(std::move(n));
}

Tape::NodeId Tape::maxpool2d(NodeId in, int kh, int kw, int stride_h, int stride_w, Padding pad) {
    const Tensor& x = node(in).value;
    if (x.rank() != 4) throw std::invalid_argument("maxpool2d: input must be rank 4, got " + shape_str(x.shape()));
    if (kh < 1 || kw < 1 || stride_h < 1 || stride_w < 1) throw std::invalid_argument("maxpool2d: bad kernel/stride");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    PoolState st;
    st.kh = kh;
    st.kw = kw;
    st.sh = stride_h;
    st.sw = stride_w;
    int64_t Ho, Wo;
    spatial_out(pad, H, kh, stride_h, "maxpool2d height", Ho, st.pt);
    spatial_out(pad, W, kw, stride_w, "maxpool2d width", Wo, st.pl);

    Tensor out({B, C, Ho, Wo});
    st.argmax.assign(size_t(out.size()), -1);
    int64_t oi = 0;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const double* plane = x.data() + (b * C + c) * H * W;
            for (int64_t oh = 0; oh < Ho; ++oh) {
                for (int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t arg = -1;
                    for (int64_t u = 0; u < kh; ++u) {
                        const int64_t ih = oh * stride_h - st.pt + u;
                        if (ih < 0 || ih >= H) continue;
                        for (int64_t v = 0; v < kw; ++v) {
                            const int64_t iw = ow * stride_w - st.pl + v;
                            if (iw < 0 || iw >= W) continue;
                            const int64_t fi = ih * W + iw;
                            if (plane[fi] > best) {  // strict: ties keep the lowest flat index
                                best = plane[fi];
                                arg = fi;
                            }
                        }
                    }
                    if (arg < 0) throw std::invalid_argument("maxpool2d: window contains no input elements");
                    out[oi] = best;
                    st.argmax[size_t(oi)] = (b * C + c) * H * W + arg;
                }
            }
        }
    }

    Node n;
    n.op = Op::maxpool2d;
    n.inputs = {in};
    n.requires_grad = node(in).requires_grad;
    n.value = std::move(out);
    n.state = std::move(st);
    return push(std::move(n));
}

Tape::NodeId Tape::relu(NodeId in) {
    const Tensor& x = node(in).value;
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    Node n;
    n.op = Op::relu;
    n.inputs = {in};
    n.requires_grad = node(in).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

Tape::NodeId Tape::batchnorm2d(NodeId in, NodeId scale, NodeId shift, Tensor& running_mean, Tensor& running_var,
                               bool train, double eps, double momentum, bool update_running) {
    const Tensor& x = node(in).value;
    const Tensor& g = node(scale).value;
    const Tensor& b = node(shift).value;
    if (x.rank() != 4) throw std::invalid_argument("batchnorm2d: input must be rank 4");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (g.size() != C || b.size() != C || running_mean.size() != C || running_var.size() != C)
        throw std::invalid_argument("batchnorm2d: per-channel tensors must have length " + std::to_string(C));

    BnState st;
    st.train = train;
    st.eps = eps;
    st.mean.resize(size_t(C));
    st.invstd.resize(size_t(C));
    const int64_t plane = H * W;
    const double n_stat = double(B) * double(plane);
    if (train) {
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (int64_t bi = 0; bi < B; ++bi) {
                const double* p = x.data() + (bi * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) s += p[i];
            }
            const double mu = s / n_stat;
            double v = 0.0;
            for (int64_t bi = 0; bi < B; ++bi) {
                const double* p = x.data() + (bi * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double dxm = p[i] - mu;
                    v += dxm * dxm;
                }
            }
            v /= n_stat;  // biased
            st.mean[size_t(c)] = mu;
            st.invstd[size_t(c)] = 1.0 / std::sqrt(v + eps);
            if (update_running) {
                running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
                running_var[c] = (1.0 - momentum) * running_var[c] + momentum * v;
            }
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            st.mean[size_t(c)] = running_mean[c];
            st.invstd[size_t(c)] = 1.0 / std::sqrt(running_var[c] + eps);
        }
    }

    Tensor out(x.shape());
    for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t c = 0; c < C; ++c) {
            const double* p = x.data() + (bi * C + c) * plane;
            double* o = out.data() + (bi * C + c) * plane;
            const double a = g[c] * st.invstd[size_t(c)];
            const double off = b[c] - st.mean[size_t(c)] * a;
            for (int64_t i = 0; i < plane; ++i) o[i] = p[i] * a + off;
        }
    }

    Node n;
    n.op = Op::batchnorm2d;
    n.inputs = {in, scale, shift};
    n.requires_grad = any_requires(n.inputs);
    n.value = std::move(out);
    n.state = std::move(st);
    return push(std::move(n));
}

Tape::NodeId Tape::dropout(NodeId in, double rate, bool active, Rng* rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    const Tensor& x = node(in).value;
    Node n;
    n.op = Op::dropout;
    n.inputs = {in};
    n.requires_grad = node(in).requires_grad;
    if (!active || rate == 0.0) {
        n.value = x;
        n.state = DropState{1.0, {}};
    } else {
        if (!rng) throw std::invalid_argument("dropout: active mode requires an rng");
        DropState st;
        st.keep_inv = 1.0 / (1.0 - rate);
        st.mask.resize(size_t(x.size()));
        Tensor out(x.shape());
        for (int64_t i = 0; i < x.size(); ++i) {
            const bool keep = rng->uniform() >= rate;
            st.mask[size_t(i)] = keep ? 1 : 0;
            out[i] = keep ? x[i] * st.keep_inv : 0.0;
        }
        n.value = std::move(out);
        n.state = std::move(st);
    }
    return push(std::move(n));
}

Tape::NodeId Tape::dense(NodeId in, NodeId weight, NodeId bias) {
    const Tensor& x = node(in).value;
    const Tensor& w = node(weight).value;
    const Tensor& b = node(bias).value;
    if (x.rank() != 2 || w.rank() != 2)
        throw std::invalid_argument("dense: input and weight must be rank 2, got " + shape_str(x.shape()) + " and " +
                                    shape_str(w.shape()));
    const int64_t B = x.dim(0), F = x.dim(1), O = w.dim(1);
    if (w.dim(0) != F)
        throw std::invalid_argument("dense: input features " + std::to_string(F) + " do not match weight rows " +
                                    std::to_string(w.dim(0)));
    if (b.rank() != 1 || b.dim(0) != O) throw std::invalid_argument("dense: bias shape " + shape_str(b.shape()));

    Tensor out({B, O});
    for (int64_t bi = 0; bi < B; ++bi) {
        double* o = out.data() + bi * O;
        std::memcpy(o, b.data(), size_t(O) * sizeof(double));
        const double* xr = x.data() + bi * F;
        for (int64_t f = 0; f < F; ++f) axpy(xr[f], w.data() + f * O, o, O);
    }
    Node n;
    n.op = Op::dense;
    n.inputs = {in, weight, bias};
    n.requires_grad = any_requires(n.inputs);
    n.value = std::move(out);
    return push(std::move(n));
}

Tape::NodeId Tape::concat_channels(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no parts");
    const Tensor& first = node(parts[0]).value;
    if (first.rank() != 4) throw std::invalid_argument("concat_channels: parts must be rank 4");
    const int64_t B = first.dim(0), H = first.dim(2), W = first.dim(3);
    int64_t Ctot = 0;
    for (NodeId id : parts) {
        const Tensor& p = node(id).value;
        if (p.rank() != 4 || p.dim(0) != B || p.dim(2) != H || p.dim(3) != W)
            throw std::invalid_argument("concat_channels: part shape " + shape_str(p.shape()) +
                                        " incompatible with " + shape_str(first.shape()));
        Ctot += p.dim(1);
    }
    Tensor out({B, Ctot, H, W});
    const int64_t plane = H * W;
    for (int64_t bi = 0; bi < B; ++bi) {
        int64_t coff = 0;
        for (NodeId id : parts) {
            const Tensor& p = node(id).value;
            const int64_t pc = p.dim(1);
            std::memcpy(out.data() + (bi * Ctot + coff) * plane, p.data() + bi * pc * plane,
                        size_t(pc * plane) * sizeof(double));
            coff += pc;
        }
    }
    Node n;
    n.op = Op::concat;
    n.inputs = parts;
    n.requires_grad = any_requires(parts);
    n.value = std::move(out);
    return push(std::move(n));
}

Tape::NodeId Tape::reshape(NodeId in, Shape new_shape) {
    const Tensor& x = node(in).value;
    if (shape_size(new_shape) != x.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Node n;
    n.op = Op::reshape;
    n.inputs = {in};
    n.requires_grad = node(in).requires_grad;
    n.value = Tensor(std::move(new_shape), x.values());
    return push(std::move(n));
}

Tape::NodeId Tape::softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
    const Tensor& z = node(logits).value;
    if (z.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be [B,K]");
    const int64_t B = z.dim(0), K = z.dim(1);
    if (static_cast<int64_t>(labels.size()) != B)
        throw std::invalid_argument("softmax_cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                                    std::to_string(B));
    CeState st;
    st.probs.resize(size_t(B * K));
    double total = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const int y = labels[size_t(b)];
        if (y < 0 || y >= K)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                                        std::to_string(K) + ")");
        const double* zr = z.data() + b * K;
        double m = zr[0];
        for (int64_t k = 1; k < K; ++k) m = std::max(m, zr[k]);
        double se = 0.0;
        for (int64_t k = 0; k < K; ++k) se += std::exp(zr[k] - m);
        const double lse = m + std::log(se);
        for (int64_t k = 0; k < K; ++k) st.probs[size_t(b * K + k)] = std::exp(zr[k] - m) / se;
        total += lse - zr[y];
    }
    st.labels = std::move(labels);
    Node n;
    n.op = Op::softmax_ce;
    n.inputs = {logits};
    n.requires_grad = node(logits).requires_grad;
    n.value = Tensor({1}, {total / double(B)});
    n.state = std::move(st);
    return push(std::move(n));
}

Tape::NodeId Tape::sum(NodeId in) {
    const Tensor& x = node(in).value;
    double s = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) s += x[i];
    Node n;
    n.op = Op::sum;
    n.inputs = {in};
    n.requires_grad = node(in).requires_grad;
    n.value = Tensor({1}, {s});
    return push(std::move(n));
}

void Tape::backward_dispatch(NodeId id) {
    Node& n = node(id);
    const std::vector<double>& go = n.value.grad();

    auto grad_of = [&](NodeId child) -> std::vector<double>* {
        Node& c = node(child);
        if (!c.requires_grad) return nullptr;
        c.value.ensure_grad();
        return &c.value.grad();
    };

    switch (n.op) {
        case Op::leaf:
            break;
        case Op::conv2d: {
            const auto& st = std::get<ConvState>(n.state);
            Node& xin = node(n.inputs[0]);
            Node& win = node(n.inputs[1]);
            const Tensor& x = xin.value;
            const Tensor& w = win.value;
            ConvDims d;
            d.B = x.dim(0);
            d.Ci = x.dim(1);
            d.H = x.dim(2);
            d.W = x.dim(3);
            d.Co = w.dim(0);
            d.kh = w.dim(2);
            d.kw = w.dim(3);
            d.sh = st.sh;
            d.sw = st.sw;
            d.pt = st.pt;
            d.pl = st.pl;
            d.Ho = n.value.dim(2);
            d.Wo = n.value.dim(3);
            const int64_t K = d.K(), N = d.N();

            std::vector<double>* gx = grad_of(n.inputs[0]);
            std::vector<double>* gw = grad_of(n.inputs[1]);
            std::vector<double>* gb = grad_of(n.inputs[2]);

            if (gb) {
                for (int64_t bi = 0; bi < d.B; ++bi) {
                    const double* gor = go.data() + bi * d.Co * N;
                    for (int64_t co = 0; co < d.Co; ++co) {
                        double s = 0.0;
                        for (int64_t i = 0; i < N; ++i) s += gor[co * N + i];
                        (*gb)[size_t(co)] += s;
                    }
                }
            }

            std::vector<double> wt;
            if (gx) {  // dcol = w^T * dout, then scatter
                wt.resize(size_t(K) * size_t(d.Co));
                for (int64_t co = 0; co < d.Co; ++co)
                    for (int64_t k = 0; k < K; ++k) wt[size_t(k * d.Co + co)] = w.data()[co * K + k];
            }
            std::vector<double> col((gw || gx) ? size_t(K) * size_t(N) : 0);
            std::vector<double> dcol(gx ? size_t(K) * size_t(N) : 0);
            for (int64_t bi = 0; bi < d.B; ++bi) {
                const double* gor = go.data() + bi * d.Co * N;
                if (gw) {
                    im2col(x.data() + bi * d.Ci * d.H * d.W, col.data(), d);
                    // dW[co][k] += <dout[co], col[k]>, blocked so the panels stay hot
                    constexpr int64_t coB = 32, kB = 512;
                    for (int64_t co0 = 0; co0 < d.Co; co0 += coB) {
                        const int64_t co1 = std::min(d.Co, co0 + coB);
                        for (int64_t k0 = 0; k0 < K; k0 += kB) {
                            const int64_t k1 = std::min(K, k0 + kB);
                            for (int64_t co = co0; co < co1; ++co) {
                                double* gwr = gw->data() + co * K;
                                const double* gr = gor + co * N;
                                for (int64_t k = k0; k < k1; ++k) gwr[k] += dot(gr, col.data() + k * N, N);
                            }
                        }
                    }
                }
                if (gx) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    gemm_acc(K, N, d.Co, wt.data(), gor, dcol.data());
                    col2im_acc(dcol.data(), gx->data() + bi * d.Ci * d.H * d.W, d);
                }
            }
            break;
        }
        case Op::maxpool2d: {
            const auto& st = std::get<PoolState>(n.state);
            std::vector<double>* gx = grad_of(n.inputs[0]);
            if (gx)
                for (int64_t i = 0; i < n.value.size(); ++i) (*gx)[size_t(st.argmax[size_t(i)])] += go[size_t(i)];
            break;
        }
        case Op::relu: {
            std::vector<double>* gx = grad_of(n.inputs[0]);
            if (gx) {
                const Tensor& x = node(n.inputs[0]).value;
                for (int64_t i = 0; i < x.size(); ++i)
                    if (x[i] > 0.0) (*gx)[size_t(i)] += go[size_t(i)];
            }
            break;
        }
        case Op::batchnorm2d: {
            const auto& st = std::get<BnState>(n.state);
            const Tensor& x = node(n.inputs[0]).value;
            const Tensor& g = node(n.inputs[1]).value;
            const int64_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
            const double n_stat = double(B) * double(plane);
            std::vector<double>* gx = grad_of(n.inputs[0]);
            std::vector<double>* gscale = grad_of(n.inputs[1]);
            std::vector<double>* gshift = grad_of(n.inputs[2]);
            for (int64_t c = 0; c < C; ++c) {
                const double mu = st.mean[size_t(c)];
                const double is = st.invstd[size_t(c)];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t bi = 0; bi < B; ++bi) {
                    const double* xr = x.data() + (bi * C + c) * plane;
                    const double* gr = go.data() + (bi * C + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        sum_dy += gr[i];
                        sum_dy_xhat += gr[i] * (xr[i] - mu) * is;
                    }
                }
                if (gshift) (*gshift)[size_t(c)] += sum_dy;
                if (gscale) (*gscale)[size_t(c)] += sum_dy_xhat;
                if (!gx) continue;
                if (st.train) {
                    // backprop through batch mean/variance
                    const double gc = g[c];
                    for (int64_t bi = 0; bi < B; ++bi) {
                        const double* xr = x.data() + (bi * C + c) * plane;
                        const double* gr = go.data() + (bi * C + c) * plane;
                        double* gxr = gx->data() + (bi * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const double xhat = (xr[i] - mu) * is;
                            gxr[i] += gc * is * (gr[i] - sum_dy / n_stat - xhat * sum_dy_xhat / n_stat);
                        }
                    }
                } else {
                    const double a = g[c] * is;
                    for (int64_t bi = 0; bi < B; ++bi) {
                        const double* gr = go.data() + (bi * C + c) * plane;
                        double* gxr = gx->data() + (bi * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) gxr[i] += a * gr[i];
                    }
                }
            }
            break;
        }
        case Op::dropout: {
            const auto& st = std::get<DropState>(n.state);
            std::vector<double>* gx = grad_of(n.inputs[0]);
            if (gx) {
                if (st.mask.empty()) {
                    for (size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
                } else {
                    for (size_t i = 0; i < go.size(); ++i)
                        if (st.mask[i]) (*gx)[i] += go[i] * st.keep_inv;
                }
            }
            break;
        }
        case Op::dense: {
            const Tensor& x = node(n.inputs[0]).value;
            const Tensor& w = node(n.inputs[1]).value;
            const int64_t B = x.dim(0), F = x.dim(1), O = w.dim(1);
            std::vector<double>* gx = grad_of(n.inputs[0]);
            std::vector<double>* gw = grad_of(n.inputs[1]);
            std::vector<double>* gb = grad_of(n.inputs[2]);
            for (int64_t bi = 0; bi < B; ++bi) {
                const double* gr = go.data() + bi * O;
                if (gb) axpy(1.0, gr, gb->data(), O);
                if (gw) {
                    const double* xr = x.data() + bi * F;
                    for (int64_t f = 0; f < F; ++f) axpy(xr[f], gr, gw->data() + f * O, O);
                }
                if (gx) {
                    double* gxr = gx->data() + bi * F;
                    for (int64_t f = 0; f < F; ++f) gxr[f] += dot(w.data() + f * O, gr, O);
                }
            }
            break;
        }
        case Op::concat: {
            const int64_t B = n.value.dim(0), Ctot = n.value.dim(1), plane = n.value.dim(2) * n.value.dim(3);
            int64_t coff = 0;
            for (NodeId id2 : n.inputs) {
                Node& c = node(id2);
                const int64_t pc = c.value.dim(1);
                if (c.requires_grad) {
                    c.value.ensure_grad();
                    for (int64_t bi = 0; bi < B; ++bi)
                        axpy(1.0, go.data() + (bi * Ctot + coff) * plane, c.value.grad().data() + bi * pc * plane,
                             pc * plane);
                }
                coff += pc;
            }
            break;
        }
        case Op::reshape: {
            std::vector<double>* gx = grad_of(n.inputs[0]);
            if (gx)
                for (size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
            break;
        }
        case Op::softmax_ce: {
            const auto& st = std::get<CeState>(n.state);
            std::vector<double>* gz = grad_of(n.inputs[0]);
            if (gz) {
                const int64_t B = node(n.inputs[0]).value.dim(0);
                const int64_t K = node(n.inputs[0]).value.dim(1);
                const double scale = go[0] / double(B);
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t k = 0; k < K; ++k)
                        (*gz)[size_t(b * K + k)] +=
                            scale * (st.probs[size_t(b * K + k)] - (st.labels[size_t(b)] == k ? 1.0 : 0.0));
            }
            break;
        }
        case Op::sum: {
            std::vector<double>* gx = grad_of(n.inputs[0]);
            if (gx) {
                const double s = go[0];
                for (double& v : *gx) v += s;
            }
            break;
        }
    }
}

BackwardResult Tape::backward(NodeId loss, bool wrt_input) {
    if (consumed_) throw std::runtime_error("backward: tape already consumed by a previous backward pass");
    consumed_ = true;
    if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size()) throw std::out_of_range("backward: bad loss node");
    Node& L = node(loss);
    if (L.value.size() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(L.value.shape()));

    if (L.requires_grad) {
        L.value.ensure_grad();
        L.value.grad()[0] = 1.0;
        for (NodeId id = loss; id >= 0; --id) {
            Node& n = node(id);
            if (!n.requires_grad || !n.value.has_grad()) continue;
            if (n.op != Op::leaf) {
                backward_dispatch(id);
                n.value.clear_grad();  // intermediate grads are consumed; free eagerly
            }
        }
    }

    BackwardResult r;
    for (Node& n : nodes_) {
        if (n.op != Op::leaf || n.role != LeafRole::param) continue;
        if (n.value.has_grad())
            r.params.emplace(n.name, Tensor(n.value.shape(), std::move(n.value.grad())));
        else
            r.params.emplace(n.name, Tensor::zeros(n.value.shape()));
    }
    if (wrt_input) {
        if (input_id_ < 0) throw std::logic_error("backward: wrt_input requested but no input leaf was designated");
        Node& n = node(input_id_);
        if (!n.requires_grad)
            throw std::logic_error("backward: wrt_input requested but the input leaf is not tracked");
        if (n.value.has_grad())
            r.input_grad = Tensor(n.value.shape(), std::move(n.value.grad()));
        else
            r.input_grad = Tensor::zeros(n.value.shape());
    }
    return r;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& at, double h) {
    Tensor g(at.shape());
    Tensor x = at;
    for (int64_t i = 0; i < at.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = fn(x);
        x[i] = orig - h;
        const double fm = fn(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace inctsp
