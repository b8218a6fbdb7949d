#include "eeguq/tape.hpp"

#include "eeguq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace eeguq {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

// TapeOps gives the free-function primitives access to tape internals.
struct TapeOps {
    static Tape::Node& node(Var v) { return v.tape()->node(v.index()); }
    static const Tensor& val(Var v) { return v.tape()->node(v.index()).value; }
    static bool needs(Var v) { return v.tape()->node(v.index()).requires_grad; }

    static void accum(Var v, const Tensor& g) {
        Tape::Node& n = node(v);
        if (!n.requires_grad) return;
        v.tape()->ensure_grad(v.index());
        for (std::int64_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    // Gradient of the output node; empty tensor means it was never reached.
    static const Tensor* out_grad(Var v) {
        const Tape::Node& n = node(v);
        return n.grad.size() == 0 ? nullptr : &n.grad;
    }

    static Var record(Tape* t, Tensor value, bool req, std::function<void()> fn) {
        return t->record(std::move(value), req, std::move(fn));
    }

    static Tape* same_tape(Var a, Var b, const char* what) {
        require(a.tape() != nullptr && a.tape() == b.tape(),
                std::string(what) + ": operands must live on the same tape");
        return a.tape();
    }
};

using Ops = TapeOps;

const Tensor& Var::value() const { return tape_->node(index_).value; }

Tensor Var::grad() const {
    const Tape::Node& n = tape_->node(index_);
    if (n.grad.size() == 0) return Tensor(n.value.shape);
    return n.grad;
}

bool Var::requires_grad() const { return tape_->node(index_).requires_grad; }

Var Tape::leaf(Tensor value) { return record(std::move(value), true, nullptr); }

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::record(Tensor value, bool requires_grad, std::function<void()> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

void Tape::ensure_grad(std::size_t i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape);
}

std::vector<Tensor> Tape::grad(Var loss, const std::vector<Var>& params) {
    require(loss.tape() == this, "grad: loss does not belong to this tape");
    require(loss.value().size() == 1,
            "grad: loss must be scalar, got shape " + shape_to_string(loss.value().shape));
    for (auto& n : nodes_) {
        if (n.grad.size() != 0) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
    ensure_grad(loss.index());
    nodes_[loss.index()].grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && n.grad.size() != 0) n.backward();
    }
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Var& p : params) {
        require(p.tape() == this, "grad: param does not belong to this tape");
        out.push_back(p.grad());
    }
    return out;
}

// --- element-wise ----------------------------------------------------------

Var add(Var a, Var b) {
    Tape* t = Ops::same_tape(a, b, "add");
    require_same_shape(Ops::val(a), Ops::val(b), "add");
    Tensor y = Ops::val(a);
    const Tensor& vb = Ops::val(b);
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] += vb[i];
    Var out = Ops::record(t, std::move(y), Ops::needs(a) || Ops::needs(b), nullptr);
    Ops::node(out).backward = [a, b, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Ops::accum(a, *g);
        Ops::accum(b, *g);
    };
    return out;
}

Var sub(Var a, Var b) {
    Tape* t = Ops::same_tape(a, b, "sub");
    require_same_shape(Ops::val(a), Ops::val(b), "sub");
    Tensor y = Ops::val(a);
    const Tensor& vb = Ops::val(b);
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] -= vb[i];
    Var out = Ops::record(t, std::move(y), Ops::needs(a) || Ops::needs(b), nullptr);
    Ops::node(out).backward = [a, b, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Ops::accum(a, *g);
        Tensor neg = *g;
        for (auto& v : neg.data) v = -v;
        Ops::accum(b, neg);
    };
    return out;
}

Var mul(Var a, Var b) {
    Tape* t = Ops::same_tape(a, b, "mul");
    require_same_shape(Ops::val(a), Ops::val(b), "mul");
    Tensor y = Ops::val(a);
    const Tensor& vb = Ops::val(b);
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] *= vb[i];
    Var out = Ops::record(t, std::move(y), Ops::needs(a) || Ops::needs(b), nullptr);
    Ops::node(out).backward = [a, b, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        if (Ops::needs(a)) {
            Tensor ga = *g;
            const Tensor& vb = Ops::val(b);
            for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] *= vb[i];
            Ops::accum(a, ga);
        }
        if (Ops::needs(b)) {
            Tensor gb = *g;
            const Tensor& va = Ops::val(a);
            for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] *= va[i];
            Ops::accum(b, gb);
        }
    };
    return out;
}

Var scale(Var x, double c) {
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v *= c;
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, c]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Tensor gx = *g;
        for (auto& v : gx.data) v *= c;
        Ops::accum(x, gx);
    };
    return out;
}

Var add_scalar(Var x, double c) {
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v += c;
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (g) Ops::accum(x, *g);
    };
    return out;
}

Var mul_scalar_var(Var s, Var x) {
    Tape* t = Ops::same_tape(s, x, "mul_scalar_var");
    require(Ops::val(s).size() == 1, "mul_scalar_var: scale must be a size-1 tensor, got shape " +
                                         shape_to_string(Ops::val(s).shape));
    double sv = Ops::val(s)[0];
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v *= sv;
    Var out = Ops::record(t, std::move(y), Ops::needs(s) || Ops::needs(x), nullptr);
    Ops::node(out).backward = [s, x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        if (Ops::needs(s)) {
            const Tensor& vx = Ops::val(x);
            double acc = 0.0;
            for (std::int64_t i = 0; i < vx.size(); ++i) acc += (*g)[i] * vx[i];
            Tensor gs({1}, acc);
            Ops::accum(s, gs);
        }
        if (Ops::needs(x)) {
            double sv = Ops::val(s)[0];
            Tensor gx = *g;
            for (auto& v : gx.data) v *= sv;
            Ops::accum(x, gx);
        }
    };
    return out;
}

// --- linear algebra ---------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape* t = Ops::same_tape(a, b, "matmul");
    const Tensor& va = Ops::val(a);
    const Tensor& vb = Ops::val(b);
    require(va.rank() == 2 && vb.rank() == 2, "matmul: operands must be rank-2, got " +
                                                  shape_to_string(va.shape) + " and " +
                                                  shape_to_string(vb.shape));
    std::int64_t m = va.shape[0], k = va.shape[1], k2 = vb.shape[0], n = vb.shape[1];
    require(k == k2, "matmul: inner dimensions differ, " + std::to_string(k) + " vs " +
                         std::to_string(k2));
    Tensor y({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            double av = va[i * k + p];
            if (av == 0.0) continue;
            const double* brow = vb.data.data() + p * n;
            double* yrow = y.data.data() + i * n;
            for (std::int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    }
    Var out = Ops::record(t, std::move(y), Ops::needs(a) || Ops::needs(b), nullptr);
    Ops::node(out).backward = [a, b, out, m, k, n]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        if (Ops::needs(a)) {
            Tensor ga(Ops::val(a).shape);
            const Tensor& vb = Ops::val(b);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) {
                    double gv = (*g)[i * n + j];
                    if (gv == 0.0) continue;
                    for (std::int64_t p = 0; p < k; ++p) ga[i * k + p] += gv * vb[p * n + j];
                }
            Ops::accum(a, ga);
        }
        if (Ops::needs(b)) {
            Tensor gb(Ops::val(b).shape);
            const Tensor& va = Ops::val(a);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t p = 0; p < k; ++p) {
                    double av = va[i * k + p];
                    if (av == 0.0) continue;
                    for (std::int64_t j = 0; j < n; ++j) gb[p * n + j] += av * (*g)[i * n + j];
                }
            Ops::accum(b, gb);
        }
    };
    return out;
}

Var add_rowvec(Var x, Var v) {
    Tape* t = Ops::same_tape(x, v, "add_rowvec");
    const Tensor& vx = Ops::val(x);
    const Tensor& vv = Ops::val(v);
    require(vx.rank() == 2, "add_rowvec: x must be rank-2, got " + shape_to_string(vx.shape));
    require(vv.rank() == 1 && vv.shape[0] == vx.shape[1],
            "add_rowvec: vector length " + shape_to_string(vv.shape) + " does not match columns " +
                std::to_string(vx.shape[1]));
    std::int64_t n = vx.shape[0], k = vx.shape[1];
    Tensor y = vx;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) y[i * k + j] += vv[j];
    Var out = Ops::record(t, std::move(y), Ops::needs(x) || Ops::needs(v), nullptr);
    Ops::node(out).backward = [x, v, out, n, k]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Ops::accum(x, *g);
        if (Ops::needs(v)) {
            Tensor gv({k});
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < k; ++j) gv[j] += (*g)[i * k + j];
            Ops::accum(v, gv);
        }
    };
    return out;
}

// --- convolution ------------------------------------------------------------

namespace {

struct ConvDims {
    std::int64_t B, Ci, H, W, Co, Cig, KH, KW, OH, OW, G;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, std::int64_t ph, std::int64_t pw,
                   std::int64_t g) {
    require(x.rank() == 4, "conv2d: input must be rank-4 [batch, ch, h, w], got " +
                               shape_to_string(x.shape));
    require(w.rank() == 4, "conv2d: kernel must be rank-4 [ch_out, ch_in/groups, kh, kw], got " +
                               shape_to_string(w.shape));
    require(g >= 1, "conv2d: groups must be positive");
    require(ph >= 0 && pw >= 0, "conv2d: padding must be non-negative");
    ConvDims d;
    d.B = x.shape[0];
    d.Ci = x.shape[1];
    d.H = x.shape[2];
    d.W = x.shape[3];
    d.Co = w.shape[0];
    d.Cig = w.shape[1];
    d.KH = w.shape[2];
    d.KW = w.shape[3];
    d.G = g;
    require(d.Ci % g == 0, "conv2d: groups " + std::to_string(g) +
                               " does not divide input channels " + std::to_string(d.Ci));
    require(d.Co % g == 0, "conv2d: groups " + std::to_string(g) +
                               " does not divide output channels " + std::to_string(d.Co));
    require(d.Cig == d.Ci / g, "conv2d: kernel channel dim " + std::to_string(d.Cig) +
                                   " must equal input channels / groups = " +
                                   std::to_string(d.Ci / g));
    d.OH = d.H + 2 * ph - d.KH + 1;
    d.OW = d.W + 2 * pw - d.KW + 1;
    require(d.OH >= 1, "conv2d: kernel height " + std::to_string(d.KH) +
                           " exceeds padded input height " + std::to_string(d.H + 2 * ph));
    require(d.OW >= 1, "conv2d: kernel width " + std::to_string(d.KW) +
                           " exceeds padded input width " + std::to_string(d.W + 2 * pw));
    return d;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, std::int64_t ph, std::int64_t pw,
                      std::int64_t groups) {
    ConvDims d = conv_dims(x, w, ph, pw, groups);
    Tensor y({d.B, d.Co, d.OH, d.OW});
    std::int64_t co_per_g = d.Co / d.G;
    for (std::int64_t b = 0; b < d.B; ++b) {
        for (std::int64_t co = 0; co < d.Co; ++co) {
            std::int64_t g = co / co_per_g;
            double* ybase = y.data.data() + ((b * d.Co + co) * d.OH) * d.OW;
            for (std::int64_t cig = 0; cig < d.Cig; ++cig) {
                std::int64_t ci = g * d.Cig + cig;
                const double* xbase = x.data.data() + ((b * d.Ci + ci) * d.H) * d.W;
                const double* wbase = w.data.data() + ((co * d.Cig + cig) * d.KH) * d.KW;
                for (std::int64_t kh = 0; kh < d.KH; ++kh) {
                    for (std::int64_t oh = 0; oh < d.OH; ++oh) {
                        std::int64_t ih = oh - ph + kh;
                        if (ih < 0 || ih >= d.H) continue;
                        const double* xrow = xbase + ih * d.W;
                        double* yrow = ybase + oh * d.OW;
                        for (std::int64_t kw = 0; kw < d.KW; ++kw) {
                            double wv = wbase[kh * d.KW + kw];
                            if (wv == 0.0) continue;
                            std::int64_t lo = std::max<std::int64_t>(0, pw - kw);
                            std::int64_t hi = std::min(d.OW, d.W + pw - kw);
                            const double* xs = xrow - pw + kw;
                            for (std::int64_t ow = lo; ow < hi; ++ow) yrow[ow] += wv * xs[ow];
                        }
                    }
                }
            }
        }
    }
    return y;
}

Var conv2d(Var input, Var kernel, std::int64_t pad_h, std::int64_t pad_w, std::int64_t groups) {
    Tape* t = Ops::same_tape(input, kernel, "conv2d");
    Tensor y = conv2d_forward(Ops::val(input), Ops::val(kernel), pad_h, pad_w, groups);
    Var out = Ops::record(t, std::move(y), Ops::needs(input) || Ops::needs(kernel), nullptr);
    Ops::node(out).backward = [input, kernel, out, pad_h, pad_w, groups]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& x = Ops::val(input);
        const Tensor& w = Ops::val(kernel);
        ConvDims d = conv_dims(x, w, pad_h, pad_w, groups);
        std::int64_t co_per_g = d.Co / d.G;
        if (Ops::needs(input)) {
            Tensor gx(x.shape);
            for (std::int64_t b = 0; b < d.B; ++b)
                for (std::int64_t co = 0; co < d.Co; ++co) {
                    std::int64_t grp = co / co_per_g;
                    const double* gybase = g->data.data() + ((b * d.Co + co) * d.OH) * d.OW;
                    for (std::int64_t cig = 0; cig < d.Cig; ++cig) {
                        std::int64_t ci = grp * d.Cig + cig;
                        double* gxbase = gx.data.data() + ((b * d.Ci + ci) * d.H) * d.W;
                        const double* wbase = w.data.data() + ((co * d.Cig + cig) * d.KH) * d.KW;
                        for (std::int64_t kh = 0; kh < d.KH; ++kh)
                            for (std::int64_t oh = 0; oh < d.OH; ++oh) {
                                std::int64_t ih = oh - pad_h + kh;
                                if (ih < 0 || ih >= d.H) continue;
                                double* gxrow = gxbase + ih * d.W;
                                const double* gyrow = gybase + oh * d.OW;
                                for (std::int64_t kw = 0; kw < d.KW; ++kw) {
                                    double wv = wbase[kh * d.KW + kw];
                                    if (wv == 0.0) continue;
                                    std::int64_t lo = std::max<std::int64_t>(0, pad_w - kw);
                                    std::int64_t hi = std::min(d.OW, d.W + pad_w - kw);
                                    double* gxs = gxrow - pad_w + kw;
                                    for (std::int64_t ow = lo; ow < hi; ++ow)
                                        gxs[ow] += wv * gyrow[ow];
                                }
                            }
                    }
                }
            Ops::accum(input, gx);
        }
        if (Ops::needs(kernel)) {
            Tensor gw(w.shape);
            for (std::int64_t b = 0; b < d.B; ++b)
                for (std::int64_t co = 0; co < d.Co; ++co) {
                    std::int64_t grp = co / co_per_g;
                    const double* gybase = g->data.data() + ((b * d.Co + co) * d.OH) * d.OW;
                    for (std::int64_t cig = 0; cig < d.Cig; ++cig) {
                        std::int64_t ci = grp * d.Cig + cig;
                        const double* xbase = x.data.data() + ((b * d.Ci + ci) * d.H) * d.W;
                        double* gwbase = gw.data.data() + ((co * d.Cig + cig) * d.KH) * d.KW;
                        for (std::int64_t kh = 0; kh < d.KH; ++kh)
                            for (std::int64_t oh = 0; oh < d.OH; ++oh) {
                                std::int64_t ih = oh - pad_h + kh;
                                if (ih < 0 || ih >= d.H) continue;
                                const double* xrow = xbase + ih * d.W;
                                const double* gyrow = gybase + oh * d.OW;
                                for (std::int64_t kw = 0; kw < d.KW; ++kw) {
                                    std::int64_t lo = std::max<std::int64_t>(0, pad_w - kw);
                                    std::int64_t hi = std::min(d.OW, d.W + pad_w - kw);
                                    const double* xs = xrow - pad_w + kw;
                                    double acc = 0.0;
                                    for (std::int64_t ow = lo; ow < hi; ++ow)
                                        acc += xs[ow] * gyrow[ow];
                                    gwbase[kh * d.KW + kw] += acc;
                                }
                            }
                    }
                }
            Ops::accum(kernel, gw);
        }
    };
    return out;
}

// --- nonlinearities ---------------------------------------------------------

Var relu(Var x) {
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& vx = Ops::val(x);
        Tensor gx = *g;
        for (std::int64_t i = 0; i < gx.size(); ++i)
            if (vx[i] <= 0.0) gx[i] = 0.0;
        Ops::accum(x, gx);
    };
    return out;
}

Var sigmoid(Var x) {
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v = 1.0 / (1.0 + std::exp(-v));
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& vy = Ops::val(out);
        Tensor gx = *g;
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= vy[i] * (1.0 - vy[i]);
        Ops::accum(x, gx);
    };
    return out;
}

Var tanh_op(Var x) {
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v = std::tanh(v);
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& vy = Ops::val(out);
        Tensor gx = *g;
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= 1.0 - vy[i] * vy[i];
        Ops::accum(x, gx);
    };
    return out;
}

Var log_op(Var x) {
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v = std::log(v);
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& vx = Ops::val(x);
        Tensor gx = *g;
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] /= vx[i];
        Ops::accum(x, gx);
    };
    return out;
}

Var clamp_min(Var x, double floor) {
    Tensor y = Ops::val(x);
    for (auto& v : y.data) v = v < floor ? floor : v;
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, floor]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& vx = Ops::val(x);
        Tensor gx = *g;
        for (std::int64_t i = 0; i < gx.size(); ++i)
            if (vx[i] < floor) gx[i] = 0.0;
        Ops::accum(x, gx);
    };
    return out;
}

// --- softmax ----------------------------------------------------------------

namespace {

void require_rank2(const Tensor& x, const char* what) {
    require(x.rank() == 2,
            std::string(what) + ": input must be rank-2, got " + shape_to_string(x.shape));
}

}  // namespace

Tensor softmax_rows_forward(const Tensor& x) {
    require_rank2(x, "softmax_rows");
    std::int64_t n = x.shape[0], k = x.shape[1];
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = x.data.data() + i * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        double* yrow = y.data.data() + i * k;
        for (std::int64_t j = 0; j < k; ++j) {
            yrow[j] = std::exp(row[j] - mx);
            sum += yrow[j];
        }
        for (std::int64_t j = 0; j < k; ++j) yrow[j] /= sum;
    }
    return y;
}

Var softmax_rows(Var x) {
    Tensor y = softmax_rows_forward(Ops::val(x));
    std::int64_t n = y.shape[0], k = y.shape[1];
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, n, k]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& p = Ops::val(out);
        Tensor gx(p.shape);
        for (std::int64_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < k; ++j) dot += (*g)[i * k + j] * p[i * k + j];
            for (std::int64_t j = 0; j < k; ++j)
                gx[i * k + j] = p[i * k + j] * ((*g)[i * k + j] - dot);
        }
        Ops::accum(x, gx);
    };
    return out;
}

Var log_softmax_rows(Var x) {
    const Tensor& vx = Ops::val(x);
    require_rank2(vx, "log_softmax_rows");
    std::int64_t n = vx.shape[0], k = vx.shape[1];
    Tensor y(vx.shape);
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = vx.data.data() + i * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
        double lse = mx + std::log(sum);
        for (std::int64_t j = 0; j < k; ++j) y[i * k + j] = row[j] - lse;
    }
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, n, k]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& ls = Ops::val(out);
        Tensor gx(ls.shape);
        for (std::int64_t i = 0; i < n; ++i) {
            double gsum = 0.0;
            for (std::int64_t j = 0; j < k; ++j) gsum += (*g)[i * k + j];
            for (std::int64_t j = 0; j < k; ++j)
                gx[i * k + j] = (*g)[i * k + j] - std::exp(ls[i * k + j]) * gsum;
        }
        Ops::accum(x, gx);
    };
    return out;
}

// --- pooling ----------------------------------------------------------------

namespace {

void check_pool(const Tensor& x, std::int64_t wh, std::int64_t ww, const char* what) {
    require(x.rank() == 4,
            std::string(what) + ": input must be rank-4, got " + shape_to_string(x.shape));
    require(wh >= 1 && ww >= 1, std::string(what) + ": window must be positive");
    require(x.shape[2] % wh == 0, std::string(what) + ": window height " + std::to_string(wh) +
                                      " does not divide extent " + std::to_string(x.shape[2]));
    require(x.shape[3] % ww == 0, std::string(what) + ": window width " + std::to_string(ww) +
                                      " does not divide extent " + std::to_string(x.shape[3]));
}

}  // namespace

Var avgpool2d(Var x, std::int64_t win_h, std::int64_t win_w) {
    const Tensor& vx = Ops::val(x);
    check_pool(vx, win_h, win_w, "avgpool2d");
    std::int64_t B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    std::int64_t OH = H / win_h, OW = W / win_w;
    double inv = 1.0 / static_cast<double>(win_h * win_w);
    Tensor y({B, C, OH, OW});
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t oh = 0; oh < OH; ++oh)
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                double acc = 0.0;
                for (std::int64_t dh = 0; dh < win_h; ++dh)
                    for (std::int64_t dw = 0; dw < win_w; ++dw)
                        acc += vx[(bc * H + oh * win_h + dh) * W + ow * win_w + dw];
                y[(bc * OH + oh) * OW + ow] = acc * inv;
            }
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, B, C, H, W, OH, OW, win_h, win_w, inv]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Tensor gx({B, C, H, W});
        for (std::int64_t bc = 0; bc < B * C; ++bc)
            for (std::int64_t oh = 0; oh < OH; ++oh)
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double gv = (*g)[(bc * OH + oh) * OW + ow] * inv;
                    for (std::int64_t dh = 0; dh < win_h; ++dh)
                        for (std::int64_t dw = 0; dw < win_w; ++dw)
                            gx[(bc * H + oh * win_h + dh) * W + ow * win_w + dw] += gv;
                }
        Ops::accum(x, gx);
    };
    return out;
}

Var maxpool2d(Var x, std::int64_t win_h, std::int64_t win_w) {
    const Tensor& vx = Ops::val(x);
    check_pool(vx, win_h, win_w, "maxpool2d");
    std::int64_t B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    std::int64_t OH = H / win_h, OW = W / win_w;
    Tensor y({B, C, OH, OW});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(B * C * OH * OW));
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t oh = 0; oh < OH; ++oh)
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                double best = -1e308;
                std::int64_t best_i = 0;
                for (std::int64_t dh = 0; dh < win_h; ++dh)
                    for (std::int64_t dw = 0; dw < win_w; ++dw) {
                        std::int64_t i = (bc * H + oh * win_h + dh) * W + ow * win_w + dw;
                        if (vx[i] > best) {
                            best = vx[i];
                            best_i = i;
                        }
                    }
                y[(bc * OH + oh) * OW + ow] = best;
                (*argmax)[static_cast<std::size_t>((bc * OH + oh) * OW + ow)] = best_i;
            }
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, argmax]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Tensor gx(Ops::val(x).shape);
        for (std::int64_t i = 0; i < g->size(); ++i)
            gx[(*argmax)[static_cast<std::size_t>(i)]] += (*g)[i];
        Ops::accum(x, gx);
    };
    return out;
}

// --- batch norm ---------------------------------------------------------------

BatchNormResult batchnorm_train(Var x, Var gamma, Var beta, double eps) {
    Tape* t = Ops::same_tape(x, gamma, "batchnorm_train");
    Ops::same_tape(gamma, beta, "batchnorm_train");
    const Tensor& vx = Ops::val(x);
    require(vx.rank() == 4,
            "batchnorm_train: input must be rank-4, got " + shape_to_string(vx.shape));
    std::int64_t B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    require(Ops::val(gamma).size() == C && Ops::val(beta).size() == C,
            "batchnorm_train: scale/shift length must equal channel count " + std::to_string(C));
    std::int64_t m = B * H * W;
    Tensor mean({C}), var({C});
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* p = vx.data.data() + ((b * C + c) * H) * W;
            for (std::int64_t i = 0; i < H * W; ++i) acc += p[i];
        }
        mean[c] = acc / static_cast<double>(m);
        double accv = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* p = vx.data.data() + ((b * C + c) * H) * W;
            for (std::int64_t i = 0; i < H * W; ++i) {
                double d = p[i] - mean[c];
                accv += d * d;
            }
        }
        var[c] = accv / static_cast<double>(m);
    }
    Tensor invstd({C});
    for (std::int64_t c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);
    Tensor y(vx.shape);
    const Tensor& vg = Ops::val(gamma);
    const Tensor& vb = Ops::val(beta);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = vx.data.data() + ((b * C + c) * H) * W;
            double* q = y.data.data() + ((b * C + c) * H) * W;
            double sc = vg[c] * invstd[c];
            double sh = vb[c] - sc * mean[c];
            for (std::int64_t i = 0; i < H * W; ++i) q[i] = sc * p[i] + sh;
        }
    bool req = Ops::needs(x) || Ops::needs(gamma) || Ops::needs(beta);
    Var out = Ops::record(t, std::move(y), req, nullptr);
    Tensor mean_copy = mean, invstd_copy = invstd;
    Ops::node(out).backward = [x, gamma, beta, out, mean_copy, invstd_copy, B, C, H, W, m]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& vx = Ops::val(x);
        const Tensor& vg = Ops::val(gamma);
        Tensor dgamma({C}), dbeta({C});
        // per-channel sums of dy and dy*xhat
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                const double* gp = g->data.data() + ((b * C + c) * H) * W;
                const double* xp = vx.data.data() + ((b * C + c) * H) * W;
                double sc = invstd_copy[c], mu = mean_copy[c];
                double s1 = 0.0, s2 = 0.0;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    s1 += gp[i];
                    s2 += gp[i] * (xp[i] - mu) * sc;
                }
                dbeta[c] += s1;
                dgamma[c] += s2;
            }
        if (Ops::needs(x)) {
            Tensor gx(vx.shape);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double* gp = g->data.data() + ((b * C + c) * H) * W;
                    const double* xp = vx.data.data() + ((b * C + c) * H) * W;
                    double* op = gx.data.data() + ((b * C + c) * H) * W;
                    double sc = invstd_copy[c], mu = mean_copy[c];
                    double coeff = vg[c] * sc;
                    double mean_dy = dbeta[c] / static_cast<double>(m);
                    double mean_dyx = dgamma[c] / static_cast<double>(m);
                    for (std::int64_t i = 0; i < H * W; ++i) {
                        double xhat = (xp[i] - mu) * sc;
                        op[i] = coeff * (gp[i] - mean_dy - xhat * mean_dyx);
                    }
                }
            Ops::accum(x, gx);
        }
        Ops::accum(gamma, dgamma);
        Ops::accum(beta, dbeta);
    };
    return BatchNormResult{out, mean, var};
}

Var batchnorm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps) {
    Tape* t = Ops::same_tape(x, gamma, "batchnorm_eval");
    Ops::same_tape(gamma, beta, "batchnorm_eval");
    const Tensor& vx = Ops::val(x);
    require(vx.rank() == 4,
            "batchnorm_eval: input must be rank-4, got " + shape_to_string(vx.shape));
    std::int64_t B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    require(running_mean.size() == C && running_var.size() == C,
            "batchnorm_eval: running stats length must equal channel count " + std::to_string(C));
    Tensor invstd({C});
    for (std::int64_t c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
    const Tensor& vg = Ops::val(gamma);
    const Tensor& vb = Ops::val(beta);
    Tensor y(vx.shape);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = vx.data.data() + ((b * C + c) * H) * W;
            double* q = y.data.data() + ((b * C + c) * H) * W;
            double sc = vg[c] * invstd[c];
            double sh = vb[c] - sc * running_mean[c];
            for (std::int64_t i = 0; i < H * W; ++i) q[i] = sc * p[i] + sh;
        }
    bool req = Ops::needs(x) || Ops::needs(gamma) || Ops::needs(beta);
    Var out = Ops::record(t, std::move(y), req, nullptr);
    Tensor rm = running_mean, is = invstd;
    Ops::node(out).backward = [x, gamma, beta, out, rm, is, B, C, H, W]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        const Tensor& vx = Ops::val(x);
        const Tensor& vg = Ops::val(gamma);
        if (Ops::needs(x)) {
            Tensor gx(vx.shape);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double* gp = g->data.data() + ((b * C + c) * H) * W;
                    double* op = gx.data.data() + ((b * C + c) * H) * W;
                    double sc = vg[c] * is[c];
                    for (std::int64_t i = 0; i < H * W; ++i) op[i] = sc * gp[i];
                }
            Ops::accum(x, gx);
        }
        if (Ops::needs(gamma) || Ops::needs(beta)) {
            Tensor dgamma({C}), dbeta({C});
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double* gp = g->data.data() + ((b * C + c) * H) * W;
                    const double* xp = vx.data.data() + ((b * C + c) * H) * W;
                    for (std::int64_t i = 0; i < H * W; ++i) {
                        dbeta[c] += gp[i];
                        dgamma[c] += gp[i] * (xp[i] - rm[c]) * is[c];
                    }
                }
            Ops::accum(gamma, dgamma);
            Ops::accum(beta, dbeta);
        }
    };
    return out;
}

// --- indexing / reductions ----------------------------------------------------

Var pick_class(Var x, const std::vector<std::int64_t>& labels) {
    const Tensor& vx = Ops::val(x);
    require_rank2(vx, "pick_class");
    std::int64_t n = vx.shape[0], k = vx.shape[1];
    require(static_cast<std::int64_t>(labels.size()) == n,
            "pick_class: labels length " + std::to_string(labels.size()) +
                " does not match rows " + std::to_string(n));
    Tensor y({n});
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t c = labels[static_cast<std::size_t>(i)];
        require(c >= 0 && c < k, "pick_class: label " + std::to_string(c) +
                                     " out of range for " + std::to_string(k) + " classes");
        y[i] = vx[i * k + c];
    }
    auto labels_copy = std::make_shared<std::vector<std::int64_t>>(labels);
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, labels_copy, n, k]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Tensor gx({n, k});
        for (std::int64_t i = 0; i < n; ++i)
            gx[i * k + (*labels_copy)[static_cast<std::size_t>(i)]] = (*g)[i];
        Ops::accum(x, gx);
    };
    return out;
}

Var sum_all(Var x) {
    double acc = 0.0;
    for (double v : Ops::val(x).data) acc += v;
    Var out = Ops::record(x.tape(), Tensor::scalar(acc), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Tensor gx(Ops::val(x).shape, (*g)[0]);
        Ops::accum(x, gx);
    };
    return out;
}

Var mean_all(Var x) {
    std::int64_t n = Ops::val(x).size();
    double acc = 0.0;
    for (double v : Ops::val(x).data) acc += v;
    Var out = Ops::record(x.tape(), Tensor::scalar(acc / static_cast<double>(n)), Ops::needs(x),
                          nullptr);
    Ops::node(out).backward = [x, out, n]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Tensor gx(Ops::val(x).shape, (*g)[0] / static_cast<double>(n));
        Ops::accum(x, gx);
    };
    return out;
}

Var reshape(Var x, std::vector<std::int64_t> new_shape) {
    Tensor y = Ops::val(x).reshaped(new_shape);
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Ops::accum(x, g->reshaped(Ops::val(x).shape));
    };
    return out;
}

Var slice_cols(Var x, std::int64_t start, std::int64_t len) {
    const Tensor& vx = Ops::val(x);
    require_rank2(vx, "slice_cols");
    std::int64_t n = vx.shape[0], k = vx.shape[1];
    require(start >= 0 && len >= 1 && start + len <= k,
            "slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                ") out of bounds for " + std::to_string(k) + " columns");
    Tensor y({n, len});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < len; ++j) y[i * len + j] = vx[i * k + start + j];
    Var out = Ops::record(x.tape(), std::move(y), Ops::needs(x), nullptr);
    Ops::node(out).backward = [x, out, start, len, n, k]() {
        const Tensor* g = Ops::out_grad(out);
        if (!g) return;
        Tensor gx({n, k});
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < len; ++j) gx[i * k + start + j] = (*g)[i * len + j];
        Ops::accum(x, gx);
    };
    return out;
}

// --- composed losses ----------------------------------------------------------

Var cross_entropy(Var logits, const std::vector<std::int64_t>& labels) {
    Var ls = log_softmax_rows(logits);
    Var picked = pick_class(ls, labels);
    return scale(mean_all(picked), -1.0);
}

Tensor matmul_forward(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[0],
            "matmul: incompatible shapes " + shape_to_string(a.shape) + " and " +
                shape_to_string(b.shape));
    std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor y({m, n});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b.data.data() + p * n;
            double* yrow = y.data.data() + i * n;
            for (std::int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    return y;
}

Tensor avgpool2d_forward(const Tensor& x, std::int64_t win_h, std::int64_t win_w) {
    check_pool(x, win_h, win_w, "avgpool2d");
    std::int64_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    std::int64_t OH = H / win_h, OW = W / win_w;
    double inv = 1.0 / static_cast<double>(win_h * win_w);
    Tensor y({B, C, OH, OW});
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t oh = 0; oh < OH; ++oh)
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                double acc = 0.0;
                for (std::int64_t dh = 0; dh < win_h; ++dh)
                    for (std::int64_t dw = 0; dw < win_w; ++dw)
                        acc += x[(bc * H + oh * win_h + dh) * W + ow * win_w + dw];
                y[(bc * OH + oh) * OW + ow] = acc * inv;
            }
    return y;
}

Var js_divergence_rows(Var p, Var q) {
    Tape* t = Ops::same_tape(p, q, "js_divergence_rows");
    require_same_shape(Ops::val(p), Ops::val(q), "js_divergence_rows");
    require_rank2(Ops::val(p), "js_divergence_rows");
    std::int64_t n = Ops::val(p).shape[0];
    (void)t;
    Var m = scale(add(p, q), 0.5);
    Var log_m = log_op(clamp_min(m, 1e-300));
    Var log_p = log_op(clamp_min(p, 1e-300));
    Var log_q = log_op(clamp_min(q, 1e-300));
    // KL(p|m) = sum p * (log p - log m), rows averaged
    Var kl_p = sum_all(mul(p, sub(log_p, log_m)));
    Var kl_q = sum_all(mul(q, sub(log_q, log_m)));
    return scale(add(kl_p, kl_q), 0.5 / static_cast<double>(n));
}

}  // namespace eeguq
