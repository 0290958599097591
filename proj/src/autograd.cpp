#include "uniperc/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace uniperc {

void Var::backward() const {
    if (!node_) throw std::logic_error("backward on empty Var");
    if (node_->value.numel() != 1) throw std::logic_error("backward requires a scalar root");

    // reverse topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.shape.empty()) n->backprop(*n);
    }
}

namespace ag {
namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

Var make(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool req = false;
    for (const auto& p : parents) req = req || p->requires_grad;
    n->requires_grad = req;
    if (req) {
        n->parents = std::move(parents);
        n->backprop = std::move(bp);
    }
    return Var(n);
}

void accum(Node& parent, const Tensor& g) {
    Tensor& pg = parent.ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) pg.data[i] += g.data[i];
}

// elementwise op with custom derivative closure
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
    Tensor out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = f(a.value()[i]);
    Tensor saved_in = a.value();
    return make(std::move(out), {a.node()}, [saved_in, df](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& pg = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            pg[i] += n.grad[i] * df(saved_in[i]);
    });
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make(std::move(out), {a.node(), b.node()}, [](Node& n) {
        for (int k = 0; k < 2; ++k)
            if (n.parents[k]->requires_grad) accum(*n.parents[k], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make(std::move(out), {a.node(), b.node()}, [](Node& n) {
        if (n.parents[0]->requires_grad) accum(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    Tensor av = a.value(), bv = b.value();
    return make(std::move(out), {a.node(), b.node()}, [av, bv](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& pg = n.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i] * bv[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i] * av[i];
        }
    });
}

Var div(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "div");
    Tensor out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] / b.value()[i];
    Tensor av = a.value(), bv = b.value();
    return make(std::move(out), {a.node(), b.node()}, [av, bv](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& pg = n.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i] / bv[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                pg[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

Var neg(const Var& a) {
    return unary(a, [](double v) { return -v; }, [](double) { return -1.0; });
}
Var add_scalar(const Var& a, double s) {
    return unary(a, [s](double v) { return v + s; }, [](double) { return 1.0; });
}
Var mul_scalar(const Var& a, double s) {
    return unary(a, [s](double v) { return v * s; }, [s](double) { return s; });
}
Var vexp(const Var& a) {
    return unary(a, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}
Var vlog(const Var& a) {
    return unary(a, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}
Var vabs(const Var& a) {
    return unary(a, [](double v) { return std::abs(v); },
                 [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}
Var vsqrt(const Var& a) {
    return unary(a, [](double v) { return std::sqrt(v); },
                 [](double v) { return 0.5 / std::sqrt(v); });
}
Var square(const Var& a) {
    return unary(a, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}
Var vsin(const Var& a) {
    return unary(a, [](double v) { return std::sin(v); }, [](double v) { return std::cos(v); });
}
Var vcos(const Var& a) {
    return unary(a, [](double v) { return std::cos(v); }, [](double v) { return -std::sin(v); });
}
Var relu(const Var& a) {
    return unary(a, [](double v) { return v > 0 ? v : 0.0; },
                 [](double v) { return v > 0 ? 1.0 : 0.0; });
}
Var elu(const Var& a) {
    return unary(a, [](double v) { return v > 0 ? v : std::expm1(v); },
                 [](double v) { return v > 0 ? 1.0 : std::exp(v); });
}
Var sigmoid(const Var& a) {
    return unary(a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                 [](double v) {
                     double s = 1.0 / (1.0 + std::exp(-v));
                     return s * (1.0 - s);
                 });
}
Var clamp_min(const Var& a, double lo) {
    return unary(a, [lo](double v) { return v < lo ? lo : v; },
                 [lo](double v) { return v < lo ? 0.0 : 1.0; });
}

Var mul_const(const Var& a, const Tensor& w) {
    require_same_shape(a.value(), w, "mul_const");
    Tensor out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * w[i];
    Tensor wc = w;
    return make(std::move(out), {a.node()}, [wc](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i] * wc[i];
    });
}

Var sum(const Var& a) {
    double s = 0;
    for (double v : a.value().data) s += v;
    return make(Tensor::scalar(s), {a.node()}, [](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        double g = n.grad[0];
        for (auto& v : pg.data) v += g;
    });
}

Var mean(const Var& a) {
    double s = 0;
    for (double v : a.value().data) s += v;
    double inv = 1.0 / static_cast<double>(a.value().numel());
    return make(Tensor::scalar(s * inv), {a.node()}, [inv](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        double g = n.grad[0] * inv;
        for (auto& v : pg.data) v += g;
    });
}

Var scale_by(const Var& s, const Var& x) {
    if (s.value().numel() != 1) throw std::invalid_argument("scale_by: s must be scalar");
    Tensor out(x.value().shape);
    double sv = s.value()[0];
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = sv * x.value()[i];
    Tensor xv = x.value();
    return make(std::move(out), {s.node(), x.node()}, [sv, xv](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& pg = n.parents[0]->ensure_grad();
            double acc = 0;
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i] * xv[i];
            pg[0] += acc;
        }
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i] * sv;
        }
    });
}

Var shift_by(const Var& s, const Var& x) {
    if (s.value().numel() != 1) throw std::invalid_argument("shift_by: s must be scalar");
    Tensor out(x.value().shape);
    double sv = s.value()[0];
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = sv + x.value()[i];
    return make(std::move(out), {s.node(), x.node()}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& pg = n.parents[0]->ensure_grad();
            double acc = 0;
            for (double g : n.grad.data) acc += g;
            pg[0] += acc;
        }
        if (n.parents[1]->requires_grad) accum(*n.parents[1], n.grad);
    });
}

Var mul_bcast_ch(const Var& x, const Var& m) {
    const Tensor& xv = x.value();
    const Tensor& mv = m.value();
    if (xv.rank() != 3 || mv.rank() != 3 || mv.dim(0) != 1 || mv.dim(1) != xv.dim(1) ||
        mv.dim(2) != xv.dim(2))
        throw std::invalid_argument("mul_bcast_ch: shape mismatch " + xv.shape_str() + " vs " +
                                    mv.shape_str());
    int C = xv.dim(0);
    std::int64_t hw = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
    Tensor out(xv.shape);
    for (int c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < hw; ++i) out[c * hw + i] = xv[c * hw + i] * mv[i];
    Tensor xs = xv, ms = mv;
    return make(std::move(out), {x.node(), m.node()}, [C, hw, xs, ms](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& pg = n.parents[0]->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (std::int64_t i = 0; i < hw; ++i)
                    pg[c * hw + i] += n.grad[c * hw + i] * ms[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (std::int64_t i = 0; i < hw; ++i)
                    pg[i] += n.grad[c * hw + i] * xs[c * hw + i];
        }
    });
}

Var broadcast_ch(const Var& s, int c, int h, int w) {
    const Tensor& sv = s.value();
    bool per_channel = sv.numel() == c && c > 1;
    if (!per_channel && sv.numel() != 1)
        throw std::invalid_argument("broadcast_ch: source must be {1} or {C}");
    Tensor out({c, h, w});
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int ch = 0; ch < c; ++ch) {
        double v = per_channel ? sv[ch] : sv[0];
        for (std::int64_t i = 0; i < hw; ++i) out[ch * hw + i] = v;
    }
    return make(std::move(out), {s.node()}, [c, hw, per_channel](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0;
            for (std::int64_t i = 0; i < hw; ++i) acc += n.grad[ch * hw + i];
            pg[per_channel ? ch : 0] += acc;
        }
    });
}

Var concat_ch(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_ch: empty");
    int H = xs[0].value().dim(1), W = xs[0].value().dim(2);
    int C = 0;
    for (const auto& x : xs) {
        if (x.value().rank() != 3 || x.value().dim(1) != H || x.value().dim(2) != W)
            throw std::invalid_argument("concat_ch: spatial mismatch");
        C += x.value().dim(0);
    }
    Tensor out({C, H, W});
    std::int64_t off = 0;
    std::vector<NodePtr> parents;
    std::vector<std::int64_t> sizes;
    for (const auto& x : xs) {
        std::copy(x.value().data.begin(), x.value().data.end(), out.data.begin() + off);
        off += x.value().numel();
        parents.push_back(x.node());
        sizes.push_back(x.value().numel());
    }
    return make(std::move(out), std::move(parents), [sizes](Node& n) {
        std::int64_t off2 = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
            if (n.parents[k]->requires_grad) {
                Tensor& pg = n.parents[k]->ensure_grad();
                for (std::int64_t i = 0; i < sizes[k]; ++i) pg[i] += n.grad[off2 + i];
            }
            off2 += sizes[k];
        }
    });
}

Var slice_ch(const Var& x, int start, int count) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3 || start < 0 || start + count > xv.dim(0))
        throw std::invalid_argument("slice_ch: bad range");
    int H = xv.dim(1), W = xv.dim(2);
    std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor out({count, H, W});
    std::copy(xv.data.begin() + start * hw, xv.data.begin() + (start + count) * hw,
              out.data.begin());
    return make(std::move(out), {x.node()}, [start, hw](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[start * hw + i] += n.grad[i];
    });
}

Var flatten(const Var& x, std::vector<int> new_shape) {
    Tensor out(std::move(new_shape), x.value().data);
    return make(std::move(out), {x.node()}, [](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i];
    });
}

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: incompatible " + av.shape_str() + " " +
                                    bv.shape_str());
    int r = av.dim(0), k = av.dim(1), c = bv.dim(1);
    Tensor out({r, c});
    EMap(out.data.data(), r, c) = ECMap(av.data.data(), r, k) * ECMap(bv.data.data(), k, c);
    Tensor as = av, bs = bv;
    return make(std::move(out), {a.node(), b.node()}, [r, k, c, as, bs](Node& n) {
        ECMap g(n.grad.data.data(), r, c);
        if (n.parents[0]->requires_grad) {
            Tensor& pg = n.parents[0]->ensure_grad();
            EMap(pg.data.data(), r, k) += g * ECMap(bs.data.data(), k, c).transpose();
        }
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            EMap(pg.data.data(), k, c) += ECMap(as.data.data(), r, k).transpose() * g;
        }
    });
}

Var transpose(const Var& a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw std::invalid_argument("transpose: need matrix");
    int r = av.dim(0), c = av.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.m(j, i) = av.m(i, j);
    return make(std::move(out), {a.node()}, [r, c](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) pg.data[i * c + j] += n.grad.data[j * r + i];
    });
}

Var softmax_rows(const Var& a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw std::invalid_argument("softmax_rows: need matrix");
    int r = av.dim(0), c = av.dim(1);
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
        double mx = av.m(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, av.m(i, j));
        double z = 0;
        for (int j = 0; j < c; ++j) z += std::exp(av.m(i, j) - mx);
        for (int j = 0; j < c; ++j) out.m(i, j) = std::exp(av.m(i, j) - mx) / z;
    }
    Tensor saved = out;
    return make(std::move(out), {a.node()}, [r, c, saved](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int i = 0; i < r; ++i) {
            double dot = 0;
            for (int j = 0; j < c; ++j) dot += n.grad.data[i * c + j] * saved.data[i * c + j];
            for (int j = 0; j < c; ++j)
                pg.data[i * c + j] += saved.data[i * c + j] * (n.grad.data[i * c + j] - dot);
        }
    });
}

Var add_row_bcast(const Var& a, const Var& row) {
    const Tensor& av = a.value();
    const Tensor& rv = row.value();
    if (av.rank() != 2 || rv.numel() != av.dim(1))
        throw std::invalid_argument("add_row_bcast: shape mismatch");
    int r = av.dim(0), c = av.dim(1);
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.m(i, j) = av.m(i, j) + rv[j];
    return make(std::move(out), {a.node(), row.node()}, [r, c](Node& n) {
        if (n.parents[0]->requires_grad) accum(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) pg[j] += n.grad.data[i * c + j];
        }
    });
}

namespace {

void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int oh, int ow, Tensor& col) {
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    // col shape: {C*kh*kw, oh*ow}
    std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                std::int64_t r = (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
                double* dst = col.data.data() + r * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        dst[oy * ow + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                                ? x.at(c, iy, ix)
                                                : 0.0;
                    }
                }
            }
}

void col2im_accum(const Tensor& col, int C, int H, int W, int kh, int kw, int stride, int pad,
                  int oh, int ow, Tensor& x) {
    std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                std::int64_t r = (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
                const double* src = col.data.data() + r * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        x.at(c, iy, ix) += src[oy * ow + ox];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0))
        throw std::invalid_argument("conv2d: shape mismatch " + xv.shape_str() + " w " +
                                    wv.shape_str());
    int Cin = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    int Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (b.value().numel() != Cout) throw std::invalid_argument("conv2d: bad bias");
    int oh = (H + 2 * pad - kh) / stride + 1;
    int ow = (W + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");
    int K = Cin * kh * kw;
    std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;

    Tensor col({K, static_cast<int>(ohw)});
    im2col(xv, kh, kw, stride, pad, oh, ow, col);
    Tensor out({Cout, oh, ow});
    EMap(out.data.data(), Cout, ohw) =
        ECMap(wv.data.data(), Cout, K) * ECMap(col.data.data(), K, ohw);
    for (int co = 0; co < Cout; ++co) {
        double bias = b.value()[co];
        for (std::int64_t i = 0; i < ohw; ++i) out.data[co * ohw + i] += bias;
    }

    Tensor ws = wv;
    Tensor cols = col;  // kept for dW
    return make(std::move(out), {x.node(), w.node(), b.node()},
                [Cin, H, W, Cout, kh, kw, stride, pad, oh, ow, K, ohw, ws, cols](Node& n) {
                    ECMap g(n.grad.data.data(), Cout, ohw);
                    if (n.parents[1]->requires_grad) {
                        Tensor& pg = n.parents[1]->ensure_grad();
                        EMap(pg.data.data(), Cout, K) +=
                            g * ECMap(cols.data.data(), K, ohw).transpose();
                    }
                    if (n.parents[2]->requires_grad) {
                        Tensor& pg = n.parents[2]->ensure_grad();
                        for (int co = 0; co < Cout; ++co) {
                            double acc = 0;
                            for (std::int64_t i = 0; i < ohw; ++i)
                                acc += n.grad.data[co * ohw + i];
                            pg[co] += acc;
                        }
                    }
                    if (n.parents[0]->requires_grad) {
                        Tensor dcol({K, static_cast<int>(ohw)});
                        EMap(dcol.data.data(), K, ohw) =
                            ECMap(ws.data.data(), Cout, K).transpose() * g;
                        Tensor& pg = n.parents[0]->ensure_grad();
                        col2im_accum(dcol, Cin, H, W, kh, kw, stride, pad, oh, ow, pg);
                    }
                });
}

namespace {

// bilinear weights for resize with align_corners=false semantics
struct Lerp {
    int i0, i1;
    double w0, w1;
};
Lerp lerp_coeff(int out_i, int in_n, double scale) {
    double src = (out_i + 0.5) * scale - 0.5;
    double f = std::floor(src);
    int i0 = static_cast<int>(f);
    double t = src - f;
    int i1 = i0 + 1;
    i0 = std::clamp(i0, 0, in_n - 1);
    i1 = std::clamp(i1, 0, in_n - 1);
    return {i0, i1, 1.0 - t, t};
}

}  // namespace

Var resize_bilinear(const Var& x, int oh, int ow) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("resize_bilinear: need CHW");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    double sy = static_cast<double>(H) / oh, sx = static_cast<double>(W) / ow;
    std::vector<Lerp> ly(oh), lx(ow);
    for (int i = 0; i < oh; ++i) ly[i] = lerp_coeff(i, H, sy);
    for (int i = 0; i < ow; ++i) lx[i] = lerp_coeff(i, W, sx);
    Tensor out({C, oh, ow});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < oh; ++y)
            for (int xo = 0; xo < ow; ++xo) {
                const Lerp &a = ly[y], &b2 = lx[xo];
                out.at(c, y, xo) = a.w0 * (b2.w0 * xv.at(c, a.i0, b2.i0) +
                                           b2.w1 * xv.at(c, a.i0, b2.i1)) +
                                   a.w1 * (b2.w0 * xv.at(c, a.i1, b2.i0) +
                                           b2.w1 * xv.at(c, a.i1, b2.i1));
            }
    return make(std::move(out), {x.node()}, [C, oh, ow, ly, lx](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < oh; ++y)
                for (int xo = 0; xo < ow; ++xo) {
                    const Lerp &a = ly[y], &b2 = lx[xo];
                    double g = n.grad.at(c, y, xo);
                    pg.at(c, a.i0, b2.i0) += g * a.w0 * b2.w0;
                    pg.at(c, a.i0, b2.i1) += g * a.w0 * b2.w1;
                    pg.at(c, a.i1, b2.i0) += g * a.w1 * b2.w0;
                    pg.at(c, a.i1, b2.i1) += g * a.w1 * b2.w1;
                }
    });
}

Var upsample2(const Var& x) {
    return resize_bilinear(x, x.value().dim(1) * 2, x.value().dim(2) * 2);
}

Var avgpool2(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("avgpool2: need CHW");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    int oh = H / 2, ow = W / 2;
    if (oh == 0 || ow == 0) throw std::invalid_argument("avgpool2: too small");
    Tensor out({C, oh, ow});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < oh; ++y)
            for (int xo = 0; xo < ow; ++xo)
                out.at(c, y, xo) = 0.25 * (xv.at(c, 2 * y, 2 * xo) + xv.at(c, 2 * y, 2 * xo + 1) +
                                           xv.at(c, 2 * y + 1, 2 * xo) +
                                           xv.at(c, 2 * y + 1, 2 * xo + 1));
    return make(std::move(out), {x.node()}, [C, oh, ow](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        int W2 = ow * 2;
        (void)W2;
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < oh; ++y)
                for (int xo = 0; xo < ow; ++xo) {
                    double g = 0.25 * n.grad.at(c, y, xo);
                    pg.at(c, 2 * y, 2 * xo) += g;
                    pg.at(c, 2 * y, 2 * xo + 1) += g;
                    pg.at(c, 2 * y + 1, 2 * xo) += g;
                    pg.at(c, 2 * y + 1, 2 * xo + 1) += g;
                }
    });
}

Var boxfilter3(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("boxfilter3: need CHW");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xo = 0; xo < W; ++xo) {
                int y0 = std::max(0, y - 1), y1 = std::min(H - 1, y + 1);
                int x0 = std::max(0, xo - 1), x1 = std::min(W - 1, xo + 1);
                double s = 0;
                for (int yy = y0; yy <= y1; ++yy)
                    for (int xx = x0; xx <= x1; ++xx) s += xv.at(c, yy, xx);
                out.at(c, y, xo) = s / ((y1 - y0 + 1) * (x1 - x0 + 1));
            }
    return make(std::move(out), {x.node()}, [C, H, W](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xo = 0; xo < W; ++xo) {
                    int y0 = std::max(0, y - 1), y1 = std::min(H - 1, y + 1);
                    int x0 = std::max(0, xo - 1), x1 = std::min(W - 1, xo + 1);
                    double g = n.grad.at(c, y, xo) / ((y1 - y0 + 1) * (x1 - x0 + 1));
                    for (int yy = y0; yy <= y1; ++yy)
                        for (int xx = x0; xx <= x1; ++xx) pg.at(c, yy, xx) += g;
                }
    });
}

Var global_avg(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("global_avg: need CHW");
    int C = xv.dim(0);
    std::int64_t hw = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
    Tensor out({C});
    for (int c = 0; c < C; ++c) {
        double s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += xv[c * hw + i];
        out[c] = s / static_cast<double>(hw);
    }
    return make(std::move(out), {x.node()}, [C, hw](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c) {
            double g = n.grad[c] / static_cast<double>(hw);
            for (std::int64_t i = 0; i < hw; ++i) pg[c * hw + i] += g;
        }
    });
}

Var grad_x(const Var& x) {
    const Tensor& xv = x.value();
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    if (W < 2) throw std::invalid_argument("grad_x: width < 2");
    Tensor out({C, H, W - 1});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xo = 0; xo < W - 1; ++xo)
                out.at(c, y, xo) = xv.at(c, y, xo + 1) - xv.at(c, y, xo);
    return make(std::move(out), {x.node()}, [C, H, W](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xo = 0; xo < W - 1; ++xo) {
                    double g = n.grad.at(c, y, xo);
                    pg.at(c, y, xo + 1) += g;
                    pg.at(c, y, xo) -= g;
                }
    });
}

Var grad_y(const Var& x) {
    const Tensor& xv = x.value();
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    if (H < 2) throw std::invalid_argument("grad_y: height < 2");
    Tensor out({C, H - 1, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H - 1; ++y)
            for (int xo = 0; xo < W; ++xo)
                out.at(c, y, xo) = xv.at(c, y + 1, xo) - xv.at(c, y, xo);
    return make(std::move(out), {x.node()}, [C, H, W](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H - 1; ++y)
                for (int xo = 0; xo < W; ++xo) {
                    double g = n.grad.at(c, y, xo);
                    pg.at(c, y + 1, xo) += g;
                    pg.at(c, y, xo) -= g;
                }
    });
}

Var grid_sample(const Var& img, const Var& coords) {
    const Tensor& iv = img.value();
    const Tensor& cv = coords.value();
    if (iv.rank() != 3 || cv.rank() != 3 || cv.dim(0) != 2)
        throw std::invalid_argument("grid_sample: need img {C,H,W} and coords {2,Ho,Wo}");
    int C = iv.dim(0), H = iv.dim(1), W = iv.dim(2);
    int oh = cv.dim(1), ow = cv.dim(2);
    Tensor out({C, oh, ow});
    std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;

    // border clamp; saved per-pixel corner indices + fractional weights
    std::vector<int> ix0(ohw), iy0(ohw), ix1(ohw), iy1(ohw);
    std::vector<double> fx(ohw), fy(ohw);
    for (std::int64_t p = 0; p < ohw; ++p) {
        double u = std::clamp(cv.data[p], 0.0, static_cast<double>(W - 1));
        double v = std::clamp(cv.data[ohw + p], 0.0, static_cast<double>(H - 1));
        int x0 = std::min(static_cast<int>(std::floor(u)), W - 2 >= 0 ? W - 2 : 0);
        int y0 = std::min(static_cast<int>(std::floor(v)), H - 2 >= 0 ? H - 2 : 0);
        x0 = std::max(x0, 0);
        y0 = std::max(y0, 0);
        ix0[p] = x0;
        iy0[p] = y0;
        ix1[p] = std::min(x0 + 1, W - 1);
        iy1[p] = std::min(y0 + 1, H - 1);
        fx[p] = u - x0;
        fy[p] = v - y0;
    }
    for (int c = 0; c < C; ++c)
        for (std::int64_t p = 0; p < ohw; ++p) {
            double i00 = iv.at(c, iy0[p], ix0[p]);
            double i01 = iv.at(c, iy0[p], ix1[p]);
            double i10 = iv.at(c, iy1[p], ix0[p]);
            double i11 = iv.at(c, iy1[p], ix1[p]);
            out.data[c * ohw + p] = (1 - fy[p]) * ((1 - fx[p]) * i00 + fx[p] * i01) +
                                    fy[p] * ((1 - fx[p]) * i10 + fx[p] * i11);
        }

    // clamping makes the coord gradient zero outside the border; save masks
    std::vector<double> du_on(ohw), dv_on(ohw);
    for (std::int64_t p = 0; p < ohw; ++p) {
        du_on[p] = (cv.data[p] > 0.0 && cv.data[p] < W - 1) ? 1.0 : 0.0;
        dv_on[p] = (cv.data[ohw + p] > 0.0 && cv.data[ohw + p] < H - 1) ? 1.0 : 0.0;
    }
    Tensor is = iv;
    return make(std::move(out), {img.node(), coords.node()},
                [C, ohw, ix0, iy0, ix1, iy1, fx, fy, du_on, dv_on, is](Node& n) {
                    if (n.parents[0]->requires_grad) {
                        Tensor& pg = n.parents[0]->ensure_grad();
                        for (int c = 0; c < C; ++c)
                            for (std::int64_t p = 0; p < ohw; ++p) {
                                double g = n.grad.data[c * ohw + p];
                                pg.at(c, iy0[p], ix0[p]) += g * (1 - fy[p]) * (1 - fx[p]);
                                pg.at(c, iy0[p], ix1[p]) += g * (1 - fy[p]) * fx[p];
                                pg.at(c, iy1[p], ix0[p]) += g * fy[p] * (1 - fx[p]);
                                pg.at(c, iy1[p], ix1[p]) += g * fy[p] * fx[p];
                            }
                    }
                    if (n.parents[1]->requires_grad) {
                        Tensor& pg = n.parents[1]->ensure_grad();
                        for (int c = 0; c < C; ++c)
                            for (std::int64_t p = 0; p < ohw; ++p) {
                                double g = n.grad.data[c * ohw + p];
                                double i00 = is.at(c, iy0[p], ix0[p]);
                                double i01 = is.at(c, iy0[p], ix1[p]);
                                double i10 = is.at(c, iy1[p], ix0[p]);
                                double i11 = is.at(c, iy1[p], ix1[p]);
                                double du = (1 - fy[p]) * (i01 - i00) + fy[p] * (i11 - i10);
                                double dv = (1 - fx[p]) * (i10 - i00) + fx[p] * (i11 - i01);
                                pg.data[p] += g * du * du_on[p];
                                pg.data[ohw + p] += g * dv * dv_on[p];
                            }
                    }
                });
}

Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps,
                    Tensor* out_mean, Tensor* out_var) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("batchnorm: need CHW");
    int C = xv.dim(0);
    std::int64_t hw = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
    if (gamma.value().numel() != C || beta.value().numel() != C)
        throw std::invalid_argument("batchnorm: bad affine params");
    Tensor mu({C}), var({C}), xhat(xv.shape), out(xv.shape);
    for (int c = 0; c < C; ++c) {
        double s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += xv[c * hw + i];
        mu[c] = s / static_cast<double>(hw);
        double v = 0;
        for (std::int64_t i = 0; i < hw; ++i) {
            double d = xv[c * hw + i] - mu[c];
            v += d * d;
        }
        var[c] = v / static_cast<double>(hw);
        double inv = 1.0 / std::sqrt(var[c] + eps);
        for (std::int64_t i = 0; i < hw; ++i) {
            xhat[c * hw + i] = (xv[c * hw + i] - mu[c]) * inv;
            out[c * hw + i] = gamma.value()[c] * xhat[c * hw + i] + beta.value()[c];
        }
    }
    if (out_mean) *out_mean = mu;
    if (out_var) *out_var = var;
    Tensor gsave = gamma.value();
    return make(std::move(out), {x.node(), gamma.node(), beta.node()},
                [C, hw, var, xhat, gsave, eps](Node& n) {
                    if (n.parents[1]->requires_grad) {
                        Tensor& pg = n.parents[1]->ensure_grad();
                        for (int c = 0; c < C; ++c) {
                            double acc = 0;
                            for (std::int64_t i = 0; i < hw; ++i)
                                acc += n.grad[c * hw + i] * xhat[c * hw + i];
                            pg[c] += acc;
                        }
                    }
                    if (n.parents[2]->requires_grad) {
                        Tensor& pg = n.parents[2]->ensure_grad();
                        for (int c = 0; c < C; ++c) {
                            double acc = 0;
                            for (std::int64_t i = 0; i < hw; ++i) acc += n.grad[c * hw + i];
                            pg[c] += acc;
                        }
                    }
                    if (n.parents[0]->requires_grad) {
                        Tensor& pg = n.parents[0]->ensure_grad();
                        double N = static_cast<double>(hw);
                        for (int c = 0; c < C; ++c) {
                            double inv = 1.0 / std::sqrt(var[c] + eps);
                            double sum_g = 0, sum_gx = 0;
                            for (std::int64_t i = 0; i < hw; ++i) {
                                sum_g += n.grad[c * hw + i];
                                sum_gx += n.grad[c * hw + i] * xhat[c * hw + i];
                            }
                            for (std::int64_t i = 0; i < hw; ++i) {
                                double g = n.grad[c * hw + i];
                                pg[c * hw + i] += gsave[c] * inv *
                                                  (g - sum_g / N - xhat[c * hw + i] * sum_gx / N);
                            }
                        }
                    }
                });
}

Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& mean,
                   const Tensor& var, double eps) {
    const Tensor& xv = x.value();
    int C = xv.dim(0);
    std::int64_t hw = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
    Tensor out(xv.shape), xhat(xv.shape);
    for (int c = 0; c < C; ++c) {
        double inv = 1.0 / std::sqrt(var[c] + eps);
        for (std::int64_t i = 0; i < hw; ++i) {
            xhat[c * hw + i] = (xv[c * hw + i] - mean[c]) * inv;
            out[c * hw + i] = gamma.value()[c] * xhat[c * hw + i] + beta.value()[c];
        }
    }
    Tensor gsave = gamma.value(), vsave = var;
    return make(std::move(out), {x.node(), gamma.node(), beta.node()},
                [C, hw, xhat, gsave, vsave, eps](Node& n) {
                    if (n.parents[1]->requires_grad) {
                        Tensor& pg = n.parents[1]->ensure_grad();
                        for (int c = 0; c < C; ++c) {
                            double acc = 0;
                            for (std::int64_t i = 0; i < hw; ++i)
                                acc += n.grad[c * hw + i] * xhat[c * hw + i];
                            pg[c] += acc;
                        }
                    }
                    if (n.parents[2]->requires_grad) {
                        Tensor& pg = n.parents[2]->ensure_grad();
                        for (int c = 0; c < C; ++c) {
                            double acc = 0;
                            for (std::int64_t i = 0; i < hw; ++i) acc += n.grad[c * hw + i];
                            pg[c] += acc;
                        }
                    }
                    if (n.parents[0]->requires_grad) {
                        Tensor& pg = n.parents[0]->ensure_grad();
                        for (int c = 0; c < C; ++c) {
                            double s = gsave[c] / std::sqrt(vsave[c] + eps);
                            for (std::int64_t i = 0; i < hw; ++i)
                                pg[c * hw + i] += n.grad[c * hw + i] * s;
                        }
                    }
                });
}

}  // namespace ag
}  // namespace uniperc
