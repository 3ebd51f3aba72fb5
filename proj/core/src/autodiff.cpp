#include "nrseg/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "nrseg/common.hpp"

namespace nrseg::ad {

namespace {

std::atomic<int64_t> g_seq{0};

Var make_node(Tensor value, std::vector<Var> parents) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    n->seq = ++g_seq;
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw DimensionError(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                             " vs " + b->value.shape_str());
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

}  // namespace

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->seq = ++g_seq;
    return n;
}

Var parameter(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    n->seq = ++g_seq;
    return n;
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* pa = a.get();
        Node* pb = b.get();
        n->backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i];
            }
        };
    }
    return n;
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* pa = a.get();
        Node* pb = b.get();
        n->backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] -= self.grad[i];
            }
        };
    }
    return n;
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* pa = a.get();
        Node* pb = b.get();
        n->backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i)
                    pa->grad[i] += self.grad[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i)
                    pb->grad[i] += self.grad[i] * pa->value[i];
            }
        };
    }
    return n;
}

Var div(const Var& a, const Var& b) {
    check_same_shape(a, b, "div");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* pa = a.get();
        Node* pb = b.get();
        n->backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i)
                    pa->grad[i] += self.grad[i] / pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i) {
                    double bv = pb->value[i];
                    pb->grad[i] -= self.grad[i] * pa->value[i] / (bv * bv);
                }
            }
        };
    }
    return n;
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* pa = a.get();
        n->backward_fn = [pa](Node& self) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
        };
    }
    return n;
}

Var mul_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* pa = a.get();
        n->backward_fn = [pa, s](Node& self) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += s * self.grad[i];
        };
    }
    return n;
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

namespace {

template <typename F, typename DF>
Var unary_op(const Var& a, F f, DF df) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(out[i]);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* pa = a.get();
        n->backward_fn = [pa, df](Node& self) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                pa->grad[i] += self.grad[i] * df(pa->value[i], self.value[i]);
        };
    }
    return n;
}

}  // namespace

Var relu(const Var& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var log_op(const Var& a) {
    return unary_op(
        a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Var exp_op(const Var& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
}

Var abs_op(const Var& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var lgamma_op(const Var& a) {
    return unary_op(
        a, [](double x) { return std::lgamma(x); },
        [](double x, double) { return boost::math::digamma(x); });
}

Var digamma_op(const Var& a) {
    return unary_op(
        a, [](double x) { return boost::math::digamma(x); },
        [](double x, double) { return boost::math::trigamma(x); });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    auto n = make_node(Tensor::scalar(s), {a});
    if (n->requires_grad) {
        Node* pa = a.get();
        n->backward_fn = [pa](Node& self) {
            pa->ensure_grad();
            double g = self.grad[0];
            for (int64_t i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
        };
    }
    return n;
}

Var mean(const Var& a) {
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var channel_sum(const Var& a) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw DimensionError("channel_sum expects [C,H,W]");
    int c = sh[0], h = sh[1], w = sh[2];
    Tensor out({1, h, w});
    int64_t hw = static_cast<int64_t>(h) * w;
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) out[i] += a->value[ci * hw + i];
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* pa = a.get();
        n->backward_fn = [pa, c, hw](Node& self) {
            pa->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < hw; ++i) pa->grad[ci * hw + i] += self.grad[i];
        };
    }
    return n;
}

Var repeat_channel(const Var& a, int c) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3 || sh[0] != 1) throw DimensionError("repeat_channel expects [1,H,W]");
    int h = sh[1], w = sh[2];
    int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) out[ci * hw + i] = a->value[i];
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* pa = a.get();
        n->backward_fn = [pa, c, hw](Node& self) {
            pa->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < hw; ++i) pa->grad[i] += self.grad[ci * hw + i];
        };
    }
    return n;
}

Var gather_channels(const Var& a, const std::vector<int>& idx) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw DimensionError("gather_channels expects [C,H,W]");
    int h = sh[1], w = sh[2];
    int64_t hw = static_cast<int64_t>(h) * w;
    for (int i : idx)
        if (i < 0 || i >= sh[0]) throw DimensionError("gather_channels: index out of range");
    Tensor out({static_cast<int>(idx.size()), h, w});
    for (size_t m = 0; m < idx.size(); ++m)
        std::copy_n(a->value.data() + idx[m] * hw, hw, out.data() + static_cast<int64_t>(m) * hw);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* pa = a.get();
        std::vector<int> ix = idx;
        n->backward_fn = [pa, ix, hw](Node& self) {
            pa->ensure_grad();
            for (size_t m = 0; m < ix.size(); ++m)
                for (int64_t i = 0; i < hw; ++i)
                    pa->grad[ix[m] * hw + i] += self.grad[static_cast<int64_t>(m) * hw + i];
        };
    }
    return n;
}

Var concat_channels(const Var& a, const Var& b) {
    const auto& sa = a->value.shape();
    const auto& sb = b->value.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[1] != sb[1] || sa[2] != sb[2])
        throw DimensionError("concat_channels: incompatible shapes");
    int ca = sa[0], cb = sb[0], h = sa[1], w = sa[2];
    int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out({ca + cb, h, w});
    std::copy_n(a->value.data(), ca * hw, out.data());
    std::copy_n(b->value.data(), cb * hw, out.data() + ca * hw);
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* pa = a.get();
        Node* pb = b.get();
        n->backward_fn = [pa, pb, ca, cb, hw](Node& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (int64_t i = 0; i < ca * hw; ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < cb * hw; ++i) pb->grad[i] += self.grad[ca * hw + i];
            }
        };
    }
    return n;
}

Var linear_map(const Var& x, std::shared_ptr<const SparseLinear> m) {
    if (x->value.numel() != m->in_numel)
        throw DimensionError("linear_map: input numel mismatch");
    Tensor out(m->out_shape);
    int64_t rows = out.numel();
    for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int64_t k = m->row_offsets[r]; k < m->row_offsets[r + 1]; ++k)
            acc += m->weights[k] * x->value[m->col_idx[k]];
        out[r] = acc;
    }
    auto n = make_node(std::move(out), {x});
    if (n->requires_grad) {
        Node* px = x.get();
        n->backward_fn = [px, m](Node& self) {
            px->ensure_grad();
            int64_t rows = self.value.numel();
            for (int64_t r = 0; r < rows; ++r) {
                double g = self.grad[r];
                if (g == 0.0) continue;
                for (int64_t k = m->row_offsets[r]; k < m->row_offsets[r + 1]; ++k)
                    px->grad[m->col_idx[k]] += m->weights[k] * g;
            }
        };
    }
    return n;
}

namespace {

// im2col for CHW input; col is [OH*OW, C*kh*kw], row-major.
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int oh, int ow,
            std::vector<double>& col) {
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    int patch = c * kh * kw;
    col.assign(static_cast<size_t>(oh) * ow * patch, 0.0);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            double* dst = col.data() + (static_cast<int64_t>(oy) * ow + ox) * patch;
            int iy0 = oy * stride - pad;
            int ix0 = ox * stride - pad;
            for (int ci = 0; ci < c; ++ci) {
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = iy0 + ky;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = ix0 + kx;
                        double v = 0.0;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = x.at(ci, iy, ix);
                        dst[(ci * kh + ky) * kw + kx] = v;
                    }
                }
            }
        }
    }
}

void col2im_accum(const std::vector<double>& dcol, int c, int h, int w, int kh, int kw,
                  int stride, int pad, int oh, int ow, Tensor& dx) {
    int patch = c * kh * kw;
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const double* src = dcol.data() + (static_cast<int64_t>(oy) * ow + ox) * patch;
            int iy0 = oy * stride - pad;
            int ix0 = ox * stride - pad;
            for (int ci = 0; ci < c; ++ci) {
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = iy0 + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = ix0 + kx;
                        if (ix < 0 || ix >= w) continue;
                        dx.at(ci, iy, ix) += src[(ci * kh + ky) * kw + kx];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 3 || ws.size() != 4) throw DimensionError("conv2d: expects CHW input, OCKK weight");
    if (xs[0] != ws[1]) throw DimensionError("conv2d: channel mismatch");
    if (b->value.numel() != ws[0]) throw DimensionError("conv2d: bias size mismatch");
    int c = xs[0], h = xs[1], wd = xs[2];
    int o = ws[0], kh = ws[2], kw = ws[3];
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    int patch = c * kh * kw;

    auto col = std::make_shared<std::vector<double>>();
    im2col(x->value, kh, kw, stride, pad, oh, ow, *col);

    Tensor out({o, oh, ow});
    {
        CMapMat colm(col->data(), static_cast<int64_t>(oh) * ow, patch);
        CMapMat wm(w->value.data(), o, patch);
        RowMat y = colm * wm.transpose();  // [OH*OW, O]
        for (int oc = 0; oc < o; ++oc) {
            double bias = b->value[oc];
            for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i)
                out[oc * static_cast<int64_t>(oh) * ow + i] = y(i, oc) + bias;
        }
    }

    auto n = make_node(std::move(out), {x, w, b});
    if (n->requires_grad) {
        Node* px = x.get();
        Node* pw = w.get();
        Node* pb = b.get();
        n->backward_fn = [px, pw, pb, col, c, h, wd, o, kh, kw, stride, pad, oh, ow,
                          patch](Node& self) {
            int64_t ohw = static_cast<int64_t>(oh) * ow;
            // dY as [OH*OW, O]
            RowMat dy(ohw, o);
            for (int oc = 0; oc < o; ++oc)
                for (int64_t i = 0; i < ohw; ++i) dy(i, oc) = self.grad[oc * ohw + i];
            if (pw->requires_grad) {
                pw->ensure_grad();
                CMapMat colm(col->data(), ohw, patch);
                RowMat dw = dy.transpose() * colm;  // [O, patch]
                for (int64_t i = 0; i < dw.size(); ++i)
                    pw->grad[i] += dw(i / patch, i % patch);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int oc = 0; oc < o; ++oc) {
                    double s = 0.0;
                    for (int64_t i = 0; i < ohw; ++i) s += dy(i, oc);
                    pb->grad[oc] += s;
                }
            }
            if (px->requires_grad) {
                px->ensure_grad();
                CMapMat wm(pw->value.data(), o, patch);
                RowMat dcol = dy * wm;  // [OH*OW, patch]
                std::vector<double> dcolv(dcol.data(), dcol.data() + dcol.size());
                col2im_accum(dcolv, c, h, wd, kh, kw, stride, pad, oh, ow, px->grad);
            }
        };
    }
    return n;
}

Var instance_norm(const Var& x, double eps) {
    const auto& sh = x->value.shape();
    if (sh.size() != 3) throw DimensionError("instance_norm: expects [C,H,W]");
    int c = sh[0];
    int64_t hw = static_cast<int64_t>(sh[1]) * sh[2];
    Tensor out(sh);
    auto inv_sigma = std::make_shared<std::vector<double>>(c);
    for (int ci = 0; ci < c; ++ci) {
        const double* src = x->value.data() + ci * hw;
        double mean = 0.0;
        for (int64_t i = 0; i < hw; ++i) mean += src[i];
        mean /= hw;
        double var = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
            double d = src[i] - mean;
            var += d * d;
        }
        var /= hw;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<size_t>(ci)] = is;
        double* dst = out.data() + ci * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = (src[i] - mean) * is;
    }
    auto n = make_node(std::move(out), {x});
    if (n->requires_grad) {
        Node* px = x.get();
        n->backward_fn = [px, c, hw, inv_sigma](Node& self) {
            px->ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                const double* y = self.value.data() + ci * hw;
                const double* dy = self.grad.data() + ci * hw;
                double* dx = px->grad.data() + ci * hw;
                double mean_dy = 0.0, mean_dyy = 0.0;
                for (int64_t i = 0; i < hw; ++i) {
                    mean_dy += dy[i];
                    mean_dyy += dy[i] * y[i];
                }
                mean_dy /= hw;
                mean_dyy /= hw;
                double is = (*inv_sigma)[static_cast<size_t>(ci)];
                for (int64_t i = 0; i < hw; ++i)
                    dx[i] += is * (dy[i] - mean_dy - y[i] * mean_dyy);
            }
        };
    }
    return n;
}

Var detach(const Var& a) { return constant(a->value); }

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw DimensionError("backward: root must be scalar");
    if (!root->requires_grad) return;

    // Collect reachable grad-requiring subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.push_back(p.get());
            }
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->seq > b->seq; });

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (Node* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

}  // namespace nrseg::ad
