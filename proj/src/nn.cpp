#include "pcdf/nn.hpp"

#include <algorithm>
#include <cmath>

namespace pcdf::nn {

namespace {

void check(bool cond, const char* msg) {
    if (!cond) throw ValidationError(std::string("nn: ") + msg);
}

int out_extent(int in, int stride) { return (in - 1) / stride + 1; }

} // namespace

void Graph::backward(Node* loss) {
    check(loss->value.numel() == 1, "backward expects a scalar loss");
    loss->ensure_grad();
    loss->grad.data[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        if (!n->requires_grad || n->grad.data.empty()) continue;
        if (n->backprop) n->backprop(*n);
        if (n->origin && n->origin->trainable) {
            Tensor& g = n->origin->grad;
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n->grad.data[i];
        }
    }
}

Param* ParamStore::create(const std::string& name, std::vector<int> shape) {
    check(by_name_.find(name) == by_name_.end(), "duplicate parameter name");
    params_.push_back(std::make_unique<Param>());
    Param* p = params_.back().get();
    p->name = name;
    p->value = Tensor::zeros(shape);
    p->grad = Tensor::zeros(shape);
    p->momentum = Tensor::zeros(std::move(shape));
    by_name_[name] = p;
    return p;
}

Param* ParamStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

size_t ParamStore::total_scalars() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (const auto& p : params_)
        std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
}

bool sgd_step(ParamStore& store, const SgdConfig& cfg) {
    for (const auto& p : store.all())
        for (double g : p->grad.data)
            if (!std::isfinite(g)) return false;
    for (const auto& p : store.all()) {
        if (!p->trainable) continue;
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            double g = p->grad.data[i] + cfg.weight_decay * p->value.data[i];
            p->momentum.data[i] = cfg.momentum * p->momentum.data[i] + g;
            p->value.data[i] -= cfg.lr * p->momentum.data[i];
        }
    }
    store.zero_grad();
    return true;
}

void fill_kaiming(Rng& rng, Tensor& t, int fan_in) {
    double std = std::sqrt(2.0 / std::max(1, fan_in));
    for (double& v : t.data) v = rng.normal(0.0, std);
}

void fill_normal(Rng& rng, Tensor& t, double stddev) {
    for (double& v : t.data) v = rng.normal(0.0, stddev);
}

Node* input(Graph& g, Tensor v) { return g.alloc(std::move(v), false); }

Node* param(Graph& g, Param& p) {
    auto it = g.param_nodes_.find(&p);
    if (it != g.param_nodes_.end()) return it->second;
    Node* n = g.alloc(p.value, p.trainable);
    n->origin = &p;
    g.param_nodes_[&p] = n;
    return n;
}

double scalar_of(const Node* n) { return n->value.item(); }

// ---- conv2d ----------------------------------------------------------------

Node* conv2d(Graph& g, Node* x, Node* w, Node* b, int stride) {
    check(x->value.ndim() == 4 && w->value.ndim() == 4, "conv2d expects 4-d tensors");
    const int N = x->value.dim(0), Cin = x->value.dim(1),
              H = x->value.dim(2), W = x->value.dim(3);
    const int Cout = w->value.dim(0);
    check(w->value.dim(1) == Cin && w->value.dim(2) == 3 && w->value.dim(3) == 3,
          "conv2d kernel shape mismatch");
    check(b->value.ndim() == 1 && b->value.dim(0) == Cout, "conv2d bias shape mismatch");
    const int Ho = out_extent(H, stride), Wo = out_extent(W, stride);

    Tensor out({N, Cout, Ho, Wo});
    {
        const double* xd = x->value.data.data();
        const double* wd = w->value.data.data();
        const double* bd = b->value.data.data();
        double* yd = out.data.data();
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < Cout; ++oc) {
                double* yp = yd + (static_cast<size_t>(n) * Cout + oc) * Ho * Wo;
                for (int i = 0; i < Ho * Wo; ++i) yp[i] = bd[oc];
                for (int ic = 0; ic < Cin; ++ic) {
                    const double* xp = xd + (static_cast<size_t>(n) * Cin + ic) * H * W;
                    const double* wp = wd + ((static_cast<size_t>(oc) * Cin + ic) * 9);
                    for (int kh = 0; kh < 3; ++kh)
                        for (int kw = 0; kw < 3; ++kw) {
                            const double wv = wp[kh * 3 + kw];
                            if (wv == 0.0) continue;
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh * stride + kh - 1;
                                if (ih < 0 || ih >= H) continue;
                                const double* xrow = xp + static_cast<size_t>(ih) * W;
                                double* yrow = yp + static_cast<size_t>(oh) * Wo;
                                for (int ow = 0; ow < Wo; ++ow) {
                                    const int iw = ow * stride + kw - 1;
                                    if (iw < 0 || iw >= W) continue;
                                    yrow[ow] += wv * xrow[iw];
                                }
                            }
                        }
                }
            }
    }

    Node* y = g.alloc(std::move(out), x->requires_grad || w->requires_grad || b->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, w, b, N, Cin, H, W, Cout, Ho, Wo, stride](Node& self) {
            const double* gd = self.grad.data.data();
            const double* xd = x->value.data.data();
            const double* wd = w->value.data.data();
            if (x->requires_grad) {
                x->ensure_grad();
                double* gx = x->grad.data.data();
                for (int n = 0; n < N; ++n)
                    for (int oc = 0; oc < Cout; ++oc) {
                        const double* gp = gd + (static_cast<size_t>(n) * Cout + oc) * Ho * Wo;
                        for (int ic = 0; ic < Cin; ++ic) {
                            double* gxp = gx + (static_cast<size_t>(n) * Cin + ic) * H * W;
                            const double* wp = wd + ((static_cast<size_t>(oc) * Cin + ic) * 9);
                            for (int kh = 0; kh < 3; ++kh)
                                for (int kw = 0; kw < 3; ++kw) {
                                    const double wv = wp[kh * 3 + kw];
                                    if (wv == 0.0) continue;
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * stride + kh - 1;
                                        if (ih < 0 || ih >= H) continue;
                                        double* gxrow = gxp + static_cast<size_t>(ih) * W;
                                        const double* grow = gp + static_cast<size_t>(oh) * Wo;
                                        for (int ow = 0; ow < Wo; ++ow) {
                                            const int iw = ow * stride + kw - 1;
                                            if (iw < 0 || iw >= W) continue;
                                            gxrow[iw] += wv * grow[ow];
                                        }
                                    }
                                }
                        }
                    }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                double* gw = w->grad.data.data();
                for (int oc = 0; oc < Cout; ++oc)
                    for (int ic = 0; ic < Cin; ++ic) {
                        double* gwp = gw + ((static_cast<size_t>(oc) * Cin + ic) * 9);
                        for (int n = 0; n < N; ++n) {
                            const double* gp = gd + (static_cast<size_t>(n) * Cout + oc) * Ho * Wo;
                            const double* xp = xd + (static_cast<size_t>(n) * Cin + ic) * H * W;
                            for (int kh = 0; kh < 3; ++kh)
                                for (int kw = 0; kw < 3; ++kw) {
                                    double acc = 0.0;
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * stride + kh - 1;
                                        if (ih < 0 || ih >= H) continue;
                                        const double* xrow = xp + static_cast<size_t>(ih) * W;
                                        const double* grow = gp + static_cast<size_t>(oh) * Wo;
                                        for (int ow = 0; ow < Wo; ++ow) {
                                            const int iw = ow * stride + kw - 1;
                                            if (iw < 0 || iw >= W) continue;
                                            acc += xrow[iw] * grow[ow];
                                        }
                                    }
                                    gwp[kh * 3 + kw] += acc;
                                }
                        }
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                double* gb = b->grad.data.data();
                for (int n = 0; n < N; ++n)
                    for (int oc = 0; oc < Cout; ++oc) {
                        const double* gp = gd + (static_cast<size_t>(n) * Cout + oc) * Ho * Wo;
                        double acc = 0.0;
                        for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
                        gb[oc] += acc;
                    }
            }
        };
    }
    return y;
}

// ---- elementwise -----------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Node* unary_op(Graph& g, Node* x, Fwd fwd, Bwd bwd) {
    Tensor out(x->value.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(x->value.data[i]);
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, bwd](Node& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.grad.data.size(); ++i)
                x->grad.data[i] += self.grad.data[i] * bwd(x->value.data[i], self.value.data[i]);
        };
    }
    return y;
}

} // namespace

Node* relu(Graph& g, Node* x) {
    return unary_op(g, x,
        [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Node* sigmoid(Graph& g, Node* x) {
    return unary_op(g, x,
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Node* scale(Graph& g, Node* x, double c) {
    return unary_op(g, x,
        [c](double v) { return c * v; },
        [c](double, double) { return c; });
}

Node* pow_int(Graph& g, Node* x, int k) {
    check(k >= 1, "pow_int requires k >= 1");
    return unary_op(g, x,
        [k](double v) { return std::pow(v, k); },
        [k](double v, double) { return k * std::pow(v, k - 1); });
}

namespace {

template <typename FwdElem>
Node* binary_same_shape(Graph& g, Node* a, Node* b, FwdElem fwd, double da_scale, double db_scale, bool is_mul) {
    check(a->value.same_shape(b->value), "elementwise op shape mismatch");
    Tensor out(a->value.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = fwd(a->value.data[i], b->value.data[i]);
    Node* y = g.alloc(std::move(out), a->requires_grad || b->requires_grad);
    if (y->requires_grad) {
        y->backprop = [a, b, da_scale, db_scale, is_mul](Node& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < self.grad.data.size(); ++i)
                    a->grad.data[i] += self.grad.data[i] * (is_mul ? b->value.data[i] : da_scale);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < self.grad.data.size(); ++i)
                    b->grad.data[i] += self.grad.data[i] * (is_mul ? a->value.data[i] : db_scale);
            }
        };
    }
    return y;
}

} // namespace

Node* add(Graph& g, Node* a, Node* b) {
    return binary_same_shape(g, a, b, [](double x, double y) { return x + y; }, 1.0, 1.0, false);
}

Node* sub(Graph& g, Node* a, Node* b) {
    return binary_same_shape(g, a, b, [](double x, double y) { return x - y; }, 1.0, -1.0, false);
}

Node* mul(Graph& g, Node* a, Node* b) {
    return binary_same_shape(g, a, b, [](double x, double y) { return x * y; }, 0.0, 0.0, true);
}

// ---- shape ops -------------------------------------------------------------

Node* concat_channels(Graph& g, const std::vector<Node*>& xs) {
    check(!xs.empty(), "concat_channels on empty list");
    const int N = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
    int Ctot = 0;
    bool rg = false;
    for (Node* x : xs) {
        check(x->value.ndim() == 4 && x->value.dim(0) == N &&
              x->value.dim(2) == H && x->value.dim(3) == W,
              "concat_channels shape mismatch");
        Ctot += x->value.dim(1);
        rg = rg || x->requires_grad;
    }
    Tensor out({N, Ctot, H, W});
    const size_t plane = static_cast<size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        int coff = 0;
        for (Node* x : xs) {
            const int C = x->value.dim(1);
            std::copy_n(x->value.data.begin() + static_cast<long>(static_cast<size_t>(n) * C * plane),
                        static_cast<size_t>(C) * plane,
                        out.data.begin() + static_cast<long>((static_cast<size_t>(n) * Ctot + coff) * plane));
            coff += C;
        }
    }
    Node* y = g.alloc(std::move(out), rg);
    if (rg) {
        std::vector<Node*> parents = xs;
        y->backprop = [parents, N, Ctot, plane](Node& self) {
            for (int n = 0; n < N; ++n) {
                int coff = 0;
                for (Node* x : parents) {
                    const int C = x->value.dim(1);
                    if (x->requires_grad) {
                        x->ensure_grad();
                        const double* src = self.grad.data.data() +
                            (static_cast<size_t>(n) * Ctot + coff) * plane;
                        double* dst = x->grad.data.data() + static_cast<size_t>(n) * C * plane;
                        for (size_t i = 0; i < static_cast<size_t>(C) * plane; ++i) dst[i] += src[i];
                    }
                    coff += C;
                }
            }
        };
    }
    return y;
}

Node* slice_channels(Graph& g, Node* x, int c0, int c1) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    check(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels out of range");
    const int Cs = c1 - c0;
    const size_t plane = static_cast<size_t>(H) * W;
    Tensor out({N, Cs, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(x->value.data.begin() + static_cast<long>((static_cast<size_t>(n) * C + c0) * plane),
                    static_cast<size_t>(Cs) * plane,
                    out.data.begin() + static_cast<long>(static_cast<size_t>(n) * Cs * plane));
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, N, C, c0, Cs, plane](Node& self) {
            x->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const double* src = self.grad.data.data() + static_cast<size_t>(n) * Cs * plane;
                double* dst = x->grad.data.data() + (static_cast<size_t>(n) * C + c0) * plane;
                for (size_t i = 0; i < static_cast<size_t>(Cs) * plane; ++i) dst[i] += src[i];
            }
        };
    }
    return y;
}

Node* global_avg_pool(Graph& g, Node* x) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = static_cast<size_t>(H) * W;
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = x->value.data.data() + (static_cast<size_t>(n) * C + c) * plane;
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) acc += p[i];
            out.data[static_cast<size_t>(n) * C + c] = acc / static_cast<double>(plane);
        }
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, N, C, plane](Node& self) {
            x->ensure_grad();
            const double inv = 1.0 / static_cast<double>(plane);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double gv = self.grad.data[static_cast<size_t>(n) * C + c] * inv;
                    double* p = x->grad.data.data() + (static_cast<size_t>(n) * C + c) * plane;
                    for (size_t i = 0; i < plane; ++i) p[i] += gv;
                }
        };
    }
    return y;
}

Node* global_max_pool(Graph& g, Node* x) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = static_cast<size_t>(H) * W;
    Tensor out({N, C});
    auto argmax = std::make_shared<std::vector<size_t>>(static_cast<size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = x->value.data.data() + (static_cast<size_t>(n) * C + c) * plane;
            size_t best = 0;
            for (size_t i = 1; i < plane; ++i)
                if (p[i] > p[best]) best = i;
            out.data[static_cast<size_t>(n) * C + c] = p[best];
            (*argmax)[static_cast<size_t>(n) * C + c] = best;
        }
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, N, C, plane, argmax](Node& self) {
            x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t nc = static_cast<size_t>(n) * C + c;
                    x->grad.data[nc * plane + (*argmax)[nc]] += self.grad.data[nc];
                }
        };
    }
    return y;
}

Node* linear(Graph& g, Node* x, Node* w, Node* b) {
    check(x->value.ndim() == 2 && w->value.ndim() == 2 && b->value.ndim() == 1,
          "linear expects [N,Din],[Dout,Din],[Dout]");
    const int N = x->value.dim(0), Din = x->value.dim(1), Dout = w->value.dim(0);
    check(w->value.dim(1) == Din && b->value.dim(0) == Dout, "linear shape mismatch");
    Tensor out({N, Dout});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < Dout; ++o) {
            const double* xr = x->value.data.data() + static_cast<size_t>(n) * Din;
            const double* wr = w->value.data.data() + static_cast<size_t>(o) * Din;
            double acc = b->value.data[o];
            for (int i = 0; i < Din; ++i) acc += xr[i] * wr[i];
            out.data[static_cast<size_t>(n) * Dout + o] = acc;
        }
    Node* y = g.alloc(std::move(out), x->requires_grad || w->requires_grad || b->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, w, b, N, Din, Dout](Node& self) {
            const double* gd = self.grad.data.data();
            if (x->requires_grad) {
                x->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < Dout; ++o) {
                        const double gv = gd[static_cast<size_t>(n) * Dout + o];
                        const double* wr = w->value.data.data() + static_cast<size_t>(o) * Din;
                        double* gx = x->grad.data.data() + static_cast<size_t>(n) * Din;
                        for (int i = 0; i < Din; ++i) gx[i] += gv * wr[i];
                    }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < Dout; ++o) {
                        const double gv = gd[static_cast<size_t>(n) * Dout + o];
                        const double* xr = x->value.data.data() + static_cast<size_t>(n) * Din;
                        double* gw = w->grad.data.data() + static_cast<size_t>(o) * Din;
                        for (int i = 0; i < Din; ++i) gw[i] += gv * xr[i];
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < Dout; ++o)
                        b->grad.data[o] += gd[static_cast<size_t>(n) * Dout + o];
            }
        };
    }
    return y;
}

Node* concat_cols(Graph& g, Node* a, Node* b) {
    check(a->value.ndim() == 2 && b->value.ndim() == 2 && a->value.dim(0) == b->value.dim(0),
          "concat_cols shape mismatch");
    const int N = a->value.dim(0), D1 = a->value.dim(1), D2 = b->value.dim(1);
    Tensor out({N, D1 + D2});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a->value.data.begin() + static_cast<long>(static_cast<size_t>(n) * D1), D1,
                    out.data.begin() + static_cast<long>(static_cast<size_t>(n) * (D1 + D2)));
        std::copy_n(b->value.data.begin() + static_cast<long>(static_cast<size_t>(n) * D2), D2,
                    out.data.begin() + static_cast<long>(static_cast<size_t>(n) * (D1 + D2) + D1));
    }
    Node* y = g.alloc(std::move(out), a->requires_grad || b->requires_grad);
    if (y->requires_grad) {
        y->backprop = [a, b, N, D1, D2](Node& self) {
            for (int n = 0; n < N; ++n) {
                const double* gr = self.grad.data.data() + static_cast<size_t>(n) * (D1 + D2);
                if (a->requires_grad) {
                    a->ensure_grad();
                    double* ga = a->grad.data.data() + static_cast<size_t>(n) * D1;
                    for (int i = 0; i < D1; ++i) ga[i] += gr[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    double* gb = b->grad.data.data() + static_cast<size_t>(n) * D2;
                    for (int i = 0; i < D2; ++i) gb[i] += gr[D1 + i];
                }
            }
        };
    }
    return y;
}

Node* slice_cols(Graph& g, Node* x, int c0, int c1) {
    check(x->value.ndim() == 2, "slice_cols expects [N,D]");
    const int N = x->value.dim(0), D = x->value.dim(1);
    check(0 <= c0 && c0 < c1 && c1 <= D, "slice_cols range out of bounds");
    const int W = c1 - c0;
    Tensor out({N, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(x->value.data.begin() + static_cast<long>(static_cast<size_t>(n) * D + c0),
                    W, out.data.begin() + static_cast<long>(static_cast<size_t>(n) * W));
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, N, D, W, c0](Node& self) {
            x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < W; ++i)
                    x->grad.data[static_cast<size_t>(n) * D + c0 + i] +=
                        self.grad.data[static_cast<size_t>(n) * W + i];
        };
    }
    return y;
}

Node* slice_batch(Graph& g, Node* x, int n0, int n1) {
    check(x->value.ndim() >= 1, "slice_batch expects a batched tensor");
    const int N = x->value.dim(0);
    check(0 <= n0 && n0 < n1 && n1 <= N, "slice_batch range out of bounds");
    const size_t row = x->value.numel() / static_cast<size_t>(N);
    std::vector<int> shape = x->value.shape;
    shape[0] = n1 - n0;
    Tensor out(std::move(shape));
    std::copy_n(x->value.data.begin() + static_cast<long>(row * n0), out.data.size(),
                out.data.begin());
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, n0, row](Node& self) {
            x->ensure_grad();
            for (size_t i = 0; i < self.grad.data.size(); ++i)
                x->grad.data[row * n0 + i] += self.grad.data[i];
        };
    }
    return y;
}

Node* concat_rows(Graph& g, const std::vector<Node*>& xs) {
    check(!xs.empty(), "concat_rows needs at least one input");
    std::vector<int> shape = xs[0]->value.shape;
    check(!shape.empty(), "concat_rows expects batched tensors");
    int total = 0;
    bool rg = false;
    for (Node* x : xs) {
        check(x->value.ndim() == static_cast<int>(shape.size()),
              "concat_rows rank mismatch");
        for (size_t d = 1; d < shape.size(); ++d)
            check(x->value.dim(static_cast<int>(d)) == shape[d],
                  "concat_rows trailing shape mismatch");
        total += x->value.dim(0);
        rg = rg || x->requires_grad;
    }
    shape[0] = total;
    Tensor out(std::move(shape));
    size_t at = 0;
    for (Node* x : xs) {
        std::copy_n(x->value.data.begin(), x->value.data.size(), out.data.begin() + static_cast<long>(at));
        at += x->value.data.size();
    }
    Node* y = g.alloc(std::move(out), rg);
    if (y->requires_grad) {
        auto parents = xs;
        y->backprop = [parents](Node& self) {
            size_t at = 0;
            for (Node* x : parents) {
                if (x->requires_grad) {
                    x->ensure_grad();
                    for (size_t i = 0; i < x->grad.data.size(); ++i)
                        x->grad.data[i] += self.grad.data[at + i];
                }
                at += x->value.data.size();
            }
        };
    }
    return y;
}

Node* softmax_rows(Graph& g, Node* x) {
    check(x->value.ndim() == 2, "softmax_rows expects [N,K]");
    const int N = x->value.dim(0), K = x->value.dim(1);
    Tensor out({N, K});
    for (int n = 0; n < N; ++n) {
        const double* xr = x->value.data.data() + static_cast<size_t>(n) * K;
        double mx = xr[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double sum = 0.0;
        double* yr = out.data.data() + static_cast<size_t>(n) * K;
        for (int k = 0; k < K; ++k) { yr[k] = std::exp(xr[k] - mx); sum += yr[k]; }
        for (int k = 0; k < K; ++k) yr[k] /= sum;
    }
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, N, K](Node& self) {
            x->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const double* yr = self.value.data.data() + static_cast<size_t>(n) * K;
                const double* gr = self.grad.data.data() + static_cast<size_t>(n) * K;
                double dot = 0.0;
                for (int k = 0; k < K; ++k) dot += yr[k] * gr[k];
                double* gx = x->grad.data.data() + static_cast<size_t>(n) * K;
                for (int k = 0; k < K; ++k) gx[k] += yr[k] * (gr[k] - dot);
            }
        };
    }
    return y;
}

Node* pair_softmax(Graph& g, Node* x, double clamp) {
    check(x->value.ndim() == 2 && x->value.dim(1) % 2 == 0, "pair_softmax expects [N,2C]");
    const int N = x->value.dim(0), C = x->value.dim(1) / 2;
    Tensor out({N, 2 * C});
    auto clamped = std::make_shared<std::vector<bool>>(x->value.numel());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t ia = static_cast<size_t>(n) * 2 * C + c;
            const size_t ib = ia + C;
            double la = x->value.data[ia], lb = x->value.data[ib];
            (*clamped)[ia] = la > clamp || la < -clamp;
            (*clamped)[ib] = lb > clamp || lb < -clamp;
            la = std::clamp(la, -clamp, clamp);
            lb = std::clamp(lb, -clamp, clamp);
            const double m = std::max(la, lb);
            const double ea = std::exp(la - m), eb = std::exp(lb - m);
            out.data[ia] = ea / (ea + eb);
            out.data[ib] = eb / (ea + eb);
        }
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, N, C, clamped](Node& self) {
            x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t ia = static_cast<size_t>(n) * 2 * C + c;
                    const size_t ib = ia + C;
                    const double wa = self.value.data[ia], wb = self.value.data[ib];
                    // d wa / d la = wa*wb; d wa / d lb = -wa*wb (zero where clamp saturates)
                    const double j = wa * wb;
                    const double gja = (*clamped)[ia] ? 0.0 : j;
                    const double gjb = (*clamped)[ib] ? 0.0 : j;
                    x->grad.data[ia] += gja * (self.grad.data[ia] - self.grad.data[ib]);
                    x->grad.data[ib] += gjb * (self.grad.data[ib] - self.grad.data[ia]);
                }
        };
    }
    return y;
}

Node* channel_scale(Graph& g, Node* x, Node* s) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    check(s->value.ndim() == 2 && s->value.dim(0) == N && s->value.dim(1) == C,
          "channel_scale expects [N,C] scale");
    const size_t plane = static_cast<size_t>(H) * W;
    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double sv = s->value.data[static_cast<size_t>(n) * C + c];
            const double* xp = x->value.data.data() + (static_cast<size_t>(n) * C + c) * plane;
            double* yp = out.data.data() + (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) yp[i] = sv * xp[i];
        }
    Node* y = g.alloc(std::move(out), x->requires_grad || s->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, s, N, C, plane](Node& self) {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t nc = static_cast<size_t>(n) * C + c;
                    const double* gp = self.grad.data.data() + nc * plane;
                    if (x->requires_grad) {
                        x->ensure_grad();
                        const double sv = s->value.data[nc];
                        double* gx = x->grad.data.data() + nc * plane;
                        for (size_t i = 0; i < plane; ++i) gx[i] += sv * gp[i];
                    }
                    if (s->requires_grad) {
                        s->ensure_grad();
                        const double* xp = x->value.data.data() + nc * plane;
                        double acc = 0.0;
                        for (size_t i = 0; i < plane; ++i) acc += xp[i] * gp[i];
                        s->grad.data[nc] += acc;
                    }
                }
        };
    }
    return y;
}

Node* channel_bias(Graph& g, Node* x, Node* s) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    check(s->value.ndim() == 2 && s->value.dim(0) == N && s->value.dim(1) == C,
          "channel_bias expects [N,C] bias");
    const size_t plane = static_cast<size_t>(H) * W;
    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t nc = static_cast<size_t>(n) * C + c;
            const double sv = s->value.data[nc];
            const double* xp = x->value.data.data() + nc * plane;
            double* yp = out.data.data() + nc * plane;
            for (size_t i = 0; i < plane; ++i) yp[i] = xp[i] + sv;
        }
    Node* y = g.alloc(std::move(out), x->requires_grad || s->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, s, N, C, plane](Node& self) {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t nc = static_cast<size_t>(n) * C + c;
                    const double* gp = self.grad.data.data() + nc * plane;
                    if (x->requires_grad) {
                        x->ensure_grad();
                        double* gx = x->grad.data.data() + nc * plane;
                        for (size_t i = 0; i < plane; ++i) gx[i] += gp[i];
                    }
                    if (s->requires_grad) {
                        s->ensure_grad();
                        double acc = 0.0;
                        for (size_t i = 0; i < plane; ++i) acc += gp[i];
                        s->grad.data[nc] += acc;
                    }
                }
        };
    }
    return y;
}

Node* broadcast_spatial(Graph& g, Node* s, int h, int w) {
    check(s->value.ndim() == 2, "broadcast_spatial expects [N,C]");
    const int N = s->value.dim(0), C = s->value.dim(1);
    const size_t plane = static_cast<size_t>(h) * w;
    Tensor out({N, C, h, w});
    for (size_t nc = 0; nc < static_cast<size_t>(N) * C; ++nc) {
        const double v = s->value.data[nc];
        double* p = out.data.data() + nc * plane;
        for (size_t i = 0; i < plane; ++i) p[i] = v;
    }
    Node* y = g.alloc(std::move(out), s->requires_grad);
    if (y->requires_grad) {
        y->backprop = [s, N, C, plane](Node& self) {
            s->ensure_grad();
            for (size_t nc = 0; nc < static_cast<size_t>(N) * C; ++nc) {
                const double* gp = self.grad.data.data() + nc * plane;
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i) acc += gp[i];
                s->grad.data[nc] += acc;
            }
        };
    }
    return y;
}

Node* batch_mean(Graph& g, Node* x) {
    check(x->value.ndim() == 2, "batch_mean expects [N,D]");
    const int N = x->value.dim(0), D = x->value.dim(1);
    Tensor out({D});
    for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d)
            out.data[d] += x->value.data[static_cast<size_t>(n) * D + d];
    for (int d = 0; d < D; ++d) out.data[d] /= static_cast<double>(N);
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, N, D](Node& self) {
            x->ensure_grad();
            const double inv = 1.0 / static_cast<double>(N);
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d)
                    x->grad.data[static_cast<size_t>(n) * D + d] += self.grad.data[d] * inv;
        };
    }
    return y;
}

Node* sub_rowbcast(Graph& g, Node* x, Node* m) {
    check(x->value.ndim() == 2 && m->value.ndim() == 1 && x->value.dim(1) == m->value.dim(0),
          "sub_rowbcast shape mismatch");
    const int N = x->value.dim(0), D = x->value.dim(1);
    Tensor out({N, D});
    for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d)
            out.data[static_cast<size_t>(n) * D + d] =
                x->value.data[static_cast<size_t>(n) * D + d] - m->value.data[d];
    Node* y = g.alloc(std::move(out), x->requires_grad || m->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, m, N, D](Node& self) {
            if (x->requires_grad) {
                x->ensure_grad();
                for (size_t i = 0; i < self.grad.data.size(); ++i)
                    x->grad.data[i] += self.grad.data[i];
            }
            if (m->requires_grad) {
                m->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int d = 0; d < D; ++d)
                        m->grad.data[d] -= self.grad.data[static_cast<size_t>(n) * D + d];
            }
        };
    }
    return y;
}

Node* sum_channels(Graph& g, Node* x) {
    check(x->value.ndim() == 4, "sum_channels expects [N,C,H,W]");
    const int n = x->value.dim(0), c = x->value.dim(1);
    const int h = x->value.dim(2), w = x->value.dim(3);
    const size_t plane = static_cast<size_t>(h) * w;
    Tensor out({n, 1, h, w});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (size_t i = 0; i < plane; ++i)
                out.data[b * plane + i] +=
                    x->value.data[(static_cast<size_t>(b) * c + ch) * plane + i];
    Node* y = g.alloc(std::move(out), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, n, c, plane](Node& self) {
            x->ensure_grad();
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (size_t i = 0; i < plane; ++i)
                        x->grad.data[(static_cast<size_t>(b) * c + ch) * plane + i] +=
                            self.grad.data[b * plane + i];
        };
    }
    return y;
}

Node* bce_logits(Graph& g, Node* z, const Tensor& target, const Tensor& weight) {
    check(z->value.same_shape(target) && z->value.same_shape(weight),
          "bce_logits shape mismatch");
    double wsum = 0.0;
    for (double v : weight.data) wsum += v;
    const double denom = std::max(wsum, 1.0);
    double acc = 0.0;
    for (size_t i = 0; i < z->value.data.size(); ++i) {
        const double zi = z->value.data[i], ti = target.data[i];
        acc += weight.data[i] *
               (std::max(zi, 0.0) - zi * ti + std::log1p(std::exp(-std::abs(zi))));
    }
    Node* y = g.alloc(Tensor::scalar(acc / denom), z->requires_grad);
    if (y->requires_grad) {
        Tensor t = target, w = weight;
        y->backprop = [z, t = std::move(t), w = std::move(w), denom](Node& self) {
            z->ensure_grad();
            const double gv = self.grad.data[0] / denom;
            for (size_t i = 0; i < z->value.data.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-z->value.data[i]));
                z->grad.data[i] += gv * w.data[i] * (s - t.data[i]);
            }
        };
    }
    return y;
}

Node* l2_norm(Graph& g, Node* x) {
    double acc = 0.0;
    for (double v : x->value.data) acc += v * v;
    const double norm = std::sqrt(acc);
    Node* y = g.alloc(Tensor::scalar(norm), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, norm](Node& self) {
            if (norm == 0.0) return;  // subgradient 0 at the origin
            x->ensure_grad();
            const double gv = self.grad.data[0] / norm;
            for (size_t i = 0; i < x->value.data.size(); ++i)
                x->grad.data[i] += gv * x->value.data[i];
        };
    }
    return y;
}

Node* mean_all(Graph& g, Node* x) {
    double acc = 0.0;
    for (double v : x->value.data) acc += v;
    const double n = static_cast<double>(x->value.numel());
    Node* y = g.alloc(Tensor::scalar(acc / n), x->requires_grad);
    if (y->requires_grad) {
        y->backprop = [x, n](Node& self) {
            x->ensure_grad();
            const double gv = self.grad.data[0] / n;
            for (size_t i = 0; i < x->grad.data.size(); ++i) x->grad.data[i] += gv;
        };
    }
    return y;
}

Node* st_hard_gate(Graph& g, Node* probs, double tau) {
    Tensor out(probs->value.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = probs->value.data[i] >= tau ? 1.0 : 0.0;
    Node* y = g.alloc(std::move(out), probs->requires_grad);
    if (y->requires_grad) {
        y->backprop = [probs](Node& self) {
            probs->ensure_grad();
            for (size_t i = 0; i < self.grad.data.size(); ++i)
                probs->grad.data[i] += self.grad.data[i];
        };
    }
    return y;
}

} // namespace pcdf::nn
