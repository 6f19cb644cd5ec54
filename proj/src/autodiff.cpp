#include "personalize/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace personalize::ad {

const Tensor& Var::value() const { return tape->value(*this); }
const Tensor& Var::grad() const { return tape->grad(*this); }

Var Tape::emit(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1, this};
}

Tensor& Tape::grad_buffer(int id) {
    if (grads_[id].data.empty() && !nodes_[id].value.data.empty())
        grads_[id] = Tensor::zeros(nodes_[id].value.shape);
    return grads_[id];
}

void Tape::accumulate(int id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor& dst = grad_buffer(id);
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
}

const Tensor& Tape::grad(Var v) const {
    static const Tensor empty;
    if (v.id < 0 || static_cast<size_t>(v.id) >= grads_.size()) return empty;
    return grads_[v.id];
}

void Tape::backward(Var root) {
    if (!root.valid() || root.tape != this) throw SpecError("backward: invalid root");
    if (!nodes_[root.id].value.is_scalar()) throw ShapeError("backward: root must be scalar");
    grads_.assign(nodes_.size(), Tensor());
    grad_buffer(root.id).data[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
        if (!nodes_[i].requires_grad || grads_[i].data.empty()) continue;
        if (nodes_[i].back) nodes_[i].back(*this);
    }
}

Var Tape::constant(Tensor v) { return emit(std::move(v), false, nullptr); }

Var Tape::leaf(Tensor v) {
    return emit(std::move(v), true, nullptr);
}

Var Tape::add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    bool rg = requires_grad(a) || requires_grad(b);
    int ai = a.id, bi = b.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, bi](Tape& t) {
            const Tensor& g = t.grads_[self];
            t.accumulate(ai, g);
            t.accumulate(bi, g);
        };
    }
    return v;
}

Var Tape::sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    bool rg = requires_grad(a) || requires_grad(b);
    int ai = a.id, bi = b.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, bi](Tape& t) {
            const Tensor& g = t.grads_[self];
            t.accumulate(ai, g);
            if (t.nodes_[bi].requires_grad) {
                Tensor neg = g;
                for (auto& x : neg.data) x = -x;
                t.accumulate(bi, neg);
            }
        };
    }
    return v;
}

Var Tape::mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    bool rg = requires_grad(a) || requires_grad(b);
    int ai = a.id, bi = b.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, bi](Tape& t) {
            const Tensor& g = t.grads_[self];
            if (t.nodes_[ai].requires_grad) {
                Tensor ga = g;
                const Tensor& bvv = t.nodes_[bi].value;
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= bvv.data[i];
                t.accumulate(ai, ga);
            }
            if (t.nodes_[bi].requires_grad) {
                Tensor gb = g;
                const Tensor& avv = t.nodes_[ai].value;
                for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] *= avv.data[i];
                t.accumulate(bi, gb);
            }
        };
    }
    return v;
}

Var Tape::square(Var a) { return mul(a, a); }

Var Tape::scale(Var a, double c) {
    Tensor out = a.value();
    for (auto& x : out.data) x *= c;
    int ai = a.id;
    bool rg = requires_grad(a);
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, c](Tape& t) {
            Tensor g = t.grads_[self];
            for (auto& x : g.data) x *= c;
            t.accumulate(ai, g);
        };
    }
    return v;
}

Var Tape::add_const(Var a, double c) {
    Tensor out = a.value();
    for (auto& x : out.data) x += c;
    int ai = a.id;
    bool rg = requires_grad(a);
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai](Tape& t) { t.accumulate(ai, t.grads_[self]); };
    }
    return v;
}

Var Tape::silu(Var a) {
    Tensor out = a.value();
    for (auto& x : out.data) x = x / (1.0 + std::exp(-x));
    int ai = a.id;
    bool rg = requires_grad(a);
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai](Tape& t) {
            const Tensor& g = t.grads_[self];
            const Tensor& x = t.nodes_[ai].value;
            Tensor ga = g;
            for (size_t i = 0; i < ga.data.size(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-x.data[i]));
                ga.data[i] *= s * (1.0 + x.data[i] * (1.0 - s));
            }
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::reshape(Var a, std::vector<int> shape) {
    if (Tensor::numel(shape) != a.value().size())
        throw ShapeError("reshape: element count mismatch");
    Tensor out(shape, a.value().data);
    int ai = a.id;
    bool rg = requires_grad(a);
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        std::vector<int> in_shape = a.value().shape;
        nodes_[self].back = [self, ai, in_shape](Tape& t) {
            Tensor g(in_shape, t.grads_[self].data);
            t.accumulate(ai, g);
        };
    }
    return v;
}

Var Tape::transpose2d(Var a) {
    const Tensor& av = a.value();
    if (av.ndim() != 2) throw ShapeError("transpose2d: expected 2D");
    int m = av.shape[0], n = av.shape[1];
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at2(j, i) = av.at2(i, j);
    int ai = a.id;
    bool rg = requires_grad(a);
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, m, n](Tape& t) {
            const Tensor& g = t.grads_[self];
            Tensor ga = Tensor::zeros({m, n});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga.at2(i, j) = g.at2(j, i);
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::concat_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw ShapeError("concat_rows: no rows");
    int d = static_cast<int>(rows[0].value().size());
    int n = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({n, d});
    bool rg = false;
    std::vector<int> ids(rows.size());
    for (int r = 0; r < n; ++r) {
        const Tensor& rv = rows[r].value();
        if (rv.size() != d) throw ShapeError("concat_rows: row size mismatch");
        std::copy(rv.data.begin(), rv.data.end(), out.data.begin() + static_cast<size_t>(r) * d);
        rg = rg || requires_grad(rows[r]);
        ids[r] = rows[r].id;
    }
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ids, d](Tape& t) {
            const Tensor& g = t.grads_[self];
            for (size_t r = 0; r < ids.size(); ++r) {
                if (!t.nodes_[ids[r]].requires_grad) continue;
                Tensor gr = Tensor::zeros(t.nodes_[ids[r]].value.shape);
                std::copy(g.data.begin() + r * d, g.data.begin() + (r + 1) * d, gr.data.begin());
                t.accumulate(static_cast<int>(ids[r]), gr);
            }
        };
    }
    return v;
}

Var Tape::row(Var a, int r) {
    const Tensor& av = a.value();
    if (av.ndim() != 2) throw ShapeError("row: expected 2D");
    if (r < 0 || r >= av.shape[0]) throw IndexError("row index out of range");
    int d = av.shape[1];
    std::vector<int> in_shape = av.shape;
    Tensor out = Tensor::zeros({d});
    std::copy(av.data.begin() + static_cast<size_t>(r) * d,
              av.data.begin() + static_cast<size_t>(r + 1) * d, out.data.begin());
    int ai = a.id;
    bool rg = requires_grad(a);
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, r, d, in_shape](Tape& t) {
            const Tensor& g = t.grads_[self];
            Tensor ga = Tensor::zeros(in_shape);
            std::copy(g.data.begin(), g.data.end(), ga.data.begin() + static_cast<size_t>(r) * d);
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_string(av.shape) + " x " +
                         shape_string(bv.shape));
    int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            double aip = av.at2(i, p);
            for (int j = 0; j < n; ++j) out.at2(i, j) += aip * bv.at2(p, j);
        }
    bool rg = requires_grad(a) || requires_grad(b);
    int ai = a.id, bi = b.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, bi, m, k, n](Tape& t) {
            const Tensor& g = t.grads_[self];
            const Tensor& av2 = t.nodes_[ai].value;
            const Tensor& bv2 = t.nodes_[bi].value;
            if (t.nodes_[ai].requires_grad) {  // dA = G * B^T
                Tensor ga = Tensor::zeros({m, k});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gij = g.at2(i, j);
                        for (int p = 0; p < k; ++p) ga.at2(i, p) += gij * bv2.at2(p, j);
                    }
                t.accumulate(ai, ga);
            }
            if (t.nodes_[bi].requires_grad) {  // dB = A^T * G
                Tensor gb = Tensor::zeros({k, n});
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double aip = av2.at2(i, p);
                        for (int j = 0; j < n; ++j) gb.at2(p, j) += aip * g.at2(i, j);
                    }
                t.accumulate(bi, gb);
            }
        };
    }
    return v;
}

Var Tape::matmul_nt(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[1])
        throw ShapeError("matmul_nt: incompatible shapes");
    int m = av.shape[0], k = av.shape[1], n = bv.shape[0];
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += av.at2(i, p) * bv.at2(j, p);
            out.at2(i, j) = acc;
        }
    bool rg = requires_grad(a) || requires_grad(b);
    int ai = a.id, bi = b.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, bi, m, k, n](Tape& t) {
            const Tensor& g = t.grads_[self];
            const Tensor& av2 = t.nodes_[ai].value;
            const Tensor& bv2 = t.nodes_[bi].value;
            if (t.nodes_[ai].requires_grad) {  // dA = G * B
                Tensor ga = Tensor::zeros({m, k});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gij = g.at2(i, j);
                        for (int p = 0; p < k; ++p) ga.at2(i, p) += gij * bv2.at2(j, p);
                    }
                t.accumulate(ai, ga);
            }
            if (t.nodes_[bi].requires_grad) {  // dB = G^T * A
                Tensor gb = Tensor::zeros({n, k});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gij = g.at2(i, j);
                        for (int p = 0; p < k; ++p) gb.at2(j, p) += gij * av2.at2(i, p);
                    }
                t.accumulate(bi, gb);
            }
        };
    }
    return v;
}

Var Tape::softmax_rows(Var a) {
    const Tensor& av = a.value();
    if (av.ndim() != 2) throw ShapeError("softmax_rows: expected 2D");
    int m = av.shape[0], n = av.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        double mx = av.at2(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, av.at2(i, j));
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            double e = std::exp(av.at2(i, j) - mx);
            out.at2(i, j) = e;
            z += e;
        }
        for (int j = 0; j < n; ++j) out.at2(i, j) /= z;
    }
    bool rg = requires_grad(a);
    int ai = a.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, m, n](Tape& t) {
            const Tensor& g = t.grads_[self];
            const Tensor& y = t.nodes_[self].value;
            Tensor ga = Tensor::zeros({m, n});
            for (int i = 0; i < m; ++i) {
                double dotgy = 0.0;
                for (int j = 0; j < n; ++j) dotgy += g.at2(i, j) * y.at2(i, j);
                for (int j = 0; j < n; ++j) ga.at2(i, j) = y.at2(i, j) * (g.at2(i, j) - dotgy);
            }
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::dot(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.size() != bv.size()) throw DimensionError("dot: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < av.data.size(); ++i) acc += av.data[i] * bv.data[i];
    bool rg = requires_grad(a) || requires_grad(b);
    int ai = a.id, bi = b.id;
    Var v = emit(Tensor::scalar(acc), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, bi](Tape& t) {
            double g = t.grads_[self].data[0];
            if (t.nodes_[ai].requires_grad) {
                Tensor ga = t.nodes_[bi].value;
                for (auto& x : ga.data) x *= g;
                ga.shape = t.nodes_[ai].value.shape;
                t.accumulate(ai, ga);
            }
            if (t.nodes_[bi].requires_grad) {
                Tensor gb = t.nodes_[ai].value;
                for (auto& x : gb.data) x *= g;
                gb.shape = t.nodes_[bi].value.shape;
                t.accumulate(bi, gb);
            }
        };
    }
    return v;
}

Var Tape::normalize(Var a) {
    const Tensor& av = a.value();
    double nrm = 0.0;
    for (double x : av.data) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) throw NumericalError("normalize: zero vector");
    Tensor out = av;
    for (auto& x : out.data) x /= nrm;
    bool rg = requires_grad(a);
    int ai = a.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, nrm](Tape& t) {
            const Tensor& g = t.grads_[self];
            const Tensor& y = t.nodes_[self].value;
            double gy = 0.0;
            for (size_t i = 0; i < g.data.size(); ++i) gy += g.data[i] * y.data[i];
            Tensor ga = g;
            for (size_t i = 0; i < ga.data.size(); ++i)
                ga.data[i] = (g.data[i] - y.data[i] * gy) / nrm;
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::conv2d(Var x, Var w, Var b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.ndim() != 3 || wv.ndim() != 4 || wv.shape[2] != 3 || wv.shape[3] != 3)
        throw ShapeError("conv2d: expected (Cin,H,W) and (Cout,Cin,3,3)");
    if (wv.shape[1] != xv.shape[0] || bv.size() != wv.shape[0])
        throw ShapeError("conv2d: channel mismatch");
    int cin = xv.shape[0], h = xv.shape[1], wdt = xv.shape[2], cout = wv.shape[0];
    auto widx = [cin](int co, int ci, int ky, int kx) {
        return ((static_cast<size_t>(co) * cin + ci) * 3 + ky) * 3 + kx;
    };
    Tensor out = Tensor::zeros({cout, h, wdt});
    for (int co = 0; co < cout; ++co)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wdt; ++xx) {
                double acc = bv.data[co];
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < 3; ++ky) {
                        int sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int sx = xx + kx - 1;
                            if (sx < 0 || sx >= wdt) continue;
                            acc += xv.at3(ci, sy, sx) * wv.data[widx(co, ci, ky, kx)];
                        }
                    }
                out.at3(co, y, xx) = acc;
            }
    bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
    int xi = x.id, wi = w.id, bi = b.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, xi, wi, bi, cin, cout, h, wdt, widx](Tape& t) {
            const Tensor& g = t.grads_[self];
            const Tensor& xv2 = t.nodes_[xi].value;
            const Tensor& wv2 = t.nodes_[wi].value;
            bool need_x = t.nodes_[xi].requires_grad;
            bool need_w = t.nodes_[wi].requires_grad;
            bool need_b = t.nodes_[bi].requires_grad;
            Tensor gx = need_x ? Tensor::zeros({cin, h, wdt}) : Tensor();
            Tensor gw = need_w ? Tensor::zeros({cout, cin, 3, 3}) : Tensor();
            Tensor gb = need_b ? Tensor::zeros({cout}) : Tensor();
            for (int co = 0; co < cout; ++co)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < wdt; ++xx) {
                        double go = g.at3(co, y, xx);
                        if (go == 0.0) continue;
                        if (need_b) gb.data[co] += go;
                        for (int ci = 0; ci < cin; ++ci)
                            for (int ky = 0; ky < 3; ++ky) {
                                int sy = y + ky - 1;
                                if (sy < 0 || sy >= h) continue;
                                for (int kx = 0; kx < 3; ++kx) {
                                    int sx = xx + kx - 1;
                                    if (sx < 0 || sx >= wdt) continue;
                                    if (need_w)
                                        gw.data[widx(co, ci, ky, kx)] += go * xv2.at3(ci, sy, sx);
                                    if (need_x)
                                        gx.at3(ci, sy, sx) += go * wv2.data[widx(co, ci, ky, kx)];
                                }
                            }
                    }
            if (need_x) t.accumulate(xi, gx);
            if (need_w) t.accumulate(wi, gw);
            if (need_b) t.accumulate(bi, gb);
        };
    }
    return v;
}

Var Tape::add_channel_bias(Var x, Var b) {
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.ndim() != 3 || bv.size() != xv.shape[0])
        throw ShapeError("add_channel_bias: shape mismatch");
    int c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    Tensor out = xv;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at3(ci, y, xx) += bv.data[ci];
    bool rg = requires_grad(x) || requires_grad(b);
    int xi = x.id, bi = b.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, xi, bi, c, h, w](Tape& t) {
            const Tensor& g = t.grads_[self];
            t.accumulate(xi, g);
            if (t.nodes_[bi].requires_grad) {
                Tensor gb = Tensor::zeros({c});
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) gb.data[ci] += g.at3(ci, y, xx);
                t.accumulate(bi, gb);
            }
        };
    }
    return v;
}

Var Tape::sum(Var a) {
    double acc = 0.0;
    for (double x : a.value().data) acc += x;
    bool rg = requires_grad(a);
    int ai = a.id;
    Var v = emit(Tensor::scalar(acc), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai](Tape& t) {
            double g = t.grads_[self].data[0];
            Tensor ga = Tensor::full(t.nodes_[ai].value.shape, g);
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::mean(Var a) {
    int64_t n = a.value().size();
    if (n == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var Tape::mul_mask(Var a, const Mask& mask) {
    const Tensor& av = a.value();
    int c = 1, h = 0, w = 0;
    if (av.ndim() == 3) {
        c = av.shape[0];
        h = av.shape[1];
        w = av.shape[2];
    } else if (av.ndim() == 2) {
        h = av.shape[0];
        w = av.shape[1];
    } else {
        throw ShapeError("mul_mask: expected 2D or 3D tensor");
    }
    if (h != mask.height || w != mask.width)
        throw ShapeError("mul_mask: mask resolution mismatch");
    Tensor out = av;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out.data[(static_cast<size_t>(ci) * h + y) * w + xx] *= mask.at(y, xx);
    bool rg = requires_grad(a);
    int ai = a.id;
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        Mask m = mask;
        nodes_[self].back = [self, ai, m, c, h, w](Tape& t) {
            Tensor ga = t.grads_[self];
            for (int ci = 0; ci < c; ++ci)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        ga.data[(static_cast<size_t>(ci) * h + y) * w + xx] *= m.at(y, xx);
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::stack_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("stack_scalars: empty");
    Tensor out = Tensor::zeros({static_cast<int>(xs.size())});
    bool rg = false;
    std::vector<int> ids(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        if (!xs[i].value().is_scalar()) throw ShapeError("stack_scalars: non-scalar input");
        out.data[i] = xs[i].value().data[0];
        rg = rg || requires_grad(xs[i]);
        ids[i] = xs[i].id;
    }
    Var v = emit(std::move(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ids](Tape& t) {
            const Tensor& g = t.grads_[self];
            for (size_t i = 0; i < ids.size(); ++i)
                if (t.nodes_[ids[i]].requires_grad) t.accumulate(ids[i], Tensor::scalar(g.data[i]));
        };
    }
    return v;
}

Var Tape::logsumexp(Var a) {
    const Tensor& av = a.value();
    if (av.ndim() != 1 || av.size() == 0) throw ShapeError("logsumexp: expected nonempty vector");
    double mx = av.data[0];
    for (double x : av.data) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : av.data) z += std::exp(x - mx);
    double out = mx + std::log(z);
    bool rg = requires_grad(a);
    int ai = a.id;
    Var v = emit(Tensor::scalar(out), rg, nullptr);
    if (grad_enabled_ && rg) {
        int self = v.id;
        nodes_[self].back = [self, ai, out](Tape& t) {
            double g = t.grads_[self].data[0];
            const Tensor& x = t.nodes_[ai].value;
            Tensor ga = Tensor::zeros(x.shape);
            for (size_t i = 0; i < x.data.size(); ++i)
                ga.data[i] = g * std::exp(x.data[i] - out);
            t.accumulate(ai, ga);
        };
    }
    return v;
}

Var Tape::add_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("add_scalars: empty");
    Var acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

double finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x,
                         int64_t flat_index, double step) {
    Tensor hi = x, lo = x;
    hi.data[flat_index] += step;
    lo.data[flat_index] -= step;
    return (f(hi) - f(lo)) / (2.0 * step);
}

}  // namespace personalize::ad
