#include "phd/core/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace phd::ops {

namespace {

using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
    }
}

void im2col(const Real* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, Real* cols) {
    for (int ci = 0; ci < c; ++ci) {
        const Real* plane = x + static_cast<std::size_t>(ci) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                Real* row = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    Real* out = row + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(out, out + wo, Real(0));
                        continue;
                    }
                    const Real* in = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        out[ox] = (ix >= 0 && ix < w) ? in[ix] : Real(0);
                    }
                }
            }
        }
    }
}

void col2im(const Real* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, Real* x) {
    for (int ci = 0; ci < c; ++ci) {
        Real* plane = x + static_cast<std::size_t>(ci) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const Real* row = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    Real* out = plane + static_cast<std::size_t>(iy) * w;
                    const Real* in = row + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) out[ix] += in[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    out += b->value;
    return make_node(std::move(out), {a, b}, [](Node& n) {
        for (auto& p : n.parents)
            if (p->requires_grad) p->grad_buffer() += n.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->grad_buffer() += n.grad;
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        const Node& pa = *n.parents[0];
        const Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& g = n.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            Tensor& g = n.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
        }
    });
}

Var scale(const Var& a, Real s) {
    Tensor out = a->value;
    out *= s;
    return make_node(std::move(out), {a}, [s](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

Var add_channel(const Var& x, const Var& v) {
    require_rank(x->value, 4, "add_channel");
    const int nb = x->value.dim(0), c = x->value.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
    if (v->value.shape() != Shape{nb, c}) {
        throw ShapeError("add_channel: vector " + shape_str(v->value.shape()) + " does not fit " + shape_str(x->value.shape()));
    }
    Tensor out = x->value;
    for (int n = 0; n < nb; ++n)
        for (int ci = 0; ci < c; ++ci) {
            const Real add = v->value[static_cast<std::size_t>(n) * c + ci];
            Real* p = out.data() + (static_cast<std::size_t>(n) * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) p[i] += add;
        }
    return make_node(std::move(out), {x, v}, [nb, c, hw](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->grad_buffer() += n.grad;
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->grad_buffer();
            for (int b = 0; b < nb; ++b)
                for (int ci = 0; ci < c; ++ci) {
                    const Real* p = n.grad.data() + (static_cast<std::size_t>(b) * c + ci) * hw;
                    Real s = 0;
                    for (std::size_t i = 0; i < hw; ++i) s += p[i];
                    g[static_cast<std::size_t>(b) * c + ci] += s;
                }
        }
    });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    require_rank(x->value, 4, "conv2d input");
    require_rank(w->value, 4, "conv2d weight");
    const int nb = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), wd = x->value.dim(3);
    const int o = w->value.dim(0), k = w->value.dim(2);
    if (w->value.dim(1) != c || w->value.dim(3) != k) {
        throw ShapeError("conv2d: weight " + shape_str(w->value.shape()) + " incompatible with input " + shape_str(x->value.shape()));
    }
    if (b && b->value.shape() != Shape{o}) throw ShapeError("conv2d: bias shape " + shape_str(b->value.shape()));
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    const int ckk = c * k * k;
    const int howo = ho * wo;
    const bool direct = (k == 1 && stride == 1 && pad == 0);

    Tensor out({nb, o, ho, wo});
    RealBuffer cols(direct ? 0 : static_cast<std::size_t>(ckk) * howo);
    CMapR wm(w->value.data(), o, ckk);
    for (int n = 0; n < nb; ++n) {
        const Real* xin = x->value.data() + static_cast<std::size_t>(n) * c * h * wd;
        const Real* colp = xin;
        if (!direct) {
            im2col(xin, c, h, wd, k, stride, pad, ho, wo, cols.data());
            colp = cols.data();
        }
        MapR ym(out.data() + static_cast<std::size_t>(n) * o * howo, o, howo);
        ym.noalias() = wm * CMapR(colp, ckk, howo);
        if (b) {
            for (int oc = 0; oc < o; ++oc) ym.row(oc).array() += b->value[static_cast<std::size_t>(oc)];
        }
    }

    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    return make_node(std::move(out), std::move(parents), [=](Node& node) {
        Node& px = *node.parents[0];
        Node& pw = *node.parents[1];
        const bool has_bias = node.parents.size() > 2;
        RealBuffer col_buf(direct ? 0 : static_cast<std::size_t>(ckk) * howo);
        RealBuffer dcol_buf(direct ? 0 : static_cast<std::size_t>(ckk) * howo);
        CMapR wmat(pw.value.data(), o, ckk);
        for (int n = 0; n < nb; ++n) {
            CMapR dy(node.grad.data() + static_cast<std::size_t>(n) * o * howo, o, howo);
            const Real* xin = px.value.data() + static_cast<std::size_t>(n) * c * h * wd;
            if (pw.requires_grad) {
                const Real* colp = xin;
                if (!direct) {
                    im2col(xin, c, h, wd, k, stride, pad, ho, wo, col_buf.data());
                    colp = col_buf.data();
                }
                MapR dw(pw.grad_buffer().data(), o, ckk);
                dw.noalias() += dy * CMapR(colp, ckk, howo).transpose();
            }
            if (has_bias && node.parents[2]->requires_grad) {
                Tensor& gb = node.parents[2]->grad_buffer();
                for (int oc = 0; oc < o; ++oc) gb[static_cast<std::size_t>(oc)] += dy.row(oc).sum();
            }
            if (px.requires_grad) {
                Real* dx = px.grad_buffer().data() + static_cast<std::size_t>(n) * c * h * wd;
                if (direct) {
                    MapR(dx, ckk, howo).noalias() += wmat.transpose() * dy;
                } else {
                    MapR(dcol_buf.data(), ckk, howo).noalias() = wmat.transpose() * dy;
                    col2im(dcol_buf.data(), c, h, wd, k, stride, pad, ho, wo, dx);
                }
            }
        }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, Real eps) {
    require_rank(x->value, 4, "group_norm");
    const int nb = x->value.dim(0), c = x->value.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
    if (groups <= 0 || c % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
    }
    const int cpg = c / groups;
    const std::size_t gsize = static_cast<std::size_t>(cpg) * hw;

    auto xhat = std::make_shared<Tensor>(x->value.shape());
    auto inv_std = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(nb) * groups);
    Tensor out(x->value.shape());
    for (int n = 0; n < nb; ++n) {
        for (int g = 0; g < groups; ++g) {
            const std::size_t off = (static_cast<std::size_t>(n) * c + static_cast<std::size_t>(g) * cpg) * hw;
            const Real* xp = x->value.data() + off;
            double mean = 0;
            for (std::size_t i = 0; i < gsize; ++i) mean += xp[i];
            mean /= static_cast<double>(gsize);
            double var = 0;
            for (std::size_t i = 0; i < gsize; ++i) {
                const double d = xp[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            const Real is = static_cast<Real>(1.0 / std::sqrt(var + eps));
            (*inv_std)[static_cast<std::size_t>(n) * groups + g] = is;
            Real* xh = xhat->data() + off;
            Real* op = out.data() + off;
            for (int cc = 0; cc < cpg; ++cc) {
                const int ch = g * cpg + cc;
                const Real ga = gamma->value[static_cast<std::size_t>(ch)];
                const Real be = beta->value[static_cast<std::size_t>(ch)];
                for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t j = static_cast<std::size_t>(cc) * hw + i;
                    xh[j] = static_cast<Real>((xp[j] - mean) * is);
                    op[j] = ga * xh[j] + be;
                }
            }
        }
    }
    return make_node(std::move(out), {x, gamma, beta}, [=](Node& node) {
        Node& px = *node.parents[0];
        Node& pg = *node.parents[1];
        Node& pb = *node.parents[2];
        std::vector<Real> dxh(gsize);
        for (int n = 0; n < nb; ++n) {
            for (int g = 0; g < groups; ++g) {
                const std::size_t off = (static_cast<std::size_t>(n) * c + static_cast<std::size_t>(g) * cpg) * hw;
                const Real* dy = node.grad.data() + off;
                const Real* xh = xhat->data() + off;
                double sum_d = 0, sum_dx = 0;
                for (int cc = 0; cc < cpg; ++cc) {
                    const std::size_t ch = static_cast<std::size_t>(g * cpg + cc);
                    const Real ga = pg.value[ch];
                    double sg = 0, sb = 0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t j = static_cast<std::size_t>(cc) * hw + i;
                        sg += dy[j] * xh[j];
                        sb += dy[j];
                        dxh[j] = dy[j] * ga;
                        sum_d += dxh[j];
                        sum_dx += dxh[j] * xh[j];
                    }
                    if (pg.requires_grad) pg.grad_buffer()[ch] += static_cast<Real>(sg);
                    if (pb.requires_grad) pb.grad_buffer()[ch] += static_cast<Real>(sb);
                }
                if (!px.requires_grad) continue;
                const double md = sum_d / static_cast<double>(gsize);
                const double mdx = sum_dx / static_cast<double>(gsize);
                const Real is = (*inv_std)[static_cast<std::size_t>(n) * groups + g];
                Real* dx = px.grad_buffer().data() + off;
                for (std::size_t j = 0; j < gsize; ++j) {
                    dx[j] += static_cast<Real>(is * (dxh[j] - md - xh[j] * mdx));
                }
            }
        }
    });
}

Var silu(const Var& x) {
    Tensor out(x->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real v = x->value[i];
        out[i] = v / (Real(1) + std::exp(-v));
    }
    return make_node(std::move(out), {x}, [](Node& n) {
        const Tensor& xv = n.parents[0]->value;
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Real s = Real(1) / (Real(1) + std::exp(-xv[i]));
            g[i] += n.grad[i] * (s + xv[i] * s * (Real(1) - s));
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    require_rank(w->value, 2, "linear weight");
    const int out_dim = w->value.dim(0), in_dim = w->value.dim(1);
    if (x->value.rank() < 1 || x->value.dim(-1) != in_dim) {
        throw ShapeError("linear: input " + shape_str(x->value.shape()) + " vs weight " + shape_str(w->value.shape()));
    }
    if (b && b->value.shape() != Shape{out_dim}) throw ShapeError("linear: bias shape " + shape_str(b->value.shape()));
    const int rows = static_cast<int>(x->value.size() / static_cast<std::size_t>(in_dim));
    Shape out_shape = x->value.shape();
    out_shape.back() = out_dim;
    Tensor out(out_shape);
    MapR y(out.data(), rows, out_dim);
    y.noalias() = CMapR(x->value.data(), rows, in_dim) * CMapR(w->value.data(), out_dim, in_dim).transpose();
    if (b) y.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b->value.data(), out_dim);

    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    return make_node(std::move(out), std::move(parents), [=](Node& n) {
        CMapR dy(n.grad.data(), rows, out_dim);
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        if (px.requires_grad) {
            MapR(px.grad_buffer().data(), rows, in_dim).noalias() += dy * CMapR(pw.value.data(), out_dim, in_dim);
        }
        if (pw.requires_grad) {
            MapR(pw.grad_buffer().data(), out_dim, in_dim).noalias() += dy.transpose() * CMapR(px.value.data(), rows, in_dim);
        }
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
            Tensor& gb = n.parents[2]->grad_buffer();
            for (int j = 0; j < out_dim; ++j) gb[static_cast<std::size_t>(j)] += dy.col(j).sum();
        }
    });
}

Var upsample2x(const Var& x) {
    require_rank(x->value, 4, "upsample2x");
    const int nb = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
    Tensor out({nb, c, 2 * h, 2 * w});
    for (int n = 0; n < nb; ++n)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx) out.at(n, ci, y, xx) = x->value.at(n, ci, y / 2, xx / 2);
    return make_node(std::move(out), {x}, [nb, c, h, w](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (int n = 0; n < nb; ++n)
            for (int ci = 0; ci < c; ++ci)
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx) g.at(n, ci, y / 2, xx / 2) += node.grad.at(n, ci, y, xx);
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_rank(a->value, 4, "concat_channels");
    require_rank(b->value, 4, "concat_channels");
    const int nb = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
    const int h = a->value.dim(2), w = a->value.dim(3);
    if (b->value.dim(0) != nb || b->value.dim(2) != h || b->value.dim(3) != w) {
        throw ShapeError("concat_channels: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor out({nb, ca + cb, h, w});
    for (int n = 0; n < nb; ++n) {
        const Real* pa = a->value.data() + static_cast<std::size_t>(n) * ca * plane;
        const Real* pb = b->value.data() + static_cast<std::size_t>(n) * cb * plane;
        Real* po = out.data() + static_cast<std::size_t>(n) * (ca + cb) * plane;
        std::copy(pa, pa + ca * plane, po);
        std::copy(pb, pb + cb * plane, po + ca * plane);
    }
    return make_node(std::move(out), {a, b}, [=](Node& node) {
        for (int n = 0; n < nb; ++n) {
            const Real* go = node.grad.data() + static_cast<std::size_t>(n) * (ca + cb) * plane;
            if (node.parents[0]->requires_grad) {
                Real* ga = node.parents[0]->grad_buffer().data() + static_cast<std::size_t>(n) * ca * plane;
                for (std::size_t i = 0; i < ca * plane; ++i) ga[i] += go[i];
            }
            if (node.parents[1]->requires_grad) {
                Real* gb = node.parents[1]->grad_buffer().data() + static_cast<std::size_t>(n) * cb * plane;
                for (std::size_t i = 0; i < cb * plane; ++i) gb[i] += go[ca * plane + i];
            }
        }
    });
}

Var to_tokens(const Var& x) {
    require_rank(x->value, 4, "to_tokens");
    const int nb = x->value.dim(0), c = x->value.dim(1);
    const int hw = x->value.dim(2) * x->value.dim(3);
    Tensor out({nb, hw, c});
    for (int n = 0; n < nb; ++n) {
        MapR(out.data() + static_cast<std::size_t>(n) * hw * c, hw, c) =
            CMapR(x->value.data() + static_cast<std::size_t>(n) * c * hw, c, hw).transpose();
    }
    return make_node(std::move(out), {x}, [nb, c, hw](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (int n = 0; n < nb; ++n) {
            MapR(g.data() + static_cast<std::size_t>(n) * c * hw, c, hw) +=
                CMapR(node.grad.data() + static_cast<std::size_t>(n) * hw * c, hw, c).transpose();
        }
    });
}

Var from_tokens(const Var& x, int height, int width) {
    require_rank(x->value, 3, "from_tokens");
    const int nb = x->value.dim(0), hw = x->value.dim(1), c = x->value.dim(2);
    if (hw != height * width) throw ShapeError("from_tokens: token count does not match spatial size");
    Tensor out({nb, c, height, width});
    for (int n = 0; n < nb; ++n) {
        MapR(out.data() + static_cast<std::size_t>(n) * c * hw, c, hw) =
            CMapR(x->value.data() + static_cast<std::size_t>(n) * hw * c, hw, c).transpose();
    }
    return make_node(std::move(out), {x}, [nb, c, hw](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (int n = 0; n < nb; ++n) {
            MapR(g.data() + static_cast<std::size_t>(n) * hw * c, hw, c) +=
                CMapR(node.grad.data() + static_cast<std::size_t>(n) * c * hw, c, hw).transpose();
        }
    });
}

Var bmm(const Var& a, const Var& b, bool transpose_b) {
    require_rank(a->value, 3, "bmm lhs");
    require_rank(b->value, 3, "bmm rhs");
    const int nb = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2);
    const int p = transpose_b ? b->value.dim(1) : b->value.dim(2);
    const int bk = transpose_b ? b->value.dim(2) : b->value.dim(1);
    if (b->value.dim(0) != nb || bk != k) {
        throw ShapeError("bmm: " + shape_str(a->value.shape()) + " x " + shape_str(b->value.shape()));
    }
    const int br = transpose_b ? p : k, bc = transpose_b ? k : p;
    Tensor out({nb, m, p});
    for (int n = 0; n < nb; ++n) {
        CMapR am(a->value.data() + static_cast<std::size_t>(n) * m * k, m, k);
        CMapR bm(b->value.data() + static_cast<std::size_t>(n) * br * bc, br, bc);
        MapR om(out.data() + static_cast<std::size_t>(n) * m * p, m, p);
        if (transpose_b)
            om.noalias() = am * bm.transpose();
        else
            om.noalias() = am * bm;
    }
    return make_node(std::move(out), {a, b}, [=](Node& node) {
        Node& pa = *node.parents[0];
        Node& pb = *node.parents[1];
        for (int n = 0; n < nb; ++n) {
            CMapR dout(node.grad.data() + static_cast<std::size_t>(n) * m * p, m, p);
            CMapR am(pa.value.data() + static_cast<std::size_t>(n) * m * k, m, k);
            CMapR bm(pb.value.data() + static_cast<std::size_t>(n) * br * bc, br, bc);
            if (pa.requires_grad) {
                MapR da(pa.grad_buffer().data() + static_cast<std::size_t>(n) * m * k, m, k);
                if (transpose_b)
                    da.noalias() += dout * bm;
                else
                    da.noalias() += dout * bm.transpose();
            }
            if (pb.requires_grad) {
                MapR db(pb.grad_buffer().data() + static_cast<std::size_t>(n) * br * bc, br, bc);
                if (transpose_b)
                    db.noalias() += dout.transpose() * am;
                else
                    db.noalias() += am.transpose() * dout;
            }
        }
    });
}

Var softmax_last(const Var& x) {
    const int d = x->value.dim(-1);
    const std::size_t rows = x->value.size() / static_cast<std::size_t>(d);
    Tensor out(x->value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* in = x->value.data() + r * d;
        Real* o = out.data() + r * d;
        const Real mx = *std::max_element(in, in + d);
        Real s = 0;
        for (int j = 0; j < d; ++j) s += (o[j] = std::exp(in[j] - mx));
        for (int j = 0; j < d; ++j) o[j] /= s;
    }
    return make_node(std::move(out), {x}, [rows, d](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* y = node.value.data() + r * d;
            const Real* dy = node.grad.data() + r * d;
            Real dot = 0;
            for (int j = 0; j < d; ++j) dot += dy[j] * y[j];
            Real* gx = g.data() + r * d;
            for (int j = 0; j < d; ++j) gx[j] += y[j] * (dy[j] - dot);
        }
    });
}

Var gather_rows(const Var& table, std::span<const int> rows) {
    require_rank(table->value, 2, "gather_rows");
    const int v = table->value.dim(0), d = table->value.dim(1);
    std::vector<int> idx(rows.begin(), rows.end());
    Tensor out({static_cast<int>(idx.size()), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= v) throw ShapeError("gather_rows: row " + std::to_string(idx[r]) + " out of range");
        std::copy_n(table->value.data() + static_cast<std::size_t>(idx[r]) * d, d, out.data() + r * d);
    }
    return make_node(std::move(out), {table}, [idx, d](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r) {
            Real* gr = g.data() + static_cast<std::size_t>(idx[r]) * d;
            const Real* src = node.grad.data() + r * d;
            for (int j = 0; j < d; ++j) gr[j] += src[j];
        }
    });
}

Var concat0(const std::vector<Var>& items) {
    if (items.empty()) throw ShapeError("concat0: no inputs");
    Shape tail(items[0]->value.shape().begin() + 1, items[0]->value.shape().end());
    int total = 0;
    std::vector<std::size_t> sizes;
    for (const auto& it : items) {
        Shape t(it->value.shape().begin() + 1, it->value.shape().end());
        if (t != tail) throw ShapeError("concat0: trailing shape mismatch " + shape_str(it->value.shape()));
        total += it->value.dim(0);
        sizes.push_back(it->value.size());
    }
    Shape shape{total};
    shape.insert(shape.end(), tail.begin(), tail.end());
    Tensor out(shape);
    std::size_t off = 0;
    for (const auto& it : items) {
        std::copy_n(it->value.data(), it->value.size(), out.data() + off);
        off += it->value.size();
    }
    return make_node(std::move(out), items, [sizes](Node& node) {
        std::size_t o = 0;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            if (node.parents[i]->requires_grad) {
                Tensor& g = node.parents[i]->grad_buffer();
                for (std::size_t j = 0; j < sizes[i]; ++j) g[j] += node.grad[o + j];
            }
            o += sizes[i];
        }
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x->value.reshaped(std::move(shape));
    return make_node(std::move(out), {x}, [](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    });
}

Var global_avg_pool(const Var& x) {
    require_rank(x->value, 4, "global_avg_pool");
    const int nb = x->value.dim(0), c = x->value.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
    Tensor out({nb, c});
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real* p = x->value.data() + i * hw;
        Real s = 0;
        for (std::size_t j = 0; j < hw; ++j) s += p[j];
        out[i] = s / static_cast<Real>(hw);
    }
    return make_node(std::move(out), {x}, [hw](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            const Real v = node.grad[i] / static_cast<Real>(hw);
            Real* p = g.data() + i * hw;
            for (std::size_t j = 0; j < hw; ++j) p[j] += v;
        }
    });
}

Var l2_normalize_rows(const Var& x, Real eps) {
    require_rank(x->value, 2, "l2_normalize_rows");
    const int rows = x->value.dim(0), d = x->value.dim(1);
    auto norms = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(rows));
    Tensor out(x->value.shape());
    for (int r = 0; r < rows; ++r) {
        const Real* in = x->value.data() + static_cast<std::size_t>(r) * d;
        Real s = 0;
        for (int j = 0; j < d; ++j) s += in[j] * in[j];
        const Real nrm = std::max(std::sqrt(s), eps);
        (*norms)[static_cast<std::size_t>(r)] = nrm;
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(r) * d + j] = in[j] / nrm;
    }
    return make_node(std::move(out), {x}, [norms, rows, d](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        for (int r = 0; r < rows; ++r) {
            const std::size_t off = static_cast<std::size_t>(r) * d;
            const Real* y = node.value.data() + off;
            const Real* dy = node.grad.data() + off;
            Real dot = 0;
            for (int j = 0; j < d; ++j) dot += dy[j] * y[j];
            const Real nrm = (*norms)[static_cast<std::size_t>(r)];
            for (int j = 0; j < d; ++j) g[off + j] += (dy[j] - y[j] * dot) / nrm;
        }
    });
}

Var mse(const Var& pred, const Tensor& target) {
    require_same_shape(pred->value, target, "mse");
    const std::size_t n = target.size();
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred->value[i]) - target[i];
        s += d * d;
    }
    Tensor out({1}, static_cast<Real>(s / static_cast<double>(n)));
    return make_node(std::move(out), {pred}, [target, n](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        const Real k = Real(2) * node.grad[0] / static_cast<Real>(n);
        const Tensor& p = node.parents[0]->value;
        for (std::size_t i = 0; i < n; ++i) g[i] += k * (p[i] - target[i]);
    });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
    require_rank(logits->value, 2, "cross_entropy");
    const int rows = logits->value.dim(0), m = logits->value.dim(1);
    if (static_cast<int>(labels.size()) != rows) throw ShapeError("cross_entropy: label count mismatch");
    std::vector<int> lab(labels.begin(), labels.end());
    auto probs = std::make_shared<Tensor>(logits->value.shape());
    double loss = 0;
    for (int r = 0; r < rows; ++r) {
        const Real* in = logits->value.data() + static_cast<std::size_t>(r) * m;
        Real* pr = probs->data() + static_cast<std::size_t>(r) * m;
        const Real mx = *std::max_element(in, in + m);
        double s = 0;
        for (int j = 0; j < m; ++j) s += (pr[j] = std::exp(in[j] - mx));
        for (int j = 0; j < m; ++j) pr[j] = static_cast<Real>(pr[j] / s);
        loss += -(in[lab[static_cast<std::size_t>(r)]] - mx - std::log(s));
    }
    Tensor out({1}, static_cast<Real>(loss / rows));
    return make_node(std::move(out), {logits}, [probs, lab, rows, m](Node& node) {
        Tensor& g = node.parents[0]->grad_buffer();
        const Real k = node.grad[0] / static_cast<Real>(rows);
        for (int r = 0; r < rows; ++r) {
            for (int j = 0; j < m; ++j) {
                const std::size_t i = static_cast<std::size_t>(r) * m + j;
                g[i] += k * ((*probs)[i] - (j == lab[static_cast<std::size_t>(r)] ? Real(1) : Real(0)));
            }
        }
    });
}

}  // namespace phd::ops
