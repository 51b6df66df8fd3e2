#include "attnflow/ops.hpp"

#include <cmath>

namespace attnflow {

namespace {

double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_stable(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

bool is_binary(EwKind k) {
    switch (k) {
        case EwKind::Add:
        case EwKind::Sub:
        case EwKind::Mul:
        case EwKind::Div:
            return true;
        default:
            return false;
    }
}

const char* ew_name(EwKind k) {
    switch (k) {
        case EwKind::Add: return "add";
        case EwKind::Sub: return "sub";
        case EwKind::Mul: return "mul";
        case EwKind::Div: return "div";
        case EwKind::Exp: return "exp";
        case EwKind::Log: return "log";
        case EwKind::Sigmoid: return "sigmoid";
        case EwKind::Softplus: return "softplus";
        case EwKind::Negate: return "negate";
    }
    return "?";
}

}  // namespace

Tensor elementwise(EwKind k, const Tensor& a, const Tensor& b) {
    if (!is_binary(k)) {
        throw Error(std::string("elementwise: ") + ew_name(k) + " is not a binary op");
    }
    const bool bcast = b.numel() == 1;
    if (!bcast && !(b.shape == a.shape)) {
        throw ShapeError(std::string("elementwise ") + ew_name(k) + ": " + a.shape.str() +
                         " vs " + b.shape.str());
    }
    if (k == EwKind::Div) {
        for (double v : b.data) {
            if (v == 0.0) throw DomainError("div: zero divisor");
        }
    }
    const std::size_t n = a.data.size();
    Tensor y(a.shape);
    switch (k) {
        case EwKind::Add:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = a.data[i] + b.data[bcast ? 0 : i];
            break;
        case EwKind::Sub:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = a.data[i] - b.data[bcast ? 0 : i];
            break;
        case EwKind::Mul:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = a.data[i] * b.data[bcast ? 0 : i];
            break;
        case EwKind::Div:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = a.data[i] / b.data[bcast ? 0 : i];
            break;
        default:
            break;
    }
    check_finite(y, ew_name(k));

    Tape* tp = active_tape();
    if (tp && (tp->tracks(a) || tp->tracks(b))) {
        const int ai = tp->node_of(a);
        const int bi = tp->node_of(b);
        Saved sa, sb;
        if (k == EwKind::Mul || k == EwKind::Div) {
            sa = save_input(tp, a);
            sb = save_input(tp, b);
        }
        tp->emit(y, [k, ai, bi, sa, sb, bcast](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            const std::size_t m = g.size();
            if (ai >= 0) {
                std::vector<double> ga(m);
                switch (k) {
                    case EwKind::Add:
                    case EwKind::Sub:
                        ga = g;
                        break;
                    case EwKind::Mul: {
                        const auto& bv = sb.get(t);
                        for (std::size_t i = 0; i < m; ++i) ga[i] = g[i] * bv[bcast ? 0 : i];
                        break;
                    }
                    case EwKind::Div: {
                        const auto& bv = sb.get(t);
                        for (std::size_t i = 0; i < m; ++i) ga[i] = g[i] / bv[bcast ? 0 : i];
                        break;
                    }
                    default:
                        break;
                }
                t.accumulate(ai, ga);
            }
            if (bi >= 0) {
                std::vector<double> full(m);
                switch (k) {
                    case EwKind::Add:
                        full = g;
                        break;
                    case EwKind::Sub:
                        for (std::size_t i = 0; i < m; ++i) full[i] = -g[i];
                        break;
                    case EwKind::Mul: {
                        const auto& av = sa.get(t);
                        for (std::size_t i = 0; i < m; ++i) full[i] = g[i] * av[i];
                        break;
                    }
                    case EwKind::Div: {
                        const auto& av = sa.get(t);
                        const auto& bv = sb.get(t);
                        for (std::size_t i = 0; i < m; ++i) {
                            const double be = bv[bcast ? 0 : i];
                            full[i] = -g[i] * av[i] / (be * be);
                        }
                        break;
                    }
                    default:
                        break;
                }
                if (bcast) {
                    double s = 0.0;
                    for (double v : full) s += v;
                    t.accumulate(bi, {s});
                } else {
                    t.accumulate(bi, full);
                }
            }
        });
    }
    return y;
}

Tensor elementwise(EwKind k, const Tensor& a, double b) {
    return elementwise(k, a, Tensor::scalar(b));
}

Tensor elementwise(EwKind k, const Tensor& a) {
    if (is_binary(k)) {
        throw Error(std::string("elementwise: ") + ew_name(k) + " requires two operands");
    }
    const std::size_t n = a.data.size();
    Tensor y(a.shape);
    switch (k) {
        case EwKind::Exp:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = std::exp(a.data[i]);
            break;
        case EwKind::Log:
            for (std::size_t i = 0; i < n; ++i) {
                if (a.data[i] <= 0.0) {
                    throw DomainError("log: non-positive operand at flat index " +
                                      std::to_string(i));
                }
                y.data[i] = std::log(a.data[i]);
            }
            break;
        case EwKind::Sigmoid:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = sigmoid_stable(a.data[i]);
            break;
        case EwKind::Softplus:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = softplus_stable(a.data[i]);
            break;
        case EwKind::Negate:
            for (std::size_t i = 0; i < n; ++i) y.data[i] = -a.data[i];
            break;
        default:
            break;
    }
    check_finite(y, ew_name(k));

    Tape* tp = active_tape();
    if (tp && tp->tracks(a)) {
        const int ai = tp->node_of(a);
        Saved sa;
        if (k == EwKind::Log || k == EwKind::Softplus) sa = save_input(tp, a);
        tp->emit(y, [k, ai, sa](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            const auto& yv = t.value(self);
            const std::size_t m = g.size();
            std::vector<double> ga(m);
            switch (k) {
                case EwKind::Exp:
                    for (std::size_t i = 0; i < m; ++i) ga[i] = g[i] * yv[i];
                    break;
                case EwKind::Log: {
                    const auto& av = sa.get(t);
                    for (std::size_t i = 0; i < m; ++i) ga[i] = g[i] / av[i];
                    break;
                }
                case EwKind::Sigmoid:
                    for (std::size_t i = 0; i < m; ++i) ga[i] = g[i] * yv[i] * (1.0 - yv[i]);
                    break;
                case EwKind::Softplus: {
                    const auto& av = sa.get(t);
                    for (std::size_t i = 0; i < m; ++i) ga[i] = g[i] * sigmoid_stable(av[i]);
                    break;
                }
                case EwKind::Negate:
                    for (std::size_t i = 0; i < m; ++i) ga[i] = -g[i];
                    break;
                default:
                    break;
            }
            t.accumulate(ai, ga);
        });
    }
    return y;
}

Tensor sub(double a, const Tensor& b) { return neg(sub(b, a)); }

Tensor div(double a, const Tensor& b) {
    Tensor num(b.shape, a);
    return div(num, b);
}

Tensor conv1x1(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    if (weight.shape.b != 1 || weight.shape.c != 1) {
        throw ShapeError("conv1x1: weight must be (1,1,C_out,C_in), got " + weight.shape.str());
    }
    const std::int64_t ci = x.shape.c;
    const std::int64_t co = weight.shape.h;
    if (weight.shape.w != ci) {
        throw ShapeError("conv1x1: weight columns " + std::to_string(weight.shape.w) +
                         " != input channels " + std::to_string(ci));
    }
    if (bias && !(bias->shape == Shape(1, co, 1, 1))) {
        throw ShapeError("conv1x1: bias shape " + bias->shape.str());
    }
    const std::int64_t B = x.shape.b;
    const std::int64_t P = x.shape.h * x.shape.w;
    Tensor y(Shape(B, co, x.shape.h, x.shape.w));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t o = 0; o < co; ++o) {
            double* yd = y.data.data() + (b * co + o) * P;
            if (bias) {
                const double bv = bias->data[o];
                for (std::int64_t p = 0; p < P; ++p) yd[p] = bv;
            }
            for (std::int64_t i = 0; i < ci; ++i) {
                const double wv = weight.data[o * ci + i];
                if (wv == 0.0) continue;
                const double* xd = x.data.data() + (b * ci + i) * P;
                for (std::int64_t p = 0; p < P; ++p) yd[p] += wv * xd[p];
            }
        }
    }
    check_finite(y, "conv1x1");

    Tape* tp = active_tape();
    if (tp && (tp->tracks(x) || tp->tracks(weight) || (bias && tp->tracks(*bias)))) {
        const int xi = tp->node_of(x);
        const int wi = tp->node_of(weight);
        const int bi = bias ? tp->node_of(*bias) : -1;
        Saved sx = save_input(tp, x);
        Saved sw = save_input(tp, weight);
        tp->emit(y, [xi, wi, bi, sx, sw, B, ci, co, P](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            if (xi >= 0) {
                const auto& wv = sw.get(t);
                std::vector<double> gx(std::size_t(B * ci * P), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t i = 0; i < ci; ++i) {
                        double* gxd = gx.data() + (b * ci + i) * P;
                        for (std::int64_t o = 0; o < co; ++o) {
                            const double w = wv[o * ci + i];
                            if (w == 0.0) continue;
                            const double* gd = g.data() + (b * co + o) * P;
                            for (std::int64_t p = 0; p < P; ++p) gxd[p] += w * gd[p];
                        }
                    }
                }
                t.accumulate(xi, gx);
            }
            if (wi >= 0) {
                const auto& xv = sx.get(t);
                std::vector<double> gw(std::size_t(co * ci), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < co; ++o) {
                        const double* gd = g.data() + (b * co + o) * P;
                        for (std::int64_t i = 0; i < ci; ++i) {
                            const double* xd = xv.data() + (b * ci + i) * P;
                            double acc = 0.0;
                            for (std::int64_t p = 0; p < P; ++p) acc += gd[p] * xd[p];
                            gw[o * ci + i] += acc;
                        }
                    }
                }
                t.accumulate(wi, gw);
            }
            if (bi >= 0) {
                std::vector<double> gb(std::size_t(co), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < co; ++o) {
                        const double* gd = g.data() + (b * co + o) * P;
                        double acc = 0.0;
                        for (std::int64_t p = 0; p < P; ++p) acc += gd[p];
                        gb[o] += acc;
                    }
                }
                t.accumulate(bi, gb);
            }
        });
    }
    return y;
}

Tensor conv1x1(const Tensor& x, const SquareMatrix& weight) {
    Tensor w(Shape(1, 1, weight.order(), weight.order()), weight.entries());
    return conv1x1(x, w);
}

Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    const std::int64_t co = weight.shape.b;
    const std::int64_t ci = weight.shape.c;
    if (weight.shape.h != 3 || weight.shape.w != 3 || ci != x.shape.c) {
        throw ShapeError("conv3x3: weight " + weight.shape.str() + " vs input " + x.shape.str());
    }
    if (bias && !(bias->shape == Shape(1, co, 1, 1))) {
        throw ShapeError("conv3x3: bias shape " + bias->shape.str());
    }
    const std::int64_t B = x.shape.b, H = x.shape.h, W = x.shape.w;
    Tensor y(Shape(B, co, H, W));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t o = 0; o < co; ++o) {
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    double acc = bias ? bias->data[o] : 0.0;
                    for (std::int64_t c = 0; c < ci; ++c) {
                        for (int di = 0; di < 3; ++di) {
                            const std::int64_t si = i + di - 1;
                            if (si < 0 || si >= H) continue;
                            for (int dj = 0; dj < 3; ++dj) {
                                const std::int64_t sj = j + dj - 1;
                                if (sj < 0 || sj >= W) continue;
                                acc += weight.at(o, c, di, dj) * x.at(b, c, si, sj);
                            }
                        }
                    }
                    y.at(b, o, i, j) = acc;
                }
            }
        }
    }
    check_finite(y, "conv3x3");

    Tape* tp = active_tape();
    if (tp && (tp->tracks(x) || tp->tracks(weight) || (bias && tp->tracks(*bias)))) {
        const int xi = tp->node_of(x);
        const int wi = tp->node_of(weight);
        const int bi = bias ? tp->node_of(*bias) : -1;
        Saved sx = save_input(tp, x);
        Saved sw = save_input(tp, weight);
        const Shape xs = x.shape;
        const Shape ws = weight.shape;
        tp->emit(y, [xi, wi, bi, sx, sw, xs, ws](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            const std::int64_t B = xs.b, ci = xs.c, H = xs.h, W = xs.w, co = ws.b;
            auto gat = [&](std::int64_t b, std::int64_t o, std::int64_t i, std::int64_t j) {
                return g[std::size_t(((b * co + o) * H + i) * W + j)];
            };
            if (xi >= 0) {
                const auto& wv = sw.get(t);
                std::vector<double> gx(std::size_t(B * ci * H * W), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < co; ++o) {
                        for (std::int64_t i = 0; i < H; ++i) {
                            for (std::int64_t j = 0; j < W; ++j) {
                                const double gv = gat(b, o, i, j);
                                if (gv == 0.0) continue;
                                for (std::int64_t c = 0; c < ci; ++c) {
                                    for (int di = 0; di < 3; ++di) {
                                        const std::int64_t si = i + di - 1;
                                        if (si < 0 || si >= H) continue;
                                        for (int dj = 0; dj < 3; ++dj) {
                                            const std::int64_t sj = j + dj - 1;
                                            if (sj < 0 || sj >= W) continue;
                                            gx[std::size_t(((b * ci + c) * H + si) * W + sj)] +=
                                                wv[std::size_t(((o * ci + c) * 3 + di) * 3 + dj)] *
                                                gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                t.accumulate(xi, gx);
            }
            if (wi >= 0) {
                const auto& xv = sx.get(t);
                std::vector<double> gw(std::size_t(co * ci * 9), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < co; ++o) {
                        for (std::int64_t i = 0; i < H; ++i) {
                            for (std::int64_t j = 0; j < W; ++j) {
                                const double gv = gat(b, o, i, j);
                                if (gv == 0.0) continue;
                                for (std::int64_t c = 0; c < ci; ++c) {
                                    for (int di = 0; di < 3; ++di) {
                                        const std::int64_t si = i + di - 1;
                                        if (si < 0 || si >= H) continue;
                                        for (int dj = 0; dj < 3; ++dj) {
                                            const std::int64_t sj = j + dj - 1;
                                            if (sj < 0 || sj >= W) continue;
                                            gw[std::size_t(((o * ci + c) * 3 + di) * 3 + dj)] +=
                                                gv *
                                                xv[std::size_t(((b * ci + c) * H + si) * W + sj)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                t.accumulate(wi, gw);
            }
            if (bi >= 0) {
                std::vector<double> gb(std::size_t(co), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < co; ++o) {
                        for (std::int64_t i = 0; i < H; ++i) {
                            for (std::int64_t j = 0; j < W; ++j) gb[o] += gat(b, o, i, j);
                        }
                    }
                }
                t.accumulate(bi, gb);
            }
        });
    }
    return y;
}

Tensor channel_mean(const Tensor& x) {
    if (x.shape.c < 1) throw ShapeError("channel_mean: no channels");
    const std::int64_t B = x.shape.b, C = x.shape.c, P = x.shape.h * x.shape.w;
    Tensor y(Shape(B, 1, x.shape.h, x.shape.w));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xd = x.data.data() + (b * C + c) * P;
            double* yd = y.data.data() + b * P;
            for (std::int64_t p = 0; p < P; ++p) yd[p] += xd[p];
        }
    }
    for (auto& v : y.data) v /= double(C);
    check_finite(y, "channel_mean");

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        tp->emit(y, [xi, B, C, P](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gx(std::size_t(B * C * P));
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t c = 0; c < C; ++c) {
                    for (std::int64_t p = 0; p < P; ++p) {
                        gx[std::size_t((b * C + c) * P + p)] = g[std::size_t(b * P + p)] / double(C);
                    }
                }
            }
            t.accumulate(xi, gx);
        });
    }
    return y;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& bias) {
    const std::int64_t C = x.shape.c;
    if (!(scale.shape == Shape(1, C, 1, 1)) || !(bias.shape == Shape(1, C, 1, 1))) {
        throw ShapeError("channel_affine: scale " + scale.shape.str() + " bias " +
                         bias.shape.str() + " for input " + x.shape.str());
    }
    const std::int64_t B = x.shape.b, P = x.shape.h * x.shape.w;
    Tensor y(x.shape);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double s = scale.data[c], t = bias.data[c];
            const double* xd = x.data.data() + (b * C + c) * P;
            double* yd = y.data.data() + (b * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) yd[p] = s * xd[p] + t;
        }
    }
    check_finite(y, "channel_affine");

    Tape* tp = active_tape();
    if (tp && (tp->tracks(x) || tp->tracks(scale) || tp->tracks(bias))) {
        const int xi = tp->node_of(x);
        const int si = tp->node_of(scale);
        const int bi = tp->node_of(bias);
        Saved sx = save_input(tp, x);
        Saved ss = save_input(tp, scale);
        tp->emit(y, [xi, si, bi, sx, ss, B, C, P](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            if (xi >= 0) {
                const auto& sv = ss.get(t);
                std::vector<double> gx(g.size());
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double s = sv[c];
                        for (std::int64_t p = 0; p < P; ++p) {
                            const std::size_t k = std::size_t((b * C + c) * P + p);
                            gx[k] = s * g[k];
                        }
                    }
                }
                t.accumulate(xi, gx);
            }
            if (si >= 0) {
                const auto& xv = sx.get(t);
                std::vector<double> gs(std::size_t(C), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        double acc = 0.0;
                        for (std::int64_t p = 0; p < P; ++p) {
                            const std::size_t k = std::size_t((b * C + c) * P + p);
                            acc += g[k] * xv[k];
                        }
                        gs[c] += acc;
                    }
                }
                t.accumulate(si, gs);
            }
            if (bi >= 0) {
                std::vector<double> gb(std::size_t(C), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        double acc = 0.0;
                        for (std::int64_t p = 0; p < P; ++p) {
                            acc += g[std::size_t((b * C + c) * P + p)];
                        }
                        gb[c] += acc;
                    }
                }
                t.accumulate(bi, gb);
            }
        });
    }
    return y;
}

Tensor channel_slice(const Tensor& x, std::int64_t c0, std::int64_t c1) {
    if (c0 < 0 || c1 <= c0 || c1 > x.shape.c) {
        throw ShapeError("channel_slice: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") of " + x.shape.str());
    }
    const std::int64_t B = x.shape.b, C = x.shape.c, P = x.shape.h * x.shape.w;
    const std::int64_t Cs = c1 - c0;
    Tensor y(Shape(B, Cs, x.shape.h, x.shape.w));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < Cs; ++c) {
            const double* xd = x.data.data() + (b * C + c0 + c) * P;
            double* yd = y.data.data() + (b * Cs + c) * P;
            for (std::int64_t p = 0; p < P; ++p) yd[p] = xd[p];
        }
    }

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        tp->emit(y, [xi, B, C, Cs, c0, P](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gx(std::size_t(B * C * P), 0.0);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t c = 0; c < Cs; ++c) {
                    for (std::int64_t p = 0; p < P; ++p) {
                        gx[std::size_t((b * C + c0 + c) * P + p)] =
                            g[std::size_t((b * Cs + c) * P + p)];
                    }
                }
            }
            t.accumulate(xi, gx);
        });
    }
    return y;
}

Tensor channel_concat(const Tensor& a, const Tensor& b) {
    if (a.shape.b != b.shape.b || a.shape.h != b.shape.h || a.shape.w != b.shape.w) {
        throw ShapeError("channel_concat: " + a.shape.str() + " vs " + b.shape.str());
    }
    const std::int64_t B = a.shape.b, Ca = a.shape.c, Cb = b.shape.c, P = a.shape.h * a.shape.w;
    Tensor y(Shape(B, Ca + Cb, a.shape.h, a.shape.w));
    for (std::int64_t bb = 0; bb < B; ++bb) {
        for (std::int64_t c = 0; c < Ca; ++c) {
            std::copy_n(a.data.data() + (bb * Ca + c) * P, P,
                        y.data.data() + (bb * (Ca + Cb) + c) * P);
        }
        for (std::int64_t c = 0; c < Cb; ++c) {
            std::copy_n(b.data.data() + (bb * Cb + c) * P, P,
                        y.data.data() + (bb * (Ca + Cb) + Ca + c) * P);
        }
    }

    Tape* tp = active_tape();
    if (tp && (tp->tracks(a) || tp->tracks(b))) {
        const int ai = tp->node_of(a);
        const int bi = tp->node_of(b);
        tp->emit(y, [ai, bi, B, Ca, Cb, P](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            if (ai >= 0) {
                std::vector<double> ga(std::size_t(B * Ca * P));
                for (std::int64_t bb = 0; bb < B; ++bb) {
                    for (std::int64_t c = 0; c < Ca; ++c) {
                        std::copy_n(g.data() + (bb * (Ca + Cb) + c) * P, P,
                                    ga.data() + (bb * Ca + c) * P);
                    }
                }
                t.accumulate(ai, ga);
            }
            if (bi >= 0) {
                std::vector<double> gb(std::size_t(B * Cb * P));
                for (std::int64_t bb = 0; bb < B; ++bb) {
                    for (std::int64_t c = 0; c < Cb; ++c) {
                        std::copy_n(g.data() + (bb * (Ca + Cb) + Ca + c) * P, P,
                                    gb.data() + (bb * Cb + c) * P);
                    }
                }
                t.accumulate(bi, gb);
            }
        });
    }
    return y;
}

Tensor spatial_scale(const Tensor& x, const Tensor& s) {
    if (!(s.shape == Shape(x.shape.b, 1, x.shape.h, x.shape.w))) {
        throw ShapeError("spatial_scale: scale " + s.shape.str() + " for input " + x.shape.str());
    }
    const std::int64_t B = x.shape.b, C = x.shape.c, P = x.shape.h * x.shape.w;
    Tensor y(x.shape);
    for (std::int64_t b = 0; b < B; ++b) {
        const double* sd = s.data.data() + b * P;
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xd = x.data.data() + (b * C + c) * P;
            double* yd = y.data.data() + (b * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) yd[p] = sd[p] * xd[p];
        }
    }
    check_finite(y, "spatial_scale");

    Tape* tp = active_tape();
    if (tp && (tp->tracks(x) || tp->tracks(s))) {
        const int xi = tp->node_of(x);
        const int si = tp->node_of(s);
        Saved sx = save_input(tp, x);
        Saved ssc = save_input(tp, s);
        tp->emit(y, [xi, si, sx, ssc, B, C, P](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            if (xi >= 0) {
                const auto& sv = ssc.get(t);
                std::vector<double> gx(g.size());
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        for (std::int64_t p = 0; p < P; ++p) {
                            const std::size_t k = std::size_t((b * C + c) * P + p);
                            gx[k] = sv[std::size_t(b * P + p)] * g[k];
                        }
                    }
                }
                t.accumulate(xi, gx);
            }
            if (si >= 0) {
                const auto& xv = sx.get(t);
                std::vector<double> gs(std::size_t(B * P), 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        for (std::int64_t p = 0; p < P; ++p) {
                            const std::size_t k = std::size_t((b * C + c) * P + p);
                            gs[std::size_t(b * P + p)] += xv[k] * g[k];
                        }
                    }
                }
                t.accumulate(si, gs);
            }
        });
    }
    return y;
}

Tensor broadcast_batch(const Tensor& x, std::int64_t batch) {
    if (x.shape.b != 1) throw ShapeError("broadcast_batch: input batch must be 1");
    const std::int64_t n = x.numel();
    Tensor y(Shape(batch, x.shape.c, x.shape.h, x.shape.w));
    for (std::int64_t b = 0; b < batch; ++b) {
        std::copy_n(x.data.data(), n, y.data.data() + b * n);
    }

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        tp->emit(y, [xi, batch, n](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gx(std::size_t(n), 0.0);
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t i = 0; i < n; ++i) gx[i] += g[std::size_t(b * n + i)];
            }
            t.accumulate(xi, gx);
        });
    }
    return y;
}

namespace {

struct MatView {
    const double* d;
    std::int64_t rows, cols;
    bool trans;
    double at(std::int64_t i, std::int64_t j) const {
        return trans ? d[j * rows /*phys cols*/ + i] : d[i * cols + j];
    }
};

// c (m x n) += A (m x k) * B (k x n)
void mm_acc(double* c, const double* a, std::int64_t am, std::int64_t an, bool ta,
            const double* b, std::int64_t bm, std::int64_t bn, bool tb) {
    const std::int64_t m = ta ? an : am;
    const std::int64_t k = ta ? am : an;
    const std::int64_t n = tb ? bm : bn;
    auto A = [&](std::int64_t i, std::int64_t j) { return ta ? a[j * an + i] : a[i * an + j]; };
    auto B = [&](std::int64_t i, std::int64_t j) { return tb ? b[j * bn + i] : b[i * bn + j]; };
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += A(i, p) * B(p, j);
            c[i * n + j] += acc;
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
    if (a.shape.c != 1 || b.shape.c != 1) {
        throw ShapeError("matmul: operands must be (B,1,m,n), got " + a.shape.str() + " and " +
                         b.shape.str());
    }
    const std::int64_t m = transpose_a ? a.shape.w : a.shape.h;
    const std::int64_t k1 = transpose_a ? a.shape.h : a.shape.w;
    const std::int64_t k2 = transpose_b ? b.shape.w : b.shape.h;
    const std::int64_t n = transpose_b ? b.shape.h : b.shape.w;
    if (k1 != k2) {
        throw ShapeError("matmul: inner dims " + std::to_string(k1) + " vs " +
                         std::to_string(k2));
    }
    const std::int64_t Ba = a.shape.b, Bb = b.shape.b;
    if (Ba != Bb && Ba != 1 && Bb != 1) {
        throw ShapeError("matmul: batch " + std::to_string(Ba) + " vs " + std::to_string(Bb));
    }
    const std::int64_t B = std::max(Ba, Bb);
    const std::int64_t na = a.shape.h * a.shape.w;
    const std::int64_t nb = b.shape.h * b.shape.w;
    Tensor y(Shape(B, 1, m, n));
    for (std::int64_t bb = 0; bb < B; ++bb) {
        const double* ad = a.data.data() + (Ba == 1 ? 0 : bb * na);
        const double* bd = b.data.data() + (Bb == 1 ? 0 : bb * nb);
        mm_acc(y.data.data() + bb * m * n, ad, a.shape.h, a.shape.w, transpose_a, bd, b.shape.h,
               b.shape.w, transpose_b);
    }
    check_finite(y, "matmul");

    Tape* tp = active_tape();
    if (tp && (tp->tracks(a) || tp->tracks(b))) {
        const int ai = tp->node_of(a);
        const int bi = tp->node_of(b);
        Saved sa = save_input(tp, a);
        Saved sb = save_input(tp, b);
        const Shape as = a.shape, bs = b.shape;
        const bool ta = transpose_a, tb = transpose_b;
        tp->emit(y, [ai, bi, sa, sb, as, bs, ta, tb, B, m, n, k1](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            const std::int64_t na = as.h * as.w, nb = bs.h * bs.w;
            // dA_eff = g * B_eff^T ; dB_eff = A_eff^T * g
            if (ai >= 0) {
                const auto& bv = sb.get(t);
                std::vector<double> ga(std::size_t(as.numel()), 0.0);
                for (std::int64_t bb = 0; bb < B; ++bb) {
                    const double* gd = g.data() + bb * m * n;
                    const double* bd = bv.data() + (bs.b == 1 ? 0 : bb * nb);
                    double* gad = ga.data() + (as.b == 1 ? 0 : bb * na);
                    if (!ta) {
                        // dA(m x k) = g (m x n) * B_eff^T (n x k)
                        mm_acc(gad, gd, m, n, false, bd, bs.h, bs.w, !tb);
                    } else {
                        // A is stored (k x m); dA_stored = B_eff (k x n) * g^T (n x m)
                        mm_acc(gad, bd, bs.h, bs.w, tb, gd, m, n, true);
                    }
                }
                t.accumulate(ai, ga);
            }
            if (bi >= 0) {
                const auto& av = sa.get(t);
                std::vector<double> gb(std::size_t(bs.numel()), 0.0);
                for (std::int64_t bb = 0; bb < B; ++bb) {
                    const double* gd = g.data() + bb * m * n;
                    const double* ad = av.data() + (as.b == 1 ? 0 : bb * na);
                    double* gbd = gb.data() + (bs.b == 1 ? 0 : bb * nb);
                    if (!tb) {
                        // dB (k x n) = A_eff^T (k x m) * g (m x n)
                        mm_acc(gbd, ad, as.h, as.w, !ta, gd, m, n, false);
                    } else {
                        // B stored (n x k); dB_stored = g^T (n x m) * A_eff (m x k)
                        mm_acc(gbd, gd, m, n, true, ad, as.h, as.w, ta);
                    }
                }
                t.accumulate(bi, gb);
            }
            (void)k1;
        });
    }
    return y;
}

Tensor row_softmax(const Tensor& x) {
    if (x.shape.c != 1) throw ShapeError("row_softmax: expected (B,1,m,n), got " + x.shape.str());
    const std::int64_t B = x.shape.b, m = x.shape.h, n = x.shape.w;
    Tensor y(x.shape);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < m; ++i) {
            const double* xd = x.data.data() + (b * m + i) * n;
            double* yd = y.data.data() + (b * m + i) * n;
            double mx = xd[0];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xd[j]);
            double sum = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                yd[j] = std::exp(xd[j] - mx);
                sum += yd[j];
            }
            for (std::int64_t j = 0; j < n; ++j) yd[j] /= sum;
        }
    }
    check_finite(y, "row_softmax");

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        tp->emit(y, [xi, B, m, n](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            const auto& yv = t.value(self);
            std::vector<double> gx(g.size());
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t i = 0; i < m; ++i) {
                    const std::size_t off = std::size_t((b * m + i) * n);
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) dot += g[off + j] * yv[off + j];
                    for (std::int64_t j = 0; j < n; ++j) {
                        gx[off + j] = yv[off + j] * (g[off + j] - dot);
                    }
                }
            }
            t.accumulate(xi, gx);
        });
    }
    return y;
}

Tensor logabsdet_batched(const Tensor& w) {
    if (w.shape.c != 1 || w.shape.h != w.shape.w) {
        throw ShapeError("logabsdet: expected (B,1,m,m), got " + w.shape.str());
    }
    const std::int64_t B = w.shape.b;
    const int m = static_cast<int>(w.shape.h);
    Tensor y(Shape(B, 1, 1, 1));
    auto factors = std::make_shared<std::vector<LuFactors>>();
    factors->reserve(std::size_t(B));
    for (std::int64_t b = 0; b < B; ++b) {
        std::vector<double> block(w.data.begin() + b * m * m, w.data.begin() + (b + 1) * m * m);
        try {
            factors->push_back(lu_factor(m, block));
        } catch (const SingularMatrixError& e) {
            throw SingularMatrixError(std::string(e.what()) + " (batch sample " +
                                          std::to_string(b) + ")",
                                      e.pivot_index);
        }
        y.data[std::size_t(b)] = lu_logabsdet((*factors)[std::size_t(b)]);
    }
    check_finite(y, "logabsdet");

    Tape* tp = active_tape();
    if (tp && tp->tracks(w)) {
        const int wi = tp->node_of(w);
        tp->emit(y, [wi, factors, B, m](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gw(std::size_t(B) * m * m);
            const Mat id = Mat::identity(m);
            for (std::int64_t b = 0; b < B; ++b) {
                const Mat inv = lu_solve((*factors)[std::size_t(b)], id);
                // d log|det W| / dW = (W^-1)^T
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < m; ++j) {
                        gw[std::size_t(b * m * m + i * m + j)] =
                            g[std::size_t(b)] * inv.at(j, i);
                    }
                }
            }
            t.accumulate(wi, gw);
        });
    }
    return y;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data) s += v;
    Tensor y = Tensor::scalar(s);
    check_finite(y, "sum_all");

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        const std::size_t n = x.data.size();
        tp->emit(y, [xi, n](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            t.accumulate(xi, std::vector<double>(n, g[0]));
        });
    }
    return y;
}

Tensor sum_per_sample(const Tensor& x) {
    const std::int64_t B = x.shape.b;
    const std::int64_t n = x.shape.c * x.shape.h * x.shape.w;
    Tensor y(Shape(B, 1, 1, 1));
    for (std::int64_t b = 0; b < B; ++b) {
        double s = 0.0;
        const double* xd = x.data.data() + b * n;
        for (std::int64_t i = 0; i < n; ++i) s += xd[i];
        y.data[std::size_t(b)] = s;
    }
    check_finite(y, "sum_per_sample");

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        tp->emit(y, [xi, B, n](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gx(std::size_t(B * n));
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t i = 0; i < n; ++i) gx[std::size_t(b * n + i)] = g[std::size_t(b)];
            }
            t.accumulate(xi, gx);
        });
    }
    return y;
}

namespace {

// squeeze mapping: y[b, c*4 + di*2 + dj, i, j] = x[b, c, 2i+di, 2j+dj]
void squeeze_map(const Shape& xs, std::vector<std::size_t>& to_y) {
    const std::int64_t B = xs.b, C = xs.c, H = xs.h, W = xs.w;
    const std::int64_t Ho = H / 2, Wo = W / 2;
    to_y.resize(std::size_t(xs.numel()));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    const std::int64_t oc = c * 4 + (i % 2) * 2 + (j % 2);
                    const std::size_t xk = std::size_t(((b * C + c) * H + i) * W + j);
                    const std::size_t yk =
                        std::size_t(((b * C * 4 + oc) * Ho + i / 2) * Wo + j / 2);
                    to_y[xk] = yk;
                }
            }
        }
    }
}

}  // namespace

Tensor squeeze2x2(const Tensor& x) {
    if (x.shape.h % 2 != 0 || x.shape.w % 2 != 0) {
        throw ShapeError("squeeze: spatial dims must be even, got " + x.shape.str());
    }
    std::vector<std::size_t> to_y;
    squeeze_map(x.shape, to_y);
    Tensor y(Shape(x.shape.b, x.shape.c * 4, x.shape.h / 2, x.shape.w / 2));
    for (std::size_t k = 0; k < x.data.size(); ++k) y.data[to_y[k]] = x.data[k];

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        auto map = std::make_shared<std::vector<std::size_t>>(std::move(to_y));
        tp->emit(y, [xi, map](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gx(map->size());
            for (std::size_t k = 0; k < map->size(); ++k) gx[k] = g[(*map)[k]];
            t.accumulate(xi, gx);
        });
    }
    return y;
}

Tensor unsqueeze2x2(const Tensor& x) {
    if (x.shape.c % 4 != 0) {
        throw ShapeError("unsqueeze: channels must be divisible by 4, got " + x.shape.str());
    }
    const Shape ys(x.shape.b, x.shape.c / 4, x.shape.h * 2, x.shape.w * 2);
    std::vector<std::size_t> to_x;  // maps y (unsqueezed) index -> x (squeezed) index
    squeeze_map(ys, to_x);
    Tensor y(ys);
    for (std::size_t k = 0; k < y.data.size(); ++k) y.data[k] = x.data[to_x[k]];

    Tape* tp = active_tape();
    if (tp && tp->tracks(x)) {
        const int xi = tp->node_of(x);
        auto map = std::make_shared<std::vector<std::size_t>>(std::move(to_x));
        tp->emit(y, [xi, map](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gx(map->size());
            for (std::size_t k = 0; k < map->size(); ++k) gx[(*map)[k]] = g[k];
            t.accumulate(xi, gx);
        });
    }
    return y;
}

Tensor diag_embed(const Tensor& v) {
    if (!(v.shape == Shape(1, 1, 1, v.shape.w))) {
        throw ShapeError("diag_embed: expected (1,1,1,C), got " + v.shape.str());
    }
    const std::int64_t C = v.shape.w;
    Tensor y(Shape(1, 1, C, C));
    for (std::int64_t k = 0; k < C; ++k) y.data[std::size_t(k * C + k)] = v.data[std::size_t(k)];

    Tape* tp = active_tape();
    if (tp && tp->tracks(v)) {
        const int vi = tp->node_of(v);
        tp->emit(y, [vi, C](Tape& t, int self) {
            const auto& g = t.adjoint(self);
            std::vector<double> gv(static_cast<std::size_t>(C));
            for (std::int64_t k = 0; k < C; ++k) gv[std::size_t(k)] = g[std::size_t(k * C + k)];
            t.accumulate(vi, gv);
        });
    }
    return y;
}

Tensor detach(const Tensor& x) {
    Tensor y(x.shape, x.data);
    return y;
}

}  // namespace attnflow
