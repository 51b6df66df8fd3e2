#include "attnflow/layers.hpp"

#include <cmath>

namespace attnflow {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * log(2*pi)
constexpr double kLogScaleClamp = 1.9;
}  // namespace

std::pair<Tensor, Tensor> layer_forward(FlowLayer& layer, const Tensor& x, const Tensor* cond) {
    FlowState s;
    s.h = x;
    s.logdet = Tensor(Shape(x.shape.b, 1, 1, 1));
    s.logprior = Tensor(Shape(x.shape.b, 1, 1, 1));
    layer.forward(s, cond);
    return {s.h, s.logdet};
}

Tensor layer_inverse(const FlowLayer& layer, const Tensor& y, const Tensor* cond) {
    InverseState s;
    s.h = y;
    layer.inverse(s, cond);
    return s.h;
}

// --------------------------------------------------------------------------
// Actnorm

Actnorm::Actnorm(std::string name, std::int64_t channels)
    : FlowLayer(std::move(name)),
      log_scale(Shape(1, channels, 1, 1)),
      bias(Shape(1, channels, 1, 1)),
      channels_(channels) {}

void Actnorm::init_from_batch(const Tensor& x) {
    const std::int64_t B = x.shape.b, C = x.shape.c, P = x.shape.h * x.shape.w;
    const double n = double(B * P);
    for (std::int64_t c = 0; c < C; ++c) {
        double mean = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* xd = x.data.data() + (b * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) mean += xd[p];
        }
        mean /= n;
        double var = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* xd = x.data.data() + (b * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) {
                const double d = xd[p] - mean;
                var += d * d;
            }
        }
        var /= n;
        const double sd = std::sqrt(var + 1e-6);
        log_scale.data[std::size_t(c)] = -std::log(sd);
        bias.data[std::size_t(c)] = -mean / sd;
    }
}

void Actnorm::forward(FlowState& s, const Tensor*) {
    if (s.h.shape.c != channels_) {
        throw ShapeError(name() + ": expected " + std::to_string(channels_) + " channels, got " +
                         s.h.shape.str());
    }
    if (!initialized_) {
        std::lock_guard<std::mutex> guard(init_mutex_);
        if (!initialized_) {
            init_from_batch(s.h);
            initialized_ = true;
        }
    }
    const double hw = double(s.h.shape.h * s.h.shape.w);
    s.h = channel_affine(s.h, exp(log_scale), bias);
    s.logdet = add(s.logdet, mul(sum_all(log_scale), hw));
}

void Actnorm::inverse(InverseState& s, const Tensor*) const {
    if (!initialized_) {
        throw Error(name() + ": inverse before initialization");
    }
    Tensor inv_scale(log_scale.shape);
    Tensor inv_bias(bias.shape);
    for (std::size_t c = 0; c < inv_scale.data.size(); ++c) {
        inv_scale.data[c] = std::exp(-log_scale.data[c]);
        inv_bias.data[c] = -bias.data[c] * inv_scale.data[c];
    }
    s.h = channel_affine(s.h, inv_scale, inv_bias);
}

void Actnorm::params(ParamMap& out) {
    out.emplace_back(name() + ".log_scale", &log_scale);
    out.emplace_back(name() + ".bias", &bias);
}

// --------------------------------------------------------------------------
// InvConv1x1

InvConv1x1::InvConv1x1(std::string name, std::int64_t channels, Rng* rng)
    : FlowLayer(std::move(name)),
      lower(Shape(1, 1, channels, channels)),
      upper(Shape(1, 1, channels, channels)),
      log_s(Shape(1, 1, 1, channels)),
      channels_(channels),
      perm_(std::size_t(channels)),
      perm_matrix_(Shape(1, 1, channels, channels)),
      sign_s_(Shape(1, 1, 1, channels)),
      lower_mask_(Shape(1, 1, channels, channels)),
      upper_mask_(Shape(1, 1, channels, channels)),
      identity_(Shape(1, 1, channels, channels)) {
    const std::int64_t C = channels;
    for (std::int64_t i = 0; i < C; ++i) {
        identity_.data[std::size_t(i * C + i)] = 1.0;
        for (std::int64_t j = 0; j < C; ++j) {
            if (i > j) lower_mask_.data[std::size_t(i * C + j)] = 1.0;
            if (i < j) upper_mask_.data[std::size_t(i * C + j)] = 1.0;
        }
    }
    for (std::int64_t i = 0; i < C; ++i) perm_[std::size_t(i)] = int(i);
    for (auto& v : sign_s_.data) v = 1.0;

    if (rng) {
        SquareMatrix w0 = random_rotation(int(C), *rng);
        const LuFactors f = lu_factor(int(C), w0.entries());
        perm_ = f.perm;
        for (std::int64_t i = 0; i < C; ++i) {
            for (std::int64_t j = 0; j < C; ++j) {
                const double v = f.lu[std::size_t(i * C + j)];
                if (i > j) lower.data[std::size_t(i * C + j)] = v;
                if (i < j) upper.data[std::size_t(i * C + j)] = v;
            }
            const double d = f.lu[std::size_t(i * C + i)];
            log_s.data[std::size_t(i)] = std::log(std::fabs(d));
            sign_s_.data[std::size_t(i)] = d < 0 ? -1.0 : 1.0;
        }
    }
    for (std::int64_t i = 0; i < C; ++i) {
        perm_matrix_.data[std::size_t(std::int64_t(perm_[std::size_t(i)]) * C + i)] = 1.0;
    }
}

Tensor InvConv1x1::assemble() const {
    Tensor l_full = add(mul(lower, lower_mask_), identity_);
    Tensor u_full = add(mul(upper, upper_mask_), diag_embed(mul(exp(log_s), sign_s_)));
    return matmul(perm_matrix_, matmul(l_full, u_full));
}

SquareMatrix InvConv1x1::weight() const {
    const std::int64_t C = channels_;
    // plain (tape-free) assembly
    std::vector<double> l(std::size_t(C * C), 0.0), u(std::size_t(C * C), 0.0);
    for (std::int64_t i = 0; i < C; ++i) {
        l[std::size_t(i * C + i)] = 1.0;
        for (std::int64_t j = 0; j < C; ++j) {
            if (i > j) l[std::size_t(i * C + j)] = lower.data[std::size_t(i * C + j)];
            if (i < j) u[std::size_t(i * C + j)] = upper.data[std::size_t(i * C + j)];
        }
        u[std::size_t(i * C + i)] =
            sign_s_.data[std::size_t(i)] * std::exp(log_s.data[std::size_t(i)]);
    }
    SquareMatrix w(static_cast<int>(C));
    for (std::int64_t i = 0; i < C; ++i) {
        for (std::int64_t j = 0; j < C; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k <= std::min(i, j); ++k) {
                acc += l[std::size_t(i * C + k)] * u[std::size_t(k * C + j)];
            }
            w.at(int(perm_[std::size_t(i)]), int(j)) = acc;
        }
    }
    return w;
}

void InvConv1x1::forward(FlowState& s, const Tensor*) {
    const double hw = double(s.h.shape.h * s.h.shape.w);
    s.h = conv1x1(s.h, assemble());
    s.logdet = add(s.logdet, mul(sum_all(log_s), hw));
}

void InvConv1x1::inverse(InverseState& s, const Tensor*) const {
    const Tensor& y = s.h;
    const std::int64_t B = y.shape.b, C = y.shape.c, P = y.shape.h * y.shape.w;
    const SquareMatrix w = weight();
    const LuFactors& f = w.lu();
    Mat rhs(int(C), int(B * P));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* yd = y.data.data() + (b * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) rhs.at(int(c), int(b * P + p)) = yd[p];
        }
    }
    const Mat sol = lu_solve(f, rhs);
    Tensor x(y.shape);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            double* xd = x.data.data() + (b * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) xd[p] = sol.at(int(c), int(b * P + p));
        }
    }
    s.h = x;
}

void InvConv1x1::params(ParamMap& out) {
    out.emplace_back(name() + ".lower", &lower);
    out.emplace_back(name() + ".upper", &upper);
    out.emplace_back(name() + ".log_s", &log_s);
}

// --------------------------------------------------------------------------
// CouplingNet

CouplingNet::CouplingNet(std::int64_t in_channels, std::int64_t hidden, std::int64_t out_channels,
                         Rng& rng)
    : w1(normal_tensor(Shape(1, 1, hidden, in_channels), rng, 0.05)),
      b1(Shape(1, hidden, 1, 1)),
      w2(normal_tensor(Shape(1, 1, hidden, hidden), rng, 0.05)),
      b2(Shape(1, hidden, 1, 1)),
      w3(Shape(out_channels, hidden, 3, 3)),
      b3(Shape(1, out_channels, 1, 1)) {}

Tensor CouplingNet::apply(const Tensor& in) const {
    Tensor h = softplus(conv1x1(in, w1, &b1));
    h = softplus(conv1x1(h, w2, &b2));
    return conv3x3(h, w3, &b3);
}

void CouplingNet::params(const std::string& prefix, ParamMap& out) {
    out.emplace_back(prefix + ".w1", &w1);
    out.emplace_back(prefix + ".b1", &b1);
    out.emplace_back(prefix + ".w2", &w2);
    out.emplace_back(prefix + ".b2", &b2);
    out.emplace_back(prefix + ".w3", &w3);
    out.emplace_back(prefix + ".b3", &b3);
}

// --------------------------------------------------------------------------
// Split rules

SplitSpec make_split_spec(SplitRuleKind kind, std::int64_t c, std::int64_t h, std::int64_t w,
                          int phase, std::uint64_t seed) {
    SplitSpec spec;
    spec.kind = kind;
    if (kind == SplitRuleKind::Checkerboard2D) {
        spec.mask = CheckerboardMask::make_2d(h, w, phase);
    } else if (kind == SplitRuleKind::Permuted3D) {
        spec.mask = CheckerboardMask::make_3d(c, h, w, seed);
    }
    return spec;
}

// --------------------------------------------------------------------------
// AffineCoupling

AffineCoupling::AffineCoupling(std::string name, std::int64_t channels, std::int64_t h,
                               std::int64_t w, std::int64_t hidden, SplitSpec split, Rng& rng,
                               std::int64_t cond_channels)
    : FlowLayer(std::move(name)),
      channels_(channels),
      split_(std::move(split)),
      conditional_(cond_channels > 0) {
    (void)h;
    (void)w;
    if (split_.kind == SplitRuleKind::ChannelHalves) {
        if (channels % 2 != 0) {
            throw ShapeError(this->name() + ": channel split requires even channels, got " +
                             std::to_string(channels));
        }
        const std::int64_t ca = channels / 2;
        net = CouplingNet(channels - ca + cond_channels, hidden, 2 * ca, rng);
    } else {
        net = CouplingNet(channels + cond_channels, hidden, 2 * channels, rng);
    }
}

Tensor AffineCoupling::net_input(const Tensor& x, const Tensor* cond) const {
    Tensor base;
    if (split_.kind == SplitRuleKind::ChannelHalves) {
        base = channel_slice(x, channels_ / 2, channels_);
    } else {
        base = apply_mask(x, *split_.mask, Half::A);
    }
    if (conditional_) {
        if (!cond) throw DataError(name() + ": conditional coupling is missing its condition");
        if (cond->shape.h != x.shape.h || cond->shape.w != x.shape.w ||
            cond->shape.b != x.shape.b) {
            throw ShapeError(name() + ": condition " + cond->shape.str() +
                             " misaligned with input " + x.shape.str());
        }
        base = channel_concat(base, *cond);
    }
    return base;
}

std::pair<Tensor, Tensor> AffineCoupling::scale_shift(const Tensor& x, const Tensor* cond) const {
    const Tensor nn = net.apply(net_input(x, cond));
    const std::int64_t t = (split_.kind == SplitRuleKind::ChannelHalves) ? channels_ / 2
                                                                         : channels_;
    Tensor ls = scaled_tanh(channel_slice(nn, 0, t), kLogScaleClamp);
    Tensor shift = channel_slice(nn, t, 2 * t);
    return {std::move(ls), std::move(shift)};
}

void AffineCoupling::forward(FlowState& s, const Tensor* cond) {
    const Tensor x = s.h;
    auto [ls, t] = scale_shift(x, cond);
    if (split_.kind == SplitRuleKind::ChannelHalves) {
        const std::int64_t ca = channels_ / 2;
        Tensor xa = channel_slice(x, 0, ca);
        Tensor xb = channel_slice(x, ca, channels_);
        Tensor ya = add(mul(xa, exp(ls)), t);
        s.h = channel_concat(ya, xb);
        s.logdet = add(s.logdet, sum_per_sample(ls));
    } else {
        const CheckerboardMask& m = *split_.mask;
        Tensor transformed = add(mul(x, exp(ls)), t);
        s.h = add(apply_mask(x, m, Half::A), apply_mask(transformed, m, Half::B));
        s.logdet = add(s.logdet, sum_per_sample(apply_mask(ls, m, Half::B)));
    }
}

void AffineCoupling::inverse(InverseState& s, const Tensor* cond) const {
    const Tensor y = s.h;
    auto [ls, t] = scale_shift(y, cond);  // conditioning part of y equals x's
    if (split_.kind == SplitRuleKind::ChannelHalves) {
        const std::int64_t ca = channels_ / 2;
        Tensor ya = channel_slice(y, 0, ca);
        Tensor xb = channel_slice(y, ca, channels_);
        Tensor xa = mul(sub(ya, t), exp(neg(ls)));
        s.h = channel_concat(xa, xb);
    } else {
        const CheckerboardMask& m = *split_.mask;
        Tensor xt = mul(sub(y, t), exp(neg(ls)));
        s.h = add(apply_mask(y, m, Half::A), apply_mask(xt, m, Half::B));
    }
}

void AffineCoupling::params(ParamMap& out) { net.params(name() + ".net", out); }

// --------------------------------------------------------------------------
// MixtureCoupling

struct MixtureCoupling::Heads {
    Tensor ls, t;
    std::vector<Tensor> w;      // softmax mixture weights, K tensors
    std::vector<Tensor> mu;
    std::vector<Tensor> lshat;  // log component scales
};

namespace {

// elementwise max across a set of equal-shaped tensors, as an untracked constant
Tensor elementwise_max_constant(const std::vector<Tensor>& ts) {
    Tensor m(ts[0].shape, ts[0].data);
    m.tape_id = -1;
    m.tape_epoch = 0;
    for (std::size_t k = 1; k < ts.size(); ++k) {
        for (std::size_t i = 0; i < m.data.size(); ++i) {
            m.data[i] = std::max(m.data[i], ts[k].data[i]);
        }
    }
    return m;
}

}  // namespace

MixtureCoupling::MixtureCoupling(std::string name, std::int64_t channels, std::int64_t h,
                                 std::int64_t w, std::int64_t hidden, int components,
                                 SplitSpec split, Rng& rng)
    : FlowLayer(std::move(name)), channels_(channels), components_(components),
      split_(std::move(split)) {
    (void)h;
    (void)w;
    if (components < 1) throw DomainError(this->name() + ": mixture needs >= 1 component");
    std::int64_t t;
    std::int64_t in;
    if (split_.kind == SplitRuleKind::ChannelHalves) {
        if (channels % 2 != 0) {
            throw ShapeError(this->name() + ": channel split requires even channels");
        }
        t = channels / 2;
        in = channels - t;
    } else {
        t = channels;
        in = channels;
    }
    net = CouplingNet(in, hidden, (2 + 3 * components) * t, rng);
}

void MixtureCoupling::forward(FlowState& s, const Tensor* cond) {
    (void)cond;
    const Tensor x = s.h;
    const bool channel_rule = split_.kind == SplitRuleKind::ChannelHalves;
    const std::int64_t t = channel_rule ? channels_ / 2 : channels_;
    const int K = components_;

    Tensor cond_part = channel_rule ? channel_slice(x, t, channels_)
                                    : apply_mask(x, *split_.mask, Half::A);
    const Tensor nn = net.apply(cond_part);

    Heads hd;
    hd.ls = scaled_tanh(channel_slice(nn, 0, t), kLogScaleClamp);
    hd.t = channel_slice(nn, t, 2 * t);
    std::vector<Tensor> pi_raw;
    for (int k = 0; k < K; ++k) {
        pi_raw.push_back(channel_slice(nn, (2 + k) * t, (3 + k) * t));
        hd.mu.push_back(channel_slice(nn, (2 + K + k) * t, (3 + K + k) * t));
        hd.lshat.push_back(channel_slice(nn, (2 + 2 * K + k) * t, (3 + 2 * K + k) * t));
    }
    const Tensor mx = elementwise_max_constant(pi_raw);
    std::vector<Tensor> e;
    Tensor denom;
    for (int k = 0; k < K; ++k) {
        e.push_back(exp(sub(pi_raw[std::size_t(k)], mx)));
        denom = (k == 0) ? e.back() : add(denom, e.back());
    }
    for (int k = 0; k < K; ++k) hd.w.push_back(div(e[std::size_t(k)], denom));

    // values the monotone map acts on; half-A entries are zeroed for mask
    // rules so the discarded branch stays in-domain
    Tensor xt = channel_rule ? channel_slice(x, 0, t) : apply_mask(x, *split_.mask, Half::B);

    Tensor F, fp;
    for (int k = 0; k < K; ++k) {
        Tensor inv_sd = exp(neg(hd.lshat[std::size_t(k)]));
        Tensor sg = sigmoid(mul(sub(xt, hd.mu[std::size_t(k)]), inv_sd));
        Tensor term = mul(hd.w[std::size_t(k)], sg);
        Tensor dterm = mul(mul(hd.w[std::size_t(k)], mul(sg, sub(1.0, sg))), inv_sd);
        F = (k == 0) ? term : add(F, term);
        fp = (k == 0) ? dterm : add(fp, dterm);
    }

    Tensor yt = add(mul(logit(F), exp(hd.ls)), hd.t);
    Tensor ld = add(sub(sub(log(fp), log(F)), log(sub(1.0, F))), hd.ls);

    if (channel_rule) {
        s.h = channel_concat(yt, channel_slice(x, t, channels_));
        s.logdet = add(s.logdet, sum_per_sample(ld));
    } else {
        const CheckerboardMask& m = *split_.mask;
        s.h = add(apply_mask(x, m, Half::A), apply_mask(yt, m, Half::B));
        s.logdet = add(s.logdet, sum_per_sample(apply_mask(ld, m, Half::B)));
    }
}

namespace {

double mixture_cdf(double x, const double* w, const double* mu, const double* inv_sd, int K) {
    double s = 0.0;
    for (int k = 0; k < K; ++k) {
        const double z = (x - mu[k]) * inv_sd[k];
        s += w[k] * (z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
    }
    return s;
}

double invert_mixture_cdf(double target, const double* w, const double* mu, const double* sd,
                          const double* inv_sd, int K, const std::string& where) {
    double mu_lo = mu[0], mu_hi = mu[0], sd_max = sd[0];
    for (int k = 1; k < K; ++k) {
        mu_lo = std::min(mu_lo, mu[k]);
        mu_hi = std::max(mu_hi, mu[k]);
        sd_max = std::max(sd_max, sd[k]);
    }
    double lo = mu_lo - 20.0 * sd_max;
    double hi = mu_hi + 20.0 * sd_max;
    double span = hi - lo;
    int tries = 0;
    while (mixture_cdf(lo, w, mu, inv_sd, K) > target) {
        lo -= span;
        span *= 2.0;
        if (++tries > 60) {
            throw DomainError("mixture inverse: bisection bracket failure (low side) at " + where);
        }
    }
    span = hi - lo;
    tries = 0;
    while (mixture_cdf(hi, w, mu, inv_sd, K) < target) {
        hi += span;
        span *= 2.0;
        if (++tries > 60) {
            throw DomainError("mixture inverse: bisection bracket failure (high side) at " +
                              where);
        }
    }
    double mid = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        mid = 0.5 * (lo + hi);
        if (mixture_cdf(mid, w, mu, inv_sd, K) < target) {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo < 1e-13 * std::max(1.0, std::fabs(mid))) break;
    }
    mid = 0.5 * (lo + hi);
    const double residual = std::fabs(mixture_cdf(mid, w, mu, inv_sd, K) - target);
    if (residual > 1e-10) {
        throw NumericalError("mixture inverse: bisection residual " + std::to_string(residual) +
                             " at " + where);
    }
    return mid;
}

}  // namespace

void MixtureCoupling::inverse(InverseState& s, const Tensor* cond) const {
    (void)cond;
    const Tensor y = s.h;
    const bool channel_rule = split_.kind == SplitRuleKind::ChannelHalves;
    const std::int64_t t = channel_rule ? channels_ / 2 : channels_;
    const int K = components_;

    Tensor cond_part = channel_rule ? channel_slice(y, t, channels_)
                                    : apply_mask(y, *split_.mask, Half::A);
    const Tensor nn = net.apply(cond_part);
    Tensor ls = scaled_tanh(channel_slice(nn, 0, t), kLogScaleClamp);
    Tensor shift = channel_slice(nn, t, 2 * t);

    std::vector<Tensor> pi_raw, mu, lshat;
    for (int k = 0; k < K; ++k) {
        pi_raw.push_back(channel_slice(nn, (2 + k) * t, (3 + k) * t));
        mu.push_back(channel_slice(nn, (2 + K + k) * t, (3 + K + k) * t));
        lshat.push_back(channel_slice(nn, (2 + 2 * K + k) * t, (3 + 2 * K + k) * t));
    }

    // transformed elements in a (B, t, H, W) view; for mask rules only the
    // half-B entries are solved
    Tensor yt = channel_rule ? channel_slice(y, 0, t) : y;
    Tensor xt(yt.shape);

    const std::int64_t B = yt.shape.b, P = yt.shape.h * yt.shape.w;
    std::vector<double> w(static_cast<std::size_t>(K));
    std::vector<double> muv(static_cast<std::size_t>(K));
    std::vector<double> sdv(static_cast<std::size_t>(K));
    std::vector<double> inv_sd(static_cast<std::size_t>(K));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < t; ++c) {
            for (std::int64_t p = 0; p < P; ++p) {
                if (!channel_rule) {
                    const CheckerboardMask& m = *split_.mask;
                    const std::int64_t flat =
                        (m.kind() == MaskKind::Spatial2D) ? p : c * P + p;
                    if (m.in_half_a(flat)) continue;  // half A passes through
                }
                const std::size_t idx = std::size_t((b * t + c) * P + p);
                double wsum = 0.0, wmax = -1e300;
                for (int k = 0; k < K; ++k) wmax = std::max(wmax, pi_raw[std::size_t(k)].data[idx]);
                for (int k = 0; k < K; ++k) {
                    w[std::size_t(k)] = std::exp(pi_raw[std::size_t(k)].data[idx] - wmax);
                    wsum += w[std::size_t(k)];
                }
                for (int k = 0; k < K; ++k) {
                    w[std::size_t(k)] /= wsum;
                    muv[std::size_t(k)] = mu[std::size_t(k)].data[idx];
                    const double lh = lshat[std::size_t(k)].data[idx];
                    sdv[std::size_t(k)] = std::exp(lh);
                    inv_sd[std::size_t(k)] = std::exp(-lh);
                }
                const double arg = (yt.data[idx] - shift.data[idx]) * std::exp(-ls.data[idx]);
                const double F = arg >= 0 ? 1.0 / (1.0 + std::exp(-arg))
                                          : std::exp(arg) / (1.0 + std::exp(arg));
                const std::string where = "element (" + std::to_string(b) + "," +
                                          std::to_string(c) + ",pos " + std::to_string(p) + ")";
                if (!(F > 0.0 && F < 1.0)) {
                    throw DomainError(name() + ": inverse CDF value outside (0,1) at " + where);
                }
                xt.data[idx] = invert_mixture_cdf(F, w.data(), muv.data(), sdv.data(),
                                                  inv_sd.data(), K, name() + " " + where);
            }
        }
    }

    if (channel_rule) {
        s.h = channel_concat(xt, channel_slice(y, t, channels_));
    } else {
        const CheckerboardMask& m = *split_.mask;
        s.h = add(apply_mask(y, m, Half::A), apply_mask(xt, m, Half::B));
    }
}

void MixtureCoupling::params(ParamMap& out) { net.params(name() + ".net", out); }

// --------------------------------------------------------------------------
// CondInjector

CondInjector::CondInjector(std::string name, std::int64_t channels, std::int64_t hidden,
                           std::int64_t cond_channels, Rng& rng)
    : FlowLayer(std::move(name)), channels_(channels) {
    net = CouplingNet(cond_channels, hidden, 2 * channels, rng);
}

std::pair<Tensor, Tensor> CondInjector::scale_shift(const Tensor* cond,
                                                    std::int64_t batch) const {
    if (!cond) throw DataError(name() + ": affine injector is missing its condition");
    if (cond->shape.b != batch) {
        throw ShapeError(name() + ": condition batch " + std::to_string(cond->shape.b) +
                         " != input batch " + std::to_string(batch));
    }
    const Tensor nn = net.apply(*cond);
    Tensor ls = scaled_tanh(channel_slice(nn, 0, channels_), kLogScaleClamp);
    Tensor t = channel_slice(nn, channels_, 2 * channels_);
    return {std::move(ls), std::move(t)};
}

void CondInjector::forward(FlowState& s, const Tensor* cond) {
    if (cond && (cond->shape.h != s.h.shape.h || cond->shape.w != s.h.shape.w)) {
        throw ShapeError(name() + ": condition " + cond->shape.str() +
                         " misaligned with input " + s.h.shape.str());
    }
    auto [ls, t] = scale_shift(cond, s.h.shape.b);
    s.h = add(mul(s.h, exp(ls)), t);
    s.logdet = add(s.logdet, sum_per_sample(ls));
}

void CondInjector::inverse(InverseState& s, const Tensor* cond) const {
    auto [ls, t] = scale_shift(cond, s.h.shape.b);
    s.h = mul(sub(s.h, t), exp(neg(ls)));
}

void CondInjector::params(ParamMap& out) { net.params(name() + ".net", out); }

// --------------------------------------------------------------------------
// Squeeze

void Squeeze::forward(FlowState& s, const Tensor*) { s.h = squeeze2x2(s.h); }

void Squeeze::inverse(InverseState& s, const Tensor*) const { s.h = unsqueeze2x2(s.h); }

// --------------------------------------------------------------------------
// SplitPrior

SplitPrior::SplitPrior(std::string name, std::int64_t channels)
    : FlowLayer(std::move(name)),
      conv_w(Shape(channels, channels / 2, 3, 3)),
      conv_b(Shape(1, channels, 1, 1)),
      channels_(channels) {
    if (channels % 2 != 0) {
        throw ShapeError(this->name() + ": split requires even channels, got " +
                         std::to_string(channels));
    }
}

std::pair<Tensor, Tensor> SplitPrior::prior_moments(const Tensor& kept) const {
    const Tensor nn = conv3x3(kept, conv_w, &conv_b);
    const std::int64_t half = channels_ / 2;
    return {channel_slice(nn, 0, half), channel_slice(nn, half, channels_)};
}

void SplitPrior::forward(FlowState& s, const Tensor*) {
    const std::int64_t half = channels_ / 2;
    Tensor x1 = channel_slice(s.h, 0, half);
    Tensor x2 = channel_slice(s.h, half, channels_);
    auto [mu, log_sd] = prior_moments(x1);
    Tensor z = mul(sub(x2, mu), exp(neg(log_sd)));
    Tensor logp = sub(sub(mul(mul(z, z), -0.5), log_sd), kHalfLog2Pi);
    s.logprior = add(s.logprior, sum_per_sample(logp));
    s.latents.push_back(x2);
    s.h = x1;
}

void SplitPrior::inverse(InverseState& s, const Tensor*) const {
    const Tensor& x1 = s.h;
    auto [mu, log_sd] = prior_moments(x1);
    Tensor x2;
    if (s.sample_mode) {
        Tensor eps = normal_tensor(mu.shape, *s.rng);
        x2 = add(mu, mul(mul(exp(log_sd), eps), s.temperature));
    } else {
        if (s.latents.empty()) throw Error(name() + ": no recorded latent to consume");
        x2 = s.latents.back();
        s.latents.pop_back();
        if (!(x2.shape == mu.shape)) {
            throw ShapeError(name() + ": recorded latent " + x2.shape.str() + ", expected " +
                             mu.shape.str());
        }
    }
    s.h = channel_concat(x1, x2);
}

void SplitPrior::params(ParamMap& out) {
    out.emplace_back(name() + ".conv_w", &conv_w);
    out.emplace_back(name() + ".conv_b", &conv_b);
}

// --------------------------------------------------------------------------
// ConditionEncoder

ConditionEncoder::ConditionEncoder(std::int64_t cond_channels, std::int64_t features, Rng& rng)
    : w1(normal_tensor(Shape(features, cond_channels, 3, 3), rng, 0.05)),
      b1(Shape(1, features, 1, 1)),
      w2(normal_tensor(Shape(1, 1, features, features), rng, 0.05)),
      b2(Shape(1, features, 1, 1)),
      w3(normal_tensor(Shape(features, features, 3, 3), rng, 0.05)),
      b3(Shape(1, features, 1, 1)) {}

Tensor ConditionEncoder::encode(const Tensor& c) const {
    Tensor h = softplus(conv3x3(c, w1, &b1));
    h = softplus(conv1x1(h, w2, &b2));
    return conv3x3(h, w3, &b3);
}

void ConditionEncoder::params(const std::string& prefix, ParamMap& out) {
    out.emplace_back(prefix + ".w1", &w1);
    out.emplace_back(prefix + ".b1", &b1);
    out.emplace_back(prefix + ".w2", &w2);
    out.emplace_back(prefix + ".b2", &b2);
    out.emplace_back(prefix + ".w3", &w3);
    out.emplace_back(prefix + ".b3", &b3);
}

Tensor gaussian_logprob_per_sample(const Tensor& z) {
    Tensor logp = sub(mul(mul(z, z), -0.5), kHalfLog2Pi);
    return sum_per_sample(logp);
}

}  // namespace attnflow
