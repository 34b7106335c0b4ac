// SPDX-License-Identifier: Apache-2.0
#include "splatfill/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "splatfill/errors.hpp"
#include "splatfill/hash.hpp"

namespace splatfill {

using json = nlohmann::ordered_json;

void DenoiserConfig::validate() const {
    if (frame_size <= 0 || frame_size % 8 != 0) {
        throw ConfigError("frame_size must be a positive multiple of 8");
    }
    if (max_frames <= 0 || base_channels <= 0 || num_blocks <= 0 || condition_vocab <= 0 ||
        time_embed_dim <= 0) {
        throw ConfigError("denoiser config fields must be positive");
    }
    if (base_channels % 4 != 0) throw ConfigError("base_channels must be a multiple of 4");
    if (num_blocks > 3) throw ConfigError("num_blocks must be at most 3");
    if (frame_size % (1 << num_blocks) != 0) {
        throw ConfigError("frame_size must be divisible by 2^num_blocks");
    }
    if (time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
}

std::string DenoiserConfig::to_json() const {
    json j;
    j["frame_size"] = frame_size;
    j["max_frames"] = max_frames;
    j["base_channels"] = base_channels;
    j["num_blocks"] = num_blocks;
    j["condition_vocab"] = condition_vocab;
    j["time_embed_dim"] = time_embed_dim;
    return j.dump();
}

DenoiserConfig DenoiserConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    DenoiserConfig c;
    c.frame_size = j.at("frame_size").get<int>();
    c.max_frames = j.at("max_frames").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.condition_vocab = j.at("condition_vocab").get<int>();
    c.time_embed_dim = j.at("time_embed_dim").get<int>();
    c.validate();
    return c;
}

std::string DenoiserConfig::fingerprint() const {
    std::string s = to_json();
    return sha256_hex(s.data(), s.size());
}

const LoRAMatrices* LoRAAdapterSet::find(const std::string& target) const {
    for (const auto& m : maps) {
        if (m.target == target) return &m;
    }
    return nullptr;
}

LoRAMatrices* LoRAAdapterSet::find(const std::string& target) {
    for (auto& m : maps) {
        if (m.target == target) return &m;
    }
    return nullptr;
}

void LoRAAdapterSet::zero_grads() {
    for (auto& m : maps) {
        m.ga.zero();
        m.gb.zero();
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor silu_forward(const Tensor& x, SiLUCtx* ctx) {
    if (ctx) ctx->x = x;
    Tensor y = x;
    for (auto& v : y.data) {
        double s = 1.0 / (1.0 + std::exp(-v));
        v = v * s;
    }
    return y;
}

Tensor silu_backward(const Tensor& dy, const SiLUCtx& ctx) {
    Tensor dx = dy;
    for (size_t i = 0; i < dx.data.size(); ++i) {
        double v = ctx.x.data[i];
        double s = 1.0 / (1.0 + std::exp(-v));
        dx.data[i] *= s * (1.0 + v * (1.0 - s));
    }
    return dx;
}

namespace {

void init_normal(Tensor& t, Rng& rng, double std) {
    for (auto& v : t.data) v = rng.normal() * std;
}

// y_mat rows are (f, oy, ox); scatter into [F, C, H', W'].
void scatter_rows(const Tensor& y_mat, Tensor& out, int frames, int cout, int hw) {
    for (int f = 0; f < frames; ++f) {
        for (int o = 0; o < hw; ++o) {
            const double* src = y_mat.ptr() + (size_t(f) * hw + o) * cout;
            for (int c = 0; c < cout; ++c) {
                out.data[(size_t(f) * cout + c) * hw + o] = src[c];
            }
        }
    }
}

Tensor gather_rows(const Tensor& dy, int frames, int cout, int hw) {
    Tensor dmat({frames * hw, cout});
    for (int f = 0; f < frames; ++f) {
        for (int o = 0; o < hw; ++o) {
            double* dst = dmat.ptr() + (size_t(f) * hw + o) * cout;
            for (int c = 0; c < cout; ++c) {
                dst[c] = dy.data[(size_t(f) * cout + c) * hw + o];
            }
        }
    }
    return dmat;
}

void add_bias_rows(Tensor& y_mat, const Tensor& bias) {
    int cout = bias.dim(0);
    size_t rows = y_mat.size() / size_t(cout);
    for (size_t r = 0; r < rows; ++r) {
        double* dst = y_mat.ptr() + r * cout;
        for (int c = 0; c < cout; ++c) dst[c] += bias.data[c];
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Conv2d

void Conv2d::init(const std::string& name, int cin_, int cout_, int ksize_, int stride_,
                  Rng& rng, bool zero_init) {
    cin = cin_;
    cout = cout_;
    ksize = ksize_;
    stride = stride_;
    pad = ksize / 2;
    int k = cin * ksize * ksize;
    w.name = name + ".w";
    w.value = Tensor({k, cout});
    w.grad = Tensor({k, cout});
    if (!zero_init) init_normal(w.value, rng, std::sqrt(2.0 / k));
    b.name = name + ".b";
    b.value = Tensor({cout});
    b.grad = Tensor({cout});
}

Tensor Conv2d::forward(const Tensor& x, Ctx* ctx, const LoRAMatrices* ad,
                       double lora_scale) const {
    int frames = x.dim(0), h = x.dim(2), wd = x.dim(3);
    if (x.dim(1) != cin) throw ParamError("conv: channel mismatch for " + w.name);
    int ho = (h + 2 * pad - ksize) / stride + 1;
    int wo = (wd + 2 * pad - ksize) / stride + 1;
    int k = cin * ksize * ksize;
    int rows = frames * ho * wo;

    Tensor col({rows, k});
    const int hw_in = h * wd;
    for (int f = 0; f < frames; ++f) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                double* dst = col.ptr() + (size_t(f) * ho * wo + size_t(oy) * wo + ox) * k;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* plane = x.ptr() + (size_t(f) * cin + ci) * hw_in;
                    for (int ky = 0; ky < ksize; ++ky) {
                        int yy = oy * stride - pad + ky;
                        for (int kx = 0; kx < ksize; ++kx) {
                            int xx = ox * stride - pad + kx;
                            double v = 0.0;
                            if (yy >= 0 && yy < h && xx >= 0 && xx < wd) {
                                v = plane[size_t(yy) * wd + xx];
                            }
                            dst[(ci * ksize + ky) * ksize + kx] = v;
                        }
                    }
                }
            }
        }
    }

    Tensor y_mat({rows, cout});
    matmul(col.ptr(), w.value.ptr(), y_mat.ptr(), rows, cout, k);
    if (ad) {
        int r = ad->a.dim(1);
        Tensor p({rows, r});
        matmul(col.ptr(), ad->a.ptr(), p.ptr(), rows, r, k);
        double s = ad->scale * lora_scale;
        gemm(false, false, rows, cout, r, s, p.ptr(), r, ad->b.ptr(), cout, 1.0, y_mat.ptr(),
             cout);
        if (ctx) ctx->p = std::move(p);
    }
    add_bias_rows(y_mat, b.value);

    Tensor out({frames, cout, ho, wo});
    scatter_rows(y_mat, out, frames, cout, ho * wo);
    if (ctx) {
        ctx->frames = frames;
        ctx->h_in = h;
        ctx->w_in = wd;
        ctx->h_out = ho;
        ctx->w_out = wo;
        ctx->col = std::move(col);
    }
    return out;
}

Tensor Conv2d::backward(const Tensor& dy, Ctx& ctx, LoRAMatrices* ad, double lora_scale) {
    int frames = ctx.frames, ho = ctx.h_out, wo = ctx.w_out;
    int k = cin * ksize * ksize;
    int rows = frames * ho * wo;
    Tensor dmat = gather_rows(dy, frames, cout, ho * wo);

    for (int c = 0; c < cout; ++c) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r) acc += dmat.data[size_t(r) * cout + c];
        b.grad.data[c] += acc;
    }
    if (!w.frozen) {
        gemm(true, false, k, cout, rows, 1.0, ctx.col.ptr(), k, dmat.ptr(), cout, 1.0,
             w.grad.ptr(), cout);
    }

    Tensor dcol({rows, k});
    gemm(false, true, rows, k, cout, 1.0, dmat.ptr(), cout, w.value.ptr(), cout, 0.0,
         dcol.ptr(), k);

    if (ad) {
        int r = ad->a.dim(1);
        double s = ad->scale * lora_scale;
        // dB += s P^T dY ; dP = s dY B^T ; dA += col^T dP ; dcol += dP A^T
        gemm(true, false, r, cout, rows, s, ctx.p.ptr(), r, dmat.ptr(), cout, 1.0,
             ad->gb.ptr(), cout);
        Tensor dp({rows, r});
        gemm(false, true, rows, r, cout, s, dmat.ptr(), cout, ad->b.ptr(), cout, 0.0, dp.ptr(),
             r);
        gemm(true, false, k, r, rows, 1.0, ctx.col.ptr(), k, dp.ptr(), r, 1.0, ad->ga.ptr(), r);
        gemm(false, true, rows, k, r, 1.0, dp.ptr(), r, ad->a.ptr(), r, 1.0, dcol.ptr(), k);
    }

    Tensor dx({frames, cin, ctx.h_in, ctx.w_in});
    const int hw_in = ctx.h_in * ctx.w_in;
    for (int f = 0; f < frames; ++f) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                const double* src = dcol.ptr() + (size_t(f) * ho * wo + size_t(oy) * wo + ox) * k;
                for (int ci = 0; ci < cin; ++ci) {
                    double* plane = dx.ptr() + (size_t(f) * cin + ci) * hw_in;
                    for (int ky = 0; ky < ksize; ++ky) {
                        int yy = oy * stride - pad + ky;
                        if (yy < 0 || yy >= ctx.h_in) continue;
                        for (int kx = 0; kx < ksize; ++kx) {
                            int xx = ox * stride - pad + kx;
                            if (xx < 0 || xx >= ctx.w_in) continue;
                            plane[size_t(yy) * ctx.w_in + xx] +=
                                src[(ci * ksize + ky) * ksize + kx];
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// ConvTemporal

void ConvTemporal::init(const std::string& name, int ch_, Rng& rng) {
    ch = ch_;
    w.name = name + ".w";
    w.value = Tensor({3 * ch, ch});
    w.grad = Tensor({3 * ch, ch});
    init_normal(w.value, rng, std::sqrt(2.0 / (3.0 * ch)));
    b.name = name + ".b";
    b.value = Tensor({ch});
    b.grad = Tensor({ch});
}

Tensor ConvTemporal::forward(const Tensor& x, Ctx* ctx, const LoRAMatrices* ad,
                             double lora_scale) const {
    int frames = x.dim(0), h = x.dim(2), wd = x.dim(3);
    if (x.dim(1) != ch) throw ParamError("tconv: channel mismatch for " + w.name);
    int hw = h * wd;
    int k = 3 * ch;
    int rows = frames * hw;

    Tensor col({rows, k});
    for (int f = 0; f < frames; ++f) {
        for (int ci = 0; ci < ch; ++ci) {
            for (int dt = 0; dt < 3; ++dt) {
                int fs = f + dt - 1;
                if (fs < 0 || fs >= frames) continue;
                const double* plane = x.ptr() + (size_t(fs) * ch + ci) * hw;
                double* dst = col.ptr() + size_t(f) * hw * k + ci * 3 + dt;
                for (int o = 0; o < hw; ++o) dst[size_t(o) * k] = plane[o];
            }
        }
    }

    Tensor y_mat({rows, ch});
    matmul(col.ptr(), w.value.ptr(), y_mat.ptr(), rows, ch, k);
    if (ad) {
        int r = ad->a.dim(1);
        Tensor p({rows, r});
        matmul(col.ptr(), ad->a.ptr(), p.ptr(), rows, r, k);
        double s = ad->scale * lora_scale;
        gemm(false, false, rows, ch, r, s, p.ptr(), r, ad->b.ptr(), ch, 1.0, y_mat.ptr(), ch);
        if (ctx) ctx->p = std::move(p);
    }
    add_bias_rows(y_mat, b.value);

    Tensor out({frames, ch, h, wd});
    scatter_rows(y_mat, out, frames, ch, hw);
    if (ctx) {
        ctx->frames = frames;
        ctx->hw = hw;
        ctx->col = std::move(col);
    }
    return out;
}

Tensor ConvTemporal::backward(const Tensor& dy, Ctx& ctx, LoRAMatrices* ad, double lora_scale) {
    int frames = ctx.frames, hw = ctx.hw;
    int k = 3 * ch;
    int rows = frames * hw;
    Tensor dmat = gather_rows(dy, frames, ch, hw);

    for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r) acc += dmat.data[size_t(r) * ch + c];
        b.grad.data[c] += acc;
    }
    if (!w.frozen) {
        gemm(true, false, k, ch, rows, 1.0, ctx.col.ptr(), k, dmat.ptr(), ch, 1.0, w.grad.ptr(),
             ch);
    }
    Tensor dcol({rows, k});
    gemm(false, true, rows, k, ch, 1.0, dmat.ptr(), ch, w.value.ptr(), ch, 0.0, dcol.ptr(), k);
    if (ad) {
        int r = ad->a.dim(1);
        double s = ad->scale * lora_scale;
        gemm(true, false, r, ch, rows, s, ctx.p.ptr(), r, dmat.ptr(), ch, 1.0, ad->gb.ptr(), ch);
        Tensor dp({rows, r});
        gemm(false, true, rows, r, ch, s, dmat.ptr(), ch, ad->b.ptr(), ch, 0.0, dp.ptr(), r);
        gemm(true, false, k, r, rows, 1.0, ctx.col.ptr(), k, dp.ptr(), r, 1.0, ad->ga.ptr(), r);
        gemm(false, true, rows, k, r, 1.0, dp.ptr(), r, ad->a.ptr(), r, 1.0, dcol.ptr(), k);
    }

    int h = dy.dim(2), wd = dy.dim(3);
    Tensor dx({frames, ch, h, wd});
    for (int f = 0; f < frames; ++f) {
        for (int ci = 0; ci < ch; ++ci) {
            for (int dt = 0; dt < 3; ++dt) {
                int fs = f + dt - 1;
                if (fs < 0 || fs >= frames) continue;
                double* plane = dx.ptr() + (size_t(fs) * ch + ci) * hw;
                const double* src = dcol.ptr() + size_t(f) * hw * k + ci * 3 + dt;
                for (int o = 0; o < hw; ++o) plane[o] += src[size_t(o) * k];
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// GroupNorm

void GroupNorm::init(const std::string& name, int ch_) {
    ch = ch_;
    if (ch % groups != 0) throw ConfigError("groupnorm: channels not divisible by groups");
    gamma.name = name + ".gamma";
    gamma.value = Tensor({ch});
    std::fill(gamma.value.data.begin(), gamma.value.data.end(), 1.0);
    gamma.grad = Tensor({ch});
    beta.name = name + ".beta";
    beta.value = Tensor({ch});
    beta.grad = Tensor({ch});
}

Tensor GroupNorm::forward(const Tensor& x, Ctx* ctx) const {
    constexpr double kEps = 1e-5;
    int frames = x.dim(0), h = x.dim(2), wd = x.dim(3);
    int hw = h * wd;
    int per = ch / groups;
    Tensor y = x;
    Tensor xhat({frames, ch, h, wd});
    Tensor invstd({frames, groups});

    for (int f = 0; f < frames; ++f) {
        for (int g = 0; g < groups; ++g) {
            size_t base = (size_t(f) * ch + size_t(g) * per) * hw;
            size_t n = size_t(per) * hw;
            double mean = 0.0, sq = 0.0;
            for (size_t i = 0; i < n; ++i) {
                double v = x.data[base + i];
                mean += v;
                sq += v * v;
            }
            mean /= double(n);
            double var = sq / double(n) - mean * mean;
            double is = 1.0 / std::sqrt(var + kEps);
            invstd.data[size_t(f) * groups + g] = is;
            for (size_t i = 0; i < n; ++i) {
                xhat.data[base + i] = (x.data[base + i] - mean) * is;
            }
        }
        for (int c = 0; c < ch; ++c) {
            size_t base = (size_t(f) * ch + c) * hw;
            double gam = gamma.value.data[c], bet = beta.value.data[c];
            for (int o = 0; o < hw; ++o) {
                y.data[base + o] = gam * xhat.data[base + o] + bet;
            }
        }
    }
    if (ctx) {
        ctx->frames = frames;
        ctx->hw = hw;
        ctx->xhat = std::move(xhat);
        ctx->invstd = std::move(invstd);
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& dy, Ctx& ctx) {
    int frames = ctx.frames, hw = ctx.hw;
    int per = ch / groups;
    Tensor dx = dy;

    for (int c = 0; c < ch; ++c) {
        double dg = 0.0, db = 0.0;
        for (int f = 0; f < frames; ++f) {
            size_t base = (size_t(f) * ch + c) * hw;
            for (int o = 0; o < hw; ++o) {
                dg += dy.data[base + o] * ctx.xhat.data[base + o];
                db += dy.data[base + o];
            }
        }
        gamma.grad.data[c] += dg;
        beta.grad.data[c] += db;
    }

    for (int f = 0; f < frames; ++f) {
        for (int g = 0; g < groups; ++g) {
            size_t base = (size_t(f) * ch + size_t(g) * per) * hw;
            size_t n = size_t(per) * hw;
            double is = ctx.invstd.data[size_t(f) * groups + g];
            double mean_h = 0.0, mean_hx = 0.0;
            for (int c = 0; c < per; ++c) {
                double gam = gamma.value.data[size_t(g) * per + c];
                size_t cb = base + size_t(c) * hw;
                for (int o = 0; o < hw; ++o) {
                    double hgrad = dy.data[cb + o] * gam;
                    mean_h += hgrad;
                    mean_hx += hgrad * ctx.xhat.data[cb + o];
                }
            }
            mean_h /= double(n);
            mean_hx /= double(n);
            for (int c = 0; c < per; ++c) {
                double gam = gamma.value.data[size_t(g) * per + c];
                size_t cb = base + size_t(c) * hw;
                for (int o = 0; o < hw; ++o) {
                    double hgrad = dy.data[cb + o] * gam;
                    dx.data[cb + o] =
                        is * (hgrad - mean_h - ctx.xhat.data[cb + o] * mean_hx);
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Linear

void Linear::init(const std::string& name, int din_, int dout_, Rng& rng, bool zero_init) {
    din = din_;
    dout = dout_;
    w.name = name + ".w";
    w.value = Tensor({din, dout});
    w.grad = Tensor({din, dout});
    if (!zero_init) init_normal(w.value, rng, std::sqrt(1.0 / din));
    b.name = name + ".b";
    b.value = Tensor({dout});
    b.grad = Tensor({dout});
}

Tensor Linear::forward(const Tensor& x, Ctx* ctx, const LoRAMatrices* ad,
                       double lora_scale) const {
    Tensor y({dout});
    for (int j = 0; j < dout; ++j) y.data[j] = b.value.data[j];
    for (int i = 0; i < din; ++i) {
        double xv = x.data[i];
        if (xv == 0.0) continue;
        const double* row = w.value.ptr() + size_t(i) * dout;
        for (int j = 0; j < dout; ++j) y.data[j] += xv * row[j];
    }
    if (ad) {
        int r = ad->a.dim(1);
        Tensor p({r});
        for (int i = 0; i < din; ++i) {
            double xv = x.data[i];
            const double* row = ad->a.ptr() + size_t(i) * r;
            for (int k = 0; k < r; ++k) p.data[k] += xv * row[k];
        }
        double s = ad->scale * lora_scale;
        for (int k = 0; k < r; ++k) {
            const double* row = ad->b.ptr() + size_t(k) * dout;
            for (int j = 0; j < dout; ++j) y.data[j] += s * p.data[k] * row[j];
        }
        if (ctx) ctx->p = std::move(p);
    }
    if (ctx) ctx->x = x;
    return y;
}

Tensor Linear::backward(const Tensor& dy, Ctx& ctx, LoRAMatrices* ad, double lora_scale) {
    Tensor dx({din});
    if (!w.frozen) {
        for (int i = 0; i < din; ++i) {
            double xv = ctx.x.data[i];
            double* row = w.grad.ptr() + size_t(i) * dout;
            for (int j = 0; j < dout; ++j) row[j] += xv * dy.data[j];
        }
    }
    for (int j = 0; j < dout; ++j) b.grad.data[j] += dy.data[j];
    for (int i = 0; i < din; ++i) {
        const double* row = w.value.ptr() + size_t(i) * dout;
        double acc = 0.0;
        for (int j = 0; j < dout; ++j) acc += row[j] * dy.data[j];
        dx.data[i] = acc;
    }
    if (ad) {
        int r = ad->a.dim(1);
        double s = ad->scale * lora_scale;
        Tensor dp({r});
        for (int k = 0; k < r; ++k) {
            const double* row = ad->b.ptr() + size_t(k) * dout;
            double acc = 0.0;
            for (int j = 0; j < dout; ++j) {
                acc += row[j] * dy.data[j];
                ad->gb.data[size_t(k) * dout + j] += s * ctx.p.data[k] * dy.data[j];
            }
            dp.data[k] = s * acc;
        }
        for (int i = 0; i < din; ++i) {
            const double* arow = ad->a.ptr() + size_t(i) * r;
            double* garow = ad->ga.ptr() + size_t(i) * r;
            double acc = 0.0;
            for (int k = 0; k < r; ++k) {
                acc += arow[k] * dp.data[k];
                garow[k] += ctx.x.data[i] * dp.data[k];
            }
            dx.data[i] += acc;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// TemporalAttention

namespace {

// Sinusoidal frame-position features, ch values for position p.
void add_position_encoding(Tensor& x, int pos_offset) {
    int frames = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    int half = ch / 2;
    for (int f = 0; f < frames; ++f) {
        double p = double(f + pos_offset);
        for (int c = 0; c < ch; ++c) {
            int i = c / 2;
            double omega = std::exp(-std::log(10000.0) * double(i) / double(half));
            double v = (c % 2 == 0) ? std::sin(p * omega) : std::cos(p * omega);
            double* plane = x.ptr() + (size_t(f) * ch + c) * hw;
            for (int o = 0; o < hw; ++o) plane[o] += v;
        }
    }
}

// [F,C,H,W] -> [hw][f][c]
Tensor pack_locations(const Tensor& x) {
    int frames = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({hw, frames, ch});
    for (int f = 0; f < frames; ++f) {
        for (int c = 0; c < ch; ++c) {
            const double* plane = x.ptr() + (size_t(f) * ch + c) * hw;
            for (int o = 0; o < hw; ++o) {
                out.data[(size_t(o) * frames + f) * ch + c] = plane[o];
            }
        }
    }
    return out;
}

Tensor unpack_locations(const Tensor& p, int h, int wd) {
    int hw = p.dim(0), frames = p.dim(1), ch = p.dim(2);
    Tensor out({frames, ch, h, wd});
    for (int f = 0; f < frames; ++f) {
        for (int c = 0; c < ch; ++c) {
            double* plane = out.ptr() + (size_t(f) * ch + c) * hw;
            for (int o = 0; o < hw; ++o) {
                plane[o] = p.data[(size_t(o) * frames + f) * ch + c];
            }
        }
    }
    return out;
}

} // namespace

void TemporalAttention::init(const std::string& name, int ch_, Rng& rng) {
    ch = ch_;
    norm.init(name + ".norm", ch);
    q.init(name + ".q", ch, ch, 1, 1, rng);
    k.init(name + ".k", ch, ch, 1, 1, rng);
    v.init(name + ".v", ch, ch, 1, 1, rng);
    proj.init(name + ".proj", ch, ch, 1, 1, rng, /*zero_init=*/true);
}

Tensor TemporalAttention::forward(const Tensor& x, Ctx* ctx, const LoRAAdapterSet* ads,
                                  double lora_scale, int pos_offset) const {
    int frames = x.dim(0), h = x.dim(2), wd = x.dim(3);
    int hw = h * wd;
    Tensor xn = norm.forward(x, ctx ? &ctx->norm_ctx : nullptr);
    add_position_encoding(xn, pos_offset);

    const LoRAMatrices* aq = ads ? ads->find(q.w.name) : nullptr;
    const LoRAMatrices* ak = ads ? ads->find(k.w.name) : nullptr;
    const LoRAMatrices* av = ads ? ads->find(v.w.name) : nullptr;
    const LoRAMatrices* ap = ads ? ads->find(proj.w.name) : nullptr;

    Tensor qt = q.forward(xn, ctx ? &ctx->qc : nullptr, aq, lora_scale);
    Tensor kt = k.forward(xn, ctx ? &ctx->kc : nullptr, ak, lora_scale);
    Tensor vt = v.forward(xn, ctx ? &ctx->vc : nullptr, av, lora_scale);

    Tensor qp = pack_locations(qt);
    Tensor kp = pack_locations(kt);
    Tensor vp = pack_locations(vt);

    double inv_sqrt = 1.0 / std::sqrt(double(ch));
    Tensor att({hw, frames, frames});
    Tensor op({hw, frames, ch});
    for (int o = 0; o < hw; ++o) {
        const double* ql = qp.ptr() + size_t(o) * frames * ch;
        const double* kl = kp.ptr() + size_t(o) * frames * ch;
        const double* vl = vp.ptr() + size_t(o) * frames * ch;
        double* al = att.ptr() + size_t(o) * frames * frames;
        double* ol = op.ptr() + size_t(o) * frames * ch;
        gemm(false, true, frames, frames, ch, inv_sqrt, ql, ch, kl, ch, 0.0, al, frames);
        for (int f = 0; f < frames; ++f) {
            double* row = al + size_t(f) * frames;
            double mx = row[0];
            for (int j = 1; j < frames; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < frames; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (int j = 0; j < frames; ++j) row[j] /= sum;
        }
        matmul(al, vl, ol, frames, ch, frames);
    }

    Tensor ot = unpack_locations(op, h, wd);
    Tensor out = proj.forward(ot, ctx ? &ctx->pc : nullptr, ap, lora_scale);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += x.data[i];

    if (ctx) {
        ctx->frames = frames;
        ctx->hw = hw;
        ctx->qp = std::move(qp);
        ctx->kp = std::move(kp);
        ctx->vp = std::move(vp);
        ctx->att = std::move(att);
    }
    return out;
}

Tensor TemporalAttention::backward(const Tensor& dy, Ctx& ctx, LoRAAdapterSet* ads,
                                   double lora_scale) {
    int frames = ctx.frames, hw = ctx.hw;
    int h = dy.dim(2), wd = dy.dim(3);

    LoRAMatrices* aq = ads ? ads->find(q.w.name) : nullptr;
    LoRAMatrices* ak = ads ? ads->find(k.w.name) : nullptr;
    LoRAMatrices* av = ads ? ads->find(v.w.name) : nullptr;
    LoRAMatrices* ap = ads ? ads->find(proj.w.name) : nullptr;

    Tensor dot = proj.backward(dy, ctx.pc, ap, lora_scale);
    Tensor dop = pack_locations(dot);

    double inv_sqrt = 1.0 / std::sqrt(double(ch));
    Tensor dqp({hw, frames, ch});
    Tensor dkp({hw, frames, ch});
    Tensor dvp({hw, frames, ch});
    std::vector<double> da(size_t(frames) * frames);
    std::vector<double> ds(size_t(frames) * frames);
    for (int o = 0; o < hw; ++o) {
        const double* al = ctx.att.ptr() + size_t(o) * frames * frames;
        const double* ql = ctx.qp.ptr() + size_t(o) * frames * ch;
        const double* kl = ctx.kp.ptr() + size_t(o) * frames * ch;
        const double* vl = ctx.vp.ptr() + size_t(o) * frames * ch;
        const double* dol = dop.ptr() + size_t(o) * frames * ch;

        // dA = dO V^T ; dV = A^T dO
        gemm(false, true, frames, frames, ch, 1.0, dol, ch, vl, ch, 0.0, da.data(), frames);
        gemm(true, false, frames, ch, frames, 1.0, al, frames, dol, ch, 0.0,
             dvp.ptr() + size_t(o) * frames * ch, ch);
        // softmax rows: dS = A o (dA - rowdot(dA, A))
        for (int f = 0; f < frames; ++f) {
            const double* arow = al + size_t(f) * frames;
            const double* darow = da.data() + size_t(f) * frames;
            double dot_av = 0.0;
            for (int j = 0; j < frames; ++j) dot_av += darow[j] * arow[j];
            double* dsrow = ds.data() + size_t(f) * frames;
            for (int j = 0; j < frames; ++j) dsrow[j] = arow[j] * (darow[j] - dot_av);
        }
        // dQ = dS K / sqrt(ch) ; dK = dS^T Q / sqrt(ch)
        gemm(false, false, frames, ch, frames, inv_sqrt, ds.data(), frames, kl, ch, 0.0,
             dqp.ptr() + size_t(o) * frames * ch, ch);
        gemm(true, false, frames, ch, frames, inv_sqrt, ds.data(), frames, ql, ch, 0.0,
             dkp.ptr() + size_t(o) * frames * ch, ch);
    }

    Tensor dq_t = unpack_locations(dqp, h, wd);
    Tensor dk_t = unpack_locations(dkp, h, wd);
    Tensor dv_t = unpack_locations(dvp, h, wd);

    Tensor dxn = q.backward(dq_t, ctx.qc, aq, lora_scale);
    Tensor tmp = k.backward(dk_t, ctx.kc, ak, lora_scale);
    for (size_t i = 0; i < dxn.data.size(); ++i) dxn.data[i] += tmp.data[i];
    tmp = v.backward(dv_t, ctx.vc, av, lora_scale);
    for (size_t i = 0; i < dxn.data.size(); ++i) dxn.data[i] += tmp.data[i];

    Tensor dx = norm.backward(dxn, ctx.norm_ctx);
    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dy.data[i];
    return dx;
}

// ---------------------------------------------------------------------------
// ResBlockST

void ResBlockST::init(const std::string& name, int cin_, int cout_, int time_dim,
                      bool attention, Rng& rng) {
    cin = cin_;
    cout = cout_;
    gn1.init(name + ".gn1", cin);
    conv1.init(name + ".conv1", cin, cout, 3, 1, rng);
    time_bias.init(name + ".time", time_dim, cout, rng);
    gn2.init(name + ".gn2", cout);
    conv2.init(name + ".conv2", cout, cout, 3, 1, rng, /*zero_init=*/true);
    if (cin != cout) skip.init(name + ".skip", cin, cout, 1, 1, rng);
    gn_t.init(name + ".gnt", cout);
    tconv.init(name + ".tconv", cout, rng);
    with_attention = attention;
    if (attention) attn.init(name + ".attn", cout, rng);
}

Tensor ResBlockST::forward(const Tensor& x, const Tensor& emb, Ctx* ctx,
                           const LoRAAdapterSet* ads, double lora_scale,
                           int pos_offset) const {
    auto ad = [&](const Param& p) { return ads ? ads->find(p.name) : nullptr; };

    Tensor a1 = gn1.forward(x, ctx ? &ctx->g1 : nullptr);
    Tensor s1 = silu_forward(a1, ctx ? &ctx->s1 : nullptr);
    Tensor h = conv1.forward(s1, ctx ? &ctx->c1 : nullptr, ad(conv1.w), lora_scale);

    Tensor embv = silu_forward(emb, ctx ? &ctx->semb : nullptr);
    Tensor tb = time_bias.forward(embv, ctx ? &ctx->tb : nullptr, ad(time_bias.w), lora_scale);
    {
        int frames = h.dim(0), hw = h.dim(2) * h.dim(3);
        for (int f = 0; f < frames; ++f) {
            for (int c = 0; c < cout; ++c) {
                double* plane = h.ptr() + (size_t(f) * cout + c) * hw;
                double add = tb.data[c];
                for (int o = 0; o < hw; ++o) plane[o] += add;
            }
        }
    }

    Tensor a2 = gn2.forward(h, ctx ? &ctx->g2 : nullptr);
    Tensor s2 = silu_forward(a2, ctx ? &ctx->s2 : nullptr);
    Tensor h2 = conv2.forward(s2, ctx ? &ctx->c2 : nullptr, ad(conv2.w), lora_scale);

    Tensor y0;
    if (cin == cout) {
        y0 = x;
    } else {
        y0 = skip.forward(x, ctx ? &ctx->cs : nullptr, ad(skip.w), lora_scale);
    }
    for (size_t i = 0; i < y0.data.size(); ++i) y0.data[i] += h2.data[i];

    Tensor at = gn_t.forward(y0, ctx ? &ctx->gt : nullptr);
    Tensor st = silu_forward(at, ctx ? &ctx->st : nullptr);
    Tensor tc = tconv.forward(st, ctx ? &ctx->tc : nullptr, ad(tconv.w), lora_scale);
    for (size_t i = 0; i < y0.data.size(); ++i) y0.data[i] += tc.data[i];

    if (!with_attention) return y0;
    return attn.forward(y0, ctx ? &ctx->at : nullptr, ads, lora_scale, pos_offset);
}

Tensor ResBlockST::backward(const Tensor& dy, Ctx& ctx, LoRAAdapterSet* ads, double lora_scale,
                            Tensor& demb) {
    auto ad = [&](const Param& p) { return ads ? ads->find(p.name) : nullptr; };

    Tensor dy1 = with_attention ? attn.backward(dy, ctx.at, ads, lora_scale) : dy;

    // y1 = y0 + tconv(silu(gn_t(y0)))
    Tensor dst = tconv.backward(dy1, ctx.tc, ad(tconv.w), lora_scale);
    Tensor dat = silu_backward(dst, ctx.st);
    Tensor dy0 = gn_t.backward(dat, ctx.gt);
    for (size_t i = 0; i < dy0.data.size(); ++i) dy0.data[i] += dy1.data[i];

    // y0 = base + h2
    Tensor ds2 = conv2.backward(dy0, ctx.c2, ad(conv2.w), lora_scale);
    Tensor da2 = silu_backward(ds2, ctx.s2);
    Tensor dh = gn2.backward(da2, ctx.g2);

    // time bias broadcast
    {
        int frames = dh.dim(0), hw = dh.dim(2) * dh.dim(3);
        Tensor dtb({cout});
        for (int f = 0; f < frames; ++f) {
            for (int c = 0; c < cout; ++c) {
                const double* plane = dh.ptr() + (size_t(f) * cout + c) * hw;
                double acc = 0.0;
                for (int o = 0; o < hw; ++o) acc += plane[o];
                dtb.data[c] += acc;
            }
        }
        Tensor dembv = time_bias.backward(dtb, ctx.tb, ad(time_bias.w), lora_scale);
        Tensor de = silu_backward(dembv, ctx.semb);
        for (size_t i = 0; i < demb.data.size(); ++i) demb.data[i] += de.data[i];
    }

    Tensor ds1 = conv1.backward(dh, ctx.c1, ad(conv1.w), lora_scale);
    Tensor da1 = silu_backward(ds1, ctx.s1);
    Tensor dx = gn1.backward(da1, ctx.g1);

    if (cin == cout) {
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dy0.data[i];
    } else {
        Tensor dskip = skip.backward(dy0, ctx.cs, ad(skip.w), lora_scale);
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dskip.data[i];
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Model assembly

namespace {

void collect_block(ResBlockST& blk, std::vector<Param*>& all, std::vector<Param*>& adaptable) {
    all.push_back(&blk.gn1.gamma);
    all.push_back(&blk.gn1.beta);
    all.push_back(&blk.conv1.w);
    all.push_back(&blk.conv1.b);
    adaptable.push_back(&blk.conv1.w);
    all.push_back(&blk.time_bias.w);
    all.push_back(&blk.time_bias.b);
    adaptable.push_back(&blk.time_bias.w);
    all.push_back(&blk.gn2.gamma);
    all.push_back(&blk.gn2.beta);
    all.push_back(&blk.conv2.w);
    all.push_back(&blk.conv2.b);
    adaptable.push_back(&blk.conv2.w);
    if (blk.cin != blk.cout) {
        all.push_back(&blk.skip.w);
        all.push_back(&blk.skip.b);
        adaptable.push_back(&blk.skip.w);
    }
    all.push_back(&blk.gn_t.gamma);
    all.push_back(&blk.gn_t.beta);
    all.push_back(&blk.tconv.w);
    all.push_back(&blk.tconv.b);
    adaptable.push_back(&blk.tconv.w);
    if (blk.with_attention) {
        all.push_back(&blk.attn.norm.gamma);
        all.push_back(&blk.attn.norm.beta);
        for (Conv2d* c : {&blk.attn.q, &blk.attn.k, &blk.attn.v, &blk.attn.proj}) {
            all.push_back(&c->w);
            all.push_back(&c->b);
            adaptable.push_back(&c->w);
        }
    }
}

} // namespace

DenoiserModel DenoiserModel::create(const DenoiserConfig& config, uint64_t seed) {
    config.validate();
    DenoiserModel m;
    m.config = config;
    Rng rng(Rng::mix(seed, 0xd0de1));

    int c0 = config.base_channels;
    int levels = config.num_blocks;
    int d = config.time_embed_dim;
    auto ch_at = [&](int l) { return c0 << l; };
    int ch_mid = c0 << levels;

    m.stem.init("stem", 7, c0, 3, 1, rng);
    m.enc.resize(levels);
    m.down.resize(levels);
    for (int l = 0; l < levels; ++l) {
        m.enc[l].init("enc" + std::to_string(l), ch_at(l), ch_at(l), d, /*attention=*/true, rng);
        m.down[l].init("down" + std::to_string(l), ch_at(l), ch_at(l + 1), 3, 2, rng);
    }
    m.mid_a.init("mid_a", ch_mid, ch_mid, d, /*attention=*/true, rng);
    m.mid_b.init("mid_b", ch_mid, ch_mid, d, /*attention=*/false, rng);
    m.up.resize(levels);
    m.dec.resize(levels);
    for (int l = levels - 1; l >= 0; --l) {
        m.up[l].init("up" + std::to_string(l), ch_at(l + 1), ch_at(l), 3, 1, rng);
        m.dec[l].init("dec" + std::to_string(l), 2 * ch_at(l), ch_at(l), d, /*attention=*/false,
                      rng);
    }
    m.head_norm.init("head.norm", c0);
    m.head_conv.init("head.conv", c0, 3, 3, 1, rng, /*zero_init=*/true);
    m.time_mlp1.init("time.mlp1", d, d, rng);
    m.time_mlp2.init("time.mlp2", d, d, rng);
    m.label_table.name = "label.table";
    m.label_table.value = Tensor({config.condition_vocab + 1, d});
    m.label_table.grad = Tensor({config.condition_vocab + 1, d});
    init_normal(m.label_table.value, rng, 0.02);

    // Declaration order fixes checkpoint layout and hashing.
    m.params.push_back(&m.stem.w);
    m.params.push_back(&m.stem.b);
    for (int l = 0; l < levels; ++l) {
        collect_block(m.enc[l], m.params, m.adaptable);
        m.params.push_back(&m.down[l].w);
        m.params.push_back(&m.down[l].b);
        m.adaptable.push_back(&m.down[l].w);
    }
    collect_block(m.mid_a, m.params, m.adaptable);
    collect_block(m.mid_b, m.params, m.adaptable);
    for (int l = levels - 1; l >= 0; --l) {
        m.params.push_back(&m.up[l].w);
        m.params.push_back(&m.up[l].b);
        m.adaptable.push_back(&m.up[l].w);
        collect_block(m.dec[l], m.params, m.adaptable);
    }
    m.params.push_back(&m.head_norm.gamma);
    m.params.push_back(&m.head_norm.beta);
    m.params.push_back(&m.head_conv.w);
    m.params.push_back(&m.head_conv.b);
    m.params.push_back(&m.time_mlp1.w);
    m.params.push_back(&m.time_mlp1.b);
    m.params.push_back(&m.time_mlp2.w);
    m.params.push_back(&m.time_mlp2.b);
    m.params.push_back(&m.label_table);
    return m;
}

size_t DenoiserModel::param_count() const {
    size_t n = 0;
    for (const Param* p : params) n += p->value.size();
    return n;
}

void DenoiserModel::zero_grads() {
    for (Param* p : params) p->grad.zero();
}

void DenoiserModel::freeze_all() {
    for (Param* p : params) p->frozen = true;
}

std::string DenoiserModel::base_hash() const {
    std::vector<const double*> blocks;
    std::vector<size_t> counts;
    for (const Param* p : params) {
        blocks.push_back(p->value.ptr());
        counts.push_back(p->value.size());
    }
    return sha256_doubles_hex(blocks, counts);
}

// ---------------------------------------------------------------------------
// Forward / backward over the whole net

namespace {

Tensor sinusoid_embedding(double t, int dim) {
    Tensor e({dim});
    int half = dim / 2;
    double pos = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        double omega = std::exp(-std::log(10000.0) * double(i) / double(half));
        e.data[2 * i] = std::sin(pos * omega);
        e.data[2 * i + 1] = std::cos(pos * omega);
    }
    return e;
}

Tensor upsample_nearest(const Tensor& x) {
    int frames = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
    Tensor out({frames, ch, 2 * h, 2 * wd});
    for (int f = 0; f < frames; ++f) {
        for (int c = 0; c < ch; ++c) {
            const double* src = x.ptr() + (size_t(f) * ch + c) * h * wd;
            double* dst = out.ptr() + (size_t(f) * ch + c) * 4 * h * wd;
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < wd; ++xx) {
                    double v = src[size_t(y) * wd + xx];
                    dst[size_t(2 * y) * 2 * wd + 2 * xx] = v;
                    dst[size_t(2 * y) * 2 * wd + 2 * xx + 1] = v;
                    dst[size_t(2 * y + 1) * 2 * wd + 2 * xx] = v;
                    dst[size_t(2 * y + 1) * 2 * wd + 2 * xx + 1] = v;
                }
            }
        }
    }
    return out;
}

Tensor upsample_nearest_backward(const Tensor& dy) {
    int frames = dy.dim(0), ch = dy.dim(1), h2 = dy.dim(2), w2 = dy.dim(3);
    int h = h2 / 2, wd = w2 / 2;
    Tensor dx({frames, ch, h, wd});
    for (int f = 0; f < frames; ++f) {
        for (int c = 0; c < ch; ++c) {
            const double* src = dy.ptr() + (size_t(f) * ch + c) * h2 * w2;
            double* dst = dx.ptr() + (size_t(f) * ch + c) * h * wd;
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < wd; ++xx) {
                    dst[size_t(y) * wd + xx] =
                        src[size_t(2 * y) * w2 + 2 * xx] + src[size_t(2 * y) * w2 + 2 * xx + 1] +
                        src[size_t(2 * y + 1) * w2 + 2 * xx] +
                        src[size_t(2 * y + 1) * w2 + 2 * xx + 1];
                }
            }
        }
    }
    return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    int frames = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), wd = a.dim(3);
    Tensor out({frames, ca + cb, h, wd});
    size_t hw = size_t(h) * wd;
    for (int f = 0; f < frames; ++f) {
        std::memcpy(out.ptr() + size_t(f) * (ca + cb) * hw, a.ptr() + size_t(f) * ca * hw,
                    ca * hw * sizeof(double));
        std::memcpy(out.ptr() + (size_t(f) * (ca + cb) + ca) * hw, b.ptr() + size_t(f) * cb * hw,
                    cb * hw * sizeof(double));
    }
    return out;
}

void split_channels(const Tensor& d, int ca, Tensor& da, Tensor& db) {
    int frames = d.dim(0), ctot = d.dim(1), h = d.dim(2), wd = d.dim(3);
    int cb = ctot - ca;
    da = Tensor({frames, ca, h, wd});
    db = Tensor({frames, cb, h, wd});
    size_t hw = size_t(h) * wd;
    for (int f = 0; f < frames; ++f) {
        std::memcpy(da.ptr() + size_t(f) * ca * hw, d.ptr() + size_t(f) * ctot * hw,
                    ca * hw * sizeof(double));
        std::memcpy(db.ptr() + size_t(f) * cb * hw, d.ptr() + (size_t(f) * ctot + ca) * hw,
                    cb * hw * sizeof(double));
    }
}

} // namespace

Tensor denoiser_forward(const DenoiserModel& model, const LoRAAdapterSet* ads,
                        const ModelInput& input, ModelCtx& ctx, double lora_scale) {
    const DenoiserConfig& cfg = model.config;
    int frames = input.x_t.dim(0);
    int s = cfg.frame_size;
    if (input.x_t.dim(1) != 3 || input.x_t.dim(2) != s || input.x_t.dim(3) != s) {
        throw ParamError("denoiser_forward: x_t shape mismatch");
    }
    if (!input.cond.same_shape(input.x_t)) throw ParamError("denoiser_forward: cond mismatch");
    if (input.mask.dim(0) != frames || input.mask.dim(1) != 1) {
        throw ParamError("denoiser_forward: mask mismatch");
    }
    if (frames > cfg.max_frames) throw ParamError("denoiser_forward: too many frames");
    if (input.t < 0.0 || input.t > 1.0) throw ParamError("denoiser_forward: t outside [0,1]");
    if (!input.cond_drop && (input.label < 0 || input.label >= cfg.condition_vocab)) {
        throw ParamError("denoiser_forward: label outside vocabulary");
    }

    // Per-frame channel stack: x_t(3) | cond(3) | mask(1).
    Tensor in7({frames, 7, s, s});
    size_t hw = size_t(s) * s;
    for (int f = 0; f < frames; ++f) {
        std::memcpy(in7.ptr() + size_t(f) * 7 * hw, input.x_t.ptr() + size_t(f) * 3 * hw,
                    3 * hw * sizeof(double));
        std::memcpy(in7.ptr() + (size_t(f) * 7 + 3) * hw, input.cond.ptr() + size_t(f) * 3 * hw,
                    3 * hw * sizeof(double));
        std::memcpy(in7.ptr() + (size_t(f) * 7 + 6) * hw, input.mask.ptr() + size_t(f) * hw,
                    hw * sizeof(double));
    }

    ctx.pos_offset = input.ref_attached ? -1 : 0;
    ctx.label_row = input.cond_drop ? cfg.condition_vocab : input.label;

    Tensor e0 = sinusoid_embedding(input.t, cfg.time_embed_dim);
    Tensor e1 = model.time_mlp1.forward(e0, &ctx.tm1, nullptr, lora_scale);
    Tensor es = silu_forward(e1, &ctx.emb_s);
    Tensor emb = model.time_mlp2.forward(es, &ctx.tm2, nullptr, lora_scale);
    {
        const double* row = model.label_table.value.ptr() +
                            size_t(ctx.label_row) * cfg.time_embed_dim;
        for (int i = 0; i < cfg.time_embed_dim; ++i) emb.data[i] += row[i];
    }
    ctx.emb = emb;

    auto ad = [&](const Param& p) { return ads ? ads->find(p.name) : nullptr; };
    int levels = cfg.num_blocks;
    ctx.enc_c.resize(levels);
    ctx.down_c.resize(levels);
    ctx.up_c.resize(levels);
    ctx.dec_c.resize(levels);
    ctx.skips.resize(levels);

    Tensor x = model.stem.forward(in7, &ctx.stem_c, nullptr, lora_scale);
    for (int l = 0; l < levels; ++l) {
        x = model.enc[l].forward(x, emb, &ctx.enc_c[l], ads, lora_scale, ctx.pos_offset);
        ctx.skips[l] = x;
        x = model.down[l].forward(x, &ctx.down_c[l], ad(model.down[l].w), lora_scale);
    }
    x = model.mid_a.forward(x, emb, &ctx.mid_a_c, ads, lora_scale, ctx.pos_offset);
    x = model.mid_b.forward(x, emb, &ctx.mid_b_c, ads, lora_scale, ctx.pos_offset);
    for (int l = levels - 1; l >= 0; --l) {
        x = upsample_nearest(x);
        x = model.up[l].forward(x, &ctx.up_c[l], ad(model.up[l].w), lora_scale);
        x = concat_channels(x, ctx.skips[l]);
        x = model.dec[l].forward(x, emb, &ctx.dec_c[l], ads, lora_scale, ctx.pos_offset);
    }
    Tensor hn = model.head_norm.forward(x, &ctx.head_n_c);
    Tensor hs = silu_forward(hn, &ctx.head_s);
    return model.head_conv.forward(hs, &ctx.head_c, nullptr, lora_scale);
}

Tensor denoiser_forward(const DenoiserModel& model, const LoRAAdapterSet* ads,
                        const ModelInput& input, double lora_scale) {
    ModelCtx ctx;
    return denoiser_forward(model, ads, input, ctx, lora_scale);
}

void denoiser_backward(DenoiserModel& model, LoRAAdapterSet* ads, const Tensor& dvel,
                       ModelCtx& ctx, double lora_scale) {
    auto ad = [&](const Param& p) { return ads ? ads->find(p.name) : nullptr; };
    int levels = model.config.num_blocks;
    Tensor demb({model.config.time_embed_dim});

    Tensor dhs = model.head_conv.backward(dvel, ctx.head_c, nullptr, lora_scale);
    Tensor dhn = silu_backward(dhs, ctx.head_s);
    Tensor dx = model.head_norm.backward(dhn, ctx.head_n_c);

    std::vector<Tensor> dskips(levels);
    for (int l = 0; l < levels; ++l) {
        dx = model.dec[l].backward(dx, ctx.dec_c[l], ads, lora_scale, demb);
        Tensor dup, dskip;
        split_channels(dx, model.up[l].cout, dup, dskip);
        dskips[l] = std::move(dskip);
        dup = model.up[l].backward(dup, ctx.up_c[l], ad(model.up[l].w), lora_scale);
        dx = upsample_nearest_backward(dup);
    }
    dx = model.mid_b.backward(dx, ctx.mid_b_c, ads, lora_scale, demb);
    dx = model.mid_a.backward(dx, ctx.mid_a_c, ads, lora_scale, demb);
    for (int l = levels - 1; l >= 0; --l) {
        dx = model.down[l].backward(dx, ctx.down_c[l], ad(model.down[l].w), lora_scale);
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dskips[l].data[i];
        dx = model.enc[l].backward(dx, ctx.enc_c[l], ads, lora_scale, demb);
    }
    model.stem.backward(dx, ctx.stem_c, nullptr, lora_scale);

    // Embedding chain: emb = mlp2(silu(mlp1(e0))) + label_row.
    if (!model.label_table.frozen) {
        double* row = model.label_table.grad.ptr() +
                      size_t(ctx.label_row) * model.config.time_embed_dim;
        for (int i = 0; i < model.config.time_embed_dim; ++i) row[i] += demb.data[i];
    }
    Tensor des = model.time_mlp2.backward(demb, ctx.tm2, nullptr, lora_scale);
    Tensor de1 = silu_backward(des, ctx.emb_s);
    model.time_mlp1.backward(de1, ctx.tm1, nullptr, lora_scale);
}

LoRAAdapterSet create_adapters(const DenoiserModel& model, int rank, uint64_t seed) {
    if (rank < 1) throw ConfigError("lora rank must be positive");
    LoRAAdapterSet set;
    set.rank = rank;
    set.fingerprint = model.config.fingerprint();
    Rng rng(Rng::mix(seed, 0x10a));
    for (const Param* p : model.adaptable) {
        int d = p->value.dim(0);
        int cout = p->value.dim(1);
        if (4 * rank > std::min(d, cout)) {
            throw ConfigError("lora rank " + std::to_string(rank) + " too large for " +
                              p->name + " (" + std::to_string(d) + "x" + std::to_string(cout) +
                              "): need 4*r <= min(d,k)");
        }
        LoRAMatrices m;
        m.target = p->name;
        m.a = Tensor({d, rank});
        init_normal(m.a, rng, std::sqrt(1.0 / d));
        m.b = Tensor({rank, cout}); // zero: adapted output equals base at init
        m.ga = Tensor({d, rank});
        m.gb = Tensor({rank, cout});
        m.scale = 1.0;
        set.maps.push_back(std::move(m));
    }
    return set;
}

} // namespace splatfill
