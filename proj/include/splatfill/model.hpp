// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "splatfill/rng.hpp"
#include "splatfill/sequence.hpp"
#include "splatfill/tensor.hpp"

namespace splatfill {

struct DenoiserConfig {
    int frame_size = 64;    // square, multiple of 8
    int max_frames = 18;
    int base_channels = 16; // multiple of 4
    int num_blocks = 2;     // downsampling levels
    int condition_vocab = 4;
    int time_embed_dim = 32;

    void validate() const;
    std::string to_json() const;
    static DenoiserConfig from_json(const std::string& text);
    std::string fingerprint() const; // hash of the canonical config json
    bool operator==(const DenoiserConfig&) const = default;
};

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;
};

/// Low-rank delta for one linear map stored as [d x cout]:
/// y = base(x) + scale * (x A) B, A: d x r, B: r x cout, B zero at init.
struct LoRAMatrices {
    std::string target; // name of the adapted weight
    Tensor a, b;
    Tensor ga, gb;
    double scale = 1.0;
};

struct LoRAAdapterSet {
    int rank = 0;
    std::string fingerprint;
    std::vector<LoRAMatrices> maps;

    const LoRAMatrices* find(const std::string& target) const;
    LoRAMatrices* find(const std::string& target);
    void zero_grads();
};

// --- layers -----------------------------------------------------------------

struct SiLUCtx {
    Tensor x;
};
Tensor silu_forward(const Tensor& x, SiLUCtx* ctx);
Tensor silu_backward(const Tensor& dy, const SiLUCtx& ctx);

/// Spatial convolution applied per frame; ksize 1 or 3, stride 1 or 2.
/// Weight layout [cin*ksize*ksize x cout] so im2col feeds GEMM directly.
struct Conv2d {
    int cin = 0, cout = 0, ksize = 3, stride = 1, pad = 1;
    Param w, b;

    struct Ctx {
        int frames = 0, h_in = 0, w_in = 0, h_out = 0, w_out = 0;
        Tensor col; // [rows x K]
        Tensor p;   // [rows x r] adapter intermediate
    };

    void init(const std::string& name, int cin, int cout, int ksize, int stride, Rng& rng,
              bool zero_init = false);
    Tensor forward(const Tensor& x, Ctx* ctx, const LoRAMatrices* ad, double lora_scale) const;
    Tensor backward(const Tensor& dy, Ctx& ctx, LoRAMatrices* ad, double lora_scale);
};

/// Temporal convolution (kernel 3 over the frame axis, zero padded).
struct ConvTemporal {
    int ch = 0;
    Param w, b; // [3*ch x ch]

    struct Ctx {
        int frames = 0, hw = 0;
        Tensor col;
        Tensor p;
    };

    void init(const std::string& name, int ch, Rng& rng);
    Tensor forward(const Tensor& x, Ctx* ctx, const LoRAMatrices* ad, double lora_scale) const;
    Tensor backward(const Tensor& dy, Ctx& ctx, LoRAMatrices* ad, double lora_scale);
};

/// GroupNorm over (C/groups, H, W) per frame with learned gamma/beta.
struct GroupNorm {
    int ch = 0, groups = 4;
    Param gamma, beta;

    struct Ctx {
        int frames = 0, hw = 0;
        Tensor xhat;
        Tensor invstd; // [frames x groups]
    };

    void init(const std::string& name, int ch);
    Tensor forward(const Tensor& x, Ctx* ctx) const;
    Tensor backward(const Tensor& dy, Ctx& ctx);
};

/// Vector linear map y = x W + b, W: [din x dout].
struct Linear {
    int din = 0, dout = 0;
    Param w, b;

    struct Ctx {
        Tensor x;
        Tensor p; // adapter intermediate [r]
    };

    void init(const std::string& name, int din, int dout, Rng& rng, bool zero_init = false);
    Tensor forward(const Tensor& x, Ctx* ctx, const LoRAMatrices* ad, double lora_scale) const;
    Tensor backward(const Tensor& dy, Ctx& ctx, LoRAMatrices* ad, double lora_scale);
};

/// Single-head attention across frames at every spatial location, with a
/// sinusoidal frame-position encoding added to the normalized input.
struct TemporalAttention {
    int ch = 0;
    GroupNorm norm;
    Conv2d q, k, v, proj;

    struct Ctx {
        GroupNorm::Ctx norm_ctx;
        Conv2d::Ctx qc, kc, vc, pc;
        Tensor qp, kp, vp, att; // packed [hw][f][c] and [hw][f][f]
        int frames = 0, hw = 0;
    };

    void init(const std::string& name, int ch, Rng& rng);
    Tensor forward(const Tensor& x, Ctx* ctx, const LoRAAdapterSet* ads, double lora_scale,
                   int pos_offset) const;
    Tensor backward(const Tensor& dy, Ctx& ctx, LoRAAdapterSet* ads, double lora_scale);
};

/// Space-time residual block: two 3x3 convs with a time/label bias between,
/// a temporal-convolution residual, and optional temporal attention.
struct ResBlockST {
    int cin = 0, cout = 0;
    GroupNorm gn1, gn2, gn_t;
    Conv2d conv1, conv2, skip; // skip used iff cin != cout
    Linear time_bias;
    ConvTemporal tconv;
    bool with_attention = false;
    TemporalAttention attn;

    struct Ctx {
        GroupNorm::Ctx g1, g2, gt;
        SiLUCtx s1, s2, st, semb;
        Conv2d::Ctx c1, c2, cs;
        Linear::Ctx tb;
        ConvTemporal::Ctx tc;
        TemporalAttention::Ctx at;
    };

    void init(const std::string& name, int cin, int cout, int time_dim, bool attention,
              Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& emb, Ctx* ctx, const LoRAAdapterSet* ads,
                   double lora_scale, int pos_offset) const;
    // Returns dx; accumulates the embedding gradient into demb.
    Tensor backward(const Tensor& dy, Ctx& ctx, LoRAAdapterSet* ads, double lora_scale,
                    Tensor& demb);
};

// --- model -------------------------------------------------------------------

struct ModelCtx;

/// Conditional velocity network over frame stacks. Input channels per frame:
/// noisy state (3) + masked input frame (3) + mask (1).
struct DenoiserModel {
    DenoiserConfig config;

    Conv2d stem;
    std::vector<ResBlockST> enc;
    std::vector<Conv2d> down;
    ResBlockST mid_a, mid_b;
    std::vector<Conv2d> up;
    std::vector<ResBlockST> dec;
    GroupNorm head_norm;
    Conv2d head_conv;
    Linear time_mlp1, time_mlp2;
    Param label_table; // [(vocab+1) x D], last row is the null token

    std::vector<Param*> params; // declaration order, stable across runs
    std::vector<Param*> adaptable; // linear maps eligible for adapters

    static DenoiserModel create(const DenoiserConfig& config, uint64_t seed);
    size_t param_count() const;
    void zero_grads();
    void freeze_all();
    std::string base_hash() const;
};

struct ModelInput {
    Tensor x_t;  // [F,3,S,S]
    Tensor cond; // [F,3,S,S]
    Tensor mask; // [F,1,S,S]
    int label = 0;
    bool cond_drop = false;
    bool ref_attached = false;
    double t = 0.0;
};

struct ModelCtx {
    Conv2d::Ctx stem_c, head_c;
    std::vector<ResBlockST::Ctx> enc_c, dec_c;
    std::vector<Conv2d::Ctx> down_c, up_c;
    ResBlockST::Ctx mid_a_c, mid_b_c;
    GroupNorm::Ctx head_n_c;
    SiLUCtx head_s, emb_s;
    Linear::Ctx tm1, tm2;
    std::vector<Tensor> skips;
    std::vector<Tensor> pre_up; // decoder inputs before upsampling
    Tensor emb;
    Tensor input7;
    int label_row = 0;
    int pos_offset = 0;
};

Tensor denoiser_forward(const DenoiserModel& model, const LoRAAdapterSet* ads,
                        const ModelInput& input, ModelCtx& ctx, double lora_scale = 1.0);
Tensor denoiser_forward(const DenoiserModel& model, const LoRAAdapterSet* ads,
                        const ModelInput& input, double lora_scale = 1.0);
void denoiser_backward(DenoiserModel& model, LoRAAdapterSet* ads, const Tensor& dvel,
                       ModelCtx& ctx, double lora_scale = 1.0);

// Adapter lifecycle. Rank must satisfy 4*rank <= min(d, cout) on every
// eligible map (everything except stem, head, embeddings).
LoRAAdapterSet create_adapters(const DenoiserModel& model, int rank, uint64_t seed);

// --- flow matching -----------------------------------------------------------

// Linear path x_t = (1-t) x0 + t x1; true velocity x1 - x0.
Tensor flow_interpolate(const Tensor& x0, const Tensor& x1, double t);
Tensor flow_true_velocity(const Tensor& x0, const Tensor& x1);

struct FlowItem {
    Tensor x1;   // [F,3,S,S] target frames
    Tensor cond; // [F,3,S,S] masked-filled inputs
    Tensor mask; // [F,1,S,S]
    int label = 0;
    bool ref_attached = false;
};

FlowItem make_flow_item(const FrameSequence& seq, const std::vector<Image>& targets);
Tensor images_to_tensor(const std::vector<Image>& frames);
std::vector<Image> tensor_to_images(const Tensor& t);

using VelocityFn =
    std::function<Tensor(double t, const Tensor& x_t, const FlowItem& item, bool cond_drop)>;

// Oracle seam: loss evaluated for an arbitrary velocity field at fixed draws.
double flow_loss_with(const VelocityFn& fn, const std::vector<FlowItem>& items,
                      const std::vector<double>& ts, const std::vector<Tensor>& noises,
                      const std::vector<bool>& drops);

double flow_matching_loss(const DenoiserModel& model, const LoRAAdapterSet* ads,
                          const std::vector<FlowItem>& items, Rng& rng);

// Loss plus gradient accumulation into unfrozen params / adapter matrices.
double flow_matching_loss_backward(DenoiserModel& model, LoRAAdapterSet* ads,
                                   const std::vector<FlowItem>& items,
                                   const std::vector<double>& ts,
                                   const std::vector<Tensor>& noises,
                                   const std::vector<bool>& drops, double lora_scale = 1.0);

// --- training ----------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-4;
    int batch = 4;
    int epochs = 10;
    int rank = 4;
    uint64_t seed = 0;
    double cond_drop_prob = 0.1;
    double clip_norm = 1.0;
    double ref_prob = 0.5; // probability of training with an attached reference
};

struct TrainSeq {
    FrameSequence seq; // assembled (loop-closed for orbits, plain for arcs)
    std::vector<Image> targets;
};

struct StepRecord {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

// Momentum-free adaptive optimizer (RMSProp-style second-moment scaling).
struct RmsProp {
    double lr = 1e-4, beta = 0.99, eps = 1e-8;
    std::vector<Tensor> state;
    void step(const std::vector<Tensor*>& values, const std::vector<Tensor*>& grads,
              double clip_norm);
};

std::vector<StepRecord> pretrain_base(DenoiserModel& model, const std::vector<TrainSeq>& data,
                                      const TrainConfig& config);
LoRAAdapterSet train_lora(DenoiserModel& model, const std::vector<TrainSeq>& data,
                          const TrainConfig& config, std::vector<StepRecord>* curve);

// Mean Eq.-4-style validation loss at fixed draws (paired comparisons).
double validation_loss(const DenoiserModel& model, const LoRAAdapterSet* ads,
                       const std::vector<TrainSeq>& data, uint64_t seed, int repeats = 4);

// --- sampling ----------------------------------------------------------------

// u_uncond + guidance * (u_cond - u_uncond)
Tensor guided_velocity(const Tensor& u_cond, const Tensor& u_uncond, double guidance);

// Heun integration from noise (t=0) to data (t=1); output clamped to [0,1].
std::vector<Image> sample_sequence(const DenoiserModel& model, const LoRAAdapterSet* ads,
                                   const FrameSequence& seq, int steps, double guidance,
                                   double lora_scale, uint64_t seed);

// Each frame denoised independently with its own noise (no temporal sharing).
std::vector<Image> sample_per_frame(const DenoiserModel& model, const LoRAAdapterSet* ads,
                                    const FrameSequence& seq, int steps, double guidance,
                                    double lora_scale, uint64_t seed);

// --- checkpoints ---------------------------------------------------------
// Binary container: magic, version, config json blob, float32 tensors in
// declaration order.

void save_model(const DenoiserModel& model, const std::string& path);
DenoiserModel load_model(const std::string& path);
void save_adapters(const LoRAAdapterSet& ads, const std::string& path);
LoRAAdapterSet load_adapters(const std::string& path, const DenoiserModel& model);

} // namespace splatfill
