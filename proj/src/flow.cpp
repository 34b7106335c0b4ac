// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "splatfill/errors.hpp"
#include "splatfill/model.hpp"

namespace splatfill {

using json = nlohmann::ordered_json;

Tensor flow_interpolate(const Tensor& x0, const Tensor& x1, double t) {
    Tensor out = x0;
    for (size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = (1.0 - t) * x0.data[i] + t * x1.data[i];
    }
    return out;
}

Tensor flow_true_velocity(const Tensor& x0, const Tensor& x1) {
    Tensor out = x1;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= x0.data[i];
    return out;
}

Tensor images_to_tensor(const std::vector<Image>& frames) {
    if (frames.empty()) throw ParamError("images_to_tensor: empty");
    int h = frames[0].height, w = frames[0].width;
    Tensor t({int(frames.size()), 3, h, w});
    for (size_t f = 0; f < frames.size(); ++f) {
        for (int c = 0; c < 3; ++c) {
            double* plane = t.ptr() + (f * 3 + c) * size_t(h) * w;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) plane[size_t(y) * w + x] = frames[f].at(x, y, c);
            }
        }
    }
    return t;
}

std::vector<Image> tensor_to_images(const Tensor& t) {
    int frames = t.dim(0), h = t.dim(2), w = t.dim(3);
    std::vector<Image> out(frames, Image(w, h));
    for (int f = 0; f < frames; ++f) {
        for (int c = 0; c < 3; ++c) {
            const double* plane = t.ptr() + (size_t(f) * 3 + c) * h * w;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) out[f].at(x, y, c) = plane[size_t(y) * w + x];
            }
        }
    }
    return out;
}

FlowItem make_flow_item(const FrameSequence& seq, const std::vector<Image>& targets) {
    if (targets.size() != seq.size()) throw ParamError("make_flow_item: target count mismatch");
    FlowItem item;
    item.x1 = images_to_tensor(targets);
    std::vector<Image> filled(seq.size());
    for (size_t i = 0; i < seq.size(); ++i) filled[i] = fill_masked(seq.frames[i], seq.masks[i]);
    item.cond = images_to_tensor(filled);
    int h = seq.frames[0].height, w = seq.frames[0].width;
    item.mask = Tensor({int(seq.size()), 1, h, w});
    for (size_t f = 0; f < seq.size(); ++f) {
        double* plane = item.mask.ptr() + f * size_t(h) * w;
        for (size_t p = 0; p < size_t(h) * w; ++p) plane[p] = seq.masks[f].values[p];
    }
    item.label = seq.label;
    item.ref_attached = seq.reference_attached;
    return item;
}

double flow_loss_with(const VelocityFn& fn, const std::vector<FlowItem>& items,
                      const std::vector<double>& ts, const std::vector<Tensor>& noises,
                      const std::vector<bool>& drops) {
    if (items.empty()) throw ParamError("flow loss: empty batch");
    double total = 0.0;
    for (size_t i = 0; i < items.size(); ++i) {
        Tensor x_t = flow_interpolate(noises[i], items[i].x1, ts[i]);
        Tensor vel = fn(ts[i], x_t, items[i], drops[i]);
        double acc = 0.0;
        for (size_t j = 0; j < vel.data.size(); ++j) {
            double r = vel.data[j] - (items[i].x1.data[j] - noises[i].data[j]);
            acc += r * r;
        }
        total += acc / double(vel.data.size());
    }
    double loss = total / double(items.size());
    if (!std::isfinite(loss)) {
        throw NumericError("flow loss non-finite over batch of " +
                           std::to_string(items.size()));
    }
    return loss;
}

namespace {

Tensor normal_like(const Tensor& ref, Rng& rng) {
    Tensor out = ref;
    for (auto& v : out.data) v = rng.normal();
    return out;
}

} // namespace

double flow_matching_loss(const DenoiserModel& model, const LoRAAdapterSet* ads,
                          const std::vector<FlowItem>& items, Rng& rng) {
    std::vector<double> ts;
    std::vector<Tensor> noises;
    std::vector<bool> drops;
    for (const auto& item : items) {
        ts.push_back(rng.uniform());
        noises.push_back(normal_like(item.x1, rng));
        drops.push_back(false);
    }
    VelocityFn fn = [&](double t, const Tensor& x_t, const FlowItem& item, bool drop) {
        ModelInput in{x_t, item.cond, item.mask, item.label, drop, item.ref_attached, t};
        return denoiser_forward(model, ads, in);
    };
    return flow_loss_with(fn, items, ts, noises, drops);
}

double flow_matching_loss_backward(DenoiserModel& model, LoRAAdapterSet* ads,
                                   const std::vector<FlowItem>& items,
                                   const std::vector<double>& ts,
                                   const std::vector<Tensor>& noises,
                                   const std::vector<bool>& drops, double lora_scale) {
    if (items.empty()) throw ParamError("flow loss: empty batch");
    double total = 0.0;
    for (size_t i = 0; i < items.size(); ++i) {
        Tensor x_t = flow_interpolate(noises[i], items[i].x1, ts[i]);
        ModelInput in{x_t, items[i].cond, items[i].mask, items[i].label, drops[i],
                      items[i].ref_attached, ts[i]};
        ModelCtx ctx;
        Tensor vel = denoiser_forward(model, ads, in, ctx, lora_scale);
        double inv = 1.0 / (double(vel.data.size()) * double(items.size()));
        Tensor dvel = vel;
        double acc = 0.0;
        for (size_t j = 0; j < vel.data.size(); ++j) {
            double r = vel.data[j] - (items[i].x1.data[j] - noises[i].data[j]);
            acc += r * r;
            dvel.data[j] = 2.0 * r * inv;
        }
        total += acc / double(vel.data.size());
        denoiser_backward(model, ads, dvel, ctx, lora_scale);
    }
    double loss = total / double(items.size());
    if (!std::isfinite(loss)) throw NumericError("flow loss non-finite");
    return loss;
}

// ---------------------------------------------------------------------------
// Optimizer and training

void RmsProp::step(const std::vector<Tensor*>& values, const std::vector<Tensor*>& grads,
                   double clip_norm) {
    if (state.empty()) {
        for (Tensor* g : grads) state.push_back(Tensor(g->shape));
    }
    double sq = 0.0;
    for (Tensor* g : grads) {
        for (double v : g->data) sq += v * v;
    }
    double norm = std::sqrt(sq);
    double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

    for (size_t t = 0; t < values.size(); ++t) {
        Tensor& val = *values[t];
        Tensor& grad = *grads[t];
        Tensor& st = state[t];
        for (size_t i = 0; i < val.data.size(); ++i) {
            double g = grad.data[i] * scale;
            st.data[i] = beta * st.data[i] + (1.0 - beta) * g * g;
            val.data[i] -= lr * g / (std::sqrt(st.data[i]) + eps);
        }
    }
}

namespace {

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = n; i > 1; --i) {
        size_t j = rng.uniform_index(i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

struct BatchDraw {
    std::vector<FlowItem> items;
    std::vector<double> ts;
    std::vector<Tensor> noises;
    std::vector<bool> drops;
};

// Draw all per-item randomness in a fixed order.
BatchDraw draw_batch(const std::vector<TrainSeq>& data, const std::vector<FlowItem>& cache,
                     const std::vector<size_t>& indices, Rng& rng, const TrainConfig& cfg,
                     bool allow_reference) {
    BatchDraw batch;
    for (size_t idx : indices) {
        bool with_ref = allow_reference && rng.bernoulli(cfg.ref_prob);
        if (with_ref) {
            const TrainSeq& ts = data[idx];
            size_t view = rng.uniform_index(ts.targets.size());
            FrameSequence seq_ref = attach_reference(ts.seq, ts.targets[view]);
            std::vector<Image> targets_ref;
            targets_ref.reserve(ts.targets.size() + 1);
            targets_ref.push_back(ts.targets[view]);
            for (const auto& img : ts.targets) targets_ref.push_back(img);
            batch.items.push_back(make_flow_item(seq_ref, targets_ref));
        } else {
            batch.items.push_back(cache[idx]);
        }
        batch.ts.push_back(rng.uniform());
        batch.noises.push_back(normal_like(batch.items.back().x1, rng));
        batch.drops.push_back(rng.bernoulli(cfg.cond_drop_prob));
    }
    return batch;
}

std::vector<StepRecord> run_training(DenoiserModel& model, LoRAAdapterSet* ads,
                                     const std::vector<TrainSeq>& data, const TrainConfig& cfg,
                                     const std::vector<Tensor*>& values,
                                     const std::vector<Tensor*>& grads, bool allow_reference,
                                     double lora_scale) {
    if (data.empty()) throw ParamError("training: empty dataset");
    std::vector<FlowItem> cache;
    cache.reserve(data.size());
    for (const auto& ts : data) cache.push_back(make_flow_item(ts.seq, ts.targets));

    Rng rng(Rng::mix(cfg.seed, 0x7a31));
    RmsProp opt;
    opt.lr = cfg.lr;
    std::vector<StepRecord> curve;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order = shuffled_indices(data.size(), rng);
        for (size_t pos = 0; pos < order.size(); pos += size_t(cfg.batch)) {
            std::vector<size_t> slice(order.begin() + pos,
                                      order.begin() +
                                          std::min(order.size(), pos + size_t(cfg.batch)));
            BatchDraw batch = draw_batch(data, cache, slice, rng, cfg, allow_reference);

            for (Tensor* g : grads) g->zero();
            double loss = flow_matching_loss_backward(model, ads, batch.items, batch.ts,
                                                      batch.noises, batch.drops, lora_scale);
            if (loss > 1e3) {
                throw NumericError("training diverged at step " + std::to_string(step) +
                                   " with loss " + std::to_string(loss));
            }
            opt.step(values, grads, cfg.clip_norm);
            curve.push_back({step, loss, cfg.lr});
            ++step;
        }
    }
    return curve;
}

} // namespace

std::vector<StepRecord> pretrain_base(DenoiserModel& model, const std::vector<TrainSeq>& data,
                                      const TrainConfig& config) {
    std::vector<Tensor*> values, grads;
    for (Param* p : model.params) {
        p->frozen = false;
        values.push_back(&p->value);
        grads.push_back(&p->grad);
    }
    model.zero_grads();
    return run_training(model, nullptr, data, config, values, grads,
                        /*allow_reference=*/false, 1.0);
}

LoRAAdapterSet train_lora(DenoiserModel& model, const std::vector<TrainSeq>& data,
                          const TrainConfig& config, std::vector<StepRecord>* curve) {
    model.freeze_all();
    LoRAAdapterSet ads = create_adapters(model, config.rank, config.seed);
    std::vector<Tensor*> values, grads;
    for (auto& m : ads.maps) {
        values.push_back(&m.a);
        grads.push_back(&m.ga);
        values.push_back(&m.b);
        grads.push_back(&m.gb);
    }
    auto records = run_training(model, &ads, data, config, values, grads,
                                /*allow_reference=*/true, 1.0);
    if (curve) *curve = std::move(records);
    return ads;
}

double validation_loss(const DenoiserModel& model, const LoRAAdapterSet* ads,
                       const std::vector<TrainSeq>& data, uint64_t seed, int repeats) {
    if (data.empty()) throw ParamError("validation: empty dataset");
    VelocityFn fn = [&](double t, const Tensor& x_t, const FlowItem& item, bool drop) {
        ModelInput in{x_t, item.cond, item.mask, item.label, drop, item.ref_attached, t};
        return denoiser_forward(model, ads, in);
    };
    double total = 0.0;
    int count = 0;
    for (size_t i = 0; i < data.size(); ++i) {
        FlowItem item = make_flow_item(data[i].seq, data[i].targets);
        for (int r = 0; r < repeats; ++r) {
            Rng rng(Rng::mix(seed, i * 1000 + size_t(r)));
            std::vector<double> ts = {rng.uniform()};
            std::vector<Tensor> noises;
            noises.push_back(normal_like(item.x1, rng));
            total += flow_loss_with(fn, {item}, ts, noises, {false});
            ++count;
        }
    }
    return total / double(count);
}

// ---------------------------------------------------------------------------
// Sampling

Tensor guided_velocity(const Tensor& u_cond, const Tensor& u_uncond, double guidance) {
    Tensor out = u_uncond;
    for (size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = u_uncond.data[i] + guidance * (u_cond.data[i] - u_uncond.data[i]);
    }
    return out;
}

namespace {

FlowItem make_sample_item(const FrameSequence& seq) {
    std::vector<Image> zeros(seq.size(),
                             Image(seq.frames[0].width, seq.frames[0].height, 0.0));
    return make_flow_item(seq, zeros);
}

} // namespace

std::vector<Image> sample_sequence(const DenoiserModel& model, const LoRAAdapterSet* ads,
                                   const FrameSequence& seq, int steps, double guidance,
                                   double lora_scale, uint64_t seed) {
    if (steps < 1) throw ParamError("sample: steps must be >= 1");
    seq.validate();
    if (!satisfies_length_policy(seq)) {
        throw ParamError("sample: sequence length must be 1 mod 4 excluding the reference");
    }
    FlowItem item = make_sample_item(seq);

    auto velocity = [&](double t, const Tensor& x) {
        ModelInput in{x, item.cond, item.mask, item.label, false, item.ref_attached, t};
        Tensor u_c = denoiser_forward(model, ads, in, lora_scale);
        if (guidance == 1.0) return u_c;
        in.cond_drop = true;
        Tensor u_u = denoiser_forward(model, ads, in, lora_scale);
        return guided_velocity(u_c, u_u, guidance);
    };

    Rng rng(Rng::mix(seed, 0x5a3f));
    Tensor x = normal_like(item.x1, rng);
    for (int k = 0; k < steps; ++k) {
        double t0 = double(k) / steps;
        double t1 = double(k + 1) / steps;
        double h = t1 - t0;
        Tensor v0 = velocity(t0, x);
        Tensor xe = x;
        for (size_t i = 0; i < x.data.size(); ++i) xe.data[i] += h * v0.data[i];
        Tensor v1 = velocity(t1, xe);
        for (size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] += 0.5 * h * (v0.data[i] + v1.data[i]);
        }
    }
    for (auto& v : x.data) v = std::clamp(v, 0.0, 1.0);
    return tensor_to_images(x);
}

std::vector<Image> sample_per_frame(const DenoiserModel& model, const LoRAAdapterSet* ads,
                                    const FrameSequence& seq, int steps, double guidance,
                                    double lora_scale, uint64_t seed) {
    std::vector<Image> out;
    out.reserve(seq.size());
    for (size_t f = 0; f < seq.size(); ++f) {
        FrameSequence single;
        single.frames = {seq.frames[f]};
        single.masks = {seq.masks[f]};
        single.poses = {seq.poses[f]};
        single.label = seq.label;
        auto imgs = sample_sequence(model, ads, single, steps, guidance, lora_scale,
                                    Rng::mix(seed, 0xf00 + f));
        out.push_back(imgs[0]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr uint32_t kCheckpointVersion = 1;

void write_blob(std::ofstream& out, const char magic[4], const std::string& meta,
                const std::vector<const Tensor*>& tensors) {
    out.write(magic, 4);
    uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    uint64_t len = meta.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(meta.data(), std::streamsize(meta.size()));
    std::vector<float> buf;
    for (const Tensor* t : tensors) {
        buf.resize(t->size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t->data[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  std::streamsize(buf.size() * sizeof(float)));
    }
}

std::string read_header(std::ifstream& in, const char magic[4], const std::string& path) {
    char got[4];
    uint32_t version = 0;
    uint64_t len = 0;
    in.read(got, 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&len), 8);
    if (!in || std::memcmp(got, magic, 4) != 0) {
        throw DataError("bad checkpoint magic: " + path);
    }
    if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    std::string meta(len, '\0');
    in.read(meta.data(), std::streamsize(len));
    if (!in) throw DataError("truncated checkpoint header: " + path);
    return meta;
}

void read_tensor(std::ifstream& in, Tensor& t, const std::string& path) {
    std::vector<float> buf(t.size());
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
    if (!in) throw DataError("truncated checkpoint: " + path);
    for (size_t i = 0; i < buf.size(); ++i) t.data[i] = buf[i];
}

} // namespace

void save_model(const DenoiserModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    json meta;
    meta["config"] = json::parse(model.config.to_json());
    meta["tensors"] = json::array();
    std::vector<const Tensor*> tensors;
    for (const Param* p : model.params) {
        json t;
        t["name"] = p->name;
        t["shape"] = p->value.shape;
        meta["tensors"].push_back(t);
        tensors.push_back(&p->value);
    }
    write_blob(out, "SFBM", meta.dump(), tensors);
    if (!out) throw DataError("write failed: " + path);
}

DenoiserModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint: " + path);
    json meta = json::parse(read_header(in, "SFBM", path));
    DenoiserConfig config = DenoiserConfig::from_json(meta.at("config").dump());
    DenoiserModel model = DenoiserModel::create(config, 0);
    const auto& tensors = meta.at("tensors");
    if (tensors.size() != model.params.size()) {
        throw DataError("checkpoint tensor count mismatch: " + path);
    }
    for (size_t i = 0; i < model.params.size(); ++i) {
        if (tensors[i].at("name").get<std::string>() != model.params[i]->name) {
            throw DataError("checkpoint tensor order mismatch at " + model.params[i]->name);
        }
        read_tensor(in, model.params[i]->value, path);
    }
    return model;
}

void save_adapters(const LoRAAdapterSet& ads, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write adapters: " + path);
    json meta;
    meta["rank"] = ads.rank;
    meta["fingerprint"] = ads.fingerprint;
    meta["maps"] = json::array();
    std::vector<const Tensor*> tensors;
    for (const auto& m : ads.maps) {
        json t;
        t["target"] = m.target;
        t["shape_a"] = m.a.shape;
        t["shape_b"] = m.b.shape;
        t["scale"] = m.scale;
        meta["maps"].push_back(t);
        tensors.push_back(&m.a);
        tensors.push_back(&m.b);
    }
    write_blob(out, "SFLA", meta.dump(), tensors);
    if (!out) throw DataError("write failed: " + path);
}

LoRAAdapterSet load_adapters(const std::string& path, const DenoiserModel& model) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read adapters: " + path);
    json meta = json::parse(read_header(in, "SFLA", path));
    LoRAAdapterSet ads;
    ads.rank = meta.at("rank").get<int>();
    ads.fingerprint = meta.at("fingerprint").get<std::string>();
    if (ads.fingerprint != model.config.fingerprint()) {
        throw ConfigError("adapter checkpoint does not match the model config");
    }
    for (const auto& t : meta.at("maps")) {
        LoRAMatrices m;
        m.target = t.at("target").get<std::string>();
        m.a = Tensor(t.at("shape_a").get<std::vector<int>>());
        m.b = Tensor(t.at("shape_b").get<std::vector<int>>());
        m.scale = t.at("scale").get<double>();
        read_tensor(in, m.a, path);
        read_tensor(in, m.b, path);
        m.ga = Tensor(m.a.shape);
        m.gb = Tensor(m.b.shape);
        bool known = false;
        for (const Param* p : model.adaptable) {
            if (p->name == m.target) {
                if (p->value.shape[0] != m.a.dim(0) || p->value.shape[1] != m.b.dim(1)) {
                    throw ConfigError("adapter shape mismatch for " + m.target);
                }
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError("adapter targets unknown map " + m.target);
        ads.maps.push_back(std::move(m));
    }
    return ads;
}

} // namespace splatfill
