// SPDX-License-Identifier: Apache-2.0
#include "splatfill/sequence.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "splatfill/errors.hpp"
#include "splatfill/parallel.hpp"
#include "splatfill/renderer.hpp"

namespace splatfill {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

void FrameSequence::validate() const {
    if (frames.size() != masks.size() || frames.size() != poses.size()) {
        throw ParamError("sequence: frames/masks/poses lengths differ");
    }
    for (size_t i = 0; i < frames.size(); ++i) {
        if (frames[i].width != masks[i].width || frames[i].height != masks[i].height) {
            throw ParamError("sequence: frame/mask size mismatch at " + std::to_string(i));
        }
    }
    if (reference_attached) {
        if (frames.empty()) throw StateError("sequence: reference flag on empty sequence");
        if (!masks[0].all_zero()) throw StateError("sequence: reference mask must be all-zero");
        if (poses[0].has_value()) throw StateError("sequence: reference pose must be null");
    }
    if (loop_closed) {
        size_t start = static_cast<size_t>(loop_start());
        size_t last = frames.size() - 1;
        if (last <= start) throw StateError("sequence: loop closure needs >= 2 orbital frames");
        if (frames[last].pixels != frames[start].pixels ||
            masks[last].values != masks[start].values) {
            throw StateError("sequence: loop frame is not a bit-exact duplicate");
        }
    }
}

bool satisfies_length_policy(const FrameSequence& seq) {
    return seq.orbital_size() % 4 == 1;
}

RenderedSequence render_sequence(const GaussianCloud& full, const GaussianCloud& carved,
                                 const Mask3D& mask, const std::vector<CameraPose>& rig) {
    if (rig.empty()) throw ParamError("render_sequence: empty rig");
    RenderedSequence out;
    out.input.frames.resize(rig.size());
    out.input.masks.resize(rig.size());
    out.input.poses.resize(rig.size());
    out.targets.resize(rig.size());
    const Vec3 white(1.0, 1.0, 1.0);
    for (size_t i = 0; i < rig.size(); ++i) {
        out.input.frames[i] = render(carved, rig[i], white);
        out.input.masks[i] = render_mask(mask, rig[i]);
        out.input.poses[i] = rig[i];
        out.targets[i] = render(full, rig[i], white);
    }
    return out;
}

FrameSequence close_loop(const FrameSequence& seq) {
    if (seq.loop_closed) throw StateError("close_loop: already closed");
    if (seq.orbital_size() < 1) throw ParamError("close_loop: empty sequence");
    FrameSequence out = seq;
    size_t start = static_cast<size_t>(seq.loop_start());
    out.frames.push_back(seq.frames[start]);
    out.masks.push_back(seq.masks[start]);
    out.poses.push_back(seq.poses[start]);
    out.loop_closed = true;
    return out;
}

std::vector<Image> close_loop_targets(const std::vector<Image>& targets) {
    if (targets.empty()) throw ParamError("close_loop_targets: empty");
    std::vector<Image> out = targets;
    out.push_back(targets[0]);
    return out;
}

FrameSequence attach_reference(const FrameSequence& seq, const Image& reference) {
    if (seq.reference_attached) throw StateError("attach_reference: already attached");
    if (seq.frames.empty()) throw ParamError("attach_reference: empty sequence");
    if (!reference.same_size(seq.frames[0])) {
        throw ParamError("attach_reference: reference size mismatch");
    }
    FrameSequence out = seq;
    out.frames.insert(out.frames.begin(), reference);
    out.masks.insert(out.masks.begin(), MaskImage(reference.width, reference.height, 0));
    out.poses.insert(out.poses.begin(), std::nullopt);
    out.reference_attached = true;
    return out;
}

FrameSequence detach_reference(const FrameSequence& seq) {
    if (!seq.reference_attached) throw StateError("detach_reference: nothing attached");
    FrameSequence out = seq;
    out.frames.erase(out.frames.begin());
    out.masks.erase(out.masks.begin());
    out.poses.erase(out.poses.begin());
    out.reference_attached = false;
    return out;
}

std::vector<Image> composite_known(const std::vector<Image>& generated,
                                   const FrameSequence& seq) {
    if (generated.size() != seq.size()) throw ParamError("composite_known: count mismatch");
    std::vector<Image> out(generated.size());
    for (size_t i = 0; i < generated.size(); ++i) {
        const Image& gen = generated[i];
        const Image& in = seq.frames[i];
        const MaskImage& mask = seq.masks[i];
        if (!gen.same_size(in)) throw ParamError("composite_known: size mismatch");
        Image composed(in.width, in.height);
        for (size_t p = 0; p < composed.pixel_count(); ++p) {
            bool editable = mask.values[p] != 0;
            for (int c = 0; c < 3; ++c) {
                composed.pixels[p * 3 + c] =
                    editable ? gen.pixels[p * 3 + c] : in.pixels[p * 3 + c];
            }
        }
        out[i] = std::move(composed);
    }
    return out;
}

Image fill_masked(const Image& frame, const MaskImage& mask, double value) {
    Image out = frame;
    for (size_t p = 0; p < out.pixel_count(); ++p) {
        if (mask.values[p]) {
            out.pixels[p * 3 + 0] = value;
            out.pixels[p * 3 + 1] = value;
            out.pixels[p * 3 + 2] = value;
        }
    }
    return out;
}

namespace {

std::string frame_name(const char* stem, size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s/%03zu.png", stem, i);
    return buf;
}

} // namespace

void write_bundle(const Bundle& bundle, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "frames");
    fs::create_directories(fs::path(dir) / "masks");
    fs::create_directories(fs::path(dir) / "targets");

    const auto& seq = bundle.seq;
    CameraManifest manifest;
    manifest.width = seq.frames.empty() ? 0 : seq.frames[0].width;
    manifest.height = seq.frames.empty() ? 0 : seq.frames[0].height;
    for (size_t i = 0; i < seq.size(); ++i) {
        write_png(seq.frames[i], (fs::path(dir) / frame_name("frames", i)).string());
        write_png(seq.masks[i], (fs::path(dir) / frame_name("masks", i)).string());
        if (!seq.poses[i].has_value()) continue;
        CameraManifestFrame f;
        f.file_path = frame_name("frames", i);
        f.mask_path = frame_name("masks", i);
        f.pose = *seq.poses[i];
        manifest.frames.push_back(f);
        manifest.camera_angle_y_rad = f.pose.fov_y_deg * 3.14159265358979323846 / 180.0;
    }
    for (size_t i = 0; i < bundle.targets.size(); ++i) {
        write_png(bundle.targets[i], (fs::path(dir) / frame_name("targets", i)).string());
    }
    write_ply(bundle.full, (fs::path(dir) / "full.ply").string());
    write_ply(bundle.carved, (fs::path(dir) / "carved.ply").string());
    write_mask_json(bundle.mask, (fs::path(dir) / "mask.json").string());

    json j = json::parse(manifest_to_json(manifest));
    j["loop_closed"] = seq.loop_closed;
    j["reference_attached"] = seq.reference_attached;
    j["label"] = seq.label;
    j["seed"] = bundle.seed;
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("cannot write manifest: " + dir);
    out << j.dump(2) << "\n";
}

Bundle read_bundle(const std::string& dir, bool load_clouds) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("cannot read manifest: " + dir);
    std::stringstream ss;
    ss << in.rdbuf();
    json j = json::parse(ss.str());
    CameraManifest manifest = manifest_from_json(ss.str());

    Bundle bundle;
    bundle.seq.loop_closed = j.value("loop_closed", false);
    bundle.seq.reference_attached = j.value("reference_attached", false);
    bundle.seq.label = j.value("label", 0);
    bundle.seed = j.value("seed", 0ULL);

    for (const auto& f : manifest.frames) {
        bundle.seq.frames.push_back(read_png((fs::path(dir) / f.file_path).string()));
        bundle.seq.masks.push_back(read_png_mask((fs::path(dir) / f.mask_path).string()));
        bundle.seq.poses.push_back(f.pose);
    }
    for (size_t i = 0;; ++i) {
        fs::path p = fs::path(dir) / frame_name("targets", i);
        if (!fs::exists(p)) break;
        bundle.targets.push_back(read_png(p.string()));
    }
    if (load_clouds) {
        bundle.full = read_ply((fs::path(dir) / "full.ply").string());
        bundle.carved = read_ply((fs::path(dir) / "carved.ply").string());
    }
    bundle.mask = read_mask_json((fs::path(dir) / "mask.json").string());
    return bundle;
}

} // namespace splatfill
