// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "splatfill/camera.hpp"
#include "splatfill/geometry.hpp"
#include "splatfill/image.hpp"

namespace splatfill {

/// Ordered multi-view video: frames, binary masks, and poses. The reference
/// slot (index 0 when attached) carries a null pose and an all-zero mask.
struct FrameSequence {
    std::vector<Image> frames;
    std::vector<MaskImage> masks;
    std::vector<std::optional<CameraPose>> poses;
    bool loop_closed = false;
    bool reference_attached = false;
    int label = 0;

    size_t size() const { return frames.size(); }
    int loop_start() const { return reference_attached ? 1 : 0; }
    // Frame count subject to the 4n+1 policy (reference excluded).
    size_t orbital_size() const { return size() - (reference_attached ? 1 : 0); }
    void validate() const;
};

// length == 1 (mod 4) over the orbital frames.
bool satisfies_length_policy(const FrameSequence& seq);

struct RenderedSequence {
    FrameSequence input;
    std::vector<Image> targets;
};

// Renders the carved object + mask silhouettes per pose (the model inputs)
// and the full object (the training targets). White background.
RenderedSequence render_sequence(const GaussianCloud& full, const GaussianCloud& carved,
                                 const Mask3D& mask, const std::vector<CameraPose>& rig);

// Appends a bit-exact copy of the loop-start frame/mask/pose.
FrameSequence close_loop(const FrameSequence& seq);
std::vector<Image> close_loop_targets(const std::vector<Image>& targets);

FrameSequence attach_reference(const FrameSequence& seq, const Image& reference);
FrameSequence detach_reference(const FrameSequence& seq);

// out = mask ? generated : input, selected per pixel (bit-exact on both sides).
std::vector<Image> composite_known(const std::vector<Image>& generated,
                                   const FrameSequence& seq);

// Masked pixels replaced by the given constant (model ingestion fill).
Image fill_masked(const Image& frame, const MaskImage& mask, double value = 0.5);

// --- Bundle directory layout -------------------------------------------------
// frames/%03d.png, masks/%03d.png, targets/%03d.png, full.ply, carved.ply,
// mask.json, manifest.json (camera manifest + loop_closed/reference_attached/
// label/seed).

struct Bundle {
    FrameSequence seq;
    std::vector<Image> targets;
    GaussianCloud full;
    GaussianCloud carved;
    Mask3D mask;
    uint64_t seed = 0;
};

void write_bundle(const Bundle& bundle, const std::string& dir);
Bundle read_bundle(const std::string& dir, bool load_clouds = true);

} // namespace splatfill
