// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "splatfill/errors.hpp"

#include <filesystem>

#include "splatfill/rng.hpp"
#include "splatfill/sequence.hpp"

using namespace splatfill;

namespace {

RenderedSequence make_rendered(uint64_t seed, int n_views, int size = 24) {
    ObjectSample sample = generate_object(seed, 48);
    sample.mask = generate_mask(sample.full, MaskVariant::kConvexHull, seed + 1);
    GaussianCloud carved = carve_object(sample, 0.05);
    RigSpec spec;
    spec.n_views = n_views;
    spec.width = size;
    spec.height = size;
    auto rig = make_rig(spec);
    RenderedSequence rs = render_sequence(sample.full, carved, sample.mask, rig);
    rs.input.label = sample.label;
    return rs;
}

} // namespace

TEST_CASE("render_sequence produces aligned frames, masks, targets") {
    RenderedSequence rs = make_rendered(5, 16);
    CHECK(rs.input.frames.size() == 16);
    CHECK(rs.input.masks.size() == 16);
    CHECK(rs.input.poses.size() == 16);
    CHECK(rs.targets.size() == 16);
    rs.input.validate();
}

TEST_CASE("identity mask and carved==full gives frames equal to targets") {
    ObjectSample sample = generate_object(6, 48);
    sample.mask.primitives = {SpherePrim{Vec3(9, 9, 9), 0.2}};
    GaussianCloud carved = carve_object(sample);
    RigSpec spec;
    spec.n_views = 4;
    spec.width = 24;
    spec.height = 24;
    RenderedSequence rs = render_sequence(sample.full, carved, sample.mask, make_rig(spec));
    for (size_t i = 0; i < 4; ++i) {
        CHECK(rs.input.frames[i].pixels == rs.targets[i].pixels);
        CHECK(rs.input.masks[i].all_zero());
    }
}

TEST_CASE("close_loop duplicates the first frame bit-exactly") {
    RenderedSequence rs = make_rendered(7, 16);
    FrameSequence closed = close_loop(rs.input);
    CHECK(closed.size() == 17);
    CHECK(closed.size() % 4 == 1);
    CHECK(satisfies_length_policy(closed));
    CHECK(closed.frames[16].pixels == closed.frames[0].pixels);
    CHECK(closed.masks[16].values == closed.masks[0].values);
    closed.validate();

    CHECK_THROWS_AS(close_loop(closed), StateError);
}

TEST_CASE("close_loop on 8 frames gives 9 = 4n+1") {
    RenderedSequence rs = make_rendered(8, 8);
    FrameSequence closed = close_loop(rs.input);
    CHECK(closed.size() == 9);
    CHECK(satisfies_length_policy(closed));
}

TEST_CASE("close_loop then drop-last is the identity") {
    RenderedSequence rs = make_rendered(9, 12);
    FrameSequence closed = close_loop(rs.input);
    for (size_t i = 0; i < rs.input.size(); ++i) {
        CHECK(closed.frames[i].pixels == rs.input.frames[i].pixels);
        CHECK(closed.masks[i].values == rs.input.masks[i].values);
    }
    CHECK(closed.size() == rs.input.size() + 1);
}

TEST_CASE("attach and detach reference are exact inverses") {
    RenderedSequence rs = make_rendered(10, 16);
    FrameSequence closed = close_loop(rs.input);
    Image reference = rs.targets[3];

    FrameSequence with_ref = attach_reference(closed, reference);
    CHECK(with_ref.size() == 18);
    CHECK(with_ref.reference_attached);
    CHECK(with_ref.masks[0].all_zero());
    CHECK_FALSE(with_ref.poses[0].has_value());
    CHECK(with_ref.orbital_size() == 17);
    CHECK(satisfies_length_policy(with_ref));
    with_ref.validate();

    // Loop invariant now checks against index 1.
    CHECK(with_ref.frames[17].pixels == with_ref.frames[1].pixels);

    FrameSequence detached = detach_reference(with_ref);
    CHECK(detached.size() == closed.size());
    for (size_t i = 0; i < closed.size(); ++i) {
        CHECK(detached.frames[i].pixels == closed.frames[i].pixels);
        CHECK(detached.masks[i].values == closed.masks[i].values);
    }
    detached.validate();

    CHECK_THROWS_AS(detach_reference(detached), StateError);
    CHECK_THROWS_AS(attach_reference(with_ref, reference), StateError);

    Image wrong(4, 4, 0.5);
    CHECK_THROWS_AS(attach_reference(closed, wrong), ParamError);
}

TEST_CASE("composite_known selects per pixel") {
    RenderedSequence rs = make_rendered(11, 4);
    std::vector<Image> generated(4, Image(24, 24, 0.25));

    SUBCASE("all-zero masks keep the input") {
        FrameSequence seq = rs.input;
        for (auto& m : seq.masks) m = MaskImage(24, 24, 0);
        auto out = composite_known(generated, seq);
        for (size_t i = 0; i < 4; ++i) CHECK(out[i].pixels == seq.frames[i].pixels);
    }
    SUBCASE("all-one masks take the generated frames") {
        FrameSequence seq = rs.input;
        for (auto& m : seq.masks) m = MaskImage(24, 24, 1);
        auto out = composite_known(generated, seq);
        for (size_t i = 0; i < 4; ++i) CHECK(out[i].pixels == generated[i].pixels);
    }
    SUBCASE("random masks match the scalar loop oracle") {
        FrameSequence seq = rs.input;
        Rng rng(3);
        for (auto& m : seq.masks) {
            for (auto& v : m.values) v = rng.bernoulli(0.5) ? 1 : 0;
        }
        auto out = composite_known(generated, seq);
        for (size_t i = 0; i < 4; ++i) {
            for (int y = 0; y < 24; ++y) {
                for (int x = 0; x < 24; ++x) {
                    for (int c = 0; c < 3; ++c) {
                        double expected = seq.masks[i].at(x, y) ? generated[i].at(x, y, c)
                                                                : seq.frames[i].at(x, y, c);
                        CHECK(out[i].at(x, y, c) == expected);
                    }
                }
            }
        }
        // Unmasked pixels are preserved exactly.
        for (size_t i = 0; i < 4; ++i) {
            for (size_t p = 0; p < out[i].pixel_count(); ++p) {
                if (!seq.masks[i].values[p]) {
                    for (int c = 0; c < 3; ++c) {
                        CHECK(out[i].pixels[p * 3 + c] == seq.frames[i].pixels[p * 3 + c]);
                    }
                }
            }
        }
    }
    SUBCASE("size mismatch rejected") {
        std::vector<Image> bad(4, Image(12, 12, 0.0));
        CHECK_THROWS_AS(composite_known(bad, rs.input), ParamError);
    }
}

TEST_CASE("fill_masked replaces only masked pixels") {
    RenderedSequence rs = make_rendered(12, 1);
    const Image& frame = rs.input.frames[0];
    const MaskImage& mask = rs.input.masks[0];
    Image filled = fill_masked(frame, mask, 0.5);
    for (size_t p = 0; p < frame.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) {
            double expected = mask.values[p] ? 0.5 : frame.pixels[p * 3 + c];
            CHECK(filled.pixels[p * 3 + c] == expected);
        }
    }
}

TEST_CASE("cyclic rig shift equals cyclic frame shift") {
    ObjectSample sample = generate_object(13, 48);
    GaussianCloud carved = carve_object(sample, 0.05);
    RigSpec base;
    base.n_views = 8;
    base.width = 24;
    base.height = 24;
    RigSpec shifted = base;
    shifted.azimuth_offset_deg = 360.0 / 8;

    RenderedSequence a = render_sequence(sample.full, carved, sample.mask, make_rig(base));
    RenderedSequence b = render_sequence(sample.full, carved, sample.mask, make_rig(shifted));
    for (size_t i = 0; i < 8; ++i) {
        CHECK(b.input.frames[i].pixels == a.input.frames[(i + 1) % 8].pixels);
        CHECK(b.input.masks[i].values == a.input.masks[(i + 1) % 8].values);
    }
}

TEST_CASE("bundle round trip preserves pngs and manifest flags") {
    RenderedSequence rs = make_rendered(14, 8);
    Bundle bundle;
    bundle.seq = rs.input;
    bundle.targets = rs.targets;
    ObjectSample sample = generate_object(14, 48);
    bundle.full = sample.full;
    bundle.carved = carve_object(sample, 0.05);
    bundle.mask = sample.mask;
    bundle.seed = 14;

    auto dir = std::filesystem::temp_directory_path() / "sf_bundle_test";
    std::filesystem::remove_all(dir);
    write_bundle(bundle, dir.string());
    Bundle loaded = read_bundle(dir.string());

    CHECK(loaded.seq.size() == 8);
    CHECK(loaded.targets.size() == 8);
    CHECK(loaded.seq.label == bundle.seq.label);
    CHECK(loaded.seed == 14);
    CHECK(loaded.full.size() == bundle.full.size());
    CHECK(loaded.carved.size() == bundle.carved.size());
    // PNG quantization bounds the reload error by half a step.
    for (size_t i = 0; i < 8; ++i) {
        for (size_t p = 0; p < loaded.seq.frames[i].pixels.size(); ++p) {
            CHECK(std::abs(loaded.seq.frames[i].pixels[p] - bundle.seq.frames[i].pixels[p]) <=
                  0.5 / 255.0 + 1e-12);
        }
        CHECK(loaded.seq.masks[i].values == bundle.seq.masks[i].values);
    }
    std::filesystem::remove_all(dir);
}
