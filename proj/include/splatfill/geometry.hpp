// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace splatfill {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

/// Scene/object representation: one anisotropic Gaussian per splat.
/// All list fields share the same length; quaternions are unit, scales
/// strictly positive, opacities in (0,1), colors in [0,1].
struct GaussianCloud {
    std::vector<Vec3> means;
    std::vector<Quat> rotations;
    std::vector<Vec3> scales;
    std::vector<double> opacities;
    std::vector<Vec3> colors;

    size_t size() const { return means.size(); }
    bool empty() const { return means.empty(); }
    void push(const Vec3& mean, const Quat& rot, const Vec3& scale, double opacity,
              const Vec3& color);
    void validate() const; // throws ParamError on invariant violation
};

struct SpherePrim {
    Vec3 center;
    double radius;
};

struct BoxPrim {
    Vec3 lo;
    Vec3 hi;
};

using MaskPrimitive = std::variant<SpherePrim, BoxPrim>;

enum class MaskVariant { kConvexHull, kSurface, kVolume };

const char* mask_variant_name(MaskVariant v);
MaskVariant mask_variant_from_name(const std::string& name);

/// 3D masked region: union of convex primitives plus the variant tag.
struct Mask3D {
    MaskVariant variant = MaskVariant::kConvexHull;
    std::vector<MaskPrimitive> primitives;
};

/// Ground-truth object, its mask, and the conditioning label.
struct ObjectSample {
    GaussianCloud full;
    Mask3D mask;
    int label = 0;
    uint64_t seed = 0;
};

// Shape catalogue size; labels index into it.
constexpr int kShapeFamilyCount = 4;

// Strictly-inside membership in the union of primitives.
bool point_in_mask(const Vec3& p, const Mask3D& mask);

// Signed distance to the union boundary, negative inside. Used to pick
// survivors when a carve would otherwise swallow the whole cloud.
double mask_signed_distance(const Vec3& p, const Mask3D& mask);

ObjectSample generate_object(uint64_t seed, int complexity);

// Uniform scale + translation: bounding box of means centered at origin,
// longest side exactly 2. Degenerate clouds are centered with factor 1.
GaussianCloud normalize_cloud(const GaussianCloud& cloud);

// Removes splats whose means fall inside the mask. If the survivors would be
// fewer than min_keep_fraction * size, the least-deep splats are retained to
// meet the floor. With the default floor of 0 an empty result throws.
GaussianCloud carve_object(const ObjectSample& sample, double min_keep_fraction = 0.0);

Mask3D generate_mask(const GaussianCloud& cloud, MaskVariant variant, uint64_t seed);

// Bounding box of the means dilated per axis by margin * half_extent.
Mask3D make_volume_mask(const GaussianCloud& cloud, double margin);

struct MaskReport {
    bool pass = false;
    double containment_fraction = 0.0;
    std::string detail;
};

MaskReport validate_mask(const Mask3D& mask, const GaussianCloud& cloud);

// Binary little-endian PLY with per-splat properties
// x,y,z,rot_w..rot_z,scale_x..z,opacity,red,green,blue (all float32).
void write_ply(const GaussianCloud& cloud, const std::string& path);
GaussianCloud read_ply(const std::string& path);

// Mask JSON: {"variant": "...", "primitives": [...]}.
void write_mask_json(const Mask3D& mask, const std::string& path);
Mask3D read_mask_json(const std::string& path);

std::string mask_to_json(const Mask3D& mask);
Mask3D mask_from_json(const std::string& text);

} // namespace splatfill
