// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "splatfill/camera.hpp"
#include "splatfill/geometry.hpp"
#include "splatfill/image.hpp"

namespace splatfill {

// Sigma = R * diag(s) * diag(s) * R^T. Non-unit quaternions are normalized
// internally (counted in render_stats).
Mat3 build_covariance(const Quat& q, const Vec3& s);

// exp(-x^T Sigma^-1 x / 2). Throws NumericError for singular sigma.
double gaussian_eval(const Vec3& x, const Mat3& sigma);

struct RayContribution {
    Vec3 color;
    double opacity;
    double footprint; // G(x_i) in [0,1]
};

struct CompositeResult {
    Vec3 color;           // sum of weighted splat colors, background excluded
    double transmittance; // residual T
};

// Front-to-back alpha compositing of ordered contributions.
CompositeResult composite_ray(const std::vector<RayContribution>& contributions);

Image render(const GaussianCloud& cloud, const CameraPose& pose, const Vec3& background);

/// Per-splat partials of a scalar image loss. Quaternion gradients are taken
/// with respect to the stored (possibly unnormalized) w,x,y,z components.
struct RenderGradients {
    std::vector<Vec3> means;
    std::vector<Eigen::Vector4d> rotations; // d/d(w,x,y,z)
    std::vector<Vec3> scales;
    std::vector<double> opacities;
    std::vector<Vec3> colors;

    void resize(size_t n);
    void check_finite() const; // throws NumericError
};

// upstream holds dLoss/dPixel per channel in an Image-shaped buffer.
RenderGradients render_backward(const GaussianCloud& cloud, const CameraPose& pose,
                                const Vec3& background, const Image& upstream);

// Binary silhouette of the mask primitives as seen from the camera.
MaskImage render_mask(const Mask3D& mask, const CameraPose& pose);

struct RenderStats {
    uint64_t skipped_splats = 0;      // behind the near plane or degenerate
    uint64_t normalized_quats = 0;    // non-unit inputs fixed up
};
RenderStats& render_stats();

} // namespace splatfill
