// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "splatfill/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "splatfill/renderer.hpp"
#include "splatfill/rng.hpp"

using namespace splatfill;

namespace {

// ---------------------------------------------------------------------------
// Test-only oracle: per-pixel compositing transcribed directly from the
// formula c = sum_i c_i a_i G_i prod_{j<i} (1 - a_j G_j), with no culling and
// no footprint cutoff. Kept independent of the renderer internals.

struct OracleSplat {
    Eigen::Vector2d center;
    Eigen::Matrix2d cov;
    double depth;
    double opacity;
    Vec3 color;
    int index;
};

Image brute_force_render(const GaussianCloud& cloud, const CameraPose& pose,
                         const Vec3& background) {
    double f = 0.5 * pose.height / std::tan(0.5 * pose.fov_y_deg * M_PI / 180.0);
    std::vector<OracleSplat> splats;
    for (size_t i = 0; i < cloud.size(); ++i) {
        Vec3 cam = pose.rotation * cloud.means[i] + pose.translation;
        if (cam.z() <= 0.01) continue;
        Mat3 r = cloud.rotations[i].normalized().toRotationMatrix();
        Mat3 sigma = r * cloud.scales[i].cwiseProduct(cloud.scales[i]).asDiagonal() *
                     r.transpose();
        Eigen::Matrix<double, 2, 3> jac;
        jac << f / cam.z(), 0, -f * cam.x() / (cam.z() * cam.z()), 0, f / cam.z(),
            -f * cam.y() / (cam.z() * cam.z());
        Eigen::Matrix<double, 2, 3> a = jac * pose.rotation;
        OracleSplat s;
        s.center = Eigen::Vector2d(0.5 * pose.width + f * cam.x() / cam.z(),
                                   0.5 * pose.height + f * cam.y() / cam.z());
        s.cov = a * sigma * a.transpose();
        s.depth = cam.z();
        s.opacity = cloud.opacities[i];
        s.color = cloud.colors[i];
        s.index = static_cast<int>(i);
        splats.push_back(s);
    }
    std::sort(splats.begin(), splats.end(), [](const OracleSplat& a, const OracleSplat& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.index < b.index;
    });

    Image img(pose.width, pose.height);
    for (int py = 0; py < pose.height; ++py) {
        for (int px = 0; px < pose.width; ++px) {
            Vec3 color = Vec3::Zero();
            double t = 1.0;
            for (const auto& s : splats) {
                Eigen::Vector2d d(px + 0.5 - s.center.x(), py + 0.5 - s.center.y());
                double g = std::exp(-0.5 * d.dot(s.cov.inverse() * d));
                double w = s.opacity * g;
                color += s.color * w * t;
                t *= 1.0 - w;
            }
            color += t * background;
            for (int c = 0; c < 3; ++c) img.at(px, py, c) = std::clamp(color[c], 0.0, 1.0);
        }
    }
    return img;
}

GaussianCloud random_scene(uint64_t seed, int n) {
    Rng rng(seed);
    GaussianCloud cloud;
    for (int i = 0; i < n; ++i) {
        Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q.normalize();
        cloud.push(Vec3(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)),
                   q,
                   Vec3(rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25),
                        rng.uniform(0.05, 0.25)),
                   rng.uniform(0.3, 0.9),
                   Vec3(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)));
    }
    return cloud;
}

// Scenes whose splat depths are well separated under the given pose, so a
// +-1e-4 parameter bump cannot flip the compositing order.
GaussianCloud separated_scene(uint64_t seed, int n, const CameraPose& pose) {
    for (uint64_t attempt = 0;; ++attempt) {
        GaussianCloud cloud = random_scene(Rng::mix(seed, attempt), n);
        std::vector<double> depths;
        for (const auto& m : cloud.means) {
            depths.push_back((pose.rotation * m + pose.translation).z());
        }
        std::sort(depths.begin(), depths.end());
        bool ok = true;
        for (size_t i = 0; i + 1 < depths.size(); ++i) {
            if (depths[i + 1] - depths[i] < 1e-3) ok = false;
        }
        if (ok) return cloud;
    }
}

double upstream_loss(const Image& img, const Image& upstream) {
    return std::inner_product(img.pixels.begin(), img.pixels.end(), upstream.pixels.begin(),
                              0.0);
}

Image random_upstream(int w, int h, uint64_t seed) {
    Rng rng(seed);
    Image up(w, h);
    for (auto& v : up.pixels) v = rng.uniform(-1.0, 1.0);
    return up;
}

double rel_err(double analytic, double fd) {
    double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
    return std::abs(analytic - fd) / denom;
}

// Central finite differences of the upstream-weighted render loss for every
// parameter of every splat; returns the max relative error vs analytic.
double max_grad_error(GaussianCloud work, const CameraPose& pose, const Vec3& bg,
                      const Image& upstream, double step = 1e-4) {
    RenderGradients grads = render_backward(work, pose, bg, upstream);
    double worst = 0.0;
    auto probe = [&](double* slot, double analytic) {
        double orig = *slot;
        *slot = orig + step;
        double lp = upstream_loss(render(work, pose, bg), upstream);
        *slot = orig - step;
        double lm = upstream_loss(render(work, pose, bg), upstream);
        *slot = orig;
        worst = std::max(worst, rel_err(analytic, (lp - lm) / (2.0 * step)));
    };
    for (size_t i = 0; i < work.size(); ++i) {
        for (int k = 0; k < 3; ++k) probe(&work.means[i][k], grads.means[i][k]);
        probe(&work.rotations[i].w(), grads.rotations[i][0]);
        probe(&work.rotations[i].x(), grads.rotations[i][1]);
        probe(&work.rotations[i].y(), grads.rotations[i][2]);
        probe(&work.rotations[i].z(), grads.rotations[i][3]);
        for (int k = 0; k < 3; ++k) probe(&work.scales[i][k], grads.scales[i][k]);
        probe(&work.opacities[i], grads.opacities[i]);
        for (int k = 0; k < 3; ++k) probe(&work.colors[i][k], grads.colors[i][k]);
    }
    return worst;
}

} // namespace

TEST_CASE("build_covariance with identity rotation is diag(s^2)") {
    Mat3 sigma = build_covariance(Quat::Identity(), Vec3(1, 2, 3));
    Mat3 expected = Vec3(1, 4, 9).asDiagonal();
    CHECK((sigma - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("build_covariance with 90-degree z rotation permutes axes") {
    Quat q(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()));
    Mat3 sigma = build_covariance(q, Vec3(1, 2, 1));
    Mat3 expected = Vec3(4, 1, 1).asDiagonal();
    CHECK((sigma - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("build_covariance eigenvalues equal squared scales") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q.normalize();
        Vec3 s(rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2));
        Mat3 sigma = build_covariance(q, s);
        Eigen::SelfAdjointEigenSolver<Mat3> eig(sigma);
        Vec3 expected = s.cwiseProduct(s);
        std::sort(expected.data(), expected.data() + 3);
        CHECK((eig.eigenvalues() - expected).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("build_covariance normalizes non-unit quaternions with a counter") {
    uint64_t before = render_stats().normalized_quats;
    Quat q(2.0, 0.0, 0.0, 0.0);
    Mat3 sigma = build_covariance(q, Vec3(1, 1, 1));
    CHECK(render_stats().normalized_quats == before + 1);
    CHECK((sigma - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gaussian_eval known values") {
    CHECK(gaussian_eval(Vec3::Zero(), Mat3::Identity()) == 1.0);
    double x = std::sqrt(2.0 * std::log(2.0));
    CHECK(gaussian_eval(Vec3(x, 0, 0), Mat3::Identity()) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("gaussian_eval matches dense solve oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 25; ++trial) {
        Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q.normalize();
        Vec3 s(rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5));
        Mat3 sigma = build_covariance(q, s);
        Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        double expected = std::exp(-0.5 * x.dot(sigma.inverse() * x));
        CHECK(gaussian_eval(x, sigma) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("gaussian_eval rejects singular sigma") {
    Mat3 singular = Mat3::Zero();
    singular(0, 0) = 1.0;
    CHECK_THROWS_AS(gaussian_eval(Vec3(1, 0, 0), singular), NumericError);
}

TEST_CASE("composite_ray single opaque splat") {
    CompositeResult r = composite_ray({{Vec3(1, 0, 0), 1.0, 1.0}});
    CHECK(r.color.isApprox(Vec3(1, 0, 0)));
    CHECK(r.transmittance == 0.0);
    // white background adds nothing at T=0
    CHECK((r.color + r.transmittance * Vec3::Ones()).isApprox(Vec3(1, 0, 0)));
}

TEST_CASE("composite_ray front-to-back expansion") {
    CompositeResult r = composite_ray({{Vec3(1, 0, 0), 0.5, 1.0}, {Vec3(0, 1, 0), 1.0, 1.0}});
    CHECK(r.color.isApprox(Vec3(0.5, 0.5, 0.0), 1e-15));
    CHECK(r.transmittance == 0.0);
}

TEST_CASE("composite_ray matches the literal formula on random input") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<RayContribution> contribs;
        for (int i = 0; i < 5; ++i) {
            contribs.push_back({Vec3(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)),
                                rng.uniform(0.05, 0.95), rng.uniform(0.05, 1.0)});
        }
        Vec3 expected = Vec3::Zero();
        for (size_t i = 0; i < contribs.size(); ++i) {
            double prod = 1.0;
            for (size_t j = 0; j < i; ++j) {
                prod *= 1.0 - contribs[j].opacity * contribs[j].footprint;
            }
            expected += contribs[i].color * contribs[i].opacity * contribs[i].footprint * prod;
        }
        double t_expected = 1.0;
        for (const auto& c : contribs) t_expected *= 1.0 - c.opacity * c.footprint;

        CompositeResult r = composite_ray(contribs);
        CHECK((r.color - expected).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(r.transmittance == doctest::Approx(t_expected).epsilon(1e-12));

        // Accumulated weight identity: sum w_i prod(1-w_j) = 1 - T.
        double acc = 0.0, t = 1.0;
        for (const auto& c : contribs) {
            double w = c.opacity * c.footprint;
            acc += w * t;
            t *= 1.0 - w;
        }
        CHECK(acc == doctest::Approx(1.0 - r.transmittance).epsilon(1e-12));
        CHECK(r.transmittance >= 0.0);
        CHECK(r.transmittance <= 1.0);
    }
}

TEST_CASE("render of empty cloud returns the background") {
    GaussianCloud empty;
    CameraPose pose = look_at_origin(45, 20, 2.7, 50, 32, 32);
    Image img = render(empty, pose, Vec3(1, 1, 1));
    for (double v : img.pixels) CHECK(v == 1.0);
    Image gray = render(empty, pose, Vec3(0.3, 0.5, 0.7));
    for (size_t p = 0; p < gray.pixel_count(); ++p) {
        CHECK(gray.pixels[p * 3 + 0] == 0.3);
        CHECK(gray.pixels[p * 3 + 1] == 0.5);
        CHECK(gray.pixels[p * 3 + 2] == 0.7);
    }
}

TEST_CASE("single isotropic splat peaks at the image center") {
    GaussianCloud cloud;
    cloud.push(Vec3::Zero(), Quat::Identity(), Vec3(0.1, 0.1, 0.1), 0.9, Vec3(1, 0, 0));
    CameraPose pose = look_at_origin(70, 20, 2.7, 50, 33, 33);
    Image img = render(cloud, pose, Vec3(1, 1, 1));
    // Peak opacity shows as the lowest green channel (red splat on white).
    double best = 2.0;
    int bx = -1, by = -1;
    for (int y = 0; y < 33; ++y) {
        for (int x = 0; x < 33; ++x) {
            if (img.at(x, y, 1) < best) {
                best = img.at(x, y, 1);
                bx = x;
                by = y;
            }
        }
    }
    CHECK(bx == 16);
    CHECK(by == 16);
}

TEST_CASE("tiled renderer equals brute-force Eq-2 oracle on 3-splat scenes") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        GaussianCloud cloud = random_scene(1000 + seed, 3);
        CameraPose pose = look_at_origin(360.0 * double(seed) / 20.0, 20, 2.7, 50, 16, 16);
        Image fast = render(cloud, pose, Vec3(1, 1, 1));
        Image slow = brute_force_render(cloud, pose, Vec3(1, 1, 1));
        double worst = 0.0;
        for (size_t i = 0; i < fast.pixels.size(); ++i) {
            worst = std::max(worst, std::abs(fast.pixels[i] - slow.pixels[i]));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("render output is invariant to splat input order") {
    GaussianCloud cloud = random_scene(17, 12);
    CameraPose pose = look_at_origin(123, 20, 2.7, 50, 32, 32);
    Image base = render(cloud, pose, Vec3(1, 1, 1));

    GaussianCloud shuffled;
    std::vector<size_t> order = {5, 2, 9, 0, 11, 7, 1, 10, 3, 8, 4, 6};
    for (size_t i : order) {
        shuffled.push(cloud.means[i], cloud.rotations[i], cloud.scales[i], cloud.opacities[i],
                      cloud.colors[i]);
    }
    Image permuted = render(shuffled, pose, Vec3(1, 1, 1));
    CHECK(base.pixels == permuted.pixels);
}

TEST_CASE("zero upstream gradient gives zero render gradients") {
    GaussianCloud cloud = random_scene(23, 5);
    CameraPose pose = look_at_origin(10, 20, 2.7, 50, 16, 16);
    Image zero(16, 16, 0.0);
    RenderGradients g = render_backward(cloud, pose, Vec3(1, 1, 1), zero);
    for (size_t i = 0; i < cloud.size(); ++i) {
        CHECK(g.means[i].norm() == 0.0);
        CHECK(g.rotations[i].norm() == 0.0);
        CHECK(g.scales[i].norm() == 0.0);
        CHECK(g.opacities[i] == 0.0);
        CHECK(g.colors[i].norm() == 0.0);
    }
}

TEST_CASE("single-splat gradients match finite differences") {
    CameraPose pose = look_at_origin(25, 20, 2.7, 50, 16, 16);
    GaussianCloud cloud = separated_scene(31, 1, pose);
    Image upstream = random_upstream(16, 16, 77);
    CHECK(max_grad_error(cloud, pose, Vec3(1, 1, 1), upstream) < 1e-3);
}

TEST_CASE("10-splat random scene gradients match finite differences") {
    CameraPose pose = look_at_origin(333, 20, 2.7, 50, 16, 16);
    GaussianCloud cloud = separated_scene(41, 10, pose);
    Image upstream = random_upstream(16, 16, 78);
    CHECK(max_grad_error(cloud, pose, Vec3(1, 1, 1), upstream) < 1e-3);
}

TEST_CASE("render_backward rejects non-finite upstream") {
    GaussianCloud cloud = random_scene(5, 2);
    CameraPose pose = look_at_origin(0, 20, 2.7, 50, 16, 16);
    Image bad(16, 16, 0.0);
    bad.pixels[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(render_backward(cloud, pose, Vec3(1, 1, 1), bad), NumericError);
}

TEST_CASE("mask behind the camera renders to zero") {
    CameraPose pose = look_at_origin(0, 20, 2.7, 50, 24, 24);
    Mask3D mask;
    // Far beyond the camera position, opposite the view direction.
    mask.primitives.push_back(SpherePrim{pose.position() * 2.0, 0.3});
    MaskImage img = render_mask(mask, pose);
    CHECK(img.all_zero());
}

TEST_CASE("sphere mask projects to a centered disk of the analytic radius") {
    CameraPose pose = look_at_origin(140, 20, 2.7, 50, 64, 64);
    Mask3D mask;
    mask.primitives.push_back(SpherePrim{Vec3::Zero(), 0.5});
    MaskImage img = render_mask(mask, pose);

    for (const auto& v : img.values) CHECK((v == 0 || v == 1));

    // Grazing-angle silhouette radius in pixels.
    double f = 0.5 * 64 / std::tan(0.5 * 50.0 * M_PI / 180.0);
    double theta = std::asin(0.5 / 2.7);
    double expected_radius = f * std::tan(theta);

    int row = 32;
    int first = -1, last = -1;
    for (int x = 0; x < 64; ++x) {
        if (img.at(x, row)) {
            if (first < 0) first = x;
            last = x;
        }
    }
    REQUIRE(first >= 0);
    double measured_radius = 0.5 * (last - first + 1);
    CHECK(std::abs(measured_radius - expected_radius) <= 1.0);
}

TEST_CASE("volume mask covers the rendered silhouette") {
    // Splat tails must stay inside the dilation margin for the silhouette
    // property to be exact, so keep the scene's scales well below it.
    ObjectSample sample = generate_object(71, 96);
    GaussianCloud tight = sample.full;
    for (auto& s : tight.scales) s = s.cwiseMin(0.015);
    Mask3D mask = make_volume_mask(tight, 0.1);
    CameraPose pose = look_at_origin(200, 20, 2.7, 50, 48, 48);
    MaskImage m = render_mask(mask, pose);
    Image white = render(tight, pose, Vec3(1, 1, 1));
    Image black = render(tight, pose, Vec3(0, 0, 0));
    for (size_t p = 0; p < white.pixel_count(); ++p) {
        double t = white.pixels[p * 3] - black.pixels[p * 3]; // residual transmittance
        double alpha = 1.0 - t;
        if (alpha > 0.01) CHECK(m.values[p] == 1);
    }
}
