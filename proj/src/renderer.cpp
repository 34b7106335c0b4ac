// SPDX-License-Identifier: Apache-2.0
#include "splatfill/renderer.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "splatfill/errors.hpp"
#include "splatfill/parallel.hpp"

namespace splatfill {

namespace {

constexpr double kZNear = 0.01;
// Footprint cutoff: exp(-q/2) at q=56 is ~7e-13, so culling changes pixel
// values by far less than the 1e-6 agreement bound with unculled compositing.
constexpr double kQCut = 56.0;
constexpr double kWeightFloor = 1e-12;
constexpr int kTile = 16;

RenderStats g_stats;

} // namespace

RenderStats& render_stats() { return g_stats; }

Mat3 build_covariance(const Quat& q, const Vec3& s) {
    if (!(s.minCoeff() > 0.0)) throw ParamError("build_covariance: scale must be positive");
    Quat qn = q;
    if (std::abs(qn.norm() - 1.0) > 1e-6) {
        g_stats.normalized_quats++;
    }
    qn.normalize();
    Mat3 r = qn.toRotationMatrix();
    Mat3 d = s.cwiseProduct(s).asDiagonal();
    return r * d * r.transpose();
}

double gaussian_eval(const Vec3& x, const Mat3& sigma) {
    Eigen::LDLT<Mat3> solver(sigma);
    if (solver.info() != Eigen::Success || !(solver.vectorD().minCoeff() > 0.0)) {
        Eigen::SelfAdjointEigenSolver<Mat3> eig(sigma);
        double lo = eig.eigenvalues().minCoeff();
        double hi = eig.eigenvalues().maxCoeff();
        throw NumericError("gaussian_eval: sigma not SPD (eigen range [" + std::to_string(lo) +
                           ", " + std::to_string(hi) + "])");
    }
    double q = x.dot(solver.solve(x));
    return std::exp(-0.5 * q);
}

CompositeResult composite_ray(const std::vector<RayContribution>& contributions) {
    CompositeResult out{Vec3::Zero(), 1.0};
    for (const auto& c : contributions) {
        double w = c.opacity * c.footprint;
        out.color += c.color * (w * out.transmittance);
        out.transmittance *= 1.0 - w;
    }
    return out;
}

namespace {

struct ProjectedSplat {
    int index = -1;
    double depth = 0.0;
    Eigen::Vector2d center = Eigen::Vector2d::Zero(); // pixel coords
    Eigen::Matrix2d cov_inv = Eigen::Matrix2d::Zero();
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    int x0 = 0, x1 = 0, y0 = 0, y1 = 0; // inclusive pixel bbox
    // retained for the backward pass
    Vec3 cam = Vec3::Zero();
    Mat3 sigma3d = Mat3::Zero();
    Eigen::Matrix2d cov2d = Eigen::Matrix2d::Zero();
};

struct ProjectionSetup {
    std::vector<ProjectedSplat> splats; // depth-sorted, culled
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<int>> tile_lists; // indices into `splats`, sorted
};

Eigen::Matrix<double, 2, 3> perspective_jacobian(const Vec3& cam, double f) {
    Eigen::Matrix<double, 2, 3> j;
    double z = cam.z();
    j << f / z, 0.0, -f * cam.x() / (z * z), 0.0, f / z, -f * cam.y() / (z * z);
    return j;
}

ProjectionSetup project_cloud(const GaussianCloud& cloud, const CameraPose& pose) {
    ProjectionSetup setup;
    double f = pose.focal();
    const Mat3& w = pose.rotation;

    setup.splats.reserve(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) {
        Vec3 cam = w * cloud.means[i] + pose.translation;
        if (!(cam.z() > kZNear)) {
            g_stats.skipped_splats++;
            continue;
        }
        ProjectedSplat ps;
        ps.index = static_cast<int>(i);
        ps.cam = cam;
        ps.depth = cam.z();
        ps.sigma3d = build_covariance(cloud.rotations[i], cloud.scales[i]);
        Eigen::Matrix<double, 2, 3> a = perspective_jacobian(cam, f) * w;
        ps.cov2d = a * ps.sigma3d * a.transpose();
        double det = ps.cov2d.determinant();
        if (!(det > 1e-300) || !std::isfinite(det)) {
            g_stats.skipped_splats++;
            continue;
        }
        ps.cov_inv << ps.cov2d(1, 1) / det, -ps.cov2d(0, 1) / det, -ps.cov2d(1, 0) / det,
            ps.cov2d(0, 0) / det;
        ps.center.x() = 0.5 * pose.width + f * cam.x() / cam.z();
        ps.center.y() = 0.5 * pose.height + f * cam.y() / cam.z();
        ps.opacity = cloud.opacities[i];
        ps.color = cloud.colors[i];

        // Tight axis-aligned bounds of the q <= kQCut ellipse.
        double rx = std::sqrt(std::max(0.0, kQCut * ps.cov2d(0, 0)));
        double ry = std::sqrt(std::max(0.0, kQCut * ps.cov2d(1, 1)));
        ps.x0 = std::max(0, static_cast<int>(std::floor(ps.center.x() - rx - 0.5)));
        ps.x1 = std::min(pose.width - 1, static_cast<int>(std::ceil(ps.center.x() + rx - 0.5)));
        ps.y0 = std::max(0, static_cast<int>(std::floor(ps.center.y() - ry - 0.5)));
        ps.y1 = std::min(pose.height - 1, static_cast<int>(std::ceil(ps.center.y() + ry - 0.5)));
        if (ps.x0 > ps.x1 || ps.y0 > ps.y1) continue;
        setup.splats.push_back(ps);
    }

    std::sort(setup.splats.begin(), setup.splats.end(),
              [](const ProjectedSplat& a, const ProjectedSplat& b) {
                  if (a.depth != b.depth) return a.depth < b.depth;
                  return a.index < b.index;
              });

    setup.tiles_x = (pose.width + kTile - 1) / kTile;
    setup.tiles_y = (pose.height + kTile - 1) / kTile;
    setup.tile_lists.assign(size_t(setup.tiles_x) * setup.tiles_y, {});
    for (size_t s = 0; s < setup.splats.size(); ++s) {
        const auto& ps = setup.splats[s];
        int tx0 = ps.x0 / kTile, tx1 = ps.x1 / kTile;
        int ty0 = ps.y0 / kTile, ty1 = ps.y1 / kTile;
        for (int ty = ty0; ty <= ty1; ++ty) {
            for (int tx = tx0; tx <= tx1; ++tx) {
                setup.tile_lists[size_t(ty) * setup.tiles_x + tx].push_back(static_cast<int>(s));
            }
        }
    }
    return setup;
}

} // namespace

Image render(const GaussianCloud& cloud, const CameraPose& pose, const Vec3& background) {
    Image img(pose.width, pose.height);
    ProjectionSetup setup = project_cloud(cloud, pose);

    parallel_for(setup.tile_lists.size(), [&](size_t tile) {
        int tx = static_cast<int>(tile) % setup.tiles_x;
        int ty = static_cast<int>(tile) / setup.tiles_x;
        const auto& list = setup.tile_lists[tile];
        int px1 = std::min(pose.width, (tx + 1) * kTile);
        int py1 = std::min(pose.height, (ty + 1) * kTile);
        for (int py = ty * kTile; py < py1; ++py) {
            for (int px = tx * kTile; px < px1; ++px) {
                double cx = px + 0.5, cy = py + 0.5;
                Vec3 color = Vec3::Zero();
                double t = 1.0;
                for (int s : list) {
                    const ProjectedSplat& ps = setup.splats[s];
                    if (px < ps.x0 || px > ps.x1 || py < ps.y0 || py > ps.y1) continue;
                    Eigen::Vector2d d(cx - ps.center.x(), cy - ps.center.y());
                    double q = d.dot(ps.cov_inv * d);
                    if (q > kQCut) continue;
                    double w = ps.opacity * std::exp(-0.5 * q);
                    if (w < kWeightFloor) continue;
                    color += ps.color * (w * t);
                    t *= 1.0 - w;
                }
                color += t * background;
                for (int c = 0; c < 3; ++c) img.at(px, py, c) = std::clamp(color[c], 0.0, 1.0);
            }
        }
    });
    return img;
}

void RenderGradients::resize(size_t n) {
    means.assign(n, Vec3::Zero());
    rotations.assign(n, Eigen::Vector4d::Zero());
    scales.assign(n, Vec3::Zero());
    opacities.assign(n, 0.0);
    colors.assign(n, Vec3::Zero());
}

void RenderGradients::check_finite() const {
    for (size_t i = 0; i < means.size(); ++i) {
        if (!means[i].allFinite() || !rotations[i].allFinite() || !scales[i].allFinite() ||
            !std::isfinite(opacities[i]) || !colors[i].allFinite()) {
            throw NumericError("render_backward: non-finite gradient at splat " +
                               std::to_string(i));
        }
    }
}

namespace {

// dL/dR summed against the quaternion-to-rotation partials, for unit q.
Eigen::Vector4d rotation_grad_to_quat(const Mat3& gr, const Quat& q) {
    double w = q.w(), x = q.x(), y = q.y(), z = q.z();
    Eigen::Vector4d g;
    g[0] = 2.0 * (gr(0, 1) * -z + gr(0, 2) * y + gr(1, 0) * z + gr(1, 2) * -x + gr(2, 0) * -y +
                  gr(2, 1) * x);
    g[1] = 2.0 * (gr(0, 1) * y + gr(0, 2) * z + gr(1, 0) * y + gr(1, 1) * -2.0 * x +
                  gr(1, 2) * -w + gr(2, 0) * z + gr(2, 1) * w + gr(2, 2) * -2.0 * x);
    g[2] = 2.0 * (gr(0, 0) * -2.0 * y + gr(0, 1) * x + gr(0, 2) * w + gr(1, 0) * x +
                  gr(1, 2) * z + gr(2, 0) * -w + gr(2, 1) * z + gr(2, 2) * -2.0 * y);
    g[3] = 2.0 * (gr(0, 0) * -2.0 * z + gr(0, 1) * -w + gr(0, 2) * x + gr(1, 0) * w +
                  gr(1, 1) * -2.0 * z + gr(1, 2) * y + gr(2, 0) * x + gr(2, 1) * y);
    return g;
}

struct SplatGrad {
    Vec3 color = Vec3::Zero();
    double opacity = 0.0;
    Eigen::Vector2d center = Eigen::Vector2d::Zero();
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero(); // dL/dSigma2D
};

struct PixelHit {
    int splat; // index into setup.splats
    double weight;
    double footprint;
    double transmittance; // before this contribution
    Eigen::Vector2d offset;
};

} // namespace

RenderGradients render_backward(const GaussianCloud& cloud, const CameraPose& pose,
                                const Vec3& background, const Image& upstream) {
    if (upstream.width != pose.width || upstream.height != pose.height) {
        throw ParamError("render_backward: upstream size mismatch");
    }
    for (double v : upstream.pixels) {
        if (!std::isfinite(v)) throw NumericError("render_backward: non-finite upstream");
    }

    ProjectionSetup setup = project_cloud(cloud, pose);
    RenderGradients grads;
    grads.resize(cloud.size());
    if (setup.splats.empty()) return grads;

    size_t n_tiles = setup.tile_lists.size();
    std::vector<std::vector<SplatGrad>> tile_grads(n_tiles);

    parallel_for(n_tiles, [&](size_t tile) {
        const auto& list = setup.tile_lists[tile];
        auto& local = tile_grads[tile];
        local.assign(list.size(), SplatGrad{});
        if (list.empty()) return;
        // Maps splat index -> slot in `local`.
        std::vector<int> slot_of(setup.splats.size(), -1);
        for (size_t k = 0; k < list.size(); ++k) slot_of[list[k]] = static_cast<int>(k);

        int tx = static_cast<int>(tile) % setup.tiles_x;
        int ty = static_cast<int>(tile) / setup.tiles_x;
        int px1 = std::min(pose.width, (tx + 1) * kTile);
        int py1 = std::min(pose.height, (ty + 1) * kTile);
        std::vector<PixelHit> hits;
        for (int py = ty * kTile; py < py1; ++py) {
            for (int px = tx * kTile; px < px1; ++px) {
                double cx = px + 0.5, cy = py + 0.5;
                hits.clear();
                double t = 1.0;
                for (int s : list) {
                    const ProjectedSplat& ps = setup.splats[s];
                    if (px < ps.x0 || px > ps.x1 || py < ps.y0 || py > ps.y1) continue;
                    Eigen::Vector2d d(cx - ps.center.x(), cy - ps.center.y());
                    double q = d.dot(ps.cov_inv * d);
                    if (q > kQCut) continue;
                    double g = std::exp(-0.5 * q);
                    double w = ps.opacity * g;
                    if (w < kWeightFloor) continue;
                    hits.push_back({s, w, g, t, d});
                    t *= 1.0 - w;
                }
                if (hits.empty()) continue;
                Vec3 up(upstream.at(px, py, 0), upstream.at(px, py, 1), upstream.at(px, py, 2));

                // Suffix S_i = sum_{k>i} c_k w_k T_k + T_final * background,
                // accumulated back-to-front.
                Vec3 suffix = t * background;
                for (size_t h = hits.size(); h-- > 0;) {
                    const PixelHit& hit = hits[h];
                    const ProjectedSplat& ps = setup.splats[hit.splat];
                    SplatGrad& sg = local[slot_of[hit.splat]];

                    sg.color += up * (hit.weight * hit.transmittance);
                    // dPixel/dw, channel-wise: c_i*T_i - S_i/(1-w_i)
                    Vec3 dpix_dw = ps.color * hit.transmittance - suffix / (1.0 - hit.weight);
                    double gl_w = up.dot(dpix_dw);
                    sg.opacity += gl_w * hit.footprint;
                    double gl_g = gl_w * ps.opacity;
                    double gl_q = gl_g * (-0.5) * hit.footprint;

                    Eigen::Vector2d md = ps.cov_inv * hit.offset;
                    // q = d^T M d with d = pixel - center:
                    // dq/dcenter = -2 M d, dq/dSigma = -(M d)(M d)^T.
                    sg.center += gl_q * (-2.0) * md;
                    sg.cov += gl_q * (-(md * md.transpose()));

                    suffix += ps.color * (hit.weight * hit.transmittance);
                }
            }
        }
    });

    // Deterministic reduction: tiles in order, then per-splat chain rule.
    std::vector<SplatGrad> merged(setup.splats.size());
    for (size_t tile = 0; tile < n_tiles; ++tile) {
        const auto& list = setup.tile_lists[tile];
        for (size_t k = 0; k < list.size(); ++k) {
            SplatGrad& dst = merged[list[k]];
            const SplatGrad& src = tile_grads[tile][k];
            dst.color += src.color;
            dst.opacity += src.opacity;
            dst.center += src.center;
            dst.cov += src.cov;
        }
    }

    double f = pose.focal();
    const Mat3& w = pose.rotation;
    for (size_t s = 0; s < setup.splats.size(); ++s) {
        const ProjectedSplat& ps = setup.splats[s];
        const SplatGrad& sg = merged[s];
        size_t i = static_cast<size_t>(ps.index);

        grads.colors[i] = sg.color;
        grads.opacities[i] = sg.opacity;

        Eigen::Matrix<double, 2, 3> jac = perspective_jacobian(ps.cam, f);
        Eigen::Matrix<double, 2, 3> a = jac * w;

        // Sigma2D = A Sigma3D A^T
        Eigen::Matrix2d u = 0.5 * (sg.cov + sg.cov.transpose());
        Eigen::Matrix<double, 2, 3> ga = 2.0 * u * a * ps.sigma3d;
        Mat3 gsigma3d = a.transpose() * u * a;

        // Projection center and Jacobian entries both depend on cam.
        Eigen::Matrix<double, 2, 3> gj = ga * w.transpose();
        Vec3 gcam = jac.transpose() * sg.center;
        double z = ps.cam.z(), z2 = z * z, z3 = z2 * z;
        gcam.x() += gj(0, 2) * (-f / z2);
        gcam.y() += gj(1, 2) * (-f / z2);
        gcam.z() += gj(0, 0) * (-f / z2) + gj(1, 1) * (-f / z2) +
                    gj(0, 2) * (2.0 * f * ps.cam.x() / z3) + gj(1, 2) * (2.0 * f * ps.cam.y() / z3);
        grads.means[i] = w.transpose() * gcam;

        // Sigma3D = R diag(s^2) R^T
        Quat qn = cloud.rotations[i].normalized();
        Mat3 r = qn.toRotationMatrix();
        Mat3 d = cloud.scales[i].cwiseProduct(cloud.scales[i]).asDiagonal();
        Mat3 rtvr = r.transpose() * gsigma3d * r;
        for (int k = 0; k < 3; ++k) grads.scales[i][k] = 2.0 * cloud.scales[i][k] * rtvr(k, k);

        Mat3 gr = 2.0 * gsigma3d * r * d;
        Eigen::Vector4d gq_unit = rotation_grad_to_quat(gr, qn);
        // Chain through normalization q_hat = q / |q|.
        Eigen::Vector4d qv(cloud.rotations[i].w(), cloud.rotations[i].x(),
                           cloud.rotations[i].y(), cloud.rotations[i].z());
        double norm = qv.norm();
        Eigen::Vector4d qhat(qn.w(), qn.x(), qn.y(), qn.z());
        grads.rotations[i] = (gq_unit - qhat * qhat.dot(gq_unit)) / norm;
    }

    grads.check_finite();
    return grads;
}

namespace {

bool ray_hits_sphere(const Ray& ray, const SpherePrim& s) {
    Vec3 oc = ray.origin - s.center;
    double b = oc.dot(ray.dir);
    double c = oc.squaredNorm() - s.radius * s.radius;
    double disc = b * b - c;
    if (disc < 0.0) return false;
    double t_exit = -b + std::sqrt(disc);
    return t_exit > 0.0;
}

bool ray_hits_box(const Ray& ray, const BoxPrim& b) {
    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
        double o = ray.origin[k], d = ray.dir[k];
        if (std::abs(d) < 1e-15) {
            if (o <= b.lo[k] || o >= b.hi[k]) return false;
            continue;
        }
        double t0 = (b.lo[k] - o) / d;
        double t1 = (b.hi[k] - o) / d;
        if (t0 > t1) std::swap(t0, t1);
        tmin = std::max(tmin, t0);
        tmax = std::min(tmax, t1);
    }
    return tmax >= tmin && tmax > 0.0;
}

} // namespace

MaskImage render_mask(const Mask3D& mask, const CameraPose& pose) {
    MaskImage out(pose.width, pose.height, 0);
    parallel_for(static_cast<size_t>(pose.height), [&](size_t py) {
        for (int px = 0; px < pose.width; ++px) {
            Ray ray = pixel_ray(pose, px, static_cast<int>(py));
            bool hit = false;
            for (const auto& prim : mask.primitives) {
                if (const auto* s = std::get_if<SpherePrim>(&prim)) {
                    hit = ray_hits_sphere(ray, *s);
                } else {
                    hit = ray_hits_box(ray, std::get<BoxPrim>(prim));
                }
                if (hit) break;
            }
            out.at(px, static_cast<int>(py)) = hit ? 1 : 0;
        }
    });
    return out;
}

} // namespace splatfill
