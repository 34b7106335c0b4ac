// SPDX-License-Identifier: Apache-2.0
#include "splatfill/camera.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "splatfill/errors.hpp"

namespace splatfill {

using json = nlohmann::ordered_json;

namespace {
constexpr double kPi = 3.14159265358979323846;
double deg_to_rad(double d) { return d * kPi / 180.0; }
} // namespace

double CameraPose::focal() const {
    return 0.5 * height / std::tan(0.5 * deg_to_rad(fov_y_deg));
}

Vec3 CameraPose::position() const { return -(rotation.transpose() * translation); }

void CameraPose::validate() const {
    if (!(fov_y_deg > 0.0 && fov_y_deg < 180.0)) throw ParamError("fov_y outside (0,180)");
    if (width < 8 || height < 8) throw ParamError("image size below 8 px");
    Mat3 should_be_identity = rotation.transpose() * rotation - Mat3::Identity();
    if (should_be_identity.cwiseAbs().maxCoeff() > 1e-9) {
        throw ParamError("camera rotation not orthonormal");
    }
    if (std::abs(rotation.determinant() - 1.0) > 1e-9) {
        throw ParamError("camera rotation not proper");
    }
}

CameraPose look_at_origin(double azimuth_deg, double elevation_deg, double radius,
                          double fov_y_deg, int width, int height) {
    double az = deg_to_rad(azimuth_deg);
    double el = deg_to_rad(elevation_deg);
    Vec3 pos(radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
             radius * std::sin(el));

    Vec3 back = pos.normalized(); // camera looks at the origin
    Vec3 world_up(0.0, 0.0, 1.0);
    Vec3 right = world_up.cross(back);
    if (right.norm() < 1e-9) right = Vec3(1.0, 0.0, 0.0).cross(back);
    right.normalize();
    Vec3 up = back.cross(right);

    CameraPose pose;
    pose.rotation.row(0) = right;
    pose.rotation.row(1) = -up;   // image y grows downward
    pose.rotation.row(2) = -back; // z forward
    pose.translation = -(pose.rotation * pos);
    pose.fov_y_deg = fov_y_deg;
    pose.width = width;
    pose.height = height;
    return pose;
}

std::vector<CameraPose> make_rig(const RigSpec& spec) {
    if (spec.n_views < 1) throw ParamError("rig needs at least one view");
    if (!(spec.radius > 0.0)) throw ParamError("rig radius must be positive");
    std::vector<CameraPose> poses;
    poses.reserve(spec.n_views);
    for (int k = 0; k < spec.n_views; ++k) {
        // Wrap into [0,360) so equal grid angles yield bit-identical poses.
        double azimuth = std::fmod(spec.azimuth_offset_deg + 360.0 * k / spec.n_views, 360.0);
        poses.push_back(look_at_origin(azimuth, spec.elevation_deg, spec.radius, spec.fov_y_deg,
                                       spec.width, spec.height));
    }
    return poses;
}

Projection project(const Vec3& p_world, const CameraPose& pose) {
    Vec3 cam = pose.rotation * p_world + pose.translation;
    Projection out;
    out.depth = cam.z();
    double f = pose.focal();
    double z = cam.z() != 0.0 ? cam.z() : 1e-12;
    out.u = 0.5 * pose.width + f * cam.x() / z;
    out.v = 0.5 * pose.height + f * cam.y() / z;
    return out;
}

Ray pixel_ray(const CameraPose& pose, int px, int py) {
    double f = pose.focal();
    Vec3 dir_cam((px + 0.5 - 0.5 * pose.width) / f, (py + 0.5 - 0.5 * pose.height) / f, 1.0);
    Ray ray;
    ray.origin = pose.position();
    ray.dir = (pose.rotation.transpose() * dir_cam).normalized();
    return ray;
}

namespace {

// Manifest matrices follow the NeRF-synthetic axes (x right, y up, z back).
Eigen::Matrix4d pose_to_c2w_gl(const CameraPose& pose) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    Vec3 right = pose.rotation.row(0);
    Vec3 down = pose.rotation.row(1);
    Vec3 forward = pose.rotation.row(2);
    m.block<3, 1>(0, 0) = right;
    m.block<3, 1>(0, 1) = -down;
    m.block<3, 1>(0, 2) = -forward;
    m.block<3, 1>(0, 3) = pose.position();
    return m;
}

CameraPose pose_from_c2w_gl(const Eigen::Matrix4d& m, double fov_y_deg, int width, int height) {
    CameraPose pose;
    Vec3 right = m.block<3, 1>(0, 0);
    Vec3 up = m.block<3, 1>(0, 1);
    Vec3 back = m.block<3, 1>(0, 2);
    Vec3 pos = m.block<3, 1>(0, 3);
    pose.rotation.row(0) = right;
    pose.rotation.row(1) = -up;
    pose.rotation.row(2) = -back;
    pose.translation = -(pose.rotation * pos);
    pose.fov_y_deg = fov_y_deg;
    pose.width = width;
    pose.height = height;
    return pose;
}

} // namespace

std::string manifest_to_json(const CameraManifest& manifest) {
    json j;
    j["camera_angle_y"] = manifest.camera_angle_y_rad;
    j["width"] = manifest.width;
    j["height"] = manifest.height;
    j["frames"] = json::array();
    for (const auto& frame : manifest.frames) {
        json f;
        f["file_path"] = frame.file_path;
        f["mask_path"] = frame.mask_path;
        Eigen::Matrix4d m = pose_to_c2w_gl(frame.pose);
        json rows = json::array();
        for (int r = 0; r < 4; ++r) {
            rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
        }
        f["transform_matrix"] = rows;
        j["frames"].push_back(f);
    }
    return j.dump(2);
}

CameraManifest manifest_from_json(const std::string& text) {
    json j = json::parse(text);
    CameraManifest manifest;
    manifest.camera_angle_y_rad = j.at("camera_angle_y").get<double>();
    manifest.width = j.at("width").get<int>();
    manifest.height = j.at("height").get<int>();
    double fov_y_deg = manifest.camera_angle_y_rad * 180.0 / kPi;
    for (const auto& f : j.at("frames")) {
        CameraManifestFrame frame;
        frame.file_path = f.at("file_path").get<std::string>();
        frame.mask_path = f.value("mask_path", std::string());
        Eigen::Matrix4d m;
        const auto& rows = f.at("transform_matrix");
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) m(r, c) = rows[r][c].get<double>();
        }
        frame.pose = pose_from_c2w_gl(m, fov_y_deg, manifest.width, manifest.height);
        manifest.frames.push_back(frame);
    }
    return manifest;
}

} // namespace splatfill
