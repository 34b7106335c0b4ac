// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "splatfill/geometry.hpp"

namespace splatfill {

/// Pinhole camera: x_cam = rotation * x_world + translation, z forward,
/// y down, x right. Square pixels, centered principal point.
struct CameraPose {
    Mat3 rotation = Mat3::Identity(); // world -> camera
    Vec3 translation = Vec3::Zero();  // camera frame
    double fov_y_deg = 50.0;
    int width = 64;
    int height = 64;

    double focal() const;         // pixels, from fov_y and height
    Vec3 position() const;        // camera center in world coordinates
    void validate() const;
};

struct RigSpec {
    int n_views = 16;
    double elevation_deg = 20.0;
    double radius = 2.7;
    double fov_y_deg = 50.0;
    int width = 64;
    int height = 64;
    double azimuth_offset_deg = 0.0;
};

// Orbit at fixed elevation, azimuth_k = offset + 360*k/n, all looking at the
// origin with world +z up. Azimuth 0 lies along +x.
std::vector<CameraPose> make_rig(const RigSpec& spec);

// Camera placed at the given azimuth/elevation/radius looking at the origin.
CameraPose look_at_origin(double azimuth_deg, double elevation_deg, double radius,
                          double fov_y_deg, int width, int height);

struct Projection {
    double u = 0.0;
    double v = 0.0;
    double depth = 0.0; // camera-frame z; <= 0 means behind the camera
    bool in_front() const { return depth > 0.0; }
};

Projection project(const Vec3& p_world, const CameraPose& pose);

// World-space ray through the center of pixel (px, py).
struct Ray {
    Vec3 origin;
    Vec3 dir; // unit length
};
Ray pixel_ray(const CameraPose& pose, int px, int py);

// Camera manifests in the NeRF-synthetic style: camera_angle_y in radians,
// frames[] with file_path / mask_path / row-major camera-to-world
// transform_matrix (OpenGL axes: x right, y up, z backward).
struct CameraManifestFrame {
    std::string file_path;
    std::string mask_path;
    CameraPose pose;
};

struct CameraManifest {
    double camera_angle_y_rad = 0.0;
    int width = 0;
    int height = 0;
    std::vector<CameraManifestFrame> frames;
};

std::string manifest_to_json(const CameraManifest& manifest);
CameraManifest manifest_from_json(const std::string& text);

} // namespace splatfill
