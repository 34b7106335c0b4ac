// SPDX-License-Identifier: Apache-2.0
#include "splatfill/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "splatfill/errors.hpp"
#include "splatfill/rng.hpp"

namespace splatfill {

using json = nlohmann::ordered_json;

void GaussianCloud::push(const Vec3& mean, const Quat& rot, const Vec3& scale, double opacity,
                         const Vec3& color) {
    means.push_back(mean);
    rotations.push_back(rot);
    scales.push_back(scale);
    opacities.push_back(opacity);
    colors.push_back(color);
}

void GaussianCloud::validate() const {
    size_t n = means.size();
    if (rotations.size() != n || scales.size() != n || opacities.size() != n ||
        colors.size() != n) {
        throw ParamError("cloud field lengths differ");
    }
    for (size_t i = 0; i < n; ++i) {
        if (std::abs(rotations[i].norm() - 1.0) > 1e-6) throw ParamError("non-unit quaternion");
        if (!(scales[i].minCoeff() > 0.0)) throw ParamError("non-positive scale");
        if (!(opacities[i] > 0.0 && opacities[i] < 1.0)) throw ParamError("opacity outside (0,1)");
        if (colors[i].minCoeff() < 0.0 || colors[i].maxCoeff() > 1.0)
            throw ParamError("color outside [0,1]");
    }
}

const char* mask_variant_name(MaskVariant v) {
    switch (v) {
    case MaskVariant::kConvexHull: return "convexhull";
    case MaskVariant::kSurface: return "surface";
    case MaskVariant::kVolume: return "volume";
    }
    return "unknown";
}

MaskVariant mask_variant_from_name(const std::string& name) {
    if (name == "convexhull") return MaskVariant::kConvexHull;
    if (name == "surface") return MaskVariant::kSurface;
    if (name == "volume") return MaskVariant::kVolume;
    throw ParamError("unknown mask variant: " + name);
}

namespace {

bool point_in_primitive(const Vec3& p, const MaskPrimitive& prim) {
    if (const auto* s = std::get_if<SpherePrim>(&prim)) {
        return (p - s->center).squaredNorm() < s->radius * s->radius;
    }
    const auto& b = std::get<BoxPrim>(prim);
    return p.x() > b.lo.x() && p.x() < b.hi.x() && p.y() > b.lo.y() && p.y() < b.hi.y() &&
           p.z() > b.lo.z() && p.z() < b.hi.z();
}

double primitive_signed_distance(const Vec3& p, const MaskPrimitive& prim) {
    if (const auto* s = std::get_if<SpherePrim>(&prim)) {
        return (p - s->center).norm() - s->radius;
    }
    const auto& b = std::get<BoxPrim>(prim);
    Vec3 q = (b.lo - p).cwiseMax(p - b.hi);
    double outside = q.cwiseMax(0.0).norm();
    double inside = std::min(q.maxCoeff(), 0.0);
    return outside + inside;
}

} // namespace

bool point_in_mask(const Vec3& p, const Mask3D& mask) {
    for (const auto& prim : mask.primitives) {
        if (point_in_primitive(p, prim)) return true;
    }
    return false;
}

double mask_signed_distance(const Vec3& p, const Mask3D& mask) {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& prim : mask.primitives) {
        d = std::min(d, primitive_signed_distance(p, prim));
    }
    return d;
}

GaussianCloud normalize_cloud(const GaussianCloud& cloud) {
    if (cloud.empty()) throw ParamError("normalize_cloud: empty cloud");
    Vec3 lo = cloud.means[0], hi = cloud.means[0];
    for (const auto& m : cloud.means) {
        lo = lo.cwiseMin(m);
        hi = hi.cwiseMax(m);
    }
    Vec3 center = 0.5 * (lo + hi);
    double longest = (hi - lo).maxCoeff();
    double factor = longest > 0.0 ? 2.0 / longest : 1.0;

    GaussianCloud out = cloud;
    for (size_t i = 0; i < out.size(); ++i) {
        out.means[i] = (cloud.means[i] - center) * factor;
        out.scales[i] = cloud.scales[i] * factor;
    }
    return out;
}

GaussianCloud carve_object(const ObjectSample& sample, double min_keep_fraction) {
    const auto& cloud = sample.full;
    size_t n = cloud.size();
    std::vector<char> keep(n);
    size_t kept = 0;
    for (size_t i = 0; i < n; ++i) {
        keep[i] = point_in_mask(cloud.means[i], sample.mask) ? 0 : 1;
        kept += keep[i];
    }

    size_t floor_count = static_cast<size_t>(std::ceil(min_keep_fraction * double(n)));
    if (kept < floor_count) {
        // Re-admit the shallowest removed splats until the floor is met.
        std::vector<size_t> removed;
        for (size_t i = 0; i < n; ++i) {
            if (!keep[i]) removed.push_back(i);
        }
        std::sort(removed.begin(), removed.end(), [&](size_t a, size_t b) {
            double da = mask_signed_distance(cloud.means[a], sample.mask);
            double db = mask_signed_distance(cloud.means[b], sample.mask);
            if (da != db) return da > db;
            return a < b;
        });
        for (size_t i = 0; i < removed.size() && kept < floor_count; ++i) {
            keep[removed[i]] = 1;
            ++kept;
        }
    }
    if (kept == 0) throw DataError("carve_object: mask swallowed the entire cloud");

    GaussianCloud out;
    for (size_t i = 0; i < n; ++i) {
        if (keep[i]) {
            out.push(cloud.means[i], cloud.rotations[i], cloud.scales[i], cloud.opacities[i],
                     cloud.colors[i]);
        }
    }
    return out;
}

namespace {

Quat random_unit_quat(Rng& rng) {
    Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    while (q.norm() < 1e-9) q = Quat(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q;
}

Vec3 jitter_color(Rng& rng, const Vec3& base, double amount = 0.06) {
    Vec3 c = base + Vec3(rng.uniform(-amount, amount), rng.uniform(-amount, amount),
                         rng.uniform(-amount, amount));
    return c.cwiseMax(0.05).cwiseMin(0.95);
}

// Split `total` into `parts` counts, each at least 1.
std::vector<int> allot(int total, int parts) {
    std::vector<int> counts(parts, total / parts);
    for (int i = 0; i < total % parts; ++i) counts[i] += 1;
    return counts;
}

void add_splat(GaussianCloud& cloud, Rng& rng, const Vec3& pos, const Vec3& color,
               double base_scale) {
    Vec3 scale(base_scale * rng.uniform(0.6, 1.4), base_scale * rng.uniform(0.6, 1.4),
               base_scale * rng.uniform(0.6, 1.4));
    cloud.push(pos, random_unit_quat(rng), scale, rng.uniform(0.65, 0.95),
               jitter_color(rng, color));
}

void build_stacked_boxes(GaussianCloud& cloud, Rng& rng, int complexity) {
    int boxes = 2 + static_cast<int>(rng.uniform_index(3));
    auto counts = allot(complexity, boxes);
    double z_cursor = -0.6;
    for (int b = 0; b < boxes; ++b) {
        double hx = rng.uniform(0.3, 0.6), hy = rng.uniform(0.3, 0.6), hz = rng.uniform(0.12, 0.28);
        Vec3 center(rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), z_cursor + hz);
        z_cursor += 2.0 * hz + 0.02;
        Vec3 base_color(rng.uniform(0.7, 0.92), rng.uniform(0.25, 0.55), rng.uniform(0.08, 0.2));
        double spacing = std::cbrt(8.0 * hx * hy * hz / std::max(1, counts[b]));
        for (int i = 0; i < counts[b]; ++i) {
            Vec3 p = center + Vec3(rng.uniform(-hx, hx), rng.uniform(-hy, hy),
                                   rng.uniform(-hz, hz));
            add_splat(cloud, rng, p, base_color, 0.55 * spacing);
        }
    }
}

void build_ellipsoid_clusters(GaussianCloud& cloud, Rng& rng, int complexity) {
    int blobs = 3 + static_cast<int>(rng.uniform_index(4));
    auto counts = allot(complexity, blobs);
    for (int b = 0; b < blobs; ++b) {
        Vec3 center(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
        Vec3 radii(rng.uniform(0.18, 0.42), rng.uniform(0.18, 0.42), rng.uniform(0.18, 0.42));
        Vec3 base_color(rng.uniform(0.08, 0.25), rng.uniform(0.35, 0.7), rng.uniform(0.6, 0.92));
        double spacing = std::cbrt(radii.prod() * 4.19 / std::max(1, counts[b]));
        for (int i = 0; i < counts[b]; ++i) {
            // Uniform inside the unit ball, then stretched by the radii.
            Vec3 dir(rng.normal(), rng.normal(), rng.normal());
            while (dir.norm() < 1e-9) dir = Vec3(rng.normal(), rng.normal(), rng.normal());
            dir.normalize();
            double r = std::cbrt(rng.uniform());
            Vec3 p = center + (dir * r).cwiseProduct(radii);
            add_splat(cloud, rng, p, base_color, 0.6 * spacing);
        }
    }
}

void build_rings(GaussianCloud& cloud, Rng& rng, int complexity) {
    int rings = 1 + static_cast<int>(rng.uniform_index(3));
    auto counts = allot(complexity, rings);
    for (int b = 0; b < rings; ++b) {
        double major = rng.uniform(0.45, 0.75);
        double minor = rng.uniform(0.07, 0.16);
        double z0 = rng.uniform(-0.45, 0.45);
        Vec3 base_color(rng.uniform(0.6, 0.85), rng.uniform(0.1, 0.3), rng.uniform(0.55, 0.85));
        double spacing = 6.283 * major / std::max(1, counts[b]);
        for (int i = 0; i < counts[b]; ++i) {
            double a = 6.283185307179586 * (i + rng.uniform(-0.3, 0.3)) / counts[b];
            double tr = minor * std::sqrt(rng.uniform());
            double ta = rng.uniform(0.0, 6.283185307179586);
            double rr = major + tr * std::cos(ta);
            Vec3 p(rr * std::cos(a), rr * std::sin(a), z0 + tr * std::sin(ta));
            add_splat(cloud, rng, p, base_color, std::max(0.5 * spacing, 0.6 * minor));
        }
    }
}

void build_tower(GaussianCloud& cloud, Rng& rng, int complexity) {
    int levels = 4 + static_cast<int>(rng.uniform_index(4));
    auto counts = allot(complexity, levels);
    double base_r = rng.uniform(0.45, 0.6);
    double top_r = rng.uniform(0.1, 0.2);
    double height = rng.uniform(1.0, 1.4);
    Vec3 gray(0.55, 0.55, 0.6), gold(0.85, 0.7, 0.2);
    for (int b = 0; b < levels; ++b) {
        double t = levels > 1 ? double(b) / (levels - 1) : 0.0;
        double radius = base_r + (top_r - base_r) * t;
        double z0 = -height / 2 + height * t;
        Vec3 base_color = (b % 2 == 0) ? gray : gold;
        double spacing = 3.14 * radius * radius / std::max(1, counts[b]);
        for (int i = 0; i < counts[b]; ++i) {
            double rr = radius * std::sqrt(rng.uniform());
            double a = rng.uniform(0.0, 6.283185307179586);
            Vec3 p(rr * std::cos(a), rr * std::sin(a), z0 + rng.uniform(-0.05, 0.05));
            add_splat(cloud, rng, p, base_color, std::max(0.06, 1.2 * std::sqrt(spacing)));
        }
    }
}

} // namespace

ObjectSample generate_object(uint64_t seed, int complexity) {
    if (complexity < 8 || complexity > 512) {
        throw ParamError("generate_object: complexity must be in [8, 512]");
    }
    Rng rng(Rng::mix(seed, 0xa11c0de));
    int family = static_cast<int>(rng.uniform_index(kShapeFamilyCount));

    GaussianCloud cloud;
    switch (family) {
    case 0: build_stacked_boxes(cloud, rng, complexity); break;
    case 1: build_ellipsoid_clusters(cloud, rng, complexity); break;
    case 2: build_rings(cloud, rng, complexity); break;
    default: build_tower(cloud, rng, complexity); break;
    }

    ObjectSample sample;
    sample.full = normalize_cloud(cloud);
    sample.label = family;
    sample.seed = seed;
    auto variant = static_cast<MaskVariant>(rng.uniform_index(3));
    sample.mask = generate_mask(sample.full, variant, Rng::mix(seed, 0x3a5c0de));
    return sample;
}

namespace {

// Distance-from-centroid threshold marking the cloud's outer shell.
double shell_threshold(const GaussianCloud& cloud) {
    Vec3 centroid = Vec3::Zero();
    for (const auto& m : cloud.means) centroid += m;
    centroid /= double(cloud.size());
    std::vector<double> dist(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) dist[i] = (cloud.means[i] - centroid).norm();
    std::vector<double> sorted = dist;
    std::sort(sorted.begin(), sorted.end());
    size_t k = static_cast<size_t>(0.8 * double(sorted.size()));
    if (k >= sorted.size()) k = sorted.size() - 1;
    return sorted[k];
}

size_t contained_count(const GaussianCloud& cloud, const Mask3D& mask) {
    size_t c = 0;
    for (const auto& m : cloud.means) c += point_in_mask(m, mask) ? 1 : 0;
    return c;
}

} // namespace

Mask3D generate_mask(const GaussianCloud& cloud, MaskVariant variant, uint64_t seed) {
    if (cloud.empty()) throw ParamError("generate_mask: empty cloud");
    Rng rng(Rng::mix(seed, 0x9a5cf111));
    Mask3D mask;
    mask.variant = variant;

    switch (variant) {
    case MaskVariant::kConvexHull: {
        size_t anchor = rng.uniform_index(cloud.size());
        const Vec3& c = cloud.means[anchor];
        std::vector<double> dist(cloud.size());
        for (size_t i = 0; i < cloud.size(); ++i) dist[i] = (cloud.means[i] - c).norm();
        std::sort(dist.begin(), dist.end());
        double frac = rng.uniform(0.15, 0.45);
        size_t k = std::max<size_t>(1, static_cast<size_t>(frac * double(cloud.size())));
        if (k >= cloud.size()) k = cloud.size() - 1;
        double radius = dist[k] * 1.0001 + 1e-6;
        mask.primitives.push_back(SpherePrim{c, radius});
        break;
    }
    case MaskVariant::kSurface: {
        double thr = shell_threshold(cloud);
        Vec3 centroid = Vec3::Zero();
        for (const auto& m : cloud.means) centroid += m;
        centroid /= double(cloud.size());
        std::vector<size_t> shell;
        for (size_t i = 0; i < cloud.size(); ++i) {
            if ((cloud.means[i] - centroid).norm() >= thr) shell.push_back(i);
        }
        size_t anchor = shell[rng.uniform_index(shell.size())];
        double radius = rng.uniform(0.15, 0.32);
        SpherePrim prim{cloud.means[anchor], radius};
        Mask3D probe;
        probe.variant = variant;
        probe.primitives.push_back(prim);
        // Shrink until the patch stays small.
        for (int iter = 0; iter < 64; ++iter) {
            double frac = double(contained_count(cloud, probe)) / double(cloud.size());
            if (frac < 0.25) break;
            std::get<SpherePrim>(probe.primitives[0]).radius *= 0.8;
        }
        mask = probe;
        break;
    }
    case MaskVariant::kVolume:
        mask = make_volume_mask(cloud, rng.uniform(0.05, 0.15));
        break;
    }
    return mask;
}

Mask3D make_volume_mask(const GaussianCloud& cloud, double margin) {
    if (cloud.empty()) throw ParamError("make_volume_mask: empty cloud");
    Vec3 lo = cloud.means[0], hi = cloud.means[0];
    for (const auto& m : cloud.means) {
        lo = lo.cwiseMin(m);
        hi = hi.cwiseMax(m);
    }
    Vec3 half = 0.5 * (hi - lo);
    Vec3 delta = margin * half.cwiseMax(1e-3);
    Mask3D mask;
    mask.variant = MaskVariant::kVolume;
    mask.primitives.push_back(BoxPrim{lo - delta, hi + delta});
    return mask;
}

MaskReport validate_mask(const Mask3D& mask, const GaussianCloud& cloud) {
    MaskReport report;
    if (mask.primitives.empty()) {
        report.detail = "no primitives";
        return report;
    }
    if (cloud.empty()) {
        report.detail = "empty cloud";
        return report;
    }
    size_t inside = contained_count(cloud, mask);
    report.containment_fraction = double(inside) / double(cloud.size());

    switch (mask.variant) {
    case MaskVariant::kConvexHull:
        report.pass = inside > 0 && inside < cloud.size();
        report.detail = report.pass ? "contains a proper subset" : "must contain a proper subset";
        break;
    case MaskVariant::kSurface: {
        double thr = shell_threshold(cloud);
        Vec3 centroid = Vec3::Zero();
        for (const auto& m : cloud.means) centroid += m;
        centroid /= double(cloud.size());
        bool touches_shell = false;
        for (size_t i = 0; i < cloud.size(); ++i) {
            if (point_in_mask(cloud.means[i], mask) &&
                (cloud.means[i] - centroid).norm() >= thr) {
                touches_shell = true;
                break;
            }
        }
        report.pass = touches_shell && report.containment_fraction < 0.25;
        report.detail = !touches_shell ? "does not intersect the outer shell"
                        : report.pass  ? "small shell patch"
                                       : "patch too large";
        break;
    }
    case MaskVariant::kVolume:
        report.pass = inside == cloud.size();
        report.detail = report.pass ? "encloses all splats" : "must enclose every splat";
        break;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr const char* kPlyProps[14] = {"x",       "y",       "z",       "rot_w",  "rot_x",
                                       "rot_y",   "rot_z",   "scale_x", "scale_y", "scale_z",
                                       "opacity", "red",     "green",   "blue"};
}

void write_ply(const GaussianCloud& cloud, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.size() << "\n";
    for (const char* p : kPlyProps) out << "property float " << p << "\n";
    out << "end_header\n";
    std::vector<float> row(14);
    for (size_t i = 0; i < cloud.size(); ++i) {
        const Vec3& m = cloud.means[i];
        const Quat& q = cloud.rotations[i];
        const Vec3& s = cloud.scales[i];
        const Vec3& c = cloud.colors[i];
        row = {float(m.x()), float(m.y()), float(m.z()), float(q.w()),
               float(q.x()), float(q.y()), float(q.z()), float(s.x()),
               float(s.y()), float(s.z()), float(cloud.opacities[i]),
               float(c.x()), float(c.y()), float(c.z())};
        out.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
    }
    if (!out) throw DataError("write failed: " + path);
}

GaussianCloud read_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "ply") throw DataError("not a ply file: " + path);
    if (!std::getline(in, line) || line != "format binary_little_endian 1.0")
        throw DataError("unsupported ply format: " + path);
    size_t count = 0;
    int prop_index = 0;
    for (;;) {
        if (!std::getline(in, line)) throw DataError("truncated ply header: " + path);
        if (line == "end_header") break;
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "comment") continue;
        if (tok == "element") {
            std::string name;
            ss >> name >> count;
            if (name != "vertex") throw DataError("unexpected ply element: " + name);
            continue;
        }
        if (tok == "property") {
            std::string type, name;
            ss >> type >> name;
            if (prop_index >= 14 || type != "float" || name != kPlyProps[prop_index]) {
                throw DataError("unexpected ply property layout: " + path);
            }
            ++prop_index;
            continue;
        }
        throw DataError("unexpected ply header line: " + line);
    }
    if (prop_index != 14) throw DataError("ply property count mismatch: " + path);

    GaussianCloud cloud;
    std::vector<float> row(14);
    for (size_t i = 0; i < count; ++i) {
        in.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
        if (!in) throw DataError("ply truncated: " + path);
        cloud.push(Vec3(row[0], row[1], row[2]), Quat(row[3], row[4], row[5], row[6]),
                   Vec3(row[7], row[8], row[9]), row[10], Vec3(row[11], row[12], row[13]));
    }
    return cloud;
}

std::string mask_to_json(const Mask3D& mask) {
    json j;
    j["variant"] = mask_variant_name(mask.variant);
    j["primitives"] = json::array();
    for (const auto& prim : mask.primitives) {
        json p;
        if (const auto* s = std::get_if<SpherePrim>(&prim)) {
            p["type"] = "sphere";
            p["center"] = {s->center.x(), s->center.y(), s->center.z()};
            p["radius"] = s->radius;
        } else {
            const auto& b = std::get<BoxPrim>(prim);
            p["type"] = "box";
            p["min"] = {b.lo.x(), b.lo.y(), b.lo.z()};
            p["max"] = {b.hi.x(), b.hi.y(), b.hi.z()};
        }
        j["primitives"].push_back(p);
    }
    return j.dump(2);
}

Mask3D mask_from_json(const std::string& text) {
    json j = json::parse(text);
    Mask3D mask;
    mask.variant = mask_variant_from_name(j.at("variant").get<std::string>());
    for (const auto& p : j.at("primitives")) {
        std::string type = p.at("type").get<std::string>();
        if (type == "sphere") {
            auto c = p.at("center");
            mask.primitives.push_back(
                SpherePrim{Vec3(c[0], c[1], c[2]), p.at("radius").get<double>()});
        } else if (type == "box") {
            auto lo = p.at("min");
            auto hi = p.at("max");
            mask.primitives.push_back(
                BoxPrim{Vec3(lo[0], lo[1], lo[2]), Vec3(hi[0], hi[1], hi[2])});
        } else {
            throw DataError("unknown primitive type: " + type);
        }
    }
    if (mask.primitives.empty()) throw DataError("mask has no primitives");
    return mask;
}

void write_mask_json(const Mask3D& mask, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << mask_to_json(mask) << "\n";
}

Mask3D read_mask_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open for reading: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return mask_from_json(ss.str());
}

} // namespace splatfill
