// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "splatfill/errors.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "splatfill/geometry.hpp"
#include "splatfill/rng.hpp"

using namespace splatfill;

namespace {

GaussianCloud random_cloud(uint64_t seed, int n) {
    Rng rng(seed);
    GaussianCloud cloud;
    for (int i = 0; i < n; ++i) {
        Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q.normalize();
        cloud.push(Vec3(rng.uniform(-2, 5), rng.uniform(-1, 3), rng.uniform(0, 4)), q,
                   Vec3(rng.uniform(0.01, 0.3), rng.uniform(0.01, 0.3), rng.uniform(0.01, 0.3)),
                   rng.uniform(0.1, 0.9),
                   Vec3(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)));
    }
    return cloud;
}

bool clouds_equal(const GaussianCloud& a, const GaussianCloud& b, double tol) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if ((a.means[i] - b.means[i]).cwiseAbs().maxCoeff() > tol) return false;
        if ((a.scales[i] - b.scales[i]).cwiseAbs().maxCoeff() > tol) return false;
        if (std::abs(a.opacities[i] - b.opacities[i]) > tol) return false;
        if ((a.colors[i] - b.colors[i]).cwiseAbs().maxCoeff() > tol) return false;
        if (std::abs(a.rotations[i].w() - b.rotations[i].w()) > tol) return false;
        if (std::abs(a.rotations[i].x() - b.rotations[i].x()) > tol) return false;
    }
    return true;
}

} // namespace

TEST_CASE("generate_object is deterministic and normalized") {
    ObjectSample a = generate_object(7, 64);
    ObjectSample b = generate_object(7, 64);
    CHECK(a.full.size() == 64);
    CHECK(a.label == b.label);
    CHECK(clouds_equal(a.full, b.full, 0.0));

    for (const auto& m : a.full.means) {
        CHECK(m.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
    }
    a.full.validate();

    ObjectSample c = generate_object(8, 64);
    bool any_diff = false;
    for (size_t i = 0; i < c.full.size() && !any_diff; ++i) {
        any_diff = (a.full.means[i] - c.full.means[i]).norm() > 0;
    }
    CHECK(any_diff);
}

TEST_CASE("generate_object rejects out-of-range complexity") {
    CHECK_THROWS_AS(generate_object(1, 7), ParamError);
    CHECK_THROWS_AS(generate_object(1, 513), ParamError);
}

TEST_CASE("every shape family is reachable and valid") {
    std::set<int> labels;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        ObjectSample s = generate_object(seed, 32);
        s.full.validate();
        labels.insert(s.label);
    }
    CHECK(labels.size() == size_t(kShapeFamilyCount));
}

TEST_CASE("normalize_cloud maps bbox [0,4]^3 to [-1,1]^3 with factor 0.5") {
    GaussianCloud cloud;
    Quat id = Quat::Identity();
    cloud.push(Vec3(0, 0, 0), id, Vec3(0.1, 0.2, 0.3), 0.5, Vec3(0.5, 0.5, 0.5));
    cloud.push(Vec3(4, 4, 4), id, Vec3(0.4, 0.4, 0.4), 0.5, Vec3(0.5, 0.5, 0.5));
    GaussianCloud out = normalize_cloud(cloud);
    CHECK(out.means[0].isApprox(Vec3(-1, -1, -1), 1e-12));
    CHECK(out.means[1].isApprox(Vec3(1, 1, 1), 1e-12));
    CHECK(out.scales[0].isApprox(Vec3(0.05, 0.1, 0.15), 1e-12));
}

TEST_CASE("normalize_cloud: recomputed bbox has longest side 2") {
    GaussianCloud out = normalize_cloud(random_cloud(11, 50));
    Vec3 lo = out.means[0], hi = out.means[0];
    for (const auto& m : out.means) {
        lo = lo.cwiseMin(m);
        hi = hi.cwiseMax(m);
    }
    CHECK(std::abs((hi - lo).maxCoeff() - 2.0) < 1e-9);
    CHECK((0.5 * (lo + hi)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("normalize_cloud is idempotent within 1e-12") {
    GaussianCloud once = normalize_cloud(random_cloud(3, 40));
    GaussianCloud twice = normalize_cloud(once);
    CHECK(clouds_equal(once, twice, 1e-12));
}

TEST_CASE("normalize_cloud handles degenerate and empty clouds") {
    GaussianCloud cloud;
    Quat id = Quat::Identity();
    cloud.push(Vec3(3, 3, 3), id, Vec3(0.1, 0.1, 0.1), 0.5, Vec3(0.5, 0.5, 0.5));
    cloud.push(Vec3(3, 3, 3), id, Vec3(0.1, 0.1, 0.1), 0.5, Vec3(0.5, 0.5, 0.5));
    GaussianCloud out = normalize_cloud(cloud);
    CHECK(out.means[0].norm() == 0.0);
    CHECK(out.scales[0].isApprox(Vec3(0.1, 0.1, 0.1)));

    GaussianCloud empty;
    CHECK_THROWS_AS(normalize_cloud(empty), ParamError);
}

TEST_CASE("point_in_mask basics") {
    Mask3D sphere;
    sphere.primitives.push_back(SpherePrim{Vec3::Zero(), 1.0});
    CHECK(point_in_mask(Vec3::Zero(), sphere));

    Mask3D box;
    box.primitives.push_back(BoxPrim{Vec3(-1, -1, -1), Vec3(1, 1, 1)});
    CHECK_FALSE(point_in_mask(Vec3(2, 0, 0), box));
}

TEST_CASE("point_in_mask union matches per-primitive OR oracle") {
    Mask3D mask;
    mask.primitives.push_back(SpherePrim{Vec3(0.3, 0, 0), 0.4});
    mask.primitives.push_back(BoxPrim{Vec3(-0.8, -0.8, -0.8), Vec3(-0.1, -0.1, -0.1)});
    mask.primitives.push_back(SpherePrim{Vec3(-0.2, 0.6, 0.1), 0.25});

    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
        Vec3 p(rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
        bool in_sphere1 = (p - Vec3(0.3, 0, 0)).squaredNorm() < 0.4 * 0.4;
        bool in_box = p.x() > -0.8 && p.x() < -0.1 && p.y() > -0.8 && p.y() < -0.1 &&
                      p.z() > -0.8 && p.z() < -0.1;
        bool in_sphere2 = (p - Vec3(-0.2, 0.6, 0.1)).squaredNorm() < 0.25 * 0.25;
        CHECK(point_in_mask(p, mask) == (in_sphere1 || in_box || in_sphere2));
    }
}

TEST_CASE("carve_object: sphere mask keeps exactly the outside splats") {
    ObjectSample sample = generate_object(21, 128);
    sample.mask.variant = MaskVariant::kConvexHull;
    sample.mask.primitives = {SpherePrim{Vec3::Zero(), 0.5}};

    GaussianCloud carved = carve_object(sample);
    size_t expected = 0;
    for (const auto& m : sample.full.means) {
        if (m.norm() >= 0.5) ++expected;
    }
    CHECK(carved.size() == expected);
    for (const auto& m : carved.means) CHECK(m.norm() >= 0.5);
}

TEST_CASE("carve_object: disjoint mask is the identity") {
    ObjectSample sample = generate_object(22, 64);
    sample.mask.primitives = {SpherePrim{Vec3(10, 10, 10), 0.5}};
    GaussianCloud carved = carve_object(sample);
    CHECK(clouds_equal(carved, sample.full, 0.0));
}

TEST_CASE("carve_object: swallowing mask errors unless keep floor set") {
    ObjectSample sample = generate_object(23, 64);
    sample.mask = make_volume_mask(sample.full, 0.1);
    CHECK_THROWS_AS(carve_object(sample), DataError);

    GaussianCloud kept = carve_object(sample, 0.05);
    CHECK(kept.size() == size_t(std::ceil(0.05 * 64)));
}

TEST_CASE("carve plus removed reproduces the full cloud") {
    ObjectSample sample = generate_object(24, 96);
    GaussianCloud carved = carve_object(sample);
    size_t removed = 0;
    for (const auto& m : sample.full.means) {
        if (point_in_mask(m, sample.mask)) ++removed;
    }
    CHECK(carved.size() + removed == sample.full.size());

    // Survivor order preserved.
    size_t j = 0;
    for (size_t i = 0; i < sample.full.size() && j < carved.size(); ++i) {
        if (!point_in_mask(sample.full.means[i], sample.mask)) {
            CHECK((sample.full.means[i] - carved.means[j]).norm() == 0.0);
            ++j;
        }
    }
    CHECK(j == carved.size());
}

TEST_CASE("make_volume_mask dilates [-1,1]^3 by 0.1 to [-1.1,1.1]^3") {
    GaussianCloud cloud;
    Quat id = Quat::Identity();
    for (int x : {-1, 1})
        for (int y : {-1, 1})
            for (int z : {-1, 1})
                cloud.push(Vec3(x, y, z), id, Vec3(0.1, 0.1, 0.1), 0.5, Vec3(0.5, 0.5, 0.5));
    Mask3D mask = make_volume_mask(cloud, 0.1);
    const auto& box = std::get<BoxPrim>(mask.primitives[0]);
    CHECK(box.lo.isApprox(Vec3(-1.1, -1.1, -1.1), 1e-12));
    CHECK(box.hi.isApprox(Vec3(1.1, 1.1, 1.1), 1e-12));
}

TEST_CASE("generate_mask variants satisfy their predicates") {
    for (uint64_t seed = 1; seed <= 12; ++seed) {
        ObjectSample sample = generate_object(seed, 100);

        Mask3D hull = generate_mask(sample.full, MaskVariant::kConvexHull, seed * 3 + 1);
        MaskReport hr = validate_mask(hull, sample.full);
        CHECK(hr.pass);
        CHECK(hr.containment_fraction > 0.0);
        CHECK(hr.containment_fraction < 1.0);

        Mask3D surface = generate_mask(sample.full, MaskVariant::kSurface, seed * 3 + 2);
        MaskReport sr = validate_mask(surface, sample.full);
        CHECK(sr.pass);
        CHECK(sr.containment_fraction < 0.25);

        Mask3D volume = generate_mask(sample.full, MaskVariant::kVolume, seed * 3 + 3);
        MaskReport vr = validate_mask(volume, sample.full);
        CHECK(vr.pass);
        CHECK(vr.containment_fraction == 1.0);
    }
}

TEST_CASE("convexhull carve removals are all inside the mask") {
    ObjectSample sample = generate_object(31, 120);
    sample.mask = generate_mask(sample.full, MaskVariant::kConvexHull, 77);
    GaussianCloud carved = carve_object(sample);
    // Removed = full minus carved, by position in order.
    size_t j = 0;
    for (size_t i = 0; i < sample.full.size(); ++i) {
        bool survived = j < carved.size() && (sample.full.means[i] - carved.means[j]).norm() == 0.0;
        if (survived) {
            ++j;
        } else {
            CHECK(point_in_mask(sample.full.means[i], sample.mask));
        }
    }
}

TEST_CASE("validate_mask reports brute-force containment fraction") {
    ObjectSample sample = generate_object(41, 80);
    Rng rng(5);
    Mask3D mask;
    mask.primitives.push_back(SpherePrim{
        Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)), 0.6});
    mask.variant = MaskVariant::kConvexHull;
    size_t count = 0;
    for (const auto& m : sample.full.means) {
        if (point_in_mask(m, mask)) ++count;
    }
    MaskReport r = validate_mask(mask, sample.full);
    CHECK(r.containment_fraction == double(count) / double(sample.full.size()));
}

TEST_CASE("surface mask containing zero means fails validation") {
    ObjectSample sample = generate_object(51, 64);
    Mask3D mask;
    mask.variant = MaskVariant::kSurface;
    mask.primitives.push_back(SpherePrim{Vec3(5, 5, 5), 0.1});
    CHECK_FALSE(validate_mask(mask, sample.full).pass);
}

TEST_CASE("ply round trip is lossless at float32 precision") {
    ObjectSample sample = generate_object(61, 90);
    std::filesystem::path path = std::filesystem::temp_directory_path() / "sf_test_cloud.ply";
    write_ply(sample.full, path.string());
    GaussianCloud loaded = read_ply(path.string());
    REQUIRE(loaded.size() == sample.full.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            CHECK(loaded.means[i][k] == double(float(sample.full.means[i][k])));
            CHECK(loaded.scales[i][k] == double(float(sample.full.scales[i][k])));
            CHECK(loaded.colors[i][k] == double(float(sample.full.colors[i][k])));
        }
        CHECK(loaded.opacities[i] == double(float(sample.full.opacities[i])));
        CHECK(loaded.rotations[i].w() == double(float(sample.full.rotations[i].w())));
    }
    std::filesystem::remove(path);
}

TEST_CASE("empty cloud writes a valid zero-element ply") {
    GaussianCloud empty;
    std::filesystem::path path = std::filesystem::temp_directory_path() / "sf_empty.ply";
    write_ply(empty, path.string());
    GaussianCloud loaded = read_ply(path.string());
    CHECK(loaded.size() == 0);
    std::filesystem::remove(path);
}

TEST_CASE("ply file size matches element-count arithmetic") {
    ObjectSample sample = generate_object(62, 256);
    std::filesystem::path path = std::filesystem::temp_directory_path() / "sf_size.ply";
    write_ply(sample.full, path.string());
    size_t header = 0;
    {
        std::ifstream in(path, std::ios::binary);
        std::string line;
        while (std::getline(in, line)) {
            header += line.size() + 1;
            if (line == "end_header") break;
        }
    }
    CHECK(std::filesystem::file_size(path) == header + 256 * 14 * sizeof(float));
    std::filesystem::remove(path);
}

TEST_CASE("mask json round trip") {
    Mask3D mask;
    mask.variant = MaskVariant::kSurface;
    mask.primitives.push_back(SpherePrim{Vec3(0.1, -0.2, 0.3), 0.25});
    mask.primitives.push_back(BoxPrim{Vec3(-1, -1, -1), Vec3(0, 0, 0)});
    Mask3D rt = mask_from_json(mask_to_json(mask));
    CHECK(rt.variant == MaskVariant::kSurface);
    REQUIRE(rt.primitives.size() == 2);
    CHECK(std::get<SpherePrim>(rt.primitives[0]).radius == 0.25);
    CHECK(std::get<BoxPrim>(rt.primitives[1]).hi.isApprox(Vec3(0, 0, 0)));

    CHECK_THROWS_AS(mask_variant_from_name("wedge"), ParamError);
}
