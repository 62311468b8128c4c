#include "mdepth/scenegen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mdepth/rng.hpp"
#include "mdepth/tensor_io.hpp"

namespace mdepth {

namespace {

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 normalize(Vec3 a) {
    const double n = std::sqrt(dot(a, a));
    return {a.x / n, a.y / n, a.z / n};
}

struct Sphere {
    Vec3 center;
    double radius;
    Vec3 albedo;
};

struct Box {
    Vec3 lo, hi;
    Vec3 albedo;
};

struct Hit {
    double t = -1.0;  // camera-frame z depth (ray parameter with z_cam == 1)
    Vec3 normal;
    Vec3 albedo;
};

// Ray parameter against a sphere; dir need not be unit length.
double intersect_sphere(Vec3 origin, Vec3 dir, const Sphere& s) {
    const Vec3 oc = origin - s.center;
    const double a = dot(dir, dir);
    const double b = 2.0 * dot(oc, dir);
    const double c = dot(oc, oc) - s.radius * s.radius;
    const double disc = b * b - 4.0 * a * c;
    if (disc < 0.0) return -1.0;
    const double sq = std::sqrt(disc);
    const double t0 = (-b - sq) / (2.0 * a);
    if (t0 > 1e-6) return t0;
    const double t1 = (-b + sq) / (2.0 * a);
    return t1 > 1e-6 ? t1 : -1.0;
}

double intersect_box(Vec3 origin, Vec3 dir, const Box& b, Vec3* normal) {
    double tmin = -1e300, tmax = 1e300;
    int axis = 0;
    const double o[3] = {origin.x, origin.y, origin.z};
    const double d[3] = {dir.x, dir.y, dir.z};
    const double lo[3] = {b.lo.x, b.lo.y, b.lo.z};
    const double hi[3] = {b.hi.x, b.hi.y, b.hi.z};
    for (int i = 0; i < 3; ++i) {
        if (std::abs(d[i]) < 1e-12) {
            if (o[i] < lo[i] || o[i] > hi[i]) return -1.0;
            continue;
        }
        double t0 = (lo[i] - o[i]) / d[i];
        double t1 = (hi[i] - o[i]) / d[i];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > tmin) {
            tmin = t0;
            axis = i;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return -1.0;
    }
    if (tmin <= 1e-6) return -1.0;
    if (normal) {
        Vec3 n{0, 0, 0};
        const double sign = d[axis] > 0 ? -1.0 : 1.0;
        if (axis == 0) n.x = sign;
        if (axis == 1) n.y = sign;
        if (axis == 2) n.z = sign;
        *normal = n;
    }
    return tmin;
}

}  // namespace

DepthSample generate_sample(std::uint64_t seed, const SceneConfig& config) {
    const std::int64_t h = config.height, w = config.width;
    if (h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0) {
        throw ConfigError("scene resolution must be divisible by 32, got " + std::to_string(h) +
                          "x" + std::to_string(w));
    }
    if (!(config.d_min > 0.0) || !(config.d_max > config.d_min)) {
        throw ConfigError("scene depth range requires 0 < d_min < d_max");
    }
    if (config.n_objects < 0) throw ConfigError("scene object count must be >= 0");

    CounterRng rng(derive_seed(seed, "scene"));

    // Camera: height above the floor plus a pitch steep enough that every ray
    // meets the plane, so depth is dense.
    const double cam_h = 1.2 + rng.next_range(0.0, 0.8);
    const double pitch = (34.0 + rng.next_range(0.0, 8.0)) * (3.14159265358979323846 / 180.0);
    const double sp = std::sin(pitch), cp = std::cos(pitch);
    const double focal = static_cast<double>(w);
    const Vec3 origin{0.0, cam_h, 0.0};
    const Vec3 light = normalize({0.35 + rng.next_range(-0.1, 0.1), 0.85,
                                  -0.3 + rng.next_range(-0.1, 0.1)});

    // Scene content in front of the camera, scaled to sit inside the visible
    // ground footprint.
    const double zone_near = cam_h / std::tan(pitch + 0.45);
    const double zone_far = std::min(config.d_max * 0.9, cam_h / std::tan(std::max(0.05, pitch - 0.35)));
    std::vector<Sphere> spheres;
    std::vector<Box> boxes;
    for (std::int64_t i = 0; i < config.n_objects; ++i) {
        const double z = rng.next_range(zone_near, zone_far);
        const double x = rng.next_range(-0.35, 0.35) * z;
        const Vec3 albedo{rng.next_range(0.2, 0.95), rng.next_range(0.2, 0.95),
                          rng.next_range(0.2, 0.95)};
        if (rng.next_u64() & 1) {
            const double r = rng.next_range(0.12, 0.45) * std::max(1.0, z * 0.25);
            spheres.push_back({{x, r, z}, r, albedo});
        } else {
            const double sx = rng.next_range(0.15, 0.6) * std::max(1.0, z * 0.2);
            const double sy = rng.next_range(0.2, 0.9) * std::max(1.0, z * 0.2);
            const double sz = rng.next_range(0.15, 0.6) * std::max(1.0, z * 0.2);
            boxes.push_back({{x - sx, 0.0, z - sz}, {x + sx, 2.0 * sy, z + sz}, albedo});
        }
    }

    DepthSample sample;
    sample.seed = seed;
    sample.config = config;
    sample.rgb = Tensor<float>::zeros({3, h, w});
    sample.depth = Tensor<float>::zeros({1, h, w});
    sample.valid = Mask(h, w, true);

    float* rgb = sample.rgb.mut_data();
    float* depth = sample.depth.mut_data();
    const std::int64_t plane = h * w;

    for (std::int64_t r = 0; r < h; ++r) {
        const double ndc_y = (static_cast<double>(r) + 0.5 - static_cast<double>(h) / 2.0) / focal;
        for (std::int64_t c = 0; c < w; ++c) {
            const double ndc_x =
                (static_cast<double>(c) + 0.5 - static_cast<double>(w) / 2.0) / focal;
            // Camera ray with z_cam = 1, pitched down around the x axis.
            const Vec3 dir{ndc_x, -sp - ndc_y * cp, cp - ndc_y * sp};

            Hit hit;
            const double denom = -dir.y;
            if (denom > 1e-9) {
                const double t = cam_h / denom;
                hit.t = t;
                hit.normal = {0.0, 1.0, 0.0};
                const Vec3 p = origin + dir * t;
                const bool check =
                    ((static_cast<std::int64_t>(std::floor(p.x)) +
                      static_cast<std::int64_t>(std::floor(p.z))) & 1) == 0;
                hit.albedo = check ? Vec3{0.75, 0.72, 0.66} : Vec3{0.45, 0.47, 0.52};
            }
            for (const auto& s : spheres) {
                const double t = intersect_sphere(origin, dir, s);
                if (t > 0.0 && (hit.t < 0.0 || t < hit.t)) {
                    const Vec3 p = origin + dir * t;
                    hit.t = t;
                    hit.normal = normalize(p - s.center);
                    hit.albedo = s.albedo;
                }
            }
            for (const auto& b : boxes) {
                Vec3 n;
                const double t = intersect_box(origin, dir, b, &n);
                if (t > 0.0 && (hit.t < 0.0 || t < hit.t)) {
                    hit.t = t;
                    hit.normal = n;
                    hit.albedo = b.albedo;
                }
            }

            double z = hit.t > 0.0 ? hit.t : config.d_max;
            z = std::clamp(z, config.d_min, config.d_max);
            depth[r * w + c] = static_cast<float>(z);

            const double lambert = std::max(0.0, dot(hit.normal, light));
            const double intensity = 0.25 + 0.6 * lambert + 0.15 / (1.0 + 0.3 * z);
            const double col[3] = {hit.albedo.x * intensity, hit.albedo.y * intensity,
                                   hit.albedo.z * intensity};
            for (int ch = 0; ch < 3; ++ch) {
                rgb[ch * plane + r * w + c] = static_cast<float>(std::clamp(col[ch], 0.0, 1.0));
            }
        }
    }

    // Sensor-hole speckle, at most 10% of pixels.
    CounterRng speckle(derive_seed(seed, "speckle"));
    const double rate = speckle.next_range(0.0, 0.10);
    for (std::int64_t i = 0; i < plane; ++i) {
        if (speckle.next_unit() < rate) sample.valid.data[static_cast<std::size_t>(i)] = 0;
    }
    return sample;
}

std::uint64_t sample_checksum(const DepthSample& sample) {
    std::uint64_t h = wtns_digest(sample.rgb);
    h = wtns_digest(sample.depth, h);
    h = fnv1a64(sample.valid.data.data(), sample.valid.data.size(), h);
    return h;
}

namespace {

Tensor<float> valid_to_tensor(const Mask& m) {
    std::vector<float> data(m.data.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = m.data[i] ? 1.0f : 0.0f;
    return Tensor<float>({1, m.rows, m.cols}, std::move(data));
}

}  // namespace

void write_sample(const DepthSample& sample, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_wtns(dir / "rgb.wtns", sample.rgb);
    save_wtns(dir / "depth.wtns", sample.depth);
    save_wtns(dir / "valid.wtns", valid_to_tensor(sample.valid));

    nlohmann::json meta;
    meta["seed"] = sample.seed;
    meta["checksum"] = sample_checksum(sample);
    meta["config"] = {{"height", sample.config.height}, {"width", sample.config.width},
                      {"d_min", sample.config.d_min},   {"d_max", sample.config.d_max},
                      {"n_objects", sample.config.n_objects}};
    std::ofstream out(dir / "meta.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
    out << meta.dump(2) << "\n";
}

DepthSample read_sample(const std::filesystem::path& dir) {
    const auto meta_path = dir / "meta.json";
    std::ifstream in(meta_path);
    if (!in) throw IoError("cannot open " + meta_path.string());
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid JSON in " + meta_path.string() + ": " + e.what());
    }

    DepthSample sample;
    sample.seed = meta.at("seed").get<std::uint64_t>();
    const auto& cfg = meta.at("config");
    sample.config.height = cfg.at("height").get<std::int64_t>();
    sample.config.width = cfg.at("width").get<std::int64_t>();
    sample.config.d_min = cfg.at("d_min").get<double>();
    sample.config.d_max = cfg.at("d_max").get<double>();
    sample.config.n_objects = cfg.at("n_objects").get<std::int64_t>();

    sample.rgb = load_wtns_as<float>(dir / "rgb.wtns");
    sample.depth = load_wtns_as<float>(dir / "depth.wtns");
    Tensor<float> valid = load_wtns_as<float>(dir / "valid.wtns");

    const Shape rgb_shape{3, sample.config.height, sample.config.width};
    const Shape map_shape{1, sample.config.height, sample.config.width};
    if (sample.rgb.shape() != rgb_shape) {
        throw FormatError("rgb.wtns shape " + shape_str(sample.rgb.shape()) +
                          " disagrees with meta.json");
    }
    if (sample.depth.shape() != map_shape || valid.shape() != map_shape) {
        throw FormatError("depth.wtns/valid.wtns shape disagrees with meta.json in " +
                          dir.string());
    }
    sample.valid = Mask(sample.config.height, sample.config.width, true);
    for (std::size_t i = 0; i < sample.valid.data.size(); ++i) {
        const float v = valid.data()[i];
        if (v != 0.0f && v != 1.0f) throw FormatError("valid.wtns holds non-boolean values");
        sample.valid.data[i] = v != 0.0f;
    }
    return sample;
}

}  // namespace mdepth
