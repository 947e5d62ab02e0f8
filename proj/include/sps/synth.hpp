#pragma once

// Synthetic ground truth: piecewise-planar scenes whose planes own image
// regions (polygons, painter's order) and move with per-group rigid motions.
// Depth and flow are evaluated analytically per pixel center by moving the
// backprojected point and projecting it again — deliberately not through
// homographies, so that tests can cross-check the two paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sps/errors.hpp"
#include "sps/geometry.hpp"
#include "sps/image.hpp"
#include "sps/io.hpp"

namespace sps {

struct MotionSpec {
  Rotation rotation;
  Vector3d translation = Vector3d::Zero();

  RigidMotion motion() const { return RigidMotion::from_translation(rotation, translation); }
};

struct PlaneSpec {
  Vector3d normal = Vector3d(0, 0, -1);
  double depth = 1.0;
  std::vector<Vector2d> polygon;  // image region in frame I, pixel units
  int motion = 0;
  Vector3d color = Vector3d(0.5, 0.5, 0.5);

  Plane plane() const { return Plane(normal, depth); }
};

struct SceneSpec {
  int width = 0;
  int height = 0;
  Intrinsics intrinsics;
  std::vector<MotionSpec> motions;
  std::vector<PlaneSpec> planes;  // later planes paint over earlier ones
  double texture_amplitude = 0.25;
  double texture_scale = 6.0;     // value-noise lattice spacing in pixels
};

struct GroundTruth {
  ColorImage frame1;
  ColorImage frame2;
  DepthMap depth;       // Z of the frame-I surface point per pixel
  DepthMap depth_next;  // Z of the same point after its motion
  FlowField flow;
  LabelMap labels;      // plane index per pixel
  Grid<std::uint8_t> occluded;  // 1 where the point is hidden in frame I'
  std::vector<PlaneSpec> planes;
  std::vector<MotionSpec> motions;
};

namespace detail {

inline bool point_in_polygon(const std::vector<Vector2d>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vector2d& a = poly[i];
    const Vector2d& b = poly[j];
    if ((a.y() > y) != (b.y() > y)) {
      const double xc = a.x() + (y - a.y()) / (b.y() - a.y()) * (b.x() - a.x());
      if (x < xc) inside = !inside;
    }
  }
  return inside;
}

inline double hash01(std::uint64_t seed, int plane, int i, int j) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ULL;
  h ^= static_cast<std::uint64_t>(plane + 1) * 0xC2B2AE3D27D4EB4FULL;
  h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(i)) * 0x165667B19E3779F9ULL;
  h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(j)) * 0x27D4EB2F165667C5ULL;
  h ^= h >> 31;
  h *= 0xBF58476D1CE4E5B9ULL;
  h ^= h >> 29;
  h *= 0x94D049BB133111EBULL;
  h ^= h >> 32;
  return double(h >> 11) / double(1ULL << 53);
}

inline double value_noise(std::uint64_t seed, int plane, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int i = static_cast<int>(fx), j = static_cast<int>(fy);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double sx = smooth(x - fx), sy = smooth(y - fy);
  const double a = hash01(seed, plane, i, j), b = hash01(seed, plane, i + 1, j);
  const double c = hash01(seed, plane, i, j + 1), d = hash01(seed, plane, i + 1, j + 1);
  return (a + (b - a) * sx) + ((c + (d - c) * sx) - (a + (b - a) * sx)) * sy;
}

/// Texture is a function of frame-I pixel position, so a surface point keeps
/// its color when it moves (brightness constancy holds exactly).
inline Rgb texture(const SceneSpec& spec, std::uint64_t seed, int plane, const Vector2d& x) {
  const double s = spec.texture_scale;
  const double n = 0.65 * value_noise(seed, plane, x.x() / s, x.y() / s) +
                   0.35 * value_noise(seed, plane + 7919, x.x() / (0.5 * s), x.y() / (0.5 * s));
  const double k = spec.texture_amplitude * (n - 0.5) * 2.0;
  const Vector3d c = spec.planes[plane].color;
  Rgb out;
  for (int ch = 0; ch < 3; ++ch) {
    // Channel-dependent modulation keeps CIELAB gradients in all channels.
    const double mod = ch == 1 ? -0.6 * k : k;
    out(ch) = static_cast<float>(std::clamp(c(ch) + mod, 0.0, 1.0));
  }
  return out;
}

/// Topmost plane whose polygon contains the image point, or -1.
inline int owner_at(const SceneSpec& spec, const Vector2d& x) {
  for (int p = static_cast<int>(spec.planes.size()) - 1; p >= 0; --p)
    if (point_in_polygon(spec.planes[p].polygon, x.x(), x.y())) return p;
  return -1;
}

struct Hit {
  int plane = -1;
  double z_next = std::numeric_limits<double>::infinity();
  Vector2d source;  // frame-I pixel of the visible point
};

/// Nearest surface seen through frame-I' pixel y: for each plane, intersect
/// the ray with the moved plane, map the point back to frame I and accept it
/// only if the plane owns that frame-I location.
inline Hit visible_in_next(const SceneSpec& spec, const Vector2d& y) {
  const Intrinsics& k = spec.intrinsics;
  Hit best;
  const Vector3d ray = k.ray(y);
  for (int p = 0; p < static_cast<int>(spec.planes.size()); ++p) {
    const auto& ps = spec.planes[p];
    const auto& m = spec.motions[ps.motion];
    // Plane after motion: n'ᵀX' + d' = 0 with n' = R n, d' = d − n'ᵀt.
    const Vector3d n2 = m.rotation * ps.normal.normalized();
    const double d2 = ps.depth - n2.dot(m.translation);
    const double denom = n2.dot(ray);
    if (std::abs(denom) < 1e-12) continue;
    const double s = -d2 / denom;
    if (!(s > 0.0) || s >= best.z_next) continue;
    const Vector3d xn = s * ray;
    const Vector3d x1 = m.rotation.inverse() * (xn - m.translation);
    if (x1.z() <= 0.0) continue;
    const Vector2d src = project(k, x1);
    if (owner_at(spec, src) != p) continue;
    best = {p, s, src};
  }
  return best;
}

inline const nlohmann::json& at(const nlohmann::json& j, const std::string& key,
                                const std::string& ptr) {
  if (!j.is_object() || !j.contains(key)) throw InputError(ptr + "/" + key + ": missing");
  return j.at(key);
}

inline double number(const nlohmann::json& j, const std::string& ptr) {
  if (!j.is_number()) throw InputError(ptr + ": expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw InputError(ptr + ": expected a finite number");
  return v;
}

inline Vector3d vec3(const nlohmann::json& j, const std::string& ptr) {
  if (!j.is_array() || j.size() != 3) throw InputError(ptr + ": expected an array of 3 numbers");
  return {number(j[0], ptr + "/0"), number(j[1], ptr + "/1"), number(j[2], ptr + "/2")};
}

inline std::vector<Vector2d> polygon(const nlohmann::json& j, const std::string& ptr) {
  if (!j.is_array() || j.size() < 3) throw InputError(ptr + ": expected at least 3 vertices");
  std::vector<Vector2d> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = ptr + "/" + std::to_string(i);
    if (!j[i].is_array() || j[i].size() != 2) throw InputError(p + ": expected [u, v]");
    out.emplace_back(number(j[i][0], p + "/0"), number(j[i][1], p + "/1"));
  }
  return out;
}

}  // namespace detail

/// Planar facets approximating a vertical cylinder (axis parallel to camera
/// Y) seen from the camera, each facet's image region being the projection
/// of its 3D quad. Facets are appended in back-to-front order.
inline std::vector<PlaneSpec> cylinder_facets(const Intrinsics& k, const Vector3d& axis_point,
                                              double radius, double y_min, double y_max,
                                              double arc_begin, double arc_end, int facets,
                                              int motion, const Vector3d& color) {
  if (facets < 1) throw InputError("cylinder: facets must be >= 1");
  if (!(radius > 0.0)) throw InputError("cylinder: radius must be positive");
  if (!(y_max > y_min)) throw InputError("cylinder: empty height range");
  // Angles measured from the -Z direction (the side facing the camera).
  auto point = [&](double a, double y) {
    return Vector3d(axis_point.x() + radius * std::sin(a), y,
                    axis_point.z() - radius * std::cos(a));
  };
  std::vector<std::pair<double, PlaneSpec>> facets_by_depth;
  for (int f = 0; f < facets; ++f) {
    const double a0 = arc_begin + (arc_end - arc_begin) * f / facets;
    const double a1 = arc_begin + (arc_end - arc_begin) * (f + 1) / facets;
    const Vector3d p00 = point(a0, y_min), p10 = point(a1, y_min);
    const Vector3d p01 = point(a0, y_max), p11 = point(a1, y_max);
    Vector3d n = (p10 - p00).cross(p01 - p00).normalized();
    double d = -n.dot(p00);
    if (d < 0) {
      n = -n;
      d = -d;
    }
    if (!(d > 0.0)) throw InputError("cylinder: facet plane passes through the camera");
    PlaneSpec ps;
    ps.normal = n;
    ps.depth = d;
    ps.polygon = {project(k, p00), project(k, p10), project(k, p11), project(k, p01)};
    ps.motion = motion;
    ps.color = color;
    facets_by_depth.emplace_back(0.25 * (p00 + p10 + p01 + p11).z(), ps);
  }
  // Painter's order: farthest facet first.
  std::stable_sort(facets_by_depth.begin(), facets_by_depth.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<PlaneSpec> out;
  for (auto& f : facets_by_depth) out.push_back(std::move(f.second));
  return out;
}

/// Parses a SceneSpec; errors carry a JSON-pointer to the offending value.
inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  using detail::at;
  using detail::number;
  if (!j.is_object()) throw InputError(": scene spec must be a JSON object");
  SceneSpec spec;
  const double w = number(at(j, "width", ""), "/width");
  const double h = number(at(j, "height", ""), "/height");
  if (w < 1 || h < 1 || w != std::floor(w) || h != std::floor(h))
    throw InputError("/width: image size must be positive integers");
  spec.width = static_cast<int>(w);
  spec.height = static_cast<int>(h);
  {
    const auto& kj = at(j, "intrinsics", "");
    const double fx = number(at(kj, "fx", "/intrinsics"), "/intrinsics/fx");
    const double fy = number(at(kj, "fy", "/intrinsics"), "/intrinsics/fy");
    const double cx = number(at(kj, "cx", "/intrinsics"), "/intrinsics/cx");
    const double cy = number(at(kj, "cy", "/intrinsics"), "/intrinsics/cy");
    if (!(fx > 0)) throw InputError("/intrinsics/fx: must be positive");
    if (!(fy > 0)) throw InputError("/intrinsics/fy: must be positive");
    spec.intrinsics = Intrinsics(fx, fy, cx, cy);
  }
  if (j.contains("texture")) {
    const auto& tj = j.at("texture");
    if (tj.contains("amplitude")) spec.texture_amplitude = number(tj.at("amplitude"), "/texture/amplitude");
    if (tj.contains("scale")) spec.texture_scale = number(tj.at("scale"), "/texture/scale");
    if (spec.texture_amplitude < 0) throw InputError("/texture/amplitude: must be >= 0");
    if (!(spec.texture_scale > 0)) throw InputError("/texture/scale: must be positive");
  }

  const auto& mj = at(j, "motions", "");
  if (!mj.is_array() || mj.empty()) throw InputError("/motions: expected a non-empty array");
  for (std::size_t i = 0; i < mj.size(); ++i) {
    const std::string ptr = "/motions/" + std::to_string(i);
    MotionSpec m;
    if (mj[i].contains("rotation")) {
      const Vector3d w_vec = detail::vec3(mj[i].at("rotation"), ptr + "/rotation");
      m.rotation = Rotation::exp(w_vec);
    }
    m.translation = detail::vec3(at(mj[i], "translation", ptr), ptr + "/translation");
    spec.motions.push_back(m);
  }

  auto parse_motion_index = [&](const nlohmann::json& pj, const std::string& ptr) {
    const double mi = number(at(pj, "motion", ptr), ptr + "/motion");
    if (mi < 0 || mi >= double(spec.motions.size()) || mi != std::floor(mi))
      throw InputError(ptr + "/motion: no such motion");
    return static_cast<int>(mi);
  };
  auto parse_color = [&](const nlohmann::json& pj, const std::string& ptr) {
    if (!pj.contains("color")) return Vector3d(0.5, 0.5, 0.5);
    const Vector3d c = detail::vec3(pj.at("color"), ptr + "/color");
    if (c.minCoeff() < 0 || c.maxCoeff() > 1) throw InputError(ptr + "/color: components must lie in [0, 1]");
    return c;
  };

  const auto& pj = at(j, "planes", "");
  if (!pj.is_array()) throw InputError("/planes: expected an array");
  for (std::size_t i = 0; i < pj.size(); ++i) {
    const std::string ptr = "/planes/" + std::to_string(i);
    if (pj[i].contains("cylinder")) {
      const auto& cj = pj[i].at("cylinder");
      const std::string cp = ptr + "/cylinder";
      const Vector3d axis = detail::vec3(at(cj, "axis_point", cp), cp + "/axis_point");
      const double radius = number(at(cj, "radius", cp), cp + "/radius");
      const auto& yr = at(cj, "y_range", cp);
      const auto& arc = at(cj, "arc_deg", cp);
      if (!yr.is_array() || yr.size() != 2) throw InputError(cp + "/y_range: expected [min, max]");
      if (!arc.is_array() || arc.size() != 2) throw InputError(cp + "/arc_deg: expected [begin, end]");
      const double facets = number(at(cj, "facets", cp), cp + "/facets");
      if (facets < 1 || facets != std::floor(facets)) throw InputError(cp + "/facets: expected a positive integer");
      try {
        for (auto& f : cylinder_facets(spec.intrinsics, axis, radius, number(yr[0], cp + "/y_range/0"),
                                       number(yr[1], cp + "/y_range/1"),
                                       deg2rad(number(arc[0], cp + "/arc_deg/0")),
                                       deg2rad(number(arc[1], cp + "/arc_deg/1")),
                                       static_cast<int>(facets), parse_motion_index(pj[i], ptr),
                                       parse_color(pj[i], ptr)))
          spec.planes.push_back(std::move(f));
      } catch (const CheiralityError&) {
        throw InputError(cp + ": cylinder is not in front of the camera");
      } catch (const InputError& e) {
        throw InputError(cp + ": " + e.what());
      }
      continue;
    }
    PlaneSpec ps;
    ps.normal = detail::vec3(at(pj[i], "normal", ptr), ptr + "/normal");
    if (ps.normal.norm() < 1e-12) throw InputError(ptr + "/normal: must be nonzero");
    ps.normal.normalize();
    ps.depth = number(at(pj[i], "depth", ptr), ptr + "/depth");
    if (!(ps.depth > 0)) throw InputError(ptr + "/depth: must be positive");
    ps.polygon = detail::polygon(at(pj[i], "polygon", ptr), ptr + "/polygon");
    ps.motion = parse_motion_index(pj[i], ptr);
    ps.color = parse_color(pj[i], ptr);
    spec.planes.push_back(std::move(ps));
  }
  if (spec.planes.empty()) throw InputError("/planes: expected at least one plane");
  return spec;
}

inline SceneSpec read_scene_spec(const std::filesystem::path& path) {
  return scene_spec_from_json(read_json(path));
}

/// Frame-I' position of the surface point of plane `p` seen at pixel x,
/// computed by moving the backprojected 3D point (double precision).
inline Vector2d point_transfer(const SceneSpec& spec, int p, const Vector2d& x) {
  const auto& ps = spec.planes.at(p);
  const auto& m = spec.motions.at(ps.motion);
  const Vector3d x1 = backproject(spec.intrinsics, x, ps.plane());
  return project(spec.intrinsics, m.rotation * x1 + m.translation);
}

/// Renders the scene at every pixel center. The texture seed only affects
/// colors; geometry is fully determined by the spec.
inline GroundTruth render(const SceneSpec& spec, std::uint64_t seed = 0) {
  const int w = spec.width, h = spec.height;
  const Intrinsics& k = spec.intrinsics;
  GroundTruth gt{ColorImage(w, h), ColorImage(w, h), DepthMap(w, h), DepthMap(w, h),
                 FlowField(w, h), LabelMap(w, h, -1), Grid<std::uint8_t>(w, h, 0),
                 spec.planes, spec.motions};
  std::vector<long> owned(spec.planes.size(), 0);

  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const Vector2d x(u, v);
      const int p = detail::owner_at(spec, x);
      if (p < 0)
        throw InputError("scene regions do not cover pixel (" + std::to_string(u) + ", " +
                         std::to_string(v) + ")");
      const auto& ps = spec.planes[p];
      const auto& m = spec.motions[ps.motion];
      const std::string where = "plane " + std::to_string(p) + " at pixel (" +
                                std::to_string(u) + ", " + std::to_string(v) + ")";
      const auto x1 = try_backproject(k, x, ps.plane());
      if (!x1) throw InputError(where + " is not in front of the camera");
      const Vector3d x2 = m.rotation * *x1 + m.translation;
      if (!(x2.z() > 0.0)) throw InputError(where + " moves behind the camera");
      const Vector2d y = project(k, x2);
      // Differencing two projections keeps a motionless point's flow exactly 0.
      const Vector2d flow = y - project(k, *x1);
      gt.labels(u, v) = p;
      gt.depth(u, v) = static_cast<float>(x1->z());
      gt.depth_next(u, v) = static_cast<float>(x2.z());
      gt.flow.du(u, v) = static_cast<float>(flow.x());
      gt.flow.dv(u, v) = static_cast<float>(flow.y());
      gt.frame1(u, v) = detail::texture(spec, seed, p, x);
      ++owned[p];

      const detail::Hit hit = detail::visible_in_next(spec, y);
      if (hit.plane >= 0 && hit.plane != p && hit.z_next < x2.z() * (1.0 - 1e-9))
        gt.occluded(u, v) = 1;
    }
  for (std::size_t p = 0; p < owned.size(); ++p)
    if (owned[p] == 0) throw InputError("plane " + std::to_string(p) + " owns no pixels");

  const Rgb fill(0.5f, 0.5f, 0.5f);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const detail::Hit hit = detail::visible_in_next(spec, Vector2d(u, v));
      gt.frame2(u, v) = hit.plane >= 0 ? detail::texture(spec, seed, hit.plane, hit.source) : fill;
    }
  return gt;
}

/// Adds i.i.d. Gaussian noise to both flow components; invalid entries stay
/// invalid.
inline FlowField perturb(const FlowField& flow, double sigma_px, std::uint64_t seed) {
  if (!(sigma_px >= 0.0)) throw InputError("flow noise must be non-negative");
  FlowField out = flow;
  if (sigma_px == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma_px);
  for (int v = 0; v < out.height(); ++v)
    for (int u = 0; u < out.width(); ++u) {
      const double a = noise(rng), b = noise(rng);
      if (!out.valid(u, v)) continue;
      out.du(u, v) = static_cast<float>(out.du(u, v) + a);
      out.dv(u, v) = static_cast<float>(out.dv(u, v) + b);
    }
  return out;
}

/// Depth with occluded pixels set to NaN, the form written to disk so that
/// evaluation excludes them.
inline DepthMap evaluation_depth(const GroundTruth& gt) {
  DepthMap d = gt.depth;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (gt.occluded.data()[i]) d.data()[i] = std::numeric_limits<float>::quiet_NaN();
  return d;
}

/// frame1.png, frame2.png, labels.png, depth.pfm, flow.flo, intrinsics.json.
inline void write_ground_truth(const GroundTruth& gt, const Intrinsics& k,
                               const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
  write_png_rgb(gt.frame1, dir / "frame1.png");
  write_png_rgb(gt.frame2, dir / "frame2.png");
  write_png_labels(gt.labels, dir / "labels.png");
  write_pfm(evaluation_depth(gt), dir / "depth.pfm");
  write_flo(gt.flow, dir / "flow.flo");
  write_json(intrinsics_to_json(k), dir / "intrinsics.json");
}

}  // namespace sps
