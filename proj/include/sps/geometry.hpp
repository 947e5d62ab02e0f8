#pragma once

// Pinhole camera, rigid motions, planes and plane-induced homographies.
//
// Conventions used throughout the library:
//  * A plane is {X : n^T X + d = 0} in the reference camera frame with
//    unit normal n and d > 0. Visible fronto-parallel planes therefore
//    have n_z < 0.
//  * A rigid motion maps reference-frame points to the next frame,
//    X' = R X + t, with t = scale * t_dir.
//  * The homography induced by (R, t, plane) is H = K (R - t n^T / d) K^-1.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "sps/errors.hpp"

namespace sps {

using Eigen::Matrix3d;
using Eigen::Matrix4d;
using Eigen::Vector2d;
using Eigen::Vector3d;

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  Intrinsics() = default;
  Intrinsics(double fx_, double fy_, double cx_, double cy_)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_) {
    if (!(fx > 0.0) || !(fy > 0.0))
      throw InputError("intrinsics: focal lengths must be positive");
  }

  Matrix3d matrix() const {
    Matrix3d k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }
  Matrix3d inverse() const {
    Matrix3d k;
    k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
    return k;
  }
  /// Viewing ray through a pixel, normalized so that its z component is 1.
  Vector3d ray(const Vector2d& px) const {
    return {(px.x() - cx) / fx, (px.y() - cy) / fy, 1.0};
  }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

/// Element of SO(3), stored as a matrix.
class Rotation {
 public:
  Rotation() : m_(Matrix3d::Identity()) {}

  /// Wraps an (already orthonormal) matrix; rejects anything further than
  /// 1e-9 from SO(3).
  static Rotation from_matrix(const Matrix3d& m) {
    const double orth = (m.transpose() * m - Matrix3d::Identity()).norm();
    if (!(orth < 1e-9) || std::abs(m.determinant() - 1.0) > 1e-9)
      throw NumericalError("matrix is not a rotation");
    return Rotation(m);
  }

  /// Nearest rotation in the Frobenius sense (SVD projection onto SO(3)).
  static Rotation nearest(const Matrix3d& m) {
    Eigen::JacobiSVD<Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Matrix3d d = Matrix3d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0)
      d(2, 2) = -1.0;
    return Rotation(svd.matrixU() * d * svd.matrixV().transpose());
  }

  static Rotation axis_angle(const Vector3d& axis, double angle) {
    const double len = axis.norm();
    if (len == 0.0 || angle == 0.0) return Rotation();
    return Rotation(Eigen::AngleAxisd(angle, axis / len).toRotationMatrix());
  }

  /// Rotation vector (axis * angle) parametrization.
  static Rotation exp(const Vector3d& w) { return axis_angle(w, w.norm()); }

  const Matrix3d& matrix() const { return m_; }
  Rotation inverse() const { return Rotation(m_.transpose()); }
  double angle() const;

  Vector3d operator*(const Vector3d& x) const { return m_ * x; }
  Rotation operator*(const Rotation& o) const { return nearest(m_ * o.m_); }

 private:
  explicit Rotation(const Matrix3d& m) : m_(m) {}
  Matrix3d m_;
};

/// Rotation angle of a^T b, computed from the chordal distance so that it
/// stays accurate for tiny angles.
inline double geodesic_distance(const Rotation& a, const Rotation& b) {
  const double chord = (a.matrix() - b.matrix()).norm() / (2.0 * std::sqrt(2.0));
  return 2.0 * std::asin(std::clamp(chord, 0.0, 1.0));
}

inline double Rotation::angle() const { return geodesic_distance(*this, Rotation()); }

/// Rigid motion with its translation magnitude factored out:
/// X' = R X + scale * t_dir. A zero t_dir marks a pure rotation.
struct RigidMotion {
  Rotation rotation;
  Vector3d t_dir = Vector3d::Zero();
  double scale = 1.0;

  bool pure_rotation() const { return t_dir.squaredNorm() == 0.0; }
  Vector3d translation() const { return scale * t_dir; }

  Matrix4d matrix() const {
    Matrix4d m = Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation.matrix();
    m.topRightCorner<3, 1>() = translation();
    return m;
  }

  /// Builds a motion from a full translation vector.
  static RigidMotion from_translation(const Rotation& r, const Vector3d& t) {
    const double len = t.norm();
    if (len == 0.0) return {r, Vector3d::Zero(), 1.0};
    return {r, t / len, len};
  }
};

inline Vector3d apply_motion(const RigidMotion& m, const Vector3d& x) {
  return m.rotation * x + m.scale * m.t_dir;
}

/// Frobenius norm of the difference of the homogeneous 4x4 matrices.
inline double motion_frobenius_distance(const RigidMotion& a,
                                        const RigidMotion& b) {
  const double rot = (a.rotation.matrix() - b.rotation.matrix()).squaredNorm();
  const double trans = (a.translation() - b.translation()).squaredNorm();
  return std::sqrt(rot + trans);
}

struct Plane {
  Vector3d normal{0.0, 0.0, -1.0};
  double depth = 1.0;

  Plane() = default;
  Plane(const Vector3d& n, double d) : normal(n), depth(d) {
    const double len = n.norm();
    if (!(len > 0.0)) throw InputError("plane: zero normal");
    normal /= len;
    if (!(d > 0.0)) throw InputError("plane: depth must be positive");
  }

  double signed_distance(const Vector3d& x) const {
    return normal.dot(x) + depth;
  }
  Plane scaled(double s) const { return Plane(normal, depth * s); }
};

inline Vector2d project(const Intrinsics& k, const Vector3d& x) {
  if (!(x.z() > 0.0)) throw CheiralityError("project: point behind camera");
  return {k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy};
}

/// Ray/plane intersection; the returned point projects back onto `px`.
inline Vector3d backproject(const Intrinsics& k, const Vector2d& px,
                            const Plane& plane) {
  const Vector3d ray = k.ray(px);
  const double denom = plane.normal.dot(ray);
  if (std::abs(denom) < 1e-12)
    throw DegenerateGeometryError("backproject: ray parallel to plane");
  const double s = -plane.depth / denom;
  if (!(s > 0.0)) throw CheiralityError("backproject: intersection behind camera");
  return s * ray;
}

/// Non-throwing variant for hot loops; returns nullopt where backproject
/// would throw.
inline std::optional<Vector3d> try_backproject(const Intrinsics& k,
                                               const Vector2d& px,
                                               const Plane& plane) {
  const Vector3d ray = k.ray(px);
  const double denom = plane.normal.dot(ray);
  if (std::abs(denom) < 1e-12) return std::nullopt;
  const double s = -plane.depth / denom;
  if (!(s > 0.0)) return std::nullopt;
  return s * ray;
}

/// Projective 3x3 transform, kept in a fixed gauge: Frobenius norm sqrt(3)
/// and positive determinant.
class Homography {
 public:
  Homography() : m_(Matrix3d::Identity()) {}

  static Homography normalized(const Matrix3d& m) {
    const double fro = m.norm();
    if (!(fro > 0.0) || !std::isfinite(fro))
      throw NumericalError("homography: zero or non-finite matrix");
    Matrix3d h = m * (std::sqrt(3.0) / fro);
    const double det = h.determinant();
    if (std::abs(det) < 1e-14) throw NumericalError("homography: singular");
    if (det < 0.0) h = -h;
    return Homography(h);
  }

  const Matrix3d& matrix() const { return m_; }

  Vector2d apply(const Vector2d& x) const {
    const Vector3d y = m_ * Vector3d(x.x(), x.y(), 1.0);
    return y.hnormalized();
  }


 private:
  explicit Homography(const Matrix3d& m) : m_(m) {}
  Matrix3d m_;
};

inline double frobenius_distance(const Homography& a, const Homography& b) {
  return (a.matrix() - b.matrix()).norm();
}

/// Euclidean (calibrated) homography R - t n^T / d.
inline Matrix3d euclidean_homography(const Matrix3d& r, const Vector3d& t,
                                     const Plane& plane) {
  if (!(plane.depth > 0.0)) throw InputError("homography: invalid plane");
  return r - t * plane.normal.transpose() / plane.depth;
}

inline Homography homography_from_motion_plane(const Intrinsics& k,
                                               const Rotation& r,
                                               const Vector3d& t,
                                               const Plane& plane) {
  return Homography::normalized(
      k.matrix() * euclidean_homography(r.matrix(), t, plane) * k.inverse());
}

/// One (R, t_dir, n, |t|/d) solution of a homography decomposition.
struct HomographyCandidate {
  Rotation rotation;
  Vector3d t_dir = Vector3d::Zero();  // zero for pure rotation
  Vector3d normal{0.0, 0.0, -1.0};
  double ratio = 0.0;                 // |t| / d
  bool pure_rotation = false;
  bool normal_undetermined = false;

  /// Motion/plane in the d = 1 gauge.
  Plane plane() const { return Plane(normal, 1.0); }
  Vector3d translation() const { return ratio * t_dir; }
};

namespace detail {

inline Vector3d unit_or_zero(const Vector3d& v) {
  const double len = v.norm();
  return len > 0.0 ? Vector3d(v / len) : Vector3d::Zero();
}

}  // namespace detail

/// Analytic SVD decomposition of a plane-induced homography into up to four
/// (R, t_dir, n, ratio) solutions. A pure rotation (all singular values of
/// K^-1 H K equal within 1e-6 relative) yields one candidate with a zero
/// translation and an undetermined normal.
inline std::vector<HomographyCandidate> decompose_homography(
    const Homography& h, const Intrinsics& k) {
  Matrix3d a = k.inverse() * h.matrix() * k.matrix();
  Eigen::JacobiSVD<Matrix3d> svd0(a);
  const Vector3d sv0 = svd0.singularValues();
  if (!(sv0(2) > 1e-12 * sv0(0)))
    throw NumericalError("decompose_homography: ill-conditioned homography");
  a /= sv0(1);
  if (a.determinant() < 0.0) a = -a;

  const double spread = (sv0(0) - sv0(2)) / sv0(1);
  if (spread < 1e-6) {
    HomographyCandidate c;
    c.rotation = Rotation::nearest(a);
    c.pure_rotation = true;
    c.normal_undetermined = true;
    return {c};
  }

  Eigen::JacobiSVD<Matrix3d> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3d v = svd.matrixV();
  if (v.determinant() < 0.0) v = -v;
  const double s1 = svd.singularValues()(0) * svd.singularValues()(0);
  const double s3 = svd.singularValues()(2) * svd.singularValues()(2);
  const Vector3d v1 = v.col(0), v2 = v.col(1), v3 = v.col(2);

  const double c1 = std::sqrt(std::max(0.0, 1.0 - s3));
  const double c3 = std::sqrt(std::max(0.0, s1 - 1.0));
  const double den = std::sqrt(s1 - s3);
  const Vector3d u1 = (c1 * v1 + c3 * v3) / den;
  const Vector3d u2 = (c1 * v1 - c3 * v3) / den;

  std::vector<HomographyCandidate> out;
  auto emit = [&](const Vector3d& u) {
    Matrix3d uu, ww;
    uu << v2, u, v2.cross(u);
    const Vector3d hv2 = a * v2, hu = a * u;
    ww << hv2, hu, hv2.cross(hu);
    const Rotation r = Rotation::nearest(ww * uu.transpose());
    // Decomposition form a = R + T N^T with the plane N^T X = 1; in the
    // library convention n = -N and t / d = T.
    const Vector3d big_n = v2.cross(u).normalized();
    const Vector3d big_t = (a - r.matrix()) * big_n;
    for (double sign : {1.0, -1.0}) {
      HomographyCandidate c;
      c.rotation = r;
      c.normal = -sign * big_n;
      c.ratio = big_t.norm();
      c.t_dir = detail::unit_or_zero(sign * big_t);
      out.push_back(c);
    }
  };
  emit(u1);
  emit(u2);
  return out;
}

/// Keeps the candidates for which every listed reference pixel lies on the
/// plane in front of both cameras.
inline std::vector<HomographyCandidate> filter_cheirality(
    std::vector<HomographyCandidate> candidates, const Intrinsics& k,
    std::span<const Vector2d> pixels) {
  std::erase_if(candidates, [&](const HomographyCandidate& c) {
    if (c.pure_rotation) return false;
    const Plane plane = c.plane();
    for (const Vector2d& px : pixels) {
      const auto x = try_backproject(k, px, plane);
      if (!x) return true;
      const Vector3d x2 = c.rotation * *x + c.translation();
      if (!(x2.z() > 0.0)) return true;
    }
    return false;
  });
  return candidates;
}

/// Decomposition followed by the cheirality filter over `pixels`.
inline std::vector<HomographyCandidate> decompose_homography(
    const Homography& h, const Intrinsics& k,
    std::span<const Vector2d> pixels) {
  return filter_cheirality(decompose_homography(h, k), k, pixels);
}

/// Angle between two unit vectors, accurate near zero.
inline double angle_between(const Vector3d& a, const Vector3d& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

}  // namespace sps
