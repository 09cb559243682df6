#include "votelab/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "votelab/common.hpp"

namespace votelab {

void BoundingBox3D::validate() const {
  if (!(size.x > 0.0) || !(size.y > 0.0) || !(size.z > 0.0) ||
      !std::isfinite(size.x) || !std::isfinite(size.y) ||
      !std::isfinite(size.z)) {
    fail(ErrorKind::config, "bounding box size must be strictly positive");
  }
  if (!std::isfinite(heading) || heading <= -M_PI || heading > M_PI) {
    fail(ErrorKind::config, "bounding box heading must lie in (-pi, pi]");
  }
  if (class_id < 0) {
    fail(ErrorKind::config, "bounding box class_id must be >= 0");
  }
}

double normalize_heading(double h) {
  double r = std::remainder(h, 2.0 * M_PI);
  if (r <= -M_PI) r += 2.0 * M_PI;
  return r;
}

std::pair<PointCloud, BoundingBox3D> apply_transform(
    const PointCloud& pc, const BoundingBox3D& box,
    const SimilarityTransform& t) {
  if (!(t.scale > 0.0) || !std::isfinite(t.scale)) {
    fail(ErrorKind::invalid_transform, "transform scale must be > 0");
  }

  const bool unit_scale = t.scale == 1.0;
  const bool no_rot = t.rotation_z == 0.0;
  const bool no_shift = t.translation == Vec3{};

  BoundingBox3D out_box = box;
  out_box.size = box.size * t.scale;
  if (!no_rot) out_box.heading = normalize_heading(box.heading + t.rotation_z);
  if (!no_shift) out_box.center = box.center + t.translation;

  PointCloud out;
  out.reserve(pc.size());
  if (unit_scale && no_rot) {
    // Identity on the local frame: copy (optionally shifted) so the
    // identity transform is bit-exact.
    for (const Vec3& p : pc) out.push_back(no_shift ? p : p + t.translation);
    return {std::move(out), out_box};
  }

  const double c = std::cos(t.rotation_z);
  const double s = std::sin(t.rotation_z);
  for (const Vec3& p : pc) {
    Vec3 d = p - box.center;
    Vec3 r{t.scale * (c * d.x - s * d.y), t.scale * (s * d.x + c * d.y),
           t.scale * d.z};
    out.push_back(out_box.center + r);
  }
  return {std::move(out), out_box};
}

std::vector<std::size_t> points_in_box(const PointCloud& pc,
                                       const BoundingBox3D& box) {
  box.validate();
  std::vector<std::size_t> idx;
  const double c = std::cos(box.heading);
  const double s = std::sin(box.heading);
  const double hx = 0.5 * box.size.x;
  const double hy = 0.5 * box.size.y;
  const double hz = 0.5 * box.size.z;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    Vec3 d = pc[i] - box.center;
    // Rotate by -heading into the box frame.
    double u = c * d.x + s * d.y;
    double v = -s * d.x + c * d.y;
    if (std::abs(u) <= hx && std::abs(v) <= hy && std::abs(d.z) <= hz) {
      idx.push_back(i);
    }
  }
  return idx;
}

double box_iou(const BoundingBox3D& a, const BoundingBox3D& b) {
  if (a == b) return 1.0;
  double inter = 1.0;
  const double amin[3] = {a.center.x - 0.5 * a.size.x,
                          a.center.y - 0.5 * a.size.y,
                          a.center.z - 0.5 * a.size.z};
  const double amax[3] = {a.center.x + 0.5 * a.size.x,
                          a.center.y + 0.5 * a.size.y,
                          a.center.z + 0.5 * a.size.z};
  const double bmin[3] = {b.center.x - 0.5 * b.size.x,
                          b.center.y - 0.5 * b.size.y,
                          b.center.z - 0.5 * b.size.z};
  const double bmax[3] = {b.center.x + 0.5 * b.size.x,
                          b.center.y + 0.5 * b.size.y,
                          b.center.z + 0.5 * b.size.z};
  for (int k = 0; k < 3; ++k) {
    double ov = std::min(amax[k], bmax[k]) - std::max(amin[k], bmin[k]);
    if (ov <= 0.0) return 0.0;
    inter *= ov;
  }
  double uni = a.volume() + b.volume() - inter;
  return inter / uni;
}

double center_distance_sq(const BoundingBox3D& a, const BoundingBox3D& b) {
  return (a.center - b.center).norm_sq();
}

}  // namespace votelab
