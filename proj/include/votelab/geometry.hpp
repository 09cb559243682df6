#pragma once

#include <cstddef>
#include <vector>

namespace votelab {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  bool operator==(const Vec3& o) const = default;

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm_sq() const { return dot(*this); }
};

/// Ordered point sequence; one cloud per scene or object crop.
using PointCloud = std::vector<Vec3>;

/// Oriented 3D box: center, full size per axis, heading about the vertical
/// (z) axis in (-pi, pi], and a class label.
struct BoundingBox3D {
  Vec3 center;
  Vec3 size{1.0, 1.0, 1.0};
  double heading = 0.0;
  int class_id = 0;

  bool operator==(const BoundingBox3D& o) const = default;

  double volume() const { return size.x * size.y * size.z; }
  void validate() const;  // throws ErrorKind::config on bad size/heading
};

/// Uniform scale + rotation about z + translation, applied about a box
/// center (see apply_transform).
struct SimilarityTransform {
  double scale = 1.0;
  double rotation_z = 0.0;
  Vec3 translation;

  SimilarityTransform inverse() const {
    return {1.0 / scale, -rotation_z,
            {-translation.x, -translation.y, -translation.z}};
  }
};

/// Wrap an angle into (-pi, pi].
double normalize_heading(double h);

/// Transform an object crop: points are scaled/rotated about the box center
/// and then translated together with the box. Point count and point-in-box
/// membership are preserved. The identity transform returns its inputs
/// bit-exactly. Throws ErrorKind::invalid_transform on scale <= 0.
std::pair<PointCloud, BoundingBox3D> apply_transform(
    const PointCloud& pc, const BoundingBox3D& box,
    const SimilarityTransform& t);

/// Indices of points inside the box, expressed in the box's heading-aligned
/// frame; faces are inclusive.
std::vector<std::size_t> points_in_box(const PointCloud& pc,
                                       const BoundingBox3D& box);

/// Intersection-over-union of the two boxes with heading forced to zero
/// (axis-aligned). Exactly 1 for identical boxes, 0 for disjoint ones.
double box_iou(const BoundingBox3D& a, const BoundingBox3D& b);

/// Squared Euclidean distance between box centers.
double center_distance_sq(const BoundingBox3D& a, const BoundingBox3D& b);

}  // namespace votelab
