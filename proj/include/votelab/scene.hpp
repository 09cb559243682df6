#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "votelab/geometry.hpp"

namespace votelab {

enum class DomainTag : std::uint8_t {
  source = 0,
  target = 1,
  cross = 2,
  in_source = 3,
  in_target = 4,
};

const char* domain_tag_name(DomainTag tag);

/// A point cloud with its labeled boxes.
struct Scene {
  PointCloud cloud;
  std::vector<BoundingBox3D> boxes;
  DomainTag tag = DomainTag::source;
  std::uint64_t id = 0;

  bool operator==(const Scene& o) const = default;
};

}  // namespace votelab
