#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "votelab/rng.hpp"
#include "votelab/scene.hpp"

namespace votelab {

/// An object crop extracted from a labeled scene. Points are translated so
/// the box center sits at the origin; size, heading and class are preserved.
struct GtObject {
  PointCloud points;
  BoundingBox3D box;
  std::uint64_t source_scene_id = 0;

  bool operator==(const GtObject& o) const = default;
};

/// Immutable collection of crops grouped per class. Insertion order (scene
/// order, then box order) is preserved so builds are deterministic.
class GtDatabase {
 public:
  void insert(GtObject obj);

  const std::vector<GtObject>& objects() const { return objects_; }
  const std::map<int, std::vector<std::size_t>>& by_class() const { return by_class_; }
  std::size_t size() const { return objects_.size(); }
  bool empty() const { return objects_.empty(); }
  std::size_t class_count(int class_id) const;

 private:
  std::vector<GtObject> objects_;
  std::map<int, std::vector<std::size_t>> by_class_;
};

/// Crops every box whose class is in `classes` and whose crop holds at least
/// `min_points` points. Boxes below the floor are skipped silently.
GtDatabase build_database(const std::vector<Scene>& scenes, const std::set<int>& classes,
                          int min_points = 5);

/// Draws n objects uniformly over the whole database: without replacement
/// within one call while n <= size, with replacement otherwise.
std::vector<std::size_t> sample_object_indices(const GtDatabase& db, std::size_t n, Rng& rng);
std::vector<GtObject> sample_objects(const GtDatabase& db, std::size_t n, Rng& rng);

/// Persists one scene file per object plus an index.txt of
/// "<class_id> <filename>" lines in insertion order.
void save_database(const GtDatabase& db, const std::filesystem::path& dir);
GtDatabase load_database(const std::filesystem::path& dir);

}  // namespace votelab
