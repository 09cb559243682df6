#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "votelab/gtdb.hpp"
#include "votelab/rng.hpp"
#include "votelab/scene.hpp"

namespace votelab {

/// Copy-paste parameters. rot_range is the half width in radians: object
/// headings are jittered by a draw from [-rot_range, rot_range].
struct PasteConfig {
  int n_objects_min = 1;
  int n_objects_max = 2;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double rot_range = 10.0 * M_PI / 180.0;
  int max_rejections = 20;
  bool remove_occluded = true;

  void validate() const;
};

/// Whole-scene augmentation: mirror across the xz-plane (y -> -y) first,
/// then rotate about z, then scale uniformly about the origin.
struct SceneTransform {
  bool flip = false;
  double rot_z = 0.0;
  double scale = 1.0;

  bool operator==(const SceneTransform& o) const = default;
};

Vec3 apply_scene_transform(const SceneTransform& t, const Vec3& p);
BoundingBox3D apply_scene_transform(const SceneTransform& t, const BoundingBox3D& box);
Scene apply_scene_transform(const SceneTransform& t, const Scene& scene);

/// One accepted paste: which database object, its drawn jitter and where it
/// landed. Enough to rebuild the paste without the rng.
struct PasteEntry {
  std::size_t object_index = 0;
  double scale = 1.0;
  double rot_z = 0.0;
  Vec3 position;

  bool operator==(const PasteEntry& o) const = default;
};

/// Replayable record of everything done to one scene. Feeding it back with
/// the same inputs reproduces the augmented scene bit-exactly.
struct TransformRecord {
  std::uint64_t scene_id = 0;
  bool remove_occluded = true;
  std::vector<PasteEntry> pastes;
  std::optional<SceneTransform> scene_transform;

  bool operator==(const TransformRecord& o) const = default;
};

void save_record(const TransformRecord& rec, const std::filesystem::path& path);
TransformRecord load_record(const std::filesystem::path& path);

/// Finds a collision-free position for obj scaled/rotated per t. Even
/// paste_index targets the x<0 half of the scene, odd the x>0 half; the
/// placed box must fit inside the scene's xy extents. Returns nullopt after
/// cfg.max_rejections failed candidates.
std::optional<Vec3> place_object(const Scene& scene, const GtObject& obj,
                                 const SimilarityTransform& t, int paste_index, Rng& rng,
                                 const PasteConfig& cfg);

/// Pastes k ~ uniform{n_min..n_max} database objects into the scene with
/// fresh scale/rotation jitter. Occluded scene points are removed first when
/// cfg.remove_occluded. The output carries `tag`.
std::pair<Scene, TransformRecord> copy_paste(const Scene& scene, const GtDatabase& db,
                                             const PasteConfig& cfg, Rng& rng, DomainTag tag);

/// Source objects into a target scene (intermediate domain).
std::pair<Scene, TransformRecord> cross_domain_cp(const Scene& target_scene,
                                                  const GtDatabase& source_db,
                                                  const PasteConfig& cfg, Rng& rng);

/// Own-domain objects into an own-domain scene; tag follows scene.tag
/// (source -> in_source, target -> in_target).
std::pair<Scene, TransformRecord> in_domain_cp(const Scene& scene, const GtDatabase& db,
                                               const PasteConfig& cfg, Rng& rng);

/// Rebuilds the augmented scene from a record without any rng.
Scene replay_paste(const Scene& scene, const GtDatabase& db, const TransformRecord& rec,
                   DomainTag tag);

}  // namespace votelab
