#include "votelab/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "votelab/common.hpp"

namespace votelab {
namespace {

using nlohmann::json;

// Removes the points inside `box` (heading-aware) from `cloud` in place and
// returns how many were dropped.
std::size_t remove_points_in_box(PointCloud& cloud, const BoundingBox3D& box) {
  const std::vector<std::size_t> hits = points_in_box(cloud, box);
  if (hits.empty()) return 0;
  PointCloud kept;
  kept.reserve(cloud.size() - hits.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (next < hits.size() && hits[next] == i) {
      ++next;
      continue;
    }
    kept.push_back(cloud[i]);
  }
  cloud = std::move(kept);
  return hits.size();
}

void append_paste(Scene& scene, const GtObject& obj, const PasteEntry& entry,
                  bool remove_occluded) {
  SimilarityTransform t{entry.scale, entry.rot_z, entry.position};
  auto [points, box] = apply_transform(obj.points, obj.box, t);
  if (remove_occluded) remove_points_in_box(scene.cloud, box);
  scene.cloud.insert(scene.cloud.end(), points.begin(), points.end());
  scene.boxes.push_back(box);
}

}  // namespace

void PasteConfig::validate() const {
  if (n_objects_min < 0 || n_objects_max < n_objects_min) {
    fail(ErrorKind::config, "paste config: need 0 <= n_objects_min <= n_objects_max");
  }
  if (!(scale_min > 0.0) || scale_max < scale_min) {
    fail(ErrorKind::config, "paste config: need 0 < scale_min <= scale_max");
  }
  if (rot_range < 0.0 || max_rejections < 1) {
    fail(ErrorKind::config, "paste config: rot_range >= 0 and max_rejections >= 1");
  }
}

Vec3 apply_scene_transform(const SceneTransform& t, const Vec3& p) {
  const double y0 = t.flip ? -p.y : p.y;
  const double c = std::cos(t.rot_z);
  const double s = std::sin(t.rot_z);
  return {t.scale * (c * p.x - s * y0), t.scale * (s * p.x + c * y0), t.scale * p.z};
}

BoundingBox3D apply_scene_transform(const SceneTransform& t, const BoundingBox3D& box) {
  BoundingBox3D out = box;
  out.center = apply_scene_transform(t, box.center);
  out.size = box.size * t.scale;
  const double h = t.flip ? -box.heading : box.heading;
  out.heading = normalize_heading(h + t.rot_z);
  return out;
}

Scene apply_scene_transform(const SceneTransform& t, const Scene& scene) {
  if (!(t.scale > 0.0) || !std::isfinite(t.scale)) {
    fail(ErrorKind::invalid_transform, "scene transform scale must be > 0");
  }
  Scene out = scene;
  for (Vec3& p : out.cloud) p = apply_scene_transform(t, p);
  for (BoundingBox3D& b : out.boxes) b = apply_scene_transform(t, b);
  return out;
}

void save_record(const TransformRecord& rec, const std::filesystem::path& path) {
  json j;
  j["scene_id"] = rec.scene_id;
  j["remove_occluded"] = rec.remove_occluded;
  j["pastes"] = json::array();
  for (const PasteEntry& e : rec.pastes) {
    j["pastes"].push_back({{"object_index", e.object_index},
                           {"scale", e.scale},
                           {"rot_z", e.rot_z},
                           {"position", {e.position.x, e.position.y, e.position.z}}});
  }
  if (rec.scene_transform) {
    j["scene_transform"] = {{"flip", rec.scene_transform->flip},
                            {"rot_z", rec.scene_transform->rot_z},
                            {"scale", rec.scene_transform->scale}};
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write transform record: " + path.string());
  out << j.dump(2) << '\n';
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

TransformRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open transform record: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::corrupt_file, "bad transform record " + path.string() + ": " + e.what());
  }
  try {
    TransformRecord rec;
    rec.scene_id = j.at("scene_id").get<std::uint64_t>();
    rec.remove_occluded = j.at("remove_occluded").get<bool>();
    for (const json& e : j.at("pastes")) {
      PasteEntry entry;
      entry.object_index = e.at("object_index").get<std::size_t>();
      entry.scale = e.at("scale").get<double>();
      entry.rot_z = e.at("rot_z").get<double>();
      const json& pos = e.at("position");
      entry.position = {pos.at(0).get<double>(), pos.at(1).get<double>(),
                        pos.at(2).get<double>()};
      rec.pastes.push_back(entry);
    }
    if (j.contains("scene_transform")) {
      const json& st = j.at("scene_transform");
      rec.scene_transform = SceneTransform{st.at("flip").get<bool>(),
                                           st.at("rot_z").get<double>(),
                                           st.at("scale").get<double>()};
    }
    return rec;
  } catch (const json::exception& e) {
    fail(ErrorKind::corrupt_file, "bad transform record " + path.string() + ": " + e.what());
  }
}

std::optional<Vec3> place_object(const Scene& scene, const GtObject& obj,
                                 const SimilarityTransform& t, int paste_index, Rng& rng,
                                 const PasteConfig& cfg) {
  cfg.validate();
  obj.box.validate();
  if (scene.cloud.empty()) {
    fail(ErrorKind::config, "place_object: scene has no points to define extents");
  }

  const Vec3 size = obj.box.size * t.scale;
  const double heading = normalize_heading(obj.box.heading + t.rotation_z);

  double x_min = scene.cloud[0].x, x_max = scene.cloud[0].x;
  double y_min = scene.cloud[0].y, y_max = scene.cloud[0].y;
  for (const Vec3& p : scene.cloud) {
    x_min = std::min(x_min, p.x);
    x_max = std::max(x_max, p.x);
    y_min = std::min(y_min, p.y);
    y_max = std::max(y_max, p.y);
  }

  // Axis-aligned footprint of the heading-rotated box.
  const double c = std::abs(std::cos(heading));
  const double s = std::abs(std::sin(heading));
  const double hx = 0.5 * (c * size.x + s * size.y);
  const double hy = 0.5 * (s * size.x + c * size.y);

  const bool left = paste_index % 2 == 0;
  double lo_x = x_min + hx;
  double hi_x = x_max - hx;
  if (left) {
    hi_x = std::min(hi_x, 0.0);
  } else {
    lo_x = std::max(lo_x, 0.0);
  }
  const double lo_y = y_min + hy;
  const double hi_y = y_max - hy;

  for (int attempt = 0; attempt < cfg.max_rejections; ++attempt) {
    if (lo_x > hi_x || lo_y > hi_y) continue;  // no room in this half
    BoundingBox3D candidate;
    candidate.center = {rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y), 0.5 * size.z};
    candidate.size = size;
    candidate.heading = heading;
    candidate.class_id = obj.box.class_id;
    if (left ? candidate.center.x >= 0.0 : candidate.center.x <= 0.0) continue;
    bool collides = false;
    for (const BoundingBox3D& existing : scene.boxes) {
      if (box_iou(candidate, existing) != 0.0) {
        collides = true;
        break;
      }
    }
    if (!collides) return candidate.center;
  }
  return std::nullopt;
}

std::pair<Scene, TransformRecord> copy_paste(const Scene& scene, const GtDatabase& db,
                                             const PasteConfig& cfg, Rng& rng, DomainTag tag) {
  cfg.validate();
  if (db.empty()) fail(ErrorKind::empty_database, "copy_paste: database is empty");

  Scene out = scene;
  out.tag = tag;
  TransformRecord rec;
  rec.scene_id = scene.id;
  rec.remove_occluded = cfg.remove_occluded;

  const int k = rng.uniform_int(cfg.n_objects_min, cfg.n_objects_max);
  if (k == 0) return {std::move(out), std::move(rec)};
  const std::vector<std::size_t> picks =
      sample_object_indices(db, static_cast<std::size_t>(k), rng);

  for (int i = 0; i < k; ++i) {
    const GtObject& obj = db.objects()[picks[static_cast<std::size_t>(i)]];
    PasteEntry entry;
    entry.object_index = picks[static_cast<std::size_t>(i)];
    entry.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    entry.rot_z = rng.uniform(-cfg.rot_range, cfg.rot_range);
    SimilarityTransform t{entry.scale, entry.rot_z, {}};
    // Halves alternate over accepted pastes, so the record alone determines
    // which half each entry was assigned.
    const int paste_index = static_cast<int>(rec.pastes.size());
    const std::optional<Vec3> pos = place_object(out, obj, t, paste_index, rng, cfg);
    if (!pos) continue;  // crowded scene: skip this object
    entry.position = *pos;
    append_paste(out, obj, entry, cfg.remove_occluded);
    rec.pastes.push_back(entry);
  }
  return {std::move(out), std::move(rec)};
}

std::pair<Scene, TransformRecord> cross_domain_cp(const Scene& target_scene,
                                                  const GtDatabase& source_db,
                                                  const PasteConfig& cfg, Rng& rng) {
  return copy_paste(target_scene, source_db, cfg, rng, DomainTag::cross);
}

std::pair<Scene, TransformRecord> in_domain_cp(const Scene& scene, const GtDatabase& db,
                                               const PasteConfig& cfg, Rng& rng) {
  DomainTag tag;
  switch (scene.tag) {
    case DomainTag::source: tag = DomainTag::in_source; break;
    case DomainTag::target: tag = DomainTag::in_target; break;
    default:
      fail(ErrorKind::config, "in_domain_cp: scene must be tagged source or target");
  }
  return copy_paste(scene, db, cfg, rng, tag);
}

Scene replay_paste(const Scene& scene, const GtDatabase& db, const TransformRecord& rec,
                   DomainTag tag) {
  Scene out = scene;
  out.tag = tag;
  for (const PasteEntry& entry : rec.pastes) {
    if (entry.object_index >= db.size()) {
      fail(ErrorKind::invalid_transform, "replay_paste: object index out of range");
    }
    append_paste(out, db.objects()[entry.object_index], entry, rec.remove_occluded);
  }
  if (rec.scene_transform) out = apply_scene_transform(*rec.scene_transform, out);
  return out;
}

}  // namespace votelab
