#include "votelab/gtdb.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

#include "votelab/common.hpp"
#include "votelab/scene_io.hpp"

namespace votelab {

void GtDatabase::insert(GtObject obj) {
  by_class_[obj.box.class_id].push_back(objects_.size());
  objects_.push_back(std::move(obj));
}

std::size_t GtDatabase::class_count(int class_id) const {
  auto it = by_class_.find(class_id);
  return it == by_class_.end() ? 0 : it->second.size();
}

GtDatabase build_database(const std::vector<Scene>& scenes, const std::set<int>& classes,
                          int min_points) {
  if (classes.empty()) fail(ErrorKind::config, "build_database: empty class set");
  if (min_points < 1) fail(ErrorKind::config, "build_database: min_points must be >= 1");

  GtDatabase db;
  for (const Scene& scene : scenes) {
    for (const BoundingBox3D& box : scene.boxes) {
      if (!classes.contains(box.class_id)) continue;
      GtObject obj;
      for (std::size_t i : points_in_box(scene.cloud, box)) {
        obj.points.push_back(scene.cloud[i] - box.center);
      }
      if (obj.points.size() < static_cast<std::size_t>(min_points)) continue;
      obj.box = box;
      obj.box.center = Vec3{};
      obj.source_scene_id = scene.id;
      db.insert(std::move(obj));
    }
  }
  return db;
}

std::vector<std::size_t> sample_object_indices(const GtDatabase& db, std::size_t n, Rng& rng) {
  if (db.empty()) fail(ErrorKind::empty_database, "sample_objects: database is empty");
  if (n == 0) fail(ErrorKind::config, "sample_objects: n must be >= 1");

  std::vector<std::size_t> out;
  out.reserve(n);
  if (n <= db.size()) {
    std::vector<std::size_t> pool(db.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + rng.uniform_index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.push_back(rng.uniform_index(db.size()));
  }
  return out;
}

std::vector<GtObject> sample_objects(const GtDatabase& db, std::size_t n, Rng& rng) {
  std::vector<GtObject> out;
  out.reserve(n);
  for (std::size_t idx : sample_object_indices(db, n, rng)) out.push_back(db.objects()[idx]);
  return out;
}

void save_database(const GtDatabase& db, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.txt", std::ios::trunc);
  if (!index) fail(ErrorKind::io, "cannot write database index under " + dir.string());

  for (std::size_t i = 0; i < db.size(); ++i) {
    const GtObject& obj = db.objects()[i];
    char name[32];
    std::snprintf(name, sizeof(name), "obj_%05zu.bin", i);
    Scene carrier;
    carrier.cloud = obj.points;
    carrier.boxes = {obj.box};
    carrier.id = obj.source_scene_id;
    save_scene(carrier, dir / name);
    index << obj.box.class_id << ' ' << name << '\n';
  }
  index.flush();
  if (!index) fail(ErrorKind::io, "write failed for database index under " + dir.string());
}

GtDatabase load_database(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.txt");
  if (!index) fail(ErrorKind::io, "cannot open database index under " + dir.string());

  GtDatabase db;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    int class_id = 0;
    std::string name;
    if (!(row >> class_id >> name)) {
      fail(ErrorKind::corrupt_file, "bad database index line: " + line);
    }
    Scene carrier = load_scene(dir / name);
    if (carrier.boxes.size() != 1 || carrier.boxes[0].class_id != class_id) {
      fail(ErrorKind::corrupt_file, "database object disagrees with index: " + name);
    }
    GtObject obj;
    obj.points = std::move(carrier.cloud);
    obj.box = carrier.boxes[0];
    obj.source_scene_id = carrier.id;
    db.insert(std::move(obj));
  }
  return db;
}

}  // namespace votelab
