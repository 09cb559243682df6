#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "votelab/common.hpp"
#include "votelab/gtdb.hpp"
#include "votelab/rng.hpp"

using namespace votelab;

namespace {

Scene make_scene(std::uint64_t id) {
  Scene s;
  s.id = id;
  s.tag = DomainTag::source;
  // Object 0 (class 1): 8 points around (1, 1, 0.5) inside a unit box.
  BoundingBox3D b0;
  b0.center = {1.0, 1.0, 0.5};
  b0.size = {1.0, 1.0, 1.0};
  b0.class_id = 1;
  for (int i = 0; i < 8; ++i) {
    s.cloud.push_back({0.75 + 0.0625 * i, 1.0, 0.5});
  }
  s.boxes.push_back(b0);
  // Object 1 (class 2): only 3 points.
  BoundingBox3D b1;
  b1.center = {-1.0, -1.0, 0.25};
  b1.size = {0.5, 0.5, 0.5};
  b1.class_id = 2;
  for (int i = 0; i < 3; ++i) s.cloud.push_back({-1.0, -1.0 + 0.03 * i, 0.25});
  s.boxes.push_back(b1);
  // Clutter far away.
  s.cloud.push_back({5.0, 5.0, 5.0});
  return s;
}

std::filesystem::path temp_dir(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "votelab_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("build_database crops, filters, recenters") {
  const std::vector<Scene> scenes = {make_scene(3), make_scene(4)};

  GtDatabase db = build_database(scenes, {1, 2}, 5);
  // Class 2 objects hold 3 points < 5 and are dropped.
  REQUIRE(db.size() == 2);
  CHECK(db.class_count(1) == 2);
  CHECK(db.class_count(2) == 0);
  const GtObject& obj = db.objects()[0];
  CHECK(obj.source_scene_id == 3);
  CHECK(obj.box.center == Vec3{});
  CHECK(obj.box.class_id == 1);
  CHECK(obj.points.size() == 8);
  // Points were translated by -center (offsets chosen binary-exact).
  CHECK(obj.points[0] == Vec3{-0.25, 0.0, 0.0});

  GtDatabase db2 = build_database(scenes, {2}, 1);
  CHECK(db2.size() == 2);
  CHECK(db2.objects()[0].points.size() == 3);

  CHECK_THROWS_AS(build_database(scenes, {}, 5), Error);
  CHECK_THROWS_AS(build_database(scenes, {1}, 0), Error);
}

TEST_CASE("class filter ignores other labels") {
  const std::vector<Scene> scenes = {make_scene(0)};
  GtDatabase db = build_database(scenes, {1}, 1);
  CHECK(db.size() == 1);
  CHECK(db.by_class().count(2) == 0);
}

TEST_CASE("sampling determinism and bounds") {
  const std::vector<Scene> scenes = {make_scene(0), make_scene(1), make_scene(2)};
  GtDatabase db = build_database(scenes, {1, 2}, 1);
  REQUIRE(db.size() == 6);

  Rng a(99), b(99);
  const auto draw1 = sample_object_indices(db, 4, a);
  const auto draw2 = sample_object_indices(db, 4, b);
  CHECK(draw1 == draw2);
  CHECK(draw1.size() == 4);
  // Without replacement while n <= size: all distinct.
  std::set<std::size_t> unique(draw1.begin(), draw1.end());
  CHECK(unique.size() == 4);
  for (std::size_t i : draw1) CHECK(i < db.size());

  Rng c(7);
  const auto big = sample_object_indices(db, 20, c);
  CHECK(big.size() == 20);

  GtDatabase empty_db;
  Rng d(1);
  CHECK_THROWS_AS(sample_object_indices(empty_db, 1, d), Error);
  CHECK_THROWS_AS(sample_object_indices(db, 0, d), Error);
}

TEST_CASE("database round trip") {
  const auto dir = temp_dir("gtdb_roundtrip");
  const std::vector<Scene> scenes = {make_scene(0), make_scene(1)};
  GtDatabase db = build_database(scenes, {1, 2}, 1);
  save_database(db, dir);
  GtDatabase back = load_database(dir);
  REQUIRE(back.size() == db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    CHECK(back.objects()[i] == db.objects()[i]);
  }
  CHECK(back.by_class() == db.by_class());
}

TEST_CASE("load_database error paths") {
  const auto dir = temp_dir("gtdb_errors");
  CHECK_THROWS_AS(load_database(dir / "missing"), Error);

  // Corrupt index: class id that disagrees with the stored object.
  const std::vector<Scene> scenes = {make_scene(0)};
  GtDatabase db = build_database(scenes, {1}, 1);
  save_database(db, dir);
  {
    std::ofstream index(dir / "index.txt", std::ios::trunc);
    index << "2 obj_00000.bin\n";
  }
  CHECK_THROWS_AS(load_database(dir), Error);
}
