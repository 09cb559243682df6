#include "votelab/scene_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "votelab/common.hpp"

namespace votelab {
namespace {

constexpr char kMagic[4] = {'V', 'L', 'S', 'C'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  write_bytes(out, &v, sizeof(T));
}

void read_bytes(std::istream& in, void* data, std::size_t n, const std::filesystem::path& path) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    fail(ErrorKind::corrupt_file, "truncated scene file: " + path.string());
  }
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T v{};
  read_bytes(in, &v, sizeof(T), path);
  return v;
}

}  // namespace

const char* domain_tag_name(DomainTag tag) {
  switch (tag) {
    case DomainTag::source: return "source";
    case DomainTag::target: return "target";
    case DomainTag::cross: return "cross";
    case DomainTag::in_source: return "in_source";
    case DomainTag::in_target: return "in_target";
  }
  return "unknown";
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open for writing: " + path.string());

  write_bytes(out, kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  write_pod(out, scene.id);
  write_pod(out, static_cast<std::uint8_t>(scene.tag));
  write_pod(out, static_cast<std::uint64_t>(scene.cloud.size()));
  write_pod(out, static_cast<std::uint64_t>(scene.boxes.size()));
  for (const Vec3& p : scene.cloud) {
    write_pod(out, p.x);
    write_pod(out, p.y);
    write_pod(out, p.z);
  }
  for (const BoundingBox3D& b : scene.boxes) {
    write_pod(out, b.center.x);
    write_pod(out, b.center.y);
    write_pod(out, b.center.z);
    write_pod(out, b.size.x);
    write_pod(out, b.size.y);
    write_pod(out, b.size.z);
    write_pod(out, b.heading);
    write_pod(out, static_cast<std::int32_t>(b.class_id));
  }
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open for reading: " + path.string());

  char magic[4];
  read_bytes(in, magic, sizeof(magic), path);
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::corrupt_file, "bad magic in scene file: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kVersion) {
    fail(ErrorKind::version_mismatch,
         "scene file version " + std::to_string(version) + " unsupported: " + path.string());
  }

  Scene scene;
  scene.id = read_pod<std::uint64_t>(in, path);
  const auto tag = read_pod<std::uint8_t>(in, path);
  if (tag > static_cast<std::uint8_t>(DomainTag::in_target)) {
    fail(ErrorKind::corrupt_file, "bad domain tag in scene file: " + path.string());
  }
  scene.tag = static_cast<DomainTag>(tag);
  const auto n_points = read_pod<std::uint64_t>(in, path);
  const auto n_boxes = read_pod<std::uint64_t>(in, path);

  scene.cloud.resize(n_points);
  for (Vec3& p : scene.cloud) {
    p.x = read_pod<double>(in, path);
    p.y = read_pod<double>(in, path);
    p.z = read_pod<double>(in, path);
  }
  scene.boxes.resize(n_boxes);
  for (BoundingBox3D& b : scene.boxes) {
    b.center.x = read_pod<double>(in, path);
    b.center.y = read_pod<double>(in, path);
    b.center.z = read_pod<double>(in, path);
    b.size.x = read_pod<double>(in, path);
    b.size.y = read_pod<double>(in, path);
    b.size.z = read_pod<double>(in, path);
    b.heading = read_pod<double>(in, path);
    b.class_id = static_cast<int>(read_pod<std::int32_t>(in, path));
  }
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0) {
    fail(ErrorKind::corrupt_file, "trailing bytes in scene file: " + path.string());
  }
  return scene;
}

std::vector<std::filesystem::path> save_scenes(const std::vector<Scene>& scenes,
                                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  paths.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05zu.bin", i);
    paths.push_back(dir / name);
    save_scene(scenes[i], paths.back());
  }
  return paths;
}

std::vector<Scene> load_scenes(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    fail(ErrorKind::io, "not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> paths;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".bin") {
      paths.push_back(entry.path());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<Scene> scenes;
  scenes.reserve(paths.size());
  for (const auto& p : paths) scenes.push_back(load_scene(p));
  return scenes;
}

}  // namespace votelab
