#include "votelab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <thread>

#include "votelab/common.hpp"
#include "votelab/geometry.hpp"

namespace votelab {
namespace {

double box_shell_area(const Vec3& s) {
  return 2.0 * (s.x * s.y + s.y * s.z + s.z * s.x);
}

// Lateral surface via Ramanujan's ellipse-perimeter approximation, plus caps.
double cylinder_area(const Vec3& s) {
  const double a = s.x / 2.0, b = s.y / 2.0;
  const double perimeter = M_PI * (3.0 * (a + b) - std::sqrt((3.0 * a + b) * (a + 3.0 * b)));
  return perimeter * s.z + 2.0 * M_PI * a * b;
}

// Uniform point on the surface of an axis-aligned box shell centered at the
// origin; faces weighted by area.
Vec3 sample_box_shell(const Vec3& s, Rng& rng) {
  const double axy = s.x * s.y, ayz = s.y * s.z, azx = s.z * s.x;
  const double pick = rng.uniform(0.0, 2.0 * (axy + ayz + azx));
  const double u = rng.uniform(-0.5, 0.5), v = rng.uniform(-0.5, 0.5);
  if (pick < 2.0 * axy) {
    const double sign = pick < axy ? -0.5 : 0.5;
    return {u * s.x, v * s.y, sign * s.z};
  }
  if (pick < 2.0 * axy + 2.0 * ayz) {
    const double sign = pick < 2.0 * axy + ayz ? -0.5 : 0.5;
    return {sign * s.x, u * s.y, v * s.z};
  }
  const double sign = pick < 2.0 * axy + 2.0 * ayz + azx ? -0.5 : 0.5;
  return {u * s.x, sign * s.y, v * s.z};
}

// Uniform-ish point on an elliptic cylinder (unit-circle sample scaled per
// axis; the mild density distortion is irrelevant at this scale).
Vec3 sample_cylinder(const Vec3& s, Rng& rng) {
  const double a = s.x / 2.0, b = s.y / 2.0;
  const double lateral = cylinder_area(s) - 2.0 * M_PI * a * b;
  const double caps = 2.0 * M_PI * a * b;
  const double theta = rng.uniform(0.0, 2.0 * M_PI);
  if (rng.uniform(0.0, lateral + caps) < lateral) {
    return {a * std::cos(theta), b * std::sin(theta), rng.uniform(-0.5, 0.5) * s.z};
  }
  const double rho = std::sqrt(rng.uniform());
  const double z = rng.bernoulli(0.5) ? 0.5 * s.z : -0.5 * s.z;
  return {a * rho * std::cos(theta), b * rho * std::sin(theta), z};
}

}  // namespace

void DomainSpec::validate() const {
  if (classes.empty()) fail(ErrorKind::config, "domain spec: no classes");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const ClassSpec& c = classes[i];
    if (c.id < 0) fail(ErrorKind::config, "domain spec: negative class id");
    if (c.name.empty()) fail(ErrorKind::config, "domain spec: empty class name");
    if (!(c.mean_size.x > c.size_spread && c.mean_size.y > c.size_spread &&
          c.mean_size.z > c.size_spread) ||
        c.size_spread < 0.0) {
      fail(ErrorKind::config, "domain spec: size distribution not positive");
    }
    if (!(c.point_density > 0.0)) fail(ErrorKind::config, "domain spec: bad point density");
    for (std::size_t j = i + 1; j < classes.size(); ++j) {
      if (classes[j].id == c.id) fail(ErrorKind::config, "domain spec: duplicate class id");
    }
  }
  if (!(floor_half_extent > 0.0) || floor_points < 0 || clutter_points < 0 ||
      !(clutter_height > 0.0)) {
    fail(ErrorKind::config, "domain spec: bad context parameters");
  }
  if (min_objects < 1 || max_objects < min_objects) {
    fail(ErrorKind::config, "domain spec: bad object count range");
  }
  if (noise_sigma < 0.0 || min_points_per_object < 1 ||
      max_points_per_object < min_points_per_object || max_placement_retries < 1 ||
      max_layout_retries < 1) {
    fail(ErrorKind::config, "domain spec: bad sampling parameters");
  }
  if (!(size_multiplier > 0.0) || !(density_multiplier > 0.0)) {
    fail(ErrorKind::config, "domain spec: multipliers must be positive");
  }
}

ClassPartition default_class_partition() {
  ClassPartition p;
  p.classes = {{0, "crate", true}, {1, "slab", true}, {2, "post", true},
               {3, "drum", false}, {4, "bench", false}};
  return p;
}

ClassPartition make_partition(const DomainSpec& spec) {
  ClassPartition p;
  for (const ClassSpec& c : spec.classes) p.classes.push_back({c.id, c.name, c.is_base});
  std::sort(p.classes.begin(), p.classes.end(),
            [](const ClassInfo& a, const ClassInfo& b) { return a.id < b.id; });
  p.validate();
  return p;
}

namespace {

std::vector<ClassSpec> full_class_list() {
  // No dimension is small relative to the 0.25-IoU matching bar: a detector
  // scoring s-sized boxes tolerates center error ~0.25*s per axis, so thin
  // objects would demand centimeter-level regression this toy cannot reach.
  return {
      {0, "crate", PrimitiveKind::box_shell, {0.50, 0.50, 0.42}, 0.08, 240.0, true},
      {1, "slab", PrimitiveKind::box_shell, {0.62, 0.48, 0.26}, 0.08, 240.0, true},
      {2, "post", PrimitiveKind::cylinder, {0.26, 0.26, 0.60}, 0.05, 320.0, true},
      {3, "drum", PrimitiveKind::cylinder, {0.36, 0.36, 0.34}, 0.08, 280.0, false},
      {4, "bench", PrimitiveKind::box_shell, {0.72, 0.30, 0.28}, 0.08, 240.0, false},
  };
}

}  // namespace

DomainSpec default_source_spec() {
  DomainSpec spec;
  for (const ClassSpec& c : full_class_list()) {
    if (c.is_base) spec.classes.push_back(c);
  }
  spec.tag = DomainTag::source;
  return spec;
}

DomainSpec default_target_spec() {
  DomainSpec spec;
  spec.classes = full_class_list();
  spec.size_multiplier = 1.25;
  spec.density_multiplier = 1.5;
  spec.tag = DomainTag::target;
  return spec;
}

Scene synth_scene(const DomainSpec& spec, Rng& rng, std::uint64_t scene_id) {
  spec.validate();
  Scene scene;
  scene.id = scene_id;
  scene.tag = spec.tag;

  const double h = spec.floor_half_extent;
  const int n_floor =
      static_cast<int>(std::lround(spec.floor_points * spec.density_multiplier));
  const int n_clutter =
      static_cast<int>(std::lround(spec.clutter_points * spec.density_multiplier));
  for (int i = 0; i < n_floor; ++i) {
    scene.cloud.push_back({rng.uniform(-h, h), rng.uniform(-h, h),
                           std::abs(rng.normal(0.0, spec.noise_sigma))});
  }
  for (int i = 0; i < n_clutter; ++i) {
    scene.cloud.push_back(
        {rng.uniform(-h, h), rng.uniform(-h, h), rng.uniform(0.0, spec.clutter_height)});
  }

  // All boxes are laid out before any surface sampling: on a snug floor an
  // unlucky early box can wall off the rest, so an exhausted arrangement is
  // redrawn wholesale instead of aborting the scene.
  const int n_objects = rng.uniform_int(spec.min_objects, spec.max_objects);
  std::vector<const ClassSpec*> layout_cls;
  bool laid_out = false;
  for (int attempt = 0; attempt < spec.max_layout_retries && !laid_out; ++attempt) {
    scene.boxes.clear();
    layout_cls.clear();
    laid_out = true;
    for (int obj = 0; obj < n_objects; ++obj) {
      const ClassSpec& cls = spec.classes[rng.uniform_index(spec.classes.size())];
      Vec3 size{(cls.mean_size.x + rng.uniform(-cls.size_spread, cls.size_spread)),
                (cls.mean_size.y + rng.uniform(-cls.size_spread, cls.size_spread)),
                (cls.mean_size.z + rng.uniform(-cls.size_spread, cls.size_spread))};
      size = size * spec.size_multiplier;
      if (size.x >= 2.0 * h || size.y >= 2.0 * h) {
        fail(ErrorKind::generation, "synth_scene: object larger than the floor");
      }

      BoundingBox3D box;
      box.size = size;
      box.heading = 0.0;
      box.class_id = cls.id;
      bool placed = false;
      for (int t = 0; t < spec.max_placement_retries && !placed; ++t) {
        box.center = {rng.uniform(-h + size.x / 2.0, h - size.x / 2.0),
                      rng.uniform(-h + size.y / 2.0, h - size.y / 2.0), size.z / 2.0};
        placed = std::all_of(scene.boxes.begin(), scene.boxes.end(),
                             [&](const BoundingBox3D& other) { return box_iou(box, other) == 0.0; });
      }
      if (!placed) {
        laid_out = false;
        break;
      }
      scene.boxes.push_back(box);
      layout_cls.push_back(&cls);
    }
  }
  if (!laid_out) {
    fail(ErrorKind::generation, "synth_scene: placement failed after retry budget");
  }

  for (std::size_t obj = 0; obj < scene.boxes.size(); ++obj) {
    const ClassSpec& cls = *layout_cls[obj];
    const BoundingBox3D& box = scene.boxes[obj];
    const double area = cls.kind == PrimitiveKind::box_shell ? box_shell_area(box.size)
                                                             : cylinder_area(box.size);
    const int n_points = std::clamp(static_cast<int>(std::lround(cls.point_density * area)),
                                    spec.min_points_per_object, spec.max_points_per_object);
    for (int i = 0; i < n_points; ++i) {
      Vec3 p = cls.kind == PrimitiveKind::box_shell ? sample_box_shell(box.size, rng)
                                                    : sample_cylinder(box.size, rng);
      p += Vec3{rng.normal(0.0, spec.noise_sigma), rng.normal(0.0, spec.noise_sigma),
                rng.normal(0.0, spec.noise_sigma)};
      scene.cloud.push_back(p + box.center);
    }
  }
  return scene;
}

std::vector<Scene> synth_domain(const DomainSpec& spec, std::size_t n_scenes, const Rng& rng,
                                std::uint64_t id_offset) {
  spec.validate();
  std::vector<Scene> scenes(n_scenes);
  if (n_scenes == 0) return scenes;

  const std::size_t workers =
      std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), n_scenes);
  std::vector<std::future<void>> futures;
  futures.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    futures.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < n_scenes; i += workers) {
        const std::uint64_t id = id_offset + i;
        Rng srng = rng.fork(id);
        scenes[i] = synth_scene(spec, srng, id);
      }
    }));
  }
  for (auto& f : futures) f.get();
  return scenes;
}

}  // namespace votelab
