#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "votelab/eval.hpp"
#include "votelab/rng.hpp"
#include "votelab/scene.hpp"

namespace votelab {

enum class PrimitiveKind : std::uint8_t { box_shell = 0, cylinder = 1 };

/// One object category: a surface-sampled primitive with a per-axis size
/// distribution (mean +- spread, uniform) and a surface point density.
struct ClassSpec {
  int id = 0;
  std::string name;
  PrimitiveKind kind = PrimitiveKind::box_shell;
  Vec3 mean_size;
  double size_spread = 0.08;     // per-axis, absolute
  double point_density = 240.0;  // points per square meter of surface
  bool is_base = true;
};

/// Scene recipe for one domain. The shift knobs are what separate source
/// from target: size_multiplier scales every object dimension and
/// density_multiplier scales the context point counts.
struct DomainSpec {
  std::vector<ClassSpec> classes;
  // The floor hugs the objects and the clutter stays below their tops, so
  // object points are the scene's farthest-point extremes. Proposal slots are
  // spent by farthest-point sampling over votes, and votes start at seed
  // positions: geometry like this is what lets early proposals land on
  // objects at all instead of on empty floor corners.
  double floor_half_extent = 0.85;
  int floor_points = 120;
  int clutter_points = 24;
  double clutter_height = 0.45;
  int min_objects = 2;
  int max_objects = 3;
  double noise_sigma = 0.005;
  int min_points_per_object = 40;
  int max_points_per_object = 220;
  int max_placement_retries = 200;
  // A snug floor makes single-box retries insufficient: an unlucky early box
  // can wall off the rest, so the whole arrangement is redrawn.
  int max_layout_retries = 16;
  double size_multiplier = 1.0;
  double density_multiplier = 1.0;
  DomainTag tag = DomainTag::source;

  void validate() const;
};

/// 3 base classes (crate, slab, post) + 2 novel (drum, bench).
ClassPartition default_class_partition();

/// Partition induced by a spec's class list, sorted by id.
ClassPartition make_partition(const DomainSpec& spec);

/// Base-only objects, unit multipliers.
DomainSpec default_source_spec();

/// All five classes, larger objects (x1.25) and denser clutter (x1.5).
DomainSpec default_target_spec();

/// One scene: floor + clutter + 2..5 non-overlapping surface-sampled
/// objects, all positions drawn from rng. Boxes have heading 0 and rest on
/// the floor (center z = size.z / 2).
Scene synth_scene(const DomainSpec& spec, Rng& rng, std::uint64_t scene_id);

/// Deterministic corpus: scene i uses rng.fork(id_offset + i), so generation
/// is parallel per scene. Placement that keeps failing after the retry
/// budget raises a generation error.
std::vector<Scene> synth_domain(const DomainSpec& spec, std::size_t n_scenes, const Rng& rng,
                                std::uint64_t id_offset = 0);

}  // namespace votelab
