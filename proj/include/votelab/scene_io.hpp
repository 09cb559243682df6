#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "votelab/scene.hpp"

namespace votelab {

/// Binary scene file IO. The format stores doubles verbatim so a
/// save/load round trip is bit exact.
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

/// Saves scenes as <dir>/scene_<index:05>.bin and returns the paths.
std::vector<std::filesystem::path> save_scenes(const std::vector<Scene>& scenes,
                                               const std::filesystem::path& dir);

/// Loads every *.bin under dir in lexicographic order.
std::vector<Scene> load_scenes(const std::filesystem::path& dir);

}  // namespace votelab
