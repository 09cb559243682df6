#include <cstring>
#include <fstream>

#include "votelab/common.hpp"
#include "votelab/detector.hpp"

namespace votelab {
namespace {

constexpr char kMagic[4] = {'V', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (static_cast<std::size_t>(in.gcount()) != sizeof(T)) {
    fail(ErrorKind::corrupt_file, "truncated checkpoint: " + path.string());
  }
  return v;
}

void write_vec(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_vec(std::istream& in, std::vector<double>& v, const std::filesystem::path& path) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != v.size() * sizeof(double)) {
    fail(ErrorKind::corrupt_file, "truncated checkpoint: " + path.string());
  }
}

// Rebuilds zeroed tensors with the shapes implied by the config so the
// reader can fill them in declared order.
DetectorState make_empty_state(const DetectorConfig& cfg) {
  Rng rng(0);
  DetectorState s = init_detector(cfg, rng);
  for_each_tensor(s.params, [](std::vector<double>& t) { std::fill(t.begin(), t.end(), 0.0); });
  return s;
}

}  // namespace

void save_checkpoint(const DetectorState& state, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open for writing: " + path.string());

  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  const DetectorConfig& c = state.config;
  write_pod(out, static_cast<std::int32_t>(c.num_seeds));
  write_pod(out, static_cast<std::int32_t>(c.knn));
  write_pod(out, static_cast<std::int32_t>(c.hidden));
  write_pod(out, static_cast<std::int32_t>(c.num_proposals));
  write_pod(out, static_cast<std::int32_t>(c.num_classes));
  write_pod(out, c.radius);
  write_pod(out, c.bn_momentum);
  write_pod(out, c.bn_eps);
  write_pod(out, static_cast<std::uint8_t>(state.frozen ? 1 : 0));

  for_each_tensor(state.params, [&](const std::vector<double>& t) { write_vec(out, t); });
  for_each_bn(state.params, [&](const BatchNorm& bn) {
    write_vec(out, bn.running_mean);
    write_vec(out, bn.running_var);
  });
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

DetectorState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open for reading: " + path.string());

  char magic[4];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::corrupt_file, "bad magic in checkpoint: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kVersion) {
    fail(ErrorKind::version_mismatch,
         "checkpoint version " + std::to_string(version) + " unsupported: " + path.string());
  }

  DetectorConfig cfg;
  cfg.num_seeds = read_pod<std::int32_t>(in, path);
  cfg.knn = read_pod<std::int32_t>(in, path);
  cfg.hidden = read_pod<std::int32_t>(in, path);
  cfg.num_proposals = read_pod<std::int32_t>(in, path);
  cfg.num_classes = read_pod<std::int32_t>(in, path);
  cfg.radius = read_pod<double>(in, path);
  cfg.bn_momentum = read_pod<double>(in, path);
  cfg.bn_eps = read_pod<double>(in, path);
  cfg.validate();
  const auto frozen = read_pod<std::uint8_t>(in, path);

  DetectorState state = make_empty_state(cfg);
  state.frozen = frozen != 0;
  for_each_tensor(state.params, [&](std::vector<double>& t) { read_vec(in, t, path); });
  for_each_bn(state.params, [&](BatchNorm& bn) {
    read_vec(in, bn.running_mean, path);
    read_vec(in, bn.running_var, path);
  });
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0) {
    fail(ErrorKind::corrupt_file, "trailing bytes in checkpoint: " + path.string());
  }
  return state;
}

}  // namespace votelab
