#pragma once

#include <stdexcept>
#include <string>

namespace votelab {

/// Error categories, also used to derive CLI exit codes.
enum class ErrorKind {
  config,
  io,
  corrupt_file,
  version_mismatch,
  invalid_transform,
  empty_database,
  insufficient_points,
  trace_mismatch,
  frozen_state,
  shape_mismatch,
  invalid_cache,
  empty_proposals,
  invalid_distribution,
  alignment,
  unknown_class,
  empty_corpus,
  batch,
  generation,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace votelab
