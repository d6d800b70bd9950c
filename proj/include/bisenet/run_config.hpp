#pragma once

// Flat key=value run configuration with '#' comments: architecture, training
// and output paths in one file.

#include <filesystem>
#include <iosfwd>
#include <string>

#include "bisenet/model.hpp"
#include "bisenet/train.hpp"

namespace bisenet {

struct RunConfig {
  ArchConfig arch;
  train::TrainConfig train;
  std::string output_dir = "run";
  std::string checkpoint_dir;  // empty = <output_dir>/checkpoint
  int threads = 0;             // 0 = BISENET_THREADS or the OpenMP default
  int eval_size = 20;          // held-out synthetic samples scored after training

  std::filesystem::path checkpoint_path() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Throws ConfigError("<source>:<line>: ...") on unknown keys, malformed
/// lines and invalid values.
RunConfig parse_run_config(std::istream& is, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Every key with its current value; parse(serialize(c)) == c.
std::string serialize_run_config(const RunConfig& cfg);

}  // namespace bisenet
