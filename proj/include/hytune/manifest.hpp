#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hytune {

struct ArtifactChecksum {
  std::string path;  // relative to the output directory when inside it
  std::uint64_t bytes = 0;
  std::string fnv1a64;  // 16 hex digits
};

/// Written next to every CLI output; holds what is needed to rerun the command.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  std::string config_snapshot;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
  std::vector<ArtifactChecksum> artifacts;

  std::string to_json() const;
  void write(const std::filesystem::path& path) const;
};

ArtifactChecksum checksum_file(const std::filesystem::path& file,
                               const std::filesystem::path& relative_to = {});

}  // namespace hytune
