#include "hytune/manifest.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hytune/errors.hpp"
#include "hytune/rng.hpp"

namespace hytune {

std::string RunManifest::to_json() const {
  nlohmann::json j;
  j["format"] = "hytune-manifest/1";
  j["command"] = command;
  j["argv"] = argv;
  j["config_path"] = config_path;
  j["config_snapshot"] = config_snapshot;
  j["seeds"] = seeds;
  j["output_dir"] = output_dir;
  nlohmann::json arts = nlohmann::json::array();
  for (const ArtifactChecksum& a : artifacts) {
    arts.push_back({{"path", a.path}, {"bytes", a.bytes}, {"fnv1a64", a.fnv1a64}});
  }
  j["artifacts"] = arts;
  return j.dump(2);
}

void RunManifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error("cannot write manifest " + path.string());
  }
  out << to_json() << '\n';
}

ArtifactChecksum checksum_file(const std::filesystem::path& file,
                               const std::filesystem::path& relative_to) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw Error("cannot read " + file.string() + " for checksumming");
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
  ArtifactChecksum a;
  a.path = relative_to.empty() ? file.string() : file.lexically_relative(relative_to).string();
  a.bytes = bytes.size();
  a.fnv1a64 = hex;
  return a;
}

}  // namespace hytune
