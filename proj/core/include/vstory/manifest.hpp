#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vstory {

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

// `git describe` of the source tree at configure time.
std::string code_version();

// Current UTC time, ISO 8601 with millisecond precision.
std::string utc_timestamp();

// Record of one command invocation, sufficient to rerun it.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_json = "{}";  // serialized JSON object
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  std::string started_at;
  std::string finished_at;
  std::map<std::string, std::string> artifact_hashes;  // path -> sha256
  std::string code_version;
};

// Fills artifact_hashes with the sha256 of every input and output file;
// directories contribute each regular file they contain.
void hash_artifacts(RunManifest& manifest);

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(std::string_view text);

// Writes to a temporary sibling and renames it into place.
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);
RunManifest read_manifest(const std::filesystem::path& path);

// Atomic whole-file write used for every artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace vstory
