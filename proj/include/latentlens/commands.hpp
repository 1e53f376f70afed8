#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace latentlens {

inline constexpr std::array<std::string_view, 6> kCommands = {"gen-data", "train", "discover", "eval", "render", "serve"};

/// Flat key=value run configuration. Values stay textual; typed reads
/// validate on access and raise config errors naming the key.
class Settings {
 public:
  Settings() = default;
  explicit Settings(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::filesystem::path path(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;  // comma-separated

 private:
  std::map<std::string, std::string> values_;
};

/// Parses "key = value" lines; '#' starts a comment.
Settings parse_key_values(const std::string& text);

/// Reads a key=value file, or a config.json snapshot written by a previous run.
Settings read_settings_file(const std::filesystem::path& path);

/// Keys accepted by a command, in documentation order.
std::vector<std::string> command_keys(const std::string& command);

/// Layers defaults < file < overrides, rejects unknown keys and fills keys
/// whose default depends on others (model, backbone, generator kind).
Settings resolve_settings(const std::string& command, const Settings& file, const Settings& overrides);

/// {"command": ..., "settings": {...}} written to <out>/config.json.
void write_settings_snapshot(const std::filesystem::path& path, const std::string& command, const Settings& s);

using CommandLog = std::function<void(const std::string&)>;

/// Runs a resolved command. Serve blocks until the process is stopped.
void run_command(const std::string& command, const Settings& settings, const CommandLog& log);

/// Applies LATENTLENS_THREADS (positive integer) to the BLAS thread pool.
void apply_thread_limit();

}  // namespace latentlens
