#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace modalign {

using json = nlohmann::json;

/// Reads a JSON-lines file. Blank lines are skipped; `on_error` receives the
/// 1-based line number and parser message for malformed lines and must throw.
std::vector<json> read_jsonl(const std::filesystem::path& path,
                             const std::function<void(std::size_t, const std::string&)>& on_error);

/// One compact JSON document per line, '\n' terminated.
std::string to_jsonl(const std::vector<json>& rows);

std::string read_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace modalign
