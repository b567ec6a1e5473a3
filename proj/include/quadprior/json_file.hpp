#pragma once

#include <filesystem>

#include <json.hpp>

namespace quadprior {

/// Throws IoError when the file cannot be opened, ParseError (with the path)
/// when it is not JSON. A file holding only whitespace parses as null.
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Writes `doc` followed by a newline. indent < 0 writes compact JSON.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc, int indent = 2);

}  // namespace quadprior
