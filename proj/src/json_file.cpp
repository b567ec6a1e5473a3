#include "quadprior/json_file.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "quadprior/error.hpp"

namespace quadprior {

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string text = buffer.str();
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) return nullptr;
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc, int indent) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump(indent) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace quadprior
