#pragma once

#include <string>

#include <json.hpp>

namespace hesskit {

using json = nlohmann::json;

// Serializes with sorted keys and fixed float formatting (%.6g), so repeated
// runs produce byte-identical reports.
std::string canonical_dump(const json& j);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);
json read_json_file(const std::string& path);
void write_canonical_json(const std::string& path, const json& j);

}  // namespace hesskit
