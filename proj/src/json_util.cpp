#include "hesskit/json_util.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "hesskit/errors.hpp"

namespace hesskit {
namespace {

void dump_number(std::string& out, const json& j) {
  if (j.is_number_integer()) {
    out += std::to_string(j.get<int64_t>());
    return;
  }
  if (j.is_number_unsigned()) {
    out += std::to_string(j.get<uint64_t>());
    return;
  }
  const double v = j.get<double>();
  if (std::isfinite(v) && v == std::floor(v) && std::fabs(v) < 9.007199254740992e15) {
    out += std::to_string(static_cast<int64_t>(v));
    return;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  out += buf;
}

void dump(std::string& out, const json& j) {
  switch (j.type()) {
    case json::value_t::object: {
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {  // keys already sorted
        if (!first) out += ',';
        first = false;
        out += json(it.key()).dump();
        out += ':';
        dump(out, it.value());
      }
      out += '}';
      break;
    }
    case json::value_t::array: {
      out += '[';
      for (size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        dump(out, j[i]);
      }
      out += ']';
      break;
    }
    case json::value_t::string:
      out += j.dump();
      break;
    case json::value_t::boolean:
      out += j.get<bool>() ? "true" : "false";
      break;
    case json::value_t::null:
      out += "null";
      break;
    default:
      dump_number(out, j);
  }
}

}  // namespace

std::string canonical_dump(const json& j) {
  std::string out;
  dump(out, j);
  out += '\n';
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(Errc::MissingArtifact, "cannot open for writing: " + path);
  f << text;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Errc::MissingArtifact, "cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json read_json_file(const std::string& path) {
  auto text = read_text_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) raise(Errc::MissingArtifact, "invalid JSON in " + path);
  return j;
}

void write_canonical_json(const std::string& path, const json& j) {
  write_text_file(path, canonical_dump(j));
}

}  // namespace hesskit
