#pragma once

// File helpers shared by the cache, datastore and CLI.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "trace/error.hpp"

namespace trace::io {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CodedError("IO_ERROR", "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Write via a sibling temp file and rename so readers never observe a
/// partially written file.
inline void write_atomic(const fs::path& p, std::string_view content) {
  static std::atomic<unsigned long> counter{0};
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const auto tid = std::hash<std::thread::id>{}(std::this_thread::get_id());
  fs::path tmp = p;
  tmp += ".tmp." + std::to_string(tid) + "." + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CodedError("IO_ERROR", "cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw CodedError("IO_ERROR", "short write to " + tmp.string());
  }
  fs::rename(tmp, p);
}

inline void append_line(const fs::path& p, std::string_view line) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::app);
  if (!out) throw CodedError("IO_ERROR", "cannot append to " + p.string());
  out << line << '\n';
  out.flush();
}

/// Calls fn(object, line_number) for each non-blank line. Parse errors carry
/// the file and line.
template <class Json = json, class Fn>
void for_each_jsonl(const fs::path& p, Fn&& fn) {
  std::ifstream in(p);
  if (!in) throw CodedError("IO_ERROR", "cannot open " + p.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw CodedError("MALFORMED_JSONL", p.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    fn(j, n);
  }
}

template <class Json = json>
std::vector<Json> read_jsonl(const fs::path& p) {
  std::vector<Json> out;
  for_each_jsonl<Json>(p, [&](Json& j, std::size_t) { out.push_back(std::move(j)); });
  return out;
}

}  // namespace trace::io
