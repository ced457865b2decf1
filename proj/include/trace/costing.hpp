#pragma once

// Token and dollar accounting per judge mode. Stored values stay exact;
// rounding to 3 decimals happens only when a report is displayed.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "trace/config.hpp"
#include "trace/error.hpp"
#include "trace/judge.hpp"

namespace trace::costing {

using ordered_json = nlohmann::ordered_json;

struct PriceSheet {
  double text_in_per_million = 0;
  double audio_in_per_million = 0;
  double text_out_per_million = 0;
  double gpu_rate_per_hour = 0;

  void validate() const {
    for (double v : {text_in_per_million, audio_in_per_million, text_out_per_million, gpu_rate_per_hour})
      if (!(v >= 0) || !std::isfinite(v)) throw CodedError("INVALID_CONFIG", "prices must be finite and >= 0");
  }

  /// Keys under [prices]: text_in_per_million, audio_in_per_million,
  /// text_out_per_million, gpu_rate_per_hour. All four are required.
  static PriceSheet from_config(const config::KeyValues& kv) {
    PriceSheet p;
    auto need = [&](const char* key) {
      const std::string full = std::string("prices.") + key;
      auto v = kv.get_number(full);
      if (!v) throw CodedError("INVALID_CONFIG", full + " is required");
      return *v;
    };
    p.text_in_per_million = need("text_in_per_million");
    p.audio_in_per_million = need("audio_in_per_million");
    p.text_out_per_million = need("text_out_per_million");
    p.gpu_rate_per_hour = need("gpu_rate_per_hour");
    p.validate();
    return p;
  }

  static PriceSheet load(const std::filesystem::path& p) { return from_config(config::KeyValues::load(p)); }
};

struct CostReport {
  judge::Usage tokens;
  double gpu_hours = 0;
  double gpu_cost = 0;
  double text_in_cost = 0;
  double audio_in_cost = 0;
  double text_out_cost = 0;
  double api_cost = 0;
  double total = 0;
  std::size_t runs = 0;
};

inline CostReport price(const judge::Usage& usage, double gpu_hours, const PriceSheet& sheet, std::size_t runs = 0) {
  sheet.validate();
  if (!(gpu_hours >= 0)) throw CodedError("INVALID_CONFIG", "gpu_hours must be >= 0");
  CostReport r;
  r.tokens = usage;
  r.runs = runs;
  r.gpu_hours = gpu_hours;
  r.gpu_cost = gpu_hours * sheet.gpu_rate_per_hour;
  r.text_in_cost = static_cast<double>(usage.text_in) * sheet.text_in_per_million / 1e6;
  r.audio_in_cost = static_cast<double>(usage.audio_in) * sheet.audio_in_per_million / 1e6;
  r.text_out_cost = static_cast<double>(usage.text_out) * sheet.text_out_per_million / 1e6;
  r.api_cost = r.text_in_cost + r.audio_in_cost + r.text_out_cost;
  r.total = r.gpu_cost + r.api_cost;
  return r;
}

inline CostReport accumulate(const std::vector<judge::JudgeRun>& runs, double gpu_hours, const PriceSheet& sheet) {
  judge::Usage u;
  for (const auto& r : runs) u += r.usage;
  return price(u, gpu_hours, sheet, runs.size());
}

inline double display(double v) {
  const double r = std::round(v * 1000.0) / 1000.0;
  return r == 0.0 ? 0.0 : r;
}

inline std::string fixed3(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.3f", display(v));
  return buf;
}

inline ordered_json to_json(const CostReport& r) {
  return ordered_json{
      {"runs", r.runs},
      {"tokens", {{"text_in", r.tokens.text_in}, {"audio_in", r.tokens.audio_in}, {"text_out", r.tokens.text_out}}},
      {"gpu", {{"hours", display(r.gpu_hours)}, {"cost", display(r.gpu_cost)}}},
      {"api",
       {{"text_in", display(r.text_in_cost)},
        {"audio_in", display(r.audio_in_cost)},
        {"text_out", display(r.text_out_cost)},
        {"cost", display(r.api_cost)}}},
      {"total", display(r.total)}};
}

/// Rows in the layout of the published cost table; one column per report.
inline std::string table(const std::vector<std::pair<std::string, CostReport>>& columns, const PriceSheet& sheet) {
  std::string out;
  auto row = [&](const std::string& label, auto getter) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-24s", label.c_str());
    out += buf;
    for (const auto& [name, rep] : columns) {
      std::snprintf(buf, sizeof buf, " %12s", getter(rep).c_str());
      out += buf;
    }
    out += "\n";
  };
  {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-24s", "Cost Category");
    out += buf;
    for (const auto& col : columns) {
      std::snprintf(buf, sizeof buf, " %12s", col.first.c_str());
      out += buf;
    }
    out += "\n";
  }
  row("Local GPU", [](const CostReport&) { return std::string(); });
  row("  Inference time (hrs)", [](const CostReport& r) { return fixed3(r.gpu_hours); });
  row("  Rate ($/hr)", [&](const CostReport&) { return fixed3(sheet.gpu_rate_per_hour); });
  row("  Cost ($)", [](const CostReport& r) { return fixed3(r.gpu_cost); });
  row("API", [](const CostReport&) { return std::string(); });
  row("  Text Input ($)", [](const CostReport& r) { return fixed3(r.text_in_cost); });
  row("  Audio Input ($)", [](const CostReport& r) { return fixed3(r.audio_in_cost); });
  row("  Text Output ($)", [](const CostReport& r) { return fixed3(r.text_out_cost); });
  row("  Cost ($)", [](const CostReport& r) { return fixed3(r.api_cost); });
  row("Total Cost ($)", [](const CostReport& r) { return fixed3(r.total); });
  return out;
}

}  // namespace trace::costing
