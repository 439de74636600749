#pragma once

#include <cstdint>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

namespace vlgen {

/// Decodes UTF-8 into code points. Malformed bytes decode to U+FFFD.
inline std::u32string utf8_decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int extra = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      cp = b0 & 0x1F;
      extra = 1;
    } else if ((b0 & 0xF0) == 0xE0) {
      cp = b0 & 0x0F;
      extra = 2;
    } else if ((b0 & 0xF8) == 0xF0) {
      cp = b0 & 0x07;
      extra = 3;
    } else {
      out.push_back(U'\uFFFD');
      ++i;
      continue;
    }
    // A truncated or broken sequence yields one U+FFFD covering the lead
    // byte and the continuation bytes that did match.
    int matched = 0;
    while (matched < extra && i + 1 + matched < s.size() &&
           (static_cast<unsigned char>(s[i + 1 + matched]) & 0xC0) == 0x80) {
      cp = (cp << 6) | (static_cast<unsigned char>(s[i + 1 + matched]) & 0x3F);
      ++matched;
    }
    if (matched < extra) {
      out.push_back(U'\uFFFD');
      i += 1 + static_cast<std::size_t>(matched);
      continue;
    }
    out.push_back(cp);
    i += 1 + extra;
  }
  return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string utf8_encode(std::u32string_view cps) {
  std::string out;
  out.reserve(cps.size());
  for (char32_t cp : cps) utf8_append(out, cp);
  return out;
}

/// Length in code points.
inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (char c : s)
    if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) ++n;
  return n;
}

// Minimal leveled logging to stderr; tests silence it with set_log_level.
enum class LogLevel { debug = 0, info = 1, warning = 2, error = 3, off = 4 };

inline LogLevel& log_level() {
  static LogLevel level = LogLevel::info;
  return level;
}

inline void set_log_level(LogLevel level) { log_level() = level; }

inline void log(LogLevel level, std::string_view message) {
  if (level < log_level()) return;
  static std::mutex mu;
  static constexpr const char* kNames[] = {"debug", "info", "warning", "error"};
  std::lock_guard lock(mu);
  std::cerr << "[" << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

inline void log_info(std::string_view m) { log(LogLevel::info, m); }
inline void log_warning(std::string_view m) { log(LogLevel::warning, m); }

}  // namespace vlgen
