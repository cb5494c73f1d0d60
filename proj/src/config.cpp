#include "mma/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "mma/errors.hpp"

namespace mma {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
void assign(std::string_view key, std::string_view text, T& field) {
  const auto bad = [&] {
    return ConfigError("bad value '" + std::string(text) + "' for key '" + std::string(key) + "'");
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") {
      field = true;
    } else if (text == "false" || text == "0") {
      field = false;
    } else {
      throw bad();
    }
  } else if constexpr (std::is_same_v<T, std::string>) {
    field = std::string(text);
  } else if constexpr (std::is_integral_v<T>) {
    if (!text.empty() && text.front() == '-') throw bad();
    T v{};
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size()) throw bad();
    field = v;
  } else {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size()) throw bad();
    field = v;
  }
}

template <class T>
std::string render(const T& field) {
  if constexpr (std::is_same_v<T, bool>) {
    return field ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return field;
  } else if constexpr (std::is_integral_v<T>) {
    return std::to_string(field);
  } else {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, field);
    return std::string(buf, p);
  }
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (!seen.emplace(key).second) throw ConfigError("duplicate key '" + std::string(key) + "'");
    bool known = false;
    cfg.visit([&](std::string_view name, auto& field) {
      if (name == key) {
        assign(key, value, field);
        known = true;
      }
    });
    if (!known) throw ConfigError("unknown key '" + std::string(key) + "'");
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  const_cast<RunConfig*>(this)->visit([&](std::string_view name, const auto& field) {
    out.append(name).append(" = ").append(render(field)).push_back('\n');
  });
  return out;
}

void RunConfig::finalize() {
  model.seed = seed;
  train.seed = seed;
  try {
    model.validate();
    train.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!(gen_temperature > 0.0)) throw ConfigError("gen_temperature must be positive");
  if (!(gen_top_p > 0.0 && gen_top_p <= 1.0)) throw ConfigError("gen_top_p must lie in (0, 1]");
  if (kernels != "auto" && kernels != "scalar" && kernels != "avx2") {
    throw ConfigError("kernels must be auto, scalar or avx2");
  }
}

std::string RunConfig::checkpoint_path() const {
  return (std::filesystem::path(out_dir) / checkpoint_file).string();
}

std::string RunConfig::metrics_path() const {
  return (std::filesystem::path(out_dir) / metrics_file).string();
}

}  // namespace mma
