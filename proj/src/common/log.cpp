#include "keds/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

#include "keds/error.hpp"

namespace keds::log {

namespace {

Level from_env() {
  const char* env = std::getenv("KEDS_LOG");
  if (!env || !*env) return Level::Info;
  return parse_level(env);
}

std::atomic<int>& level_slot() {
  static std::atomic<int> slot{static_cast<int>(from_env())};
  return slot;
}

}  // namespace

Level parse_level(std::string_view name) {
  if (name == "error") return Level::Error;
  if (name == "info") return Level::Info;
  if (name == "debug") return Level::Debug;
  throw ConfigError("KEDS_LOG must be error, info or debug, got '" + std::string(name) + "'");
}

Level threshold() { return static_cast<Level>(level_slot().load()); }
void set_threshold(Level level) { level_slot().store(static_cast<int>(level)); }

void write(Level level, std::string_view message) {
  if (static_cast<int>(level) > level_slot().load()) return;
  static std::mutex mu;
  static const char* names[] = {"error", "info", "debug"};
  std::lock_guard lock(mu);
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace keds::log
