#include "keds/encoders/task.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>

#include "keds/error.hpp"

namespace keds::encoders {

using nlohmann::json;

void EvalTask::validate() const {
  if (targets.empty()) throw FormatError("task has no targets");
  for (auto t : targets) {
    if (std::find(candidates.begin(), candidates.end(), t) == candidates.end()) {
      throw FormatError("target " + std::to_string(t) + " is not a candidate");
    }
  }
}

void save_tasks(const std::vector<EvalTask>& tasks, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError("cannot open for writing: " + path.string());
  for (const auto& t : tasks) {
    json j;
    j["reference"] = t.reference;
    j["instruction"] = json::parse(to_json(t.instruction));
    j["candidates"] = t.candidates;
    j["targets"] = t.targets;
    out << j.dump() << '\n';
  }
}

std::vector<EvalTask> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open: " + path.string());
  std::vector<EvalTask> tasks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      EvalTask t;
      t.reference = j.at("reference").get<std::uint64_t>();
      t.instruction = sequence_from_json(j.at("instruction").dump());
      t.candidates = j.at("candidates").get<std::vector<std::uint64_t>>();
      t.targets = j.at("targets").get<std::vector<std::uint64_t>>();
      t.validate();
      tasks.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return tasks;
}

}  // namespace keds::encoders
