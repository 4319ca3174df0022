#include "keds/store/metadata.hpp"

#include <fstream>
#include <json.hpp>

#include "keds/error.hpp"

namespace keds::store {

using nlohmann::json;

void KnowledgeRecord::validate() const {
  if (!subject_span) return;
  const auto& s = *subject_span;
  if (!(s.start < s.end && s.end <= caption_tokens.size())) {
    throw FormatError("record " + std::to_string(id) + ": subject_span [" +
                      std::to_string(s.start) + "," + std::to_string(s.end) +
                      ") invalid for " + std::to_string(caption_tokens.size()) + " tokens");
  }
}

std::string to_json_line(const KnowledgeRecord& r) {
  json j;
  j["id"] = r.id;
  j["caption_tokens"] = r.caption_tokens;
  j["subject_span"] = r.subject_span ? json::array({r.subject_span->start, r.subject_span->end})
                                     : json(nullptr);
  j["text"] = r.text ? json(*r.text) : json(nullptr);
  return j.dump();
}

KnowledgeRecord record_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("metadata line is not JSON: ") + e.what());
  }
  KnowledgeRecord r;
  try {
    r.id = j.at("id").get<std::uint64_t>();
    r.caption_tokens = j.at("caption_tokens").get<std::vector<std::uint32_t>>();
    if (j.contains("subject_span") && !j["subject_span"].is_null()) {
      const auto& s = j["subject_span"];
      if (!s.is_array() || s.size() != 2) throw FormatError("subject_span must be [start, end]");
      r.subject_span = Span{s[0].get<std::uint32_t>(), s[1].get<std::uint32_t>()};
    }
    if (j.contains("text") && !j["text"].is_null()) r.text = j["text"].get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad metadata record: ") + e.what());
  }
  r.validate();
  return r;
}

void save_records(const std::vector<KnowledgeRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError("cannot open for writing: " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

std::vector<KnowledgeRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open: " + path.string());
  std::vector<KnowledgeRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (out.back().id != out.size() - 1) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected id " +
                        std::to_string(out.size() - 1));
    }
  }
  return out;
}

}  // namespace keds::store
