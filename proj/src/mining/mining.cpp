#include "keds/mining/mining.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <thread>

#include "keds/error.hpp"
#include "keds/log.hpp"

namespace keds::mining {

using nlohmann::json;

void PseudoTriplet::validate() const {
  const auto slots = encoders::count_slots(template_tokens);
  if (slots != kPseudoRows) {
    throw MiningError("triplet for image " + std::to_string(image_id) + " has " +
                      std::to_string(slots) + " slots, expected " + std::to_string(kPseudoRows));
  }
  if (complements[0] == complements[1] || complements[0] == target || complements[1] == target) {
    throw MiningError("triplet for image " + std::to_string(image_id) +
                      " repeats a caption among target and complements");
  }
}

std::pair<std::uint64_t, std::uint64_t> find_complements(std::uint64_t caption_id,
                                                         const store::FlatIndex& captions) {
  if (caption_id >= captions.size()) {
    throw LookupError("caption " + std::to_string(caption_id) + " outside corpus of " +
                      std::to_string(captions.size()));
  }
  if (captions.size() < 3) {
    throw MiningError("need at least 2 other captions, corpus has " +
                      std::to_string(captions.size()));
  }
  auto hits = captions.search(captions.matrix().row(caption_id), 3);
  std::vector<std::uint64_t> ids;
  for (const auto& h : hits) {
    if (h.id != caption_id) ids.push_back(h.id);
  }
  return {ids[0], ids[1]};
}

MineResult mine(const std::vector<store::KnowledgeRecord>& records,
                const store::FlatIndex& captions, std::size_t threads) {
  if (captions.size() < 3) {
    throw MiningError("mining needs at least 3 captions, corpus has " +
                      std::to_string(captions.size()));
  }
  std::vector<std::optional<PseudoTriplet>> slots(records.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& r = records[i];
      if (!r.subject_span) continue;
      PseudoTriplet t;
      t.image_id = r.id;
      t.target = r.id;
      t.template_tokens = encoders::inject_span(r, kPseudoRows);
      auto [a, b] = find_complements(r.id, captions);
      t.complements = {a, b};
      slots[i] = std::move(t);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, records.size()));
  if (threads == 1) {
    work(0, records.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (records.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(records.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  MineResult out;
  for (auto& s : slots) {
    if (s) {
      out.triplets.push_back(std::move(*s));
    } else {
      ++out.skipped;
    }
  }
  if (out.skipped > 0) {
    log::info("mine: skipped " + std::to_string(out.skipped) + " records without a subject span");
  }
  return out;
}

std::string to_json_line(const PseudoTriplet& t) {
  json j;
  j["image_id"] = t.image_id;
  j["template"] = json::parse(encoders::to_json(t.template_tokens));
  j["target"] = t.target;
  j["complements"] = {t.complements[0], t.complements[1]};
  return j.dump();
}

PseudoTriplet triplet_from_json_line(const std::string& line) {
  PseudoTriplet t;
  try {
    auto j = json::parse(line);
    t.image_id = j.at("image_id").get<std::uint64_t>();
    t.template_tokens = encoders::sequence_from_json(j.at("template").dump());
    t.target = j.at("target").get<std::uint64_t>();
    const auto& c = j.at("complements");
    if (!c.is_array() || c.size() != 2) throw FormatError("complements must hold 2 ids");
    t.complements = {c[0].get<std::uint64_t>(), c[1].get<std::uint64_t>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad triplet: ") + e.what());
  }
  try {
    t.validate();
  } catch (const MiningError& e) {
    throw FormatError(e.what());
  }
  return t;
}

void save_triplets(const std::vector<PseudoTriplet>& triplets, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError("cannot open for writing: " + path.string());
  for (const auto& t : triplets) out << to_json_line(t) << '\n';
}

std::vector<PseudoTriplet> load_triplets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open: " + path.string());
  std::vector<PseudoTriplet> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(triplet_from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace keds::mining
