#include "keds/encoders/tokens.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>

#include "keds/error.hpp"

namespace keds::encoders {

using nlohmann::json;

TokenSequence from_ids(const std::vector<std::uint32_t>& ids) {
  TokenSequence seq;
  seq.reserve(ids.size());
  for (auto id : ids) seq.push_back(TokenItem::tok(id));
  return seq;
}

std::size_t count_slots(const TokenSequence& seq) {
  return static_cast<std::size_t>(
      std::count_if(seq.begin(), seq.end(), [](const TokenItem& t) { return t.is_slot(); }));
}

std::vector<std::size_t> slot_positions(const TokenSequence& seq) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i].is_slot()) out.push_back(i);
  }
  return out;
}

std::string to_json(const TokenSequence& seq) {
  json arr = json::array();
  for (const auto& t : seq) arr.push_back({{t.is_slot() ? "slot" : "tok", t.value}});
  return arr.dump();
}

TokenSequence sequence_from_json(const std::string& text) {
  TokenSequence seq;
  try {
    for (const auto& item : json::parse(text)) {
      if (item.contains("tok")) {
        seq.push_back(TokenItem::tok(item["tok"].get<std::uint32_t>()));
      } else if (item.contains("slot")) {
        seq.push_back(TokenItem::slot(item["slot"].get<std::uint32_t>()));
      } else {
        throw FormatError("token item needs \"tok\" or \"slot\": " + item.dump());
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad token sequence: ") + e.what());
  }
  return seq;
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::uint32_t i = 0; i < words_.size(); ++i) {
    if (!ids_.emplace(words_[i], i).second) throw FormatError("duplicate vocab word '" + words_[i] + "'");
  }
}

std::uint32_t Vocab::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw LookupError("word '" + word + "' not in vocabulary");
  return it->second;
}

const std::string& Vocab::word(std::uint32_t id) const {
  if (id >= words_.size()) throw LookupError("token id " + std::to_string(id) + " not in vocabulary");
  return words_[id];
}

void Vocab::save(const std::filesystem::path& path) const {
  json j = json::object();
  for (std::uint32_t i = 0; i < words_.size(); ++i) j[words_[i]] = i;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError("cannot open for writing: " + path.string());
  out << j.dump() << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(path.string() + ": vocab must be a JSON object");
  std::vector<std::string> words(j.size());
  std::vector<bool> seen(j.size(), false);
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto id = it.value().get<std::uint64_t>();
    if (id >= words.size() || seen[id]) {
      throw FormatError(path.string() + ": ids must be a permutation of 0..n-1 (bad id " +
                        std::to_string(id) + ")");
    }
    seen[id] = true;
    words[id] = it.key();
  }
  return Vocab(std::move(words));
}

TokenSequence make_prompt(const Vocab& vocab, std::uint32_t pseudo_rows) {
  if (pseudo_rows < 1) throw InjectionError("prompt needs at least one pseudo row");
  TokenSequence seq{TokenItem::tok(vocab.id("a")), TokenItem::tok(vocab.id("photo")),
                    TokenItem::tok(vocab.id("of"))};
  for (std::uint32_t s = 0; s < pseudo_rows; ++s) seq.push_back(TokenItem::slot(s));
  return seq;
}

TokenSequence inject_span(const store::KnowledgeRecord& caption, std::uint32_t pseudo_rows) {
  if (!caption.subject_span) {
    throw MiningError("caption " + std::to_string(caption.id) + " has no subject span");
  }
  caption.validate();
  const auto [start, end] = *caption.subject_span;
  TokenSequence seq;
  seq.reserve(caption.caption_tokens.size() - (end - start) + pseudo_rows);
  for (std::uint32_t i = 0; i < start; ++i) seq.push_back(TokenItem::tok(caption.caption_tokens[i]));
  for (std::uint32_t s = 0; s < pseudo_rows; ++s) seq.push_back(TokenItem::slot(s));
  for (std::size_t i = end; i < caption.caption_tokens.size(); ++i) {
    seq.push_back(TokenItem::tok(caption.caption_tokens[i]));
  }
  return seq;
}

TokenSequence without_slots(const TokenSequence& seq) {
  TokenSequence out;
  for (const auto& t : seq) {
    if (!t.is_slot()) out.push_back(t);
  }
  return out;
}

}  // namespace keds::encoders
