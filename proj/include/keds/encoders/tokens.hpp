#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "keds/store/metadata.hpp"

namespace keds::encoders {

/// A token position: either a vocabulary id or a slot into a pseudo-token block.
struct TokenItem {
  enum class Kind : std::uint8_t { Discrete, Slot };
  Kind kind = Kind::Discrete;
  std::uint32_t value = 0;

  static TokenItem tok(std::uint32_t id) { return {Kind::Discrete, id}; }
  static TokenItem slot(std::uint32_t index) { return {Kind::Slot, index}; }
  bool is_slot() const { return kind == Kind::Slot; }
  friend bool operator==(const TokenItem&, const TokenItem&) = default;
};

using TokenSequence = std::vector<TokenItem>;

TokenSequence from_ids(const std::vector<std::uint32_t>& ids);
std::size_t count_slots(const TokenSequence& seq);
/// Positions holding slots, in order.
std::vector<std::size_t> slot_positions(const TokenSequence& seq);

/// [{"tok": id} | {"slot": i}, ...]
std::string to_json(const TokenSequence& seq);
TokenSequence sequence_from_json(const std::string& text);

/// Word to id mapping. On disk: {"token_string": id}.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> words);

  std::uint32_t id(const std::string& word) const;
  const std::string& word(std::uint32_t id) const;
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

/// ["a", "photo", "of", Slot0 .. Slot(p-1)]
TokenSequence make_prompt(const Vocab& vocab, std::uint32_t pseudo_rows);

/// Caption tokens with [start, end) replaced by Slot0 .. Slot(p-1).
TokenSequence inject_span(const store::KnowledgeRecord& caption, std::uint32_t pseudo_rows);

/// Drops every slot.
TokenSequence without_slots(const TokenSequence& seq);

}  // namespace keds::encoders
