#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "keds/encoders/composer.hpp"
#include "keds/encoders/task.hpp"
#include "keds/encoders/tokens.hpp"
#include "keds/store/embedding_matrix.hpp"
#include "keds/store/metadata.hpp"

namespace keds::encoders {

struct SynthConfig {
  std::uint64_t corpus = 5000;
  std::uint64_t database = 4000;
  std::uint64_t gallery = 1000;
  std::uint64_t tasks = 500;
  std::uint32_t attributes = 8;
  /// Categorical image factors that captions never mention.
  std::uint32_t style_factors = 3;
  std::uint32_t style_values = 4;
  double style_scale = 0.7;
  double image_noise = 0.2;
  double caption_noise = 0.05;
  /// Weight of the image-only component of W_img (0 = same map as text).
  double modality_mix = 0.2;
  /// Elementwise stddev of non-attribute vocabulary rows (attribute rows have ~1).
  double filler_scale = 0.3;
  std::uint32_t subject_min = 3;
  std::uint32_t subject_max = 7;
  std::uint32_t context_min = 1;
  std::uint32_t context_max = 2;
};

struct SynthItem {
  std::vector<std::uint8_t> attributes;
  std::vector<std::uint8_t> style;
  friend bool operator==(const SynthItem&, const SynthItem&) = default;
};

struct SynthSplit {
  std::vector<SynthItem> items;
  store::EmbeddingMatrix images;
  store::EmbeddingMatrix captions;
  std::vector<store::KnowledgeRecord> records;
};

struct SynthWorld {
  Vocab vocab;
  store::EmbeddingMatrix vocab_table;
  /// u_{j,v}: attributes x 2 rows of d.
  store::EmbeddingMatrix concepts;
  /// Style factor vectors: style_factors x style_values rows of d.
  store::EmbeddingMatrix styles;
  /// W_txt and W_img, d x d each.
  store::EmbeddingMatrix text_map;
  store::EmbeddingMatrix image_map;
  SynthSplit corpus;
  SynthSplit database;
  SynthSplit gallery;
  std::vector<EvalTask> tasks;

  /// Sum of concept vectors for an attribute assignment.
  std::vector<double> semantic_latent(const std::vector<std::uint8_t>& attributes) const;
  std::uint32_t word_id(std::uint32_t attribute, std::uint8_t value) const;
};

/// Word for attribute j taking value v, e.g. ("red", "blue") for j = 0.
std::string attribute_word(std::uint32_t attribute, std::uint8_t value);

/// Composer vocab size and dim come from `composer`; caption features are the
/// composer's encoding of the caption tokens plus noise.
SynthWorld synth_generate(const SynthConfig& config, const ComposerConfig& composer,
                          std::uint64_t seed);

/// Writes vocab.json, vocab.kedb, {corpus,db,gallery}_{images,captions}.kedb,
/// {corpus,db,gallery}.jsonl and tasks.jsonl.
void save_world(const SynthWorld& world, const std::filesystem::path& dir);

}  // namespace keds::encoders
