#include "keds/encoders/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "keds/error.hpp"
#include "keds/random.hpp"

namespace keds::encoders {

namespace {

constexpr const char* kWordPairs[][2] = {
    {"red", "blue"},   {"round", "square"}, {"large", "small"}, {"metal", "wooden"},
    {"shiny", "matte"}, {"striped", "plain"}, {"old", "new"},     {"dark", "light"},
};

const std::vector<std::string> kFixedWords = {"<pad>", "a", "photo", "of", "with", "and"};

store::EmbeddingMatrix normal_rows(Rng& rng, std::uint64_t rows, std::uint32_t d, double stddev) {
  std::vector<float> v(rows * d);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
  return store::EmbeddingMatrix(d, rows, std::move(v));
}

/// y = W x with W stored row-major d x d.
std::vector<double> map_vector(const store::EmbeddingMatrix& w, const std::vector<double>& x) {
  const std::uint32_t d = w.dim();
  std::vector<double> y(d, 0.0);
  for (std::uint32_t r = 0; r < d; ++r) {
    auto row = w.row(r);
    double s = 0.0;
    for (std::uint32_t c = 0; c < d; ++c) s += double(row[c]) * x[c];
    y[r] = s;
  }
  return y;
}

void append_normalized(store::EmbeddingMatrix& m, std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n < 1e-12) throw DegenerateVectorError("synthetic feature has zero norm");
  std::vector<float> f(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i] / n);
  m.append(f);
}

std::vector<SynthItem> sample_items(Rng& rng, std::uint64_t n, const SynthConfig& c) {
  std::vector<SynthItem> items(n);
  for (auto& it : items) {
    it.attributes.resize(c.attributes);
    for (auto& a : it.attributes) a = static_cast<std::uint8_t>(rng.index(2));
    it.style.resize(c.style_factors);
    for (auto& s : it.style) s = static_cast<std::uint8_t>(rng.index(c.style_values));
  }
  return items;
}

}  // namespace

std::string attribute_word(std::uint32_t attribute, std::uint8_t value) {
  if (value > 1) throw ConfigError("attribute values are binary");
  if (attribute < std::size(kWordPairs)) return kWordPairs[attribute][value];
  return "attr" + std::to_string(attribute) + (value ? "_b" : "_a");
}

std::vector<double> SynthWorld::semantic_latent(const std::vector<std::uint8_t>& attributes) const {
  std::vector<double> z(concepts.dim(), 0.0);
  for (std::uint32_t j = 0; j < attributes.size(); ++j) {
    auto u = concepts.row(2 * j + attributes[j]);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += u[k];
  }
  return z;
}

std::uint32_t SynthWorld::word_id(std::uint32_t attribute, std::uint8_t value) const {
  return vocab.id(attribute_word(attribute, value));
}

namespace {

class Generator {
 public:
  Generator(SynthWorld& world, const SynthConfig& config, const ComposerF& composer,
            std::uint64_t seed)
      : w_(world), c_(config), composer_(composer), seed_(seed) {}

  SynthSplit split(const std::string& name, std::uint64_t n) {
    Rng item_rng(seed_, "synth." + name + ".items");
    Rng image_rng(seed_, "synth." + name + ".image_noise");
    Rng caption_rng(seed_, "synth." + name + ".captions");
    Rng text_rng(seed_, "synth." + name + ".caption_noise");
    const std::uint32_t d = w_.concepts.dim();

    SynthSplit s;
    s.items = sample_items(item_rng, n, c_);
    s.images = store::EmbeddingMatrix(d, 0, {});
    s.captions = store::EmbeddingMatrix(d, 0, {});
    for (std::uint64_t i = 0; i < n; ++i) {
      append_normalized(s.images, image_feature(s.items[i], image_rng));
      s.records.push_back(caption(i, s.items[i], caption_rng));
    }
    const std::size_t chunk = 256;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
      const std::size_t end = std::min<std::size_t>(n, begin + chunk);
      std::vector<TokenSequence> seqs;
      for (std::size_t i = begin; i < end; ++i) seqs.push_back(from_ids(s.records[i].caption_tokens));
      auto enc = composer_.encode(seqs);
      auto ev = enc.values();
      for (std::size_t r = 0; r < end - begin; ++r) {
        std::vector<double> v(d);
        for (std::uint32_t k = 0; k < d; ++k) {
          v[k] = ev[r * d + k] + text_rng.normal(0.0, c_.caption_noise / std::sqrt(double(d)));
        }
        append_normalized(s.captions, std::move(v));
      }
    }
    s.images.normalize_rows();
    s.captions.normalize_rows();
    return s;
  }

  std::vector<double> image_feature(const SynthItem& item, Rng& rng) const {
    const std::uint32_t d = w_.concepts.dim();
    auto z = w_.semantic_latent(item.attributes);
    for (std::uint32_t f = 0; f < item.style.size(); ++f) {
      auto s = w_.styles.row(f * c_.style_values + item.style[f]);
      for (std::uint32_t k = 0; k < d; ++k) z[k] += s[k];
    }
    auto x = map_vector(w_.image_map, z);
    for (auto& v : x) v += rng.normal(0.0, c_.image_noise / std::sqrt(double(d)));
    return x;
  }

  store::KnowledgeRecord caption(std::uint64_t id, const SynthItem& item, Rng& rng) const {
    std::vector<std::uint32_t> order(c_.attributes);
    std::iota(order.begin(), order.end(), 0u);
    rng.shuffle(order.begin(), order.end());
    const auto pick = [&](std::uint32_t lo, std::uint32_t hi) {
      return lo + static_cast<std::uint32_t>(rng.index(hi - lo + 1));
    };
    const std::uint32_t ns = pick(c_.subject_min, c_.subject_max);
    const std::uint32_t nc = std::min(pick(c_.context_min, c_.context_max), c_.attributes - ns);

    store::KnowledgeRecord r;
    r.id = id;
    std::string text = "a";
    r.caption_tokens.push_back(w_.vocab.id("a"));
    for (std::uint32_t k = 0; k < ns; ++k) {
      const auto j = order[k];
      r.caption_tokens.push_back(w_.word_id(j, item.attributes[j]));
      text += " " + attribute_word(j, item.attributes[j]);
    }
    r.subject_span = store::Span{1, 1 + ns};
    for (std::uint32_t k = 0; k < nc; ++k) {
      const auto j = order[ns + k];
      const char* joiner = k == 0 ? "with" : "and";
      r.caption_tokens.push_back(w_.vocab.id(joiner));
      r.caption_tokens.push_back(w_.word_id(j, item.attributes[j]));
      text += std::string(" ") + joiner + " " + attribute_word(j, item.attributes[j]);
    }
    r.text = text;
    return r;
  }

 private:
  SynthWorld& w_;
  const SynthConfig& c_;
  const ComposerF& composer_;
  std::uint64_t seed_;
};

std::uint64_t combo_key(const std::vector<std::uint8_t>& attrs) {
  std::uint64_t k = 0;
  for (std::size_t j = 0; j < attrs.size(); ++j) k |= std::uint64_t(attrs[j]) << j;
  return k;
}

}  // namespace

SynthWorld synth_generate(const SynthConfig& config, const ComposerConfig& composer_config,
                          std::uint64_t seed) {
  const std::uint32_t d = composer_config.dim;
  if (config.attributes == 0 || config.attributes > 63) throw ConfigError("attributes must be in [1, 63]");
  if (config.subject_min < 1 || config.subject_min > config.subject_max ||
      config.subject_max > config.attributes) {
    throw ConfigError("subject size range invalid for " + std::to_string(config.attributes) +
                      " attributes");
  }
  if (config.context_min > config.context_max) throw ConfigError("context size range invalid");
  if (config.style_factors > 0 && config.style_values == 0) throw ConfigError("style_values must be >= 1");
  if (config.modality_mix < 0.0 || config.modality_mix > 1.0) {
    throw ConfigError("modality_mix must be in [0, 1]");
  }
  if (config.gallery < 2 && config.tasks > 0) throw ConfigError("gallery too small for tasks");

  SynthWorld w;
  std::vector<std::string> words = kFixedWords;
  for (std::uint32_t j = 0; j < config.attributes; ++j) {
    words.push_back(attribute_word(j, 0));
    words.push_back(attribute_word(j, 1));
  }
  if (words.size() > composer_config.vocab_size) {
    throw ConfigError("vocab_size " + std::to_string(composer_config.vocab_size) + " < " +
                      std::to_string(words.size()) + " required words");
  }
  for (std::size_t i = words.size(); i < composer_config.vocab_size; ++i) {
    words.push_back("w" + std::to_string(i));
  }
  w.vocab = Vocab(std::move(words));

  const double unit = 1.0 / std::sqrt(double(d));
  {
    Rng rng(seed, "synth.concepts");
    w.concepts = normal_rows(rng, 2ull * config.attributes, d, unit);
  }
  {
    Rng rng(seed, "synth.styles");
    w.styles = normal_rows(rng, std::uint64_t(config.style_factors) * config.style_values, d,
                           config.style_scale * unit);
  }
  {
    Rng rng(seed, "synth.maps");
    w.text_map = normal_rows(rng, d, d, unit);
    auto extra = normal_rows(rng, d, d, unit);
    const double a = std::sqrt(1.0 - config.modality_mix * config.modality_mix);
    std::vector<float> img(std::size_t(d) * d);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = static_cast<float>(a * w.text_map.values()[i] + config.modality_mix * extra.values()[i]);
    }
    w.image_map = store::EmbeddingMatrix(d, d, std::move(img));
  }
  {
    Rng rng(seed, "synth.vocab");
    w.vocab_table = normal_rows(rng, composer_config.vocab_size, d, config.filler_scale);
    for (std::uint32_t j = 0; j < config.attributes; ++j) {
      for (std::uint8_t v = 0; v < 2; ++v) {
        auto u = w.concepts.row(2 * j + v);
        auto row = map_vector(w.text_map, std::vector<double>(u.begin(), u.end()));
        auto dst = w.vocab_table.mutable_row(w.word_id(j, v));
        for (std::uint32_t k = 0; k < d; ++k) dst[k] = static_cast<float>(row[k] / unit);
      }
    }
  }

  ComposerF composer(composer_config, &w.vocab_table);
  Generator gen(w, config, composer, seed);
  w.corpus = gen.split("corpus", config.corpus);
  w.database = gen.split("db", config.database);
  w.gallery = gen.split("gallery", config.gallery);

  std::map<std::uint64_t, std::vector<std::uint64_t>> by_combo;
  for (std::uint64_t i = 0; i < w.gallery.items.size(); ++i) {
    by_combo[combo_key(w.gallery.items[i].attributes)].push_back(i);
  }
  Rng task_rng(seed, "synth.tasks");
  const std::uint64_t max_attempts = 100 * std::max<std::uint64_t>(config.tasks, 1);
  for (std::uint64_t attempt = 0; w.tasks.size() < config.tasks; ++attempt) {
    if (attempt >= max_attempts) {
      throw ConfigError("gallery of " + std::to_string(config.gallery) + " items cannot supply " +
                        std::to_string(config.tasks) + " tasks");
    }
    const std::uint64_t ref = task_rng.index(w.gallery.items.size());
    const auto j = static_cast<std::uint32_t>(task_rng.index(config.attributes));
    auto attrs = w.gallery.items[ref].attributes;
    attrs[j] ^= 1;
    auto it = by_combo.find(combo_key(attrs));
    if (it == by_combo.end()) continue;
    const auto& holders = it->second;
    const std::uint64_t target = holders[task_rng.index(holders.size())];

    EvalTask t;
    t.reference = ref;
    t.instruction = {TokenItem::tok(w.vocab.id("a")), TokenItem::slot(0), TokenItem::slot(1),
                     TokenItem::slot(2), TokenItem::tok(w.vocab.id("with")),
                     TokenItem::tok(w.word_id(j, attrs[j]))};
    for (std::uint64_t i = 0; i < w.gallery.items.size(); ++i) {
      if (i == ref) continue;
      if (i != target && std::binary_search(holders.begin(), holders.end(), i)) continue;
      t.candidates.push_back(i);
    }
    t.targets = {target};
    w.tasks.push_back(std::move(t));
  }
  return w;
}

void save_world(const SynthWorld& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  w.vocab.save(dir / "vocab.json");
  store::save(w.vocab_table, dir / "vocab.kedb");
  for (auto [name, split] : {std::pair{"corpus", &w.corpus}, {"db", &w.database},
                             {"gallery", &w.gallery}}) {
    const std::string n = name;
    store::save(split->images, dir / (n + "_images.kedb"));
    store::save(split->captions, dir / (n + "_captions.kedb"));
    store::save_records(split->records, dir / (n + ".jsonl"));
  }
  save_tasks(w.tasks, dir / "tasks.jsonl");
}

}  // namespace keds::encoders
