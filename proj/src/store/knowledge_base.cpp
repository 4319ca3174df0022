#include "keds/store/knowledge_base.hpp"

#include <fstream>
#include <json.hpp>

#include "keds/error.hpp"
#include "keds/random.hpp"

namespace keds::store {

namespace {

std::shared_ptr<const Index> make_index(std::shared_ptr<const EmbeddingMatrix> m,
                                        const IndexSpec& spec, const std::string& label) {
  if (spec.type == "flat") return std::make_shared<FlatIndex>(std::move(m));
  if (spec.type == "ivf") {
    IvfParams p{spec.partitions, spec.iterations, derive_seed(spec.seed, "store.ivf." + label),
                spec.nprobe};
    return std::make_shared<IvfIndex>(build_ivf(std::move(m), p));
  }
  throw ConfigError("unknown index type '" + spec.type + "' (expected flat or ivf)");
}

std::filesystem::path file(const std::filesystem::path& dir, const std::string& prefix,
                           const std::string& suffix) {
  return dir / (prefix + suffix);
}

}  // namespace

KnowledgeBase KnowledgeBase::build(EmbeddingMatrix images, EmbeddingMatrix captions,
                                   std::vector<KnowledgeRecord> records, const IndexSpec& spec) {
  if (images.count() != captions.count()) {
    throw DimensionError("image bank has " + std::to_string(images.count()) +
                         " rows, caption bank " + std::to_string(captions.count()));
  }
  if (images.dim() != captions.dim()) throw DimensionError("image/caption bank dim mismatch");
  if (!records.empty() && records.size() != images.count()) {
    throw DimensionError("metadata has " + std::to_string(records.size()) + " records for " +
                         std::to_string(images.count()) + " rows");
  }
  if (!images.normalized()) images.normalize_rows();
  if (!captions.normalized()) captions.normalize_rows();
  KnowledgeBase kb;
  kb.images_ = std::make_shared<const EmbeddingMatrix>(std::move(images));
  kb.captions_ = std::make_shared<const EmbeddingMatrix>(std::move(captions));
  kb.records_ = std::move(records);
  kb.spec_ = spec;
  kb.image_index_ = make_index(kb.images_, spec, "images");
  kb.caption_index_ = make_index(kb.captions_, spec, "captions");
  return kb;
}

KnowledgeBase KnowledgeBase::load(const std::filesystem::path& dir, const std::string& prefix,
                                  const IndexSpec& fallback) {
  auto images = store::load(file(dir, prefix, "_images.kedb"));
  auto captions = store::load(file(dir, prefix, "_captions.kedb"));
  std::vector<KnowledgeRecord> records;
  if (std::filesystem::exists(file(dir, prefix, ".jsonl"))) {
    records = load_records(file(dir, prefix, ".jsonl"));
  }
  const auto manifest_path = file(dir, prefix, "_index.json");
  if (!std::filesystem::exists(manifest_path)) {
    return build(std::move(images), std::move(captions), std::move(records), fallback);
  }
  std::ifstream in(manifest_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  IndexSpec spec = fallback;
  spec.type = j.value("type", spec.type);
  spec.partitions = j.value("partitions", spec.partitions);
  spec.iterations = j.value("iterations", spec.iterations);
  spec.seed = j.value("seed", spec.seed);
  if (spec.type != "ivf") {
    return build(std::move(images), std::move(captions), std::move(records), spec);
  }
  if (!images.normalized()) images.normalize_rows();
  if (!captions.normalized()) captions.normalize_rows();
  KnowledgeBase kb;
  kb.images_ = std::make_shared<const EmbeddingMatrix>(std::move(images));
  kb.captions_ = std::make_shared<const EmbeddingMatrix>(std::move(captions));
  kb.records_ = std::move(records);
  kb.spec_ = spec;
  const std::size_t nprobe = std::min(spec.nprobe, spec.partitions);
  kb.image_index_ = std::make_shared<IvfIndex>(
      load_ivf(kb.images_, file(dir, prefix, "_images.kedi"), nprobe));
  kb.caption_index_ = std::make_shared<IvfIndex>(
      load_ivf(kb.captions_, file(dir, prefix, "_captions.kedi"), nprobe));
  return kb;
}

void KnowledgeBase::save_indices(const std::filesystem::path& dir, const std::string& prefix) const {
  nlohmann::json j;
  j["type"] = spec_.type;
  j["partitions"] = spec_.partitions;
  j["iterations"] = spec_.iterations;
  j["seed"] = spec_.seed;
  j["rows"] = size();
  if (spec_.type == "ivf") {
    save_ivf(static_cast<const IvfIndex&>(*image_index_), file(dir, prefix, "_images.kedi"));
    save_ivf(static_cast<const IvfIndex&>(*caption_index_), file(dir, prefix, "_captions.kedi"));
  }
  std::ofstream out(file(dir, prefix, "_index.json"), std::ios::trunc);
  if (!out) throw PathError("cannot write index manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

KnowledgeBase KnowledgeBase::prefix(std::uint64_t n) const {
  std::vector<KnowledgeRecord> recs;
  if (!records_.empty()) recs.assign(records_.begin(), records_.begin() + n);
  return build(images_->prefix(n), captions_->prefix(n), std::move(recs), spec_);
}

}  // namespace keds::store
