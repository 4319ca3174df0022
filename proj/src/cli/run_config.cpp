#include "keds/cli/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "keds/error.hpp"
#include "keds/random.hpp"

namespace keds::cli {

using nlohmann::json;

namespace {

std::size_t line_of(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + offset, '\n'));
}

/// Walks one object, handing out known keys and rejecting the rest.
class Section {
 public:
  Section(const json& j, std::string path, const std::string& text, const std::string& origin)
      : j_(j), path_(std::move(path)), text_(text), origin_(origin) {
    if (!j_.is_object()) fail(path_.empty() ? "top level" : path_, "must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        fail(qualified(it.key()), "is unknown");
      }
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      fail(qualified(key), "has the wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  Section sub(const std::string& key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty() : *it, qualified(key), text_, origin_);
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    const std::string leaf = key.substr(key.rfind('.') == std::string::npos ? 0 : key.rfind('.') + 1);
    const auto pos = text_.find("\"" + leaf + "\"");
    std::string where = pos == std::string::npos ? "" : " (line " + std::to_string(line_of(text_, pos)) + ")";
    throw ConfigError(origin_ + ": key '" + key + "' " + what + where);
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  const std::string& text_;
  const std::string& origin_;
  std::vector<std::string> seen_;
};

std::string knockout_name(const bkp::Knockout& k) {
  if (k.image_branch && k.caption_branch) return "both";
  if (k.image_branch) return "img";
  if (k.caption_branch) return "cap";
  return "none";
}

bkp::Knockout knockout_from(const std::string& name) {
  if (name == "none") return {};
  if (name == "img") return {true, false};
  if (name == "cap") return {false, true};
  if (name == "both") return {true, true};
  throw ConfigError("knockout must be none, img, cap or both, got '" + name + "'");
}

}  // namespace

encoders::ComposerConfig RunConfig::composer() const {
  auto c = model.composer;
  c.dim = model.bkp.dim;
  c.seed = derive_seed(seed, "composer");
  return c;
}

store::IndexSpec RunConfig::index_spec() const {
  store::IndexSpec s;
  s.type = store.index;
  s.partitions = store.partitions;
  s.iterations = store.iterations;
  s.nprobe = store.nprobe;
  s.seed = derive_seed(seed, "store.index");
  return s;
}

std::filesystem::path RunConfig::db_dir() const {
  return store.db.empty() ? dir() / "db" : std::filesystem::path(store.db);
}

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (store.index != "flat" && store.index != "ivf") {
    throw ConfigError("store.index must be flat or ivf, got '" + store.index + "'");
  }
  if (store.index == "ivf" && (store.partitions < 1 || store.nprobe < 1 || store.nprobe > store.partitions)) {
    throw ConfigError("store: need 1 <= nprobe <= partitions");
  }
  if (model.bkp.dim == 0 || model.bkp.layers == 0 || model.bkp.heads == 0 ||
      model.bkp.dim % model.bkp.heads != 0) {
    throw ConfigError("model: heads must divide dim and layers must be >= 1");
  }
  if (model.composer.heads == 0 || model.bkp.dim % model.composer.heads != 0) {
    throw ConfigError("model.composer: heads must divide dim");
  }
  train.config.validate();
  if (train.log_every < 1) throw ConfigError("train.log_every must be >= 1");
  eval.inference.validate();
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": parse error at line " + std::to_string(line_of(text, e.byte)) + ": " +
                      e.what());
  }
  RunConfig c;
  {
    Section top(j, "", text, origin);
    top.get("seed", c.seed);
    top.get("threads", c.threads);
    {
      auto s = top.sub("synth");
      auto& y = c.synth;
      s.get("corpus", y.corpus);
      s.get("database", y.database);
      s.get("gallery", y.gallery);
      s.get("tasks", y.tasks);
      s.get("attributes", y.attributes);
      s.get("style_factors", y.style_factors);
      s.get("style_values", y.style_values);
      s.get("style_scale", y.style_scale);
      s.get("image_noise", y.image_noise);
      s.get("caption_noise", y.caption_noise);
      s.get("modality_mix", y.modality_mix);
      s.get("filler_scale", y.filler_scale);
      s.get("subject_min", y.subject_min);
      s.get("subject_max", y.subject_max);
      s.get("context_min", y.context_min);
      s.get("context_max", y.context_max);
    }
    {
      auto s = top.sub("store");
      s.get("dir", c.store.dir);
      s.get("db", c.store.db);
      s.get("db_size", c.store.db_size);
      s.get("index", c.store.index);
      s.get("partitions", c.store.partitions);
      s.get("iterations", c.store.iterations);
      s.get("nprobe", c.store.nprobe);
    }
    {
      auto s = top.sub("model");
      s.get("dim", c.model.bkp.dim);
      s.get("layers", c.model.bkp.layers);
      s.get("heads", c.model.bkp.heads);
      s.get("ffn_mult", c.model.bkp.ffn_mult);
      auto m = s.sub("composer");
      auto& cc = c.model.composer;
      m.get("vocab_size", cc.vocab_size);
      m.get("max_len", cc.max_len);
      m.get("layers", cc.layers);
      m.get("heads", cc.heads);
      m.get("ffn_mult", cc.ffn_mult);
      m.get("residual_scale", cc.residual_scale);
      m.get("position_scale", cc.position_scale);
    }
    {
      auto s = top.sub("train");
      auto& t = c.train.config;
      s.get("lr", t.lr);
      s.get("weight_decay", t.weight_decay);
      s.get("warmup_steps", t.warmup_steps);
      s.get("total_steps", t.total_steps);
      s.get("batch_size", t.batch_size);
      s.get("tau", t.tau);
      s.get("beta", t.beta);
      s.get("k", t.k);
      s.get("streams", t.streams);
      s.get("alternate", t.alternate);
      s.get("a_template", t.a_template);
      std::string ko = knockout_name(t.knockout);
      s.get("knockout", ko);
      t.knockout = knockout_from(ko);
      s.get("log_every", c.train.log_every);
      s.get("checkpoint_every", c.train.checkpoint_every);
    }
    {
      auto s = top.sub("eval");
      auto& e = c.eval.inference;
      s.get("alpha", e.alpha);
      s.get("k", e.k);
      s.get("streams", e.streams);
      std::string ko = knockout_name(e.knockout);
      s.get("knockout", ko);
      e.knockout = knockout_from(ko);
      s.get("tasks", c.eval.tasks);
      s.get("baselines", c.eval.baselines);
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot read config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string to_json(const RunConfig& c) {
  const auto& y = c.synth;
  const auto& t = c.train.config;
  const auto& e = c.eval.inference;
  const auto& cc = c.model.composer;
  json j = {
      {"seed", c.seed},
      {"threads", c.threads},
      {"synth",
       {{"corpus", y.corpus}, {"database", y.database}, {"gallery", y.gallery}, {"tasks", y.tasks},
        {"attributes", y.attributes}, {"style_factors", y.style_factors}, {"style_values", y.style_values},
        {"style_scale", y.style_scale}, {"image_noise", y.image_noise}, {"caption_noise", y.caption_noise},
        {"modality_mix", y.modality_mix}, {"filler_scale", y.filler_scale}, {"subject_min", y.subject_min},
        {"subject_max", y.subject_max}, {"context_min", y.context_min}, {"context_max", y.context_max}}},
      {"store",
       {{"dir", c.store.dir}, {"db", c.store.db}, {"db_size", c.store.db_size}, {"index", c.store.index},
        {"partitions", c.store.partitions}, {"iterations", c.store.iterations}, {"nprobe", c.store.nprobe}}},
      {"model",
       {{"dim", c.model.bkp.dim},
        {"layers", c.model.bkp.layers},
        {"heads", c.model.bkp.heads},
        {"ffn_mult", c.model.bkp.ffn_mult},
        {"composer",
         {{"vocab_size", cc.vocab_size}, {"max_len", cc.max_len}, {"layers", cc.layers}, {"heads", cc.heads},
          {"ffn_mult", cc.ffn_mult}, {"residual_scale", cc.residual_scale},
          {"position_scale", cc.position_scale}}}}},
      {"train",
       {{"lr", t.lr}, {"weight_decay", t.weight_decay}, {"warmup_steps", t.warmup_steps},
        {"total_steps", t.total_steps}, {"batch_size", t.batch_size}, {"tau", t.tau}, {"beta", t.beta},
        {"k", t.k}, {"streams", t.streams}, {"alternate", t.alternate}, {"a_template", t.a_template},
        {"knockout", knockout_name(t.knockout)}, {"log_every", c.train.log_every},
        {"checkpoint_every", c.train.checkpoint_every}}},
      {"eval",
       {{"alpha", e.alpha}, {"k", e.k}, {"streams", e.streams}, {"knockout", knockout_name(e.knockout)},
        {"tasks", c.eval.tasks}, {"baselines", c.eval.baselines}}},
  };
  return j.dump(2);
}

}  // namespace keds::cli
