#include "keds/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <numeric>

#include "keds/error.hpp"
#include "keds/numeric/ops.hpp"
#include "keds/store/binary_io.hpp"
#include "keds/trainer/losses.hpp"

namespace keds::trainer {

namespace nm = numeric;
using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[4] = {'K', 'E', 'D', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

nm::TensorF gather(const store::EmbeddingMatrix& m, const std::vector<std::uint64_t>& ids) {
  const std::uint32_t d = m.dim();
  std::vector<float> v;
  v.reserve(ids.size() * d);
  for (auto id : ids) {
    auto r = m.row(id);
    v.insert(v.end(), r.begin(), r.end());
  }
  return nm::TensorF({ids.size(), d}, std::move(v));
}

json bkp_json(const bkp::BkpConfig& c) {
  return {{"dim", c.dim}, {"layers", c.layers}, {"heads", c.heads}, {"ffn_mult", c.ffn_mult}};
}

bkp::BkpConfig bkp_from_json(const json& j) {
  bkp::BkpConfig c;
  c.dim = j.at("dim").get<std::uint32_t>();
  c.layers = j.at("layers").get<std::uint32_t>();
  c.heads = j.at("heads").get<std::uint32_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::uint32_t>();
  return c;
}

void write_segment(std::ostream& out, const std::string& name, std::span<const float> values) {
  store::io::write_string(out, name);
  store::write_matrix(out, store::EmbeddingMatrix(static_cast<std::uint32_t>(values.size()), 1,
                                                  {values.begin(), values.end()}));
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
  if (!(tau > 0)) fail("tau must be > 0");
  if (beta < 0) fail("beta must be >= 0");
  if (k < 1) fail("k must be >= 1");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (batch_size < 2) fail("batch_size must be >= 2");
  if (!(lr >= 0)) fail("lr must be >= 0");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (streams != "both" && streams != "M" && streams != "A") fail("streams must be both, M or A");
  if (a_template != "subject" && a_template != "prompt") fail("a_template must be subject or prompt");
}

Model Model::clone() const { return {phi_m.clone(), phi_a.clone()}; }

Model init_model(std::uint64_t seed, const bkp::BkpConfig& config) {
  return {bkp::init<float>(seed, config, "bkp.M"), bkp::init<float>(seed, config, "bkp.A")};
}

std::vector<nm::TensorF> all_parameters(const Model& model) {
  std::vector<nm::TensorF> out;
  for (auto& [n, t] : model.phi_m.parameters()) out.push_back(t);
  for (auto& [n, t] : model.phi_a.parameters()) out.push_back(t);
  return out;
}

std::string describe(const TrainConfig& c, const bkp::BkpConfig& m, std::uint64_t seed) {
  json j;
  j["train"] = {{"lr", c.lr},
                {"weight_decay", c.weight_decay},
                {"warmup_steps", c.warmup_steps},
                {"total_steps", c.total_steps},
                {"batch_size", c.batch_size},
                {"tau", c.tau},
                {"beta", c.beta},
                {"k", c.k},
                {"streams", c.streams},
                {"alternate", c.alternate},
                {"a_template", c.a_template},
                {"knockout_image", c.knockout.image_branch},
                {"knockout_caption", c.knockout.caption_branch}};
  j["model"] = bkp_json(m);
  j["seed"] = seed;
  return j.dump();
}

std::string to_json_line(const StepLog& log) {
  auto num = [](double x) { return std::isnan(x) ? json(nullptr) : json(x); };
  json j;
  j["step"] = log.step;
  j["lr"] = log.lr;
  j["L_c"] = num(log.l_c);
  j["L_r"] = num(log.l_r);
  return j.dump();
}

struct Trainer::Losses {
  nm::TensorF l_c;
  nm::TensorF l_r;
};

Trainer::Trainer(TrainConfig config, Model model, const encoders::ComposerF& composer,
                 const encoders::Vocab& vocab, TrainData data, std::uint64_t seed,
                 std::size_t threads)
    : config_(std::move(config)),
      model_(std::move(model)),
      composer_(composer),
      prompt_(encoders::make_prompt(vocab, mining::kPseudoRows)),
      data_(std::move(data)),
      seed_(seed),
      optimizer_(all_parameters(model_), AdamWConfig{0.9, 0.999, 1e-8, config_.weight_decay}),
      sampler_(seed, "train.sampler") {
  config_.validate();
  if (!data_.images || !data_.captions || !data_.knowledge) {
    throw ConfigError("trainer needs corpus features and a knowledge base");
  }
  if (data_.triplets.size() < 2) throw BatchError("trainer needs at least 2 triplets");
  const auto d = model_.phi_m.config.dim;
  if (data_.images->dim() != d || data_.captions->dim() != d || composer_.dim() != d ||
      data_.knowledge->images().dim() != d) {
    throw DimensionError("feature, composer and model dims disagree");
  }
  if (data_.knowledge->size() < config_.k) {
    throw EmptyContextError("knowledge base of " + std::to_string(data_.knowledge->size()) +
                            " rows cannot supply K=" + std::to_string(config_.k));
  }
  std::vector<std::uint64_t> image_ids;
  for (const auto& t : data_.triplets) {
    t.validate();
    if (t.image_id >= data_.images->count() || t.target >= data_.captions->count() ||
        t.complements[0] >= data_.captions->count() || t.complements[1] >= data_.captions->count()) {
      throw LookupError("triplet for image " + std::to_string(t.image_id) + " references a missing row");
    }
    image_ids.push_back(t.image_id);
  }
  auto queries = data_.images->select(image_ids);
  auto ih = data_.knowledge->image_index().search_batch(queries, config_.k, threads);
  auto ch = data_.knowledge->caption_index().search_batch(queries, config_.k, threads);
  for (std::size_t i = 0; i < ih.size(); ++i) {
    for (const auto& h : ih[i]) ctx_image_ids_.push_back(h.id);
    for (const auto& h : ch[i]) ctx_caption_ids_.push_back(h.id);
  }
  reshuffle();
}

void Trainer::reshuffle() {
  order_.resize(data_.triplets.size());
  std::iota(order_.begin(), order_.end(), 0);
  sampler_.shuffle(order_.begin(), order_.end());
  cursor_ = 0;
}

std::vector<std::size_t> Trainer::next_batch() {
  const std::size_t b = std::min<std::size_t>(config_.batch_size, order_.size());
  if (cursor_ + b > order_.size()) reshuffle();
  std::vector<std::size_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + b);
  cursor_ += b;
  return out;
}

Trainer::Losses Trainer::forward(const std::vector<std::size_t>& idx, bool run_m, bool run_a) const {
  const std::size_t k = config_.k;
  std::vector<std::uint64_t> img_ids, ci, cc;
  for (auto i : idx) {
    img_ids.push_back(data_.triplets[i].image_id);
    ci.insert(ci.end(), ctx_image_ids_.begin() + i * k, ctx_image_ids_.begin() + (i + 1) * k);
    cc.insert(cc.end(), ctx_caption_ids_.begin() + i * k, ctx_caption_ids_.begin() + (i + 1) * k);
  }
  auto images = gather(*data_.images, img_ids);
  auto ctx_i = gather(data_.knowledge->images(), ci);
  auto ctx_c = gather(data_.knowledge->captions(), cc);
  const auto p = mining::kPseudoRows;

  Losses out;
  if (run_m) {
    auto v = bkp::project_batch(model_.phi_m, images, ctx_i, ctx_c, k, config_.knockout);
    std::vector<encoders::TokenSequence> seqs(idx.size(), prompt_);
    auto composed = composer_.compose_batch(seqs, v, p);
    out.l_c = contrastive_loss(composed, images, config_.tau);
  }
  if (run_a) {
    auto v = bkp::project_batch(model_.phi_a, images, ctx_i, ctx_c, k, config_.knockout);
    std::vector<encoders::TokenSequence> seqs;
    std::vector<std::uint64_t> t, ts, ts2;
    for (auto i : idx) {
      const auto& tr = data_.triplets[i];
      seqs.push_back(config_.a_template == "prompt" ? prompt_ : tr.template_tokens);
      t.push_back(tr.target);
      ts.push_back(tr.complements[0]);
      ts2.push_back(tr.complements[1]);
    }
    auto composed = composer_.compose_batch(seqs, v, p);
    out.l_r = registration_loss(composed, gather(*data_.captions, t), gather(*data_.captions, ts),
                                gather(*data_.captions, ts2), config_.beta);
  }
  return out;
}

StepLog Trainer::step() {
  if (step_ >= config_.total_steps) {
    throw ScheduleError("training already reached total_steps " + std::to_string(config_.total_steps));
  }
  bool run_m = config_.streams != "A";
  bool run_a = config_.streams != "M";
  if (config_.alternate && run_m && run_a) {
    run_m = step_ % 2 == 0;
    run_a = !run_m;
  }
  auto idx = next_batch();
  auto losses = forward(idx, run_m, run_a);
  StepLog log;
  log.step = step_ + 1;
  log.lr = lr_at_step(step_ + 1, {config_.lr, config_.warmup_steps, config_.total_steps});
  log.l_c = run_m ? double(losses.l_c.item()) : std::numeric_limits<double>::quiet_NaN();
  log.l_r = run_a ? double(losses.l_r.item()) : std::numeric_limits<double>::quiet_NaN();
  nm::TensorF total = run_m && run_a ? nm::add(losses.l_c, losses.l_r) : run_m ? losses.l_c : losses.l_r;
  total.backward();
  optimizer_.step(log.lr);
  ++step_;
  return log;
}

void Trainer::run(const std::function<void(const StepLog&)>& sink) {
  while (step_ < config_.total_steps) {
    auto log = step();
    if (sink) sink(log);
  }
}

StepLog Trainer::evaluate_batch(const std::vector<std::size_t>& indices) const {
  const bool run_m = config_.streams != "A";
  const bool run_a = config_.streams != "M";
  auto losses = forward(indices, run_m, run_a);
  StepLog log;
  log.step = step_;
  log.l_c = run_m ? double(losses.l_c.item()) : std::numeric_limits<double>::quiet_NaN();
  log.l_r = run_a ? double(losses.l_r.item()) : std::numeric_limits<double>::quiet_NaN();
  return log;
}

std::string Trainer::config_json() const {
  return describe(config_, model_.phi_m.config, seed_);
}

std::uint64_t Trainer::config_digest() const { return fnv1a(config_json()); }

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.step = step_;
  c.config_json = config_json();
  c.config_digest = fnv1a(c.config_json);
  c.model = model_.clone();
  c.optimizer_steps = optimizer_.steps();
  c.first_moments = optimizer_.first_moments();
  c.second_moments = optimizer_.second_moments();
  c.rng_state = sampler_.state();
  c.cursor = cursor_;
  c.order = order_;
  return c;
}

void Trainer::restore(const Checkpoint& c) {
  if (c.config_digest != config_digest()) {
    throw ConfigError("checkpoint config digest " + std::to_string(c.config_digest) +
                      " does not match this run (" + std::to_string(config_digest()) + ")");
  }
  if (c.order.size() != data_.triplets.size() || c.cursor > c.order.size()) {
    throw FormatError("checkpoint sampler state does not fit " + std::to_string(data_.triplets.size()) +
                      " triplets");
  }
  auto dst = all_parameters(model_);
  auto src = all_parameters(c.model);
  if (dst.size() != src.size()) throw FormatError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].shape() != src[i].shape()) throw FormatError("checkpoint parameter shape mismatch");
    std::copy(src[i].values().begin(), src[i].values().end(), dst[i].mutable_values().begin());
    dst[i].zero_grad();
  }
  optimizer_.set_state(c.optimizer_steps, c.first_moments, c.second_moments);
  sampler_.set_state(c.rng_state);
  order_ = c.order;
  cursor_ = c.cursor;
  step_ = c.step;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  namespace io = store::io;
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PathError("cannot open for writing: " + tmp);
    out.write(kCheckpointMagic, 4);
    io::write_le<std::uint32_t>(out, kCheckpointVersion);
    io::write_le<std::uint64_t>(out, c.step);
    io::write_le<std::uint64_t>(out, c.config_digest);
    io::write_string(out, c.config_json);

    std::vector<std::pair<std::string, std::vector<float>>> segs;
    for (auto [tag, params] : {std::pair{"M.", &c.model.phi_m}, {"A.", &c.model.phi_a}}) {
      for (auto& [name, t] : params->parameters()) {
        segs.emplace_back(tag + name, std::vector<float>(t.values().begin(), t.values().end()));
      }
    }
    for (std::size_t i = 0; i < c.first_moments.size(); ++i) {
      segs.emplace_back("opt.m." + std::to_string(i), c.first_moments[i]);
      segs.emplace_back("opt.v." + std::to_string(i), c.second_moments[i]);
    }
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(segs.size()));
    for (const auto& [name, v] : segs) write_segment(out, name, v);

    io::write_le<std::uint64_t>(out, c.optimizer_steps);
    io::write_string(out, c.rng_state);
    io::write_le<std::uint64_t>(out, c.cursor);
    io::write_le<std::uint64_t>(out, c.order.size());
    for (auto o : c.order) io::write_le<std::uint64_t>(out, o);
    if (!out) throw PathError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  namespace io = store::io;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open: " + path.string());
  const auto size = std::filesystem::file_size(path);
  char magic[4] = {};
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw FormatError(path.string() + ": bad magic, expected KEDC");
  }
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.step = io::read_le<std::uint64_t>(in, "step");
  c.config_digest = io::read_le<std::uint64_t>(in, "config_digest");
  c.config_json = io::read_string(in, "config");
  if (fnv1a(c.config_json) != c.config_digest) {
    throw FormatError(path.string() + ": config digest does not match stored config");
  }
  bkp::BkpConfig mc;
  try {
    mc = bkp_from_json(json::parse(c.config_json).at("model"));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad config blob: " + e.what());
  }

  std::map<std::string, std::vector<float>> segs;
  const auto count = io::read_le<std::uint32_t>(in, "segment_count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = io::read_string(in, "segment_name");
    const auto pos = static_cast<std::uint64_t>(in.tellg());
    auto m = store::read_matrix(in, size - pos);
    segs[name] = std::vector<float>(m.values().begin(), m.values().end());
  }
  auto take = [&](const std::string& name, std::size_t n) {
    auto it = segs.find(name);
    if (it == segs.end()) throw FormatError(path.string() + ": missing segment " + name);
    if (it->second.size() != n) {
      throw FormatError(path.string() + ": segment " + name + " has " +
                        std::to_string(it->second.size()) + " values, expected " + std::to_string(n));
    }
    return it->second;
  };
  c.model = init_model(0, mc);
  for (auto [tag, params] : {std::pair{"M.", &c.model.phi_m}, {"A.", &c.model.phi_a}}) {
    for (auto& [name, t] : params->parameters()) {
      auto v = take(tag + name, t.numel());
      std::copy(v.begin(), v.end(), t.mutable_values().begin());
    }
  }
  auto params = all_parameters(c.model);
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.first_moments.push_back(take("opt.m." + std::to_string(i), params[i].numel()));
    c.second_moments.push_back(take("opt.v." + std::to_string(i), params[i].numel()));
  }
  c.optimizer_steps = io::read_le<std::uint64_t>(in, "optimizer_steps");
  c.rng_state = io::read_string(in, "rng_state");
  c.cursor = io::read_le<std::uint64_t>(in, "cursor");
  const auto n = io::read_le<std::uint64_t>(in, "order_size");
  if (n > size) throw FormatError(path.string() + ": order length " + std::to_string(n) + " exceeds file");
  c.order.resize(n);
  for (auto& o : c.order) o = io::read_le<std::uint64_t>(in, "order");
  return c;
}

}  // namespace keds::trainer
