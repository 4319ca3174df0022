#include "keds/evalkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "keds/error.hpp"
#include "keds/mining/mining.hpp"
#include "keds/numeric/ops.hpp"
#include "keds/parallel.hpp"
#include "keds/store/index.hpp"

namespace keds::evalkit {

namespace nm = numeric;
using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 32;

std::vector<float> normalized(std::span<const double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n < nm::kNormEpsilon) throw DegenerateVectorError("query feature has zero norm");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
  return out;
}

nm::TensorF rows_tensor(const store::EmbeddingMatrix& m, std::span<const std::uint64_t> ids) {
  std::vector<float> v;
  v.reserve(ids.size() * m.dim());
  for (auto id : ids) {
    auto r = m.row(id);
    v.insert(v.end(), r.begin(), r.end());
  }
  return nm::TensorF({ids.size(), m.dim()}, std::move(v));
}

void check_reference(const store::EmbeddingMatrix& gallery, const encoders::EvalTask& t) {
  if (t.reference >= gallery.count()) {
    throw LookupError("task reference " + std::to_string(t.reference) + " has no gallery feature (" +
                      std::to_string(gallery.count()) + " rows)");
  }
}

double effective_alpha(const InferenceConfig& c) {
  if (c.streams == "M") return 1.0;
  if (c.streams == "A") return 0.0;
  return c.alpha;
}

}  // namespace

std::vector<float> hybrid_feature(std::span<const float> v, std::span<const float> va, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must be in [0, 1], got " + std::to_string(alpha));
  }
  if (v.size() != va.size()) throw DimensionError("hybrid_feature of vectors with different lengths");
  std::vector<double> mix(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) mix[i] = alpha * v[i] + (1.0 - alpha) * va[i];
  return normalized(mix);
}

std::vector<std::uint64_t> rank_candidates(std::span<const float> query,
                                           const store::EmbeddingMatrix& gallery,
                                           std::span<const std::uint64_t> candidates) {
  if (query.size() != gallery.dim()) {
    throw DimensionError("query dim " + std::to_string(query.size()) + " != gallery dim " +
                         std::to_string(gallery.dim()));
  }
  std::vector<store::SearchHit> hits;
  hits.reserve(candidates.size());
  for (auto id : candidates) {
    if (id >= gallery.count()) throw LookupError("candidate " + std::to_string(id) + " has no feature");
    hits.push_back({id, store::inner_product(query, gallery.row(id))});
  }
  std::sort(hits.begin(), hits.end(), store::hit_before);
  std::vector<std::uint64_t> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back(h.id);
  return out;
}

double recall_at_k(const std::vector<std::vector<std::uint64_t>>& rankings,
                   const std::vector<encoders::EvalTask>& tasks, std::size_t k) {
  if (k == 0) throw ConfigError("recall@k needs k >= 1");
  if (rankings.size() != tasks.size()) throw DimensionError("one ranking per task expected");
  if (tasks.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& r = rankings[t];
    const auto end = r.begin() + std::min(k, r.size());
    for (auto target : tasks[t].targets) {
      if (std::find(r.begin(), end, target) != end) {
        ++hits;
        break;
      }
    }
  }
  return double(hits) / double(tasks.size());
}

Recalls summarize(const std::vector<std::vector<std::uint64_t>>& rankings,
                  const std::vector<encoders::EvalTask>& tasks) {
  return {recall_at_k(rankings, tasks, 1), recall_at_k(rankings, tasks, 5),
          recall_at_k(rankings, tasks, 10), recall_at_k(rankings, tasks, 50), tasks.size()};
}

void InferenceConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
  if (k < 1) throw ConfigError("K must be >= 1");
  if (streams != "both" && streams != "M" && streams != "A") {
    throw ConfigError("streams must be both, M or A, got '" + streams + "'");
  }
}

ComposedQueries compose_queries(const Bundle& b, const std::vector<encoders::EvalTask>& tasks,
                                const InferenceConfig& config, std::size_t threads) {
  config.validate();
  if (!b.model || !b.composer || !b.knowledge || !b.gallery) throw ConfigError("incomplete eval bundle");
  const std::uint32_t d = b.gallery->dim();
  if (b.model->phi_m.config.dim != d || b.composer->dim() != d) {
    throw DimensionError("model, composer and gallery dims disagree");
  }
  for (const auto& t : tasks) check_reference(*b.gallery, t);
  const bool run_m = config.streams != "A";
  const bool run_a = config.streams != "M";
  const std::size_t k = config.k;
  const std::size_t n = tasks.size();
  std::vector<float> m_out(n * d), a_out(n * d);

  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * kChunk, end = std::min(n, begin + kChunk);
    std::vector<std::uint64_t> refs;
    std::vector<encoders::TokenSequence> seqs;
    for (std::size_t t = begin; t < end; ++t) {
      refs.push_back(tasks[t].reference);
      seqs.push_back(tasks[t].instruction);
    }
    auto queries = b.gallery->select(refs);
    auto ih = b.knowledge->image_index().search_batch(queries, k);
    auto ch = b.knowledge->caption_index().search_batch(queries, k);
    std::vector<std::uint64_t> ci, cc;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      if (ih[i].size() < k || ch[i].size() < k) {
        throw EmptyContextError("knowledge base cannot supply K=" + std::to_string(k));
      }
      for (const auto& h : ih[i]) ci.push_back(h.id);
      for (const auto& h : ch[i]) cc.push_back(h.id);
    }
    auto images = rows_tensor(*b.gallery, refs);
    auto ctx_i = rows_tensor(b.knowledge->images(), ci);
    auto ctx_c = rows_tensor(b.knowledge->captions(), cc);
    auto run = [&](const bkp::BkpParams<float>& phi, std::vector<float>& out) {
      auto v = bkp::project_batch(phi, images, ctx_i, ctx_c, k, config.knockout);
      auto f = b.composer->compose_batch(seqs, v, mining::kPseudoRows);
      std::copy(f.values().begin(), f.values().end(), out.begin() + begin * d);
    };
    if (run_m) run(b.model->phi_m, m_out);
    if (run_a) run(b.model->phi_a, a_out);
  });
  if (!run_m) m_out = a_out;
  if (!run_a) a_out = m_out;
  return {store::EmbeddingMatrix(d, n, std::move(m_out)), store::EmbeddingMatrix(d, n, std::move(a_out))};
}

std::vector<std::vector<std::uint64_t>> rank_composed(const Bundle& b,
                                                      const std::vector<encoders::EvalTask>& tasks,
                                                      const ComposedQueries& q, double alpha,
                                                      std::size_t threads) {
  if (q.m.count() != tasks.size() || q.a.count() != tasks.size()) {
    throw DimensionError("one composed query per task expected");
  }
  std::vector<std::vector<std::uint64_t>> out(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t t) {
    auto h = hybrid_feature(q.m.row(t), q.a.row(t), alpha);
    out[t] = rank_candidates(h, *b.gallery, tasks[t].candidates);
  });
  return out;
}

std::vector<std::vector<std::uint64_t>> rank_tasks(const Bundle& b,
                                                   const std::vector<encoders::EvalTask>& tasks,
                                                   const InferenceConfig& config, std::size_t threads) {
  auto q = compose_queries(b, tasks, config, threads);
  return rank_composed(b, tasks, q, effective_alpha(config), threads);
}

const char* baseline_name(Baseline b) {
  switch (b) {
    case Baseline::ImageOnly: return "image-only";
    case Baseline::TextOnly: return "text-only";
    case Baseline::ImageText: return "image+text";
  }
  return "?";
}

std::vector<float> baseline_query(Baseline b, const encoders::ComposerF& composer,
                                  const store::EmbeddingMatrix& gallery, const encoders::EvalTask& task) {
  check_reference(gallery, task);
  auto image = gallery.row(task.reference);
  if (b == Baseline::ImageOnly) {
    std::vector<double> v(image.begin(), image.end());
    return normalized(v);
  }
  auto text_seq = encoders::without_slots(task.instruction);
  auto text = composer.encode(std::span<const encoders::TokenSequence>(&text_seq, 1));
  if (b == Baseline::TextOnly) {
    std::vector<double> v(text.values().begin(), text.values().end());
    return normalized(v);
  }
  std::vector<double> iv(image.begin(), image.end()), tv(text.values().begin(), text.values().end());
  auto in = normalized(iv), tn = normalized(tv);
  std::vector<double> avg(in.size());
  for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5 * (double(in[i]) + double(tn[i]));
  return normalized(avg);
}

std::vector<std::vector<std::uint64_t>> rank_baseline(Baseline b, const encoders::ComposerF& composer,
                                                      const store::EmbeddingMatrix& gallery,
                                                      const std::vector<encoders::EvalTask>& tasks,
                                                      std::size_t threads) {
  std::vector<std::vector<std::uint64_t>> out(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t t) {
    out[t] = rank_candidates(baseline_query(b, composer, gallery, tasks[t]), gallery, tasks[t].candidates);
  });
  return out;
}

SweepPoint make_point(const std::string& axis, const SweepValue& value,
                      const InferenceConfig& base_inference, const trainer::TrainConfig& base_train) {
  SweepPoint p{axis, value, base_inference, base_train, 0, false};
  auto number = [&]() {
    if (!std::holds_alternative<double>(value)) throw ConfigError("axis " + axis + " takes numbers");
    return std::get<double>(value);
  };
  if (axis == "alpha") {
    p.inference.alpha = number();
    p.inference.streams = "both";
  } else if (axis == "k") {
    const double k = number();
    if (k < 1 || k != std::floor(k)) throw ConfigError("K must be a positive integer");
    p.inference.k = p.train.k = static_cast<std::uint32_t>(k);
    p.retrain = true;
  } else if (axis == "beta") {
    p.train.beta = number();
    p.retrain = true;
  } else if (axis == "db_size") {
    const double n = number();
    if (n < 1 || n != std::floor(n)) throw ConfigError("db_size must be a positive integer");
    p.db_size = static_cast<std::uint64_t>(n);
    p.retrain = true;
  } else if (axis == "knockout") {
    if (!std::holds_alternative<std::string>(value)) throw ConfigError("knockout axis takes names");
    const auto& name = std::get<std::string>(value);
    if (name == "none") {
    } else if (name == "img") {
      p.inference.knockout.image_branch = p.train.knockout.image_branch = true;
      p.retrain = true;
    } else if (name == "cap") {
      p.inference.knockout.caption_branch = p.train.knockout.caption_branch = true;
      p.retrain = true;
    } else if (name == "phi_a") {
      p.inference.alpha = 1.0;
    } else if (name == "context") {
      p.train.a_template = "prompt";
      p.retrain = true;
    } else if (name == "extra") {
      p.train.beta = 0.0;
      p.retrain = true;
    } else {
      throw ConfigError("unknown knockout '" + name + "' (none, img, cap, phi_a, context, extra)");
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "' (alpha, k, beta, db_size, knockout)");
  }
  p.inference.validate();
  p.train.validate();
  return p;
}

std::vector<SweepRow> ablation_sweep(const std::string& axis, const std::vector<SweepValue>& values,
                                     const InferenceConfig& base_inference,
                                     const trainer::TrainConfig& base_train, std::uint64_t seed,
                                     const std::function<Recalls(const SweepPoint&)>& evaluate) {
  std::vector<SweepPoint> points;
  for (const auto& v : values) points.push_back(make_point(axis, v, base_inference, base_train));
  std::vector<SweepRow> rows;
  for (const auto& p : points) rows.push_back({axis, p.value, evaluate(p), seed});
  return rows;
}

std::string to_json_line(const SweepRow& row) {
  json j;
  j["axis"] = row.axis;
  if (std::holds_alternative<double>(row.value)) {
    j["value"] = std::get<double>(row.value);
  } else {
    j["value"] = std::get<std::string>(row.value);
  }
  j["R1"] = row.recalls.r1;
  j["R5"] = row.recalls.r5;
  j["R10"] = row.recalls.r10;
  j["R50"] = row.recalls.r50;
  j["n_tasks"] = row.recalls.n_tasks;
  j["seed"] = row.seed;
  return j.dump();
}

void save_report(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError("cannot open for writing: " + path.string());
  for (const auto& r : rows) out << to_json_line(r) << '\n';
}

std::string format_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %-10s %7s %7s %7s %7s %7s\n", "axis", "value", "R1", "R5",
                "R10", "R50", "tasks");
  os << buf;
  for (const auto& r : rows) {
    std::string v;
    if (std::holds_alternative<double>(r.value)) {
      std::snprintf(buf, sizeof buf, "%g", std::get<double>(r.value));
      v = buf;
    } else {
      v = std::get<std::string>(r.value);
    }
    std::snprintf(buf, sizeof buf, "%-10s %-10s %7.3f %7.3f %7.3f %7.3f %7zu\n", r.axis.c_str(),
                  v.c_str(), r.recalls.r1, r.recalls.r5, r.recalls.r10, r.recalls.r50,
                  r.recalls.n_tasks);
    os << buf;
  }
  return os.str();
}

}  // namespace keds::evalkit
