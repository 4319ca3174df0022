#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>

#include "keds/bkp/bkp.hpp"
#include "keds/cli/gradient_suite.hpp"
#include "keds/cli/pipeline.hpp"
#include "keds/cli/run_config.hpp"
#include "keds/encoders/tokens.hpp"
#include "keds/error.hpp"
#include "keds/evalkit/evalkit.hpp"
#include "keds/store/embedding_matrix.hpp"
#include "keds/store/index.hpp"
#include "keds/store/knowledge_base.hpp"
#include "keds/store/metadata.hpp"
#include "keds/trainer/losses.hpp"
#include "keds/trainer/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace keds;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

store::EmbeddingMatrix to_matrix(const FloatArray& a, bool normalized = false) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array, got " + std::to_string(a.ndim()) + "-d");
  std::vector<float> v(a.data(), a.data() + a.size());
  return store::EmbeddingMatrix(static_cast<std::uint32_t>(a.shape(1)), static_cast<std::uint64_t>(a.shape(0)),
                                std::move(v), normalized);
}

py::array_t<float> to_array(const store::EmbeddingMatrix& m) {
  py::array_t<float> out({py::ssize_t(m.count()), py::ssize_t(m.dim())});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

std::vector<float> to_vector(const FloatArray& a) { return {a.data(), a.data() + a.size()}; }

py::tuple hits_to_arrays(const std::vector<std::vector<store::SearchHit>>& hits, std::size_t k) {
  py::array_t<std::int64_t> ids({py::ssize_t(hits.size()), py::ssize_t(k)});
  py::array_t<double> scores({py::ssize_t(hits.size()), py::ssize_t(k)});
  auto i = ids.mutable_unchecked<2>();
  auto s = scores.mutable_unchecked<2>();
  for (std::size_t q = 0; q < hits.size(); ++q) {
    for (std::size_t j = 0; j < k; ++j) {
      const bool have = j < hits[q].size();
      i(q, j) = have ? std::int64_t(hits[q][j].id) : -1;
      s(q, j) = have ? hits[q][j].score : -std::numeric_limits<double>::infinity();
    }
  }
  return py::make_tuple(ids, scores);
}

py::dict record_to_dict(const store::KnowledgeRecord& r) {
  py::dict d;
  d["id"] = r.id;
  d["caption_tokens"] = r.caption_tokens;
  d["subject_span"] = r.subject_span ? py::object(py::make_tuple(r.subject_span->start, r.subject_span->end))
                                     : py::object(py::none());
  d["text"] = r.text ? py::object(py::str(*r.text)) : py::object(py::none());
  return d;
}

store::KnowledgeRecord record_from_dict(const py::dict& d) {
  store::KnowledgeRecord r;
  r.id = d["id"].cast<std::uint64_t>();
  r.caption_tokens = d["caption_tokens"].cast<std::vector<std::uint32_t>>();
  if (d.contains("subject_span") && !d["subject_span"].is_none()) {
    auto span = d["subject_span"].cast<std::pair<std::uint32_t, std::uint32_t>>();
    r.subject_span = store::Span{span.first, span.second};
  }
  if (d.contains("text") && !d["text"].is_none()) r.text = d["text"].cast<std::string>();
  r.validate();
  return r;
}

py::dict recalls_to_dict(const evalkit::Recalls& r) {
  py::dict d;
  d["R1"] = r.r1;
  d["R5"] = r.r5;
  d["R10"] = r.r10;
  d["R50"] = r.r50;
  d["n_tasks"] = r.n_tasks;
  return d;
}

py::list rows_to_list(const std::vector<evalkit::SweepRow>& rows) {
  py::list out;
  for (const auto& row : rows) {
    auto d = recalls_to_dict(row.recalls);
    d["axis"] = row.axis;
    std::visit([&](const auto& v) { d["value"] = v; }, row.value);
    d["seed"] = row.seed;
    out.append(d);
  }
  return out;
}

const bkp::BkpParams<float>& stream_of(const trainer::Model& m, const std::string& stream) {
  if (stream == "M") return m.phi_m;
  if (stream == "A") return m.phi_a;
  throw ConfigError("stream must be M or A, got '" + stream + "'");
}

}  // namespace

PYBIND11_MODULE(keds, m) {
  m.doc() = "Knowledge-enhanced composed retrieval over frozen embeddings";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<PathError>(m, "PathError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<DegenerateVectorError>(m, "DegenerateVectorError", base.ptr());
  py::register_exception<BatchError>(m, "BatchError", base.ptr());
  py::register_exception<LookupError>(m, "LookupError", base.ptr());

  // Exporter interchange.
  m.def(
      "write_kedb",
      [](const fs::path& path, const FloatArray& a, bool normalized) { store::save(to_matrix(a, normalized), path); },
      py::arg("path"), py::arg("array"), py::arg("normalized") = false);
  m.def("read_kedb", [](const fs::path& path) { return to_array(store::load(path)); }, py::arg("path"));
  m.def(
      "read_metadata",
      [](const fs::path& path) {
        py::list out;
        for (const auto& r : store::load_records(path)) out.append(record_to_dict(r));
        return out;
      },
      py::arg("path"));
  m.def(
      "write_metadata",
      [](const fs::path& path, const py::list& records) {
        std::vector<store::KnowledgeRecord> rs;
        for (const auto& r : records) rs.push_back(record_from_dict(r.cast<py::dict>()));
        store::save_records(rs, path);
      },
      py::arg("path"), py::arg("records"));
  m.def(
      "read_vocab",
      [](const fs::path& path) {
        auto v = encoders::Vocab::load(path);
        py::dict d;
        for (std::size_t i = 0; i < v.size(); ++i) d[py::str(v.word(std::uint32_t(i)))] = i;
        return d;
      },
      py::arg("path"));
  m.def(
      "write_vocab",
      [](const fs::path& path, const std::map<std::string, std::uint32_t>& ids) {
        std::vector<std::string> words(ids.size());
        for (const auto& [w, id] : ids) {
          if (id >= words.size() || !words[id].empty()) throw FormatError("vocab ids must be 0..n-1, each once");
          words[id] = w;
        }
        encoders::Vocab(std::move(words)).save(path);
      },
      py::arg("path"), py::arg("vocab"));

  // Indices.
  py::class_<store::FlatIndex>(m, "FlatIndex")
      .def(py::init([](const FloatArray& a) {
        return store::FlatIndex(std::make_shared<const store::EmbeddingMatrix>(to_matrix(a)));
      }))
      .def_property_readonly("size", &store::FlatIndex::size)
      .def(
          "search",
          [](const store::FlatIndex& ix, const FloatArray& q, std::size_t k) {
            return hits_to_arrays(ix.search_batch(to_matrix(q), k), k);
          },
          py::arg("queries"), py::arg("k"));
  py::class_<store::IvfIndex>(m, "IvfIndex")
      .def(py::init([](const FloatArray& a, std::size_t partitions, std::size_t iterations, std::uint64_t seed,
                       std::size_t nprobe) {
             return store::build_ivf(std::make_shared<const store::EmbeddingMatrix>(to_matrix(a)),
                                     {partitions, iterations, seed, nprobe});
           }),
           py::arg("data"), py::arg("partitions"), py::arg("iterations") = 10, py::arg("seed") = 0,
           py::arg("nprobe") = 4)
      .def_property("nprobe", &store::IvfIndex::nprobe, &store::IvfIndex::set_nprobe)
      .def_property_readonly("size", &store::IvfIndex::size)
      .def(
          "search",
          [](const store::IvfIndex& ix, const FloatArray& q, std::size_t k) {
            return hits_to_arrays(ix.search_batch(to_matrix(q), k), k);
          },
          py::arg("queries"), py::arg("k"));

  py::class_<store::KnowledgeBase>(m, "KnowledgeBase")
      .def_static(
          "build",
          [](const FloatArray& images, const FloatArray& captions, const py::list& records) {
            std::vector<store::KnowledgeRecord> rs;
            for (const auto& r : records) rs.push_back(record_from_dict(r.cast<py::dict>()));
            return store::KnowledgeBase::build(to_matrix(images), to_matrix(captions), std::move(rs), {});
          },
          py::arg("images"), py::arg("captions"), py::arg("records"))
      .def_static(
          "load",
          [](const fs::path& dir, const std::string& prefix) { return store::KnowledgeBase::load(dir, prefix, {}); },
          py::arg("dir"), py::arg("prefix") = "db")
      .def_property_readonly("size", &store::KnowledgeBase::size)
      .def(
          "retrieve",
          [](const store::KnowledgeBase& kb, const FloatArray& image, std::size_t k) {
            auto ctx = bkp::retrieve_context(kb, to_vector(image), k);
            py::dict d;
            d["image_ids"] = ctx.image_ids;
            d["caption_ids"] = ctx.caption_ids;
            return d;
          },
          py::arg("image"), py::arg("k"));

  // Model.
  py::class_<trainer::Model>(m, "Model")
      .def(
          "project",
          [](const trainer::Model& model, const std::string& stream, const FloatArray& image,
             const store::KnowledgeBase& kb, std::size_t k) {
            auto v = to_vector(image);
            auto ctx = bkp::retrieve_context(kb, v, k);
            auto out = bkp::project(stream_of(model, stream),
                                    numeric::TensorF({1, std::size_t(v.size())}, v), ctx);
            py::array_t<float> a({py::ssize_t(out.shape()[0]), py::ssize_t(out.shape()[1])});
            std::copy(out.values().begin(), out.values().end(), a.mutable_data());
            return a;
          },
          py::arg("stream"), py::arg("image"), py::arg("knowledge"), py::arg("k") = 16,
          "Three pseudo-token rows [3 x d] for one image feature.");
  m.def("load_checkpoint", [](const fs::path& p) { return trainer::load_checkpoint(p).model; }, py::arg("path"));

  // Losses and scoring.
  m.def(
      "contrastive_loss",
      [](const DoubleArray& img, const DoubleArray& txt, double tau) {
        if (img.ndim() != 2 || txt.ndim() != 2) throw DimensionError("expected 2-d arrays");
        numeric::TensorD a({std::size_t(img.shape(0)), std::size_t(img.shape(1))},
                           std::vector<double>(img.data(), img.data() + img.size()));
        numeric::TensorD b({std::size_t(txt.shape(0)), std::size_t(txt.shape(1))},
                           std::vector<double>(txt.data(), txt.data() + txt.size()));
        return trainer::contrastive_loss(a, b, tau).item();
      },
      py::arg("img"), py::arg("txt"), py::arg("tau") = 100.0);
  m.def(
      "registration_loss",
      [](const DoubleArray& v, const DoubleArray& t, const DoubleArray& ts, const DoubleArray& ts2, double beta) {
        auto span = [](const DoubleArray& a) { return std::span<const double>(a.data(), std::size_t(a.size())); };
        auto r = trainer::registration_loss(span(v), span(t), span(ts), span(ts2), beta);
        py::dict d;
        d["cos"] = r.cos;
        d["sup"] = r.sup;
        d["total"] = r.total;
        return d;
      },
      py::arg("v"), py::arg("t"), py::arg("ts"), py::arg("ts2"), py::arg("beta"));
  m.def(
      "hybrid_feature",
      [](const FloatArray& v, const FloatArray& va, double alpha) {
        auto h = evalkit::hybrid_feature(to_vector(v), to_vector(va), alpha);
        py::array_t<float> a(py::ssize_t(h.size()));
        std::copy(h.begin(), h.end(), a.mutable_data());
        return a;
      },
      py::arg("v"), py::arg("va"), py::arg("alpha"));

  // Pipeline, driven by the same JSON config as the command-line tool.
  py::class_<cli::RunConfig>(m, "RunConfig")
      .def(py::init([](const std::string& text) { return cli::parse_run_config(text, "<python>"); }),
           py::arg("json") = "{}")
      .def_static("load", &cli::load_run_config, py::arg("path"))
      .def("to_json", [](const cli::RunConfig& c) { return cli::to_json(c); })
      .def_property(
          "dir", [](const cli::RunConfig& c) { return c.store.dir; },
          [](cli::RunConfig& c, const std::string& d) { c.store.dir = d; });
  m.def("gen_synth", [](const cli::RunConfig& c) { cli::gen_synth(c, c.world_dir()); }, py::arg("config"));
  m.def("build_db", [](const cli::RunConfig& c) { return cli::build_db(c, c.db_dir()); }, py::arg("config"));
  m.def("mine", [](const cli::RunConfig& c) { return cli::mine(c, cli::default_triplets(c)); }, py::arg("config"));
  m.def(
      "train",
      [](const cli::RunConfig& c) {
        py::gil_scoped_release release;
        return cli::train(c, cli::default_checkpoint(c), {});
      },
      py::arg("config"));
  m.def("load_knowledge", &cli::load_knowledge, py::arg("config"));
  m.def(
      "evaluate", [](const cli::RunConfig& c, const trainer::Model& model) { return rows_to_list(cli::evaluate(c, model)); },
      py::arg("config"), py::arg("model"));

  m.def(
      "gradient_suite",
      [](std::size_t seeds) {
        auto r = cli::run_gradient_suite(seeds);
        py::dict d;
        for (const auto& c : r.cases) d[py::str(c.name)] = py::make_tuple(c.passed, c.max_rel_error);
        return d;
      },
      py::arg("seeds") = 3);
}
