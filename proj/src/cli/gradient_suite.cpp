#include "keds/cli/gradient_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "keds/bkp/bkp.hpp"
#include "keds/encoders/composer.hpp"
#include "keds/numeric/gradcheck.hpp"
#include "keds/numeric/ops.hpp"
#include "keds/random.hpp"
#include "keds/trainer/losses.hpp"

namespace keds::cli {

namespace nm = numeric;
using nm::TensorD;

namespace {

TensorD leaf(Rng& rng, nm::Shape shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return TensorD(shape, rng.normal_vector(n), true);
}

TensorD weights(Rng& rng, nm::Shape shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return TensorD(shape, rng.normal_vector(n));
}

/// Reduces an output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
TensorD project_scalar(const TensorD& out, const TensorD& w) { return nm::dot(out, w); }

struct Case {
  std::string name;
  /// Returns the max relative error for one seed; may throw on a hard failure.
  std::function<double(std::uint64_t, double)> run;
};

double check(const nm::ScalarFn& fn, std::vector<TensorD> inputs, double tol) {
  return nm::gradcheck(fn, std::move(inputs), 1e-5, tol).max_rel_error;
}

std::vector<Case> cases() {
  std::vector<Case> out;
  out.push_back({"matmul", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.matmul");
                   auto w = weights(rng, {3, 5});
                   return check([&](std::span<const TensorD> in) { return project_scalar(nm::matmul(in[0], in[1]), w); },
                                {leaf(rng, {3, 4}), leaf(rng, {4, 5})}, tol);
                 }});
  out.push_back({"softmax", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.softmax");
                   auto w = weights(rng, {3, 6});
                   return check([&](std::span<const TensorD> in) { return project_scalar(nm::softmax_rows(in[0]), w); },
                                {leaf(rng, {3, 6})}, tol);
                 }});
  out.push_back({"log_softmax", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.log_softmax");
                   auto w = weights(rng, {3, 6});
                   return check(
                       [&](std::span<const TensorD> in) { return project_scalar(nm::log_softmax_rows(in[0]), w); },
                       {leaf(rng, {3, 6})}, tol);
                 }});
  out.push_back({"l2_normalize", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.normalize");
                   auto w = weights(rng, {4, 5});
                   return check([&](std::span<const TensorD> in) { return project_scalar(nm::l2_normalize(in[0]), w); },
                                {leaf(rng, {4, 5})}, tol);
                 }});
  out.push_back({"layer_norm", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.layer_norm");
                   auto w = weights(rng, {3, 6});
                   return check(
                       [&](std::span<const TensorD> in) { return project_scalar(nm::layer_norm(in[0], in[1], in[2]), w); },
                       {leaf(rng, {3, 6}), leaf(rng, {6}), leaf(rng, {6})}, tol);
                 }});
  out.push_back({"gelu", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.gelu");
                   auto w = weights(rng, {3, 6});
                   return check([&](std::span<const TensorD> in) { return project_scalar(nm::gelu(in[0]), w); },
                                {leaf(rng, {3, 6})}, tol);
                 }});
  out.push_back({"attention", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.attention");
                   // Two segments: 2 queries over 3 keys, 1 query over 2 keys; 2 heads.
                   const std::vector<std::size_t> qo{0, 2, 3}, ko{0, 3, 5};
                   auto w = weights(rng, {3, 8});
                   return check(
                       [&](std::span<const TensorD> in) {
                         return project_scalar(nm::attention(in[0], in[1], in[2], qo, ko, 2), w);
                       },
                       {leaf(rng, {3, 8}), leaf(rng, {5, 8}), leaf(rng, {5, 8})}, tol);
                 }});
  out.push_back({"segment_mean", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.segment_mean");
                   const std::vector<std::size_t> off{0, 2, 5};
                   auto w = weights(rng, {2, 4});
                   return check(
                       [&](std::span<const TensorD> in) { return project_scalar(nm::segment_mean(in[0], off), w); },
                       {leaf(rng, {5, 4})}, tol);
                 }});
  out.push_back({"composer", [](std::uint64_t s, double tol) {
                   encoders::ComposerConfig c;
                   c.vocab_size = 32;
                   c.dim = 16;
                   c.max_len = 12;
                   c.seed = s;
                   const encoders::ComposerD comp(c);
                   Rng rng(s, "grad.composer");
                   using encoders::TokenItem;
                   const encoders::TokenSequence seq{TokenItem::tok(1), TokenItem::slot(0), TokenItem::slot(1),
                                                     TokenItem::slot(2), TokenItem::tok(4), TokenItem::tok(9)};
                   TensorD w({16}, rng.normal_vector(16));
                   return check([&](std::span<const TensorD> in) { return nm::dot(comp.compose(seq, in[0]), w); },
                                {leaf(rng, {3, 16})}, tol);
                 }});
  out.push_back({"bkp_project", [](std::uint64_t s, double tol) {
                   bkp::BkpConfig cfg;
                   cfg.dim = 8;
                   cfg.layers = 2;
                   cfg.heads = 2;
                   cfg.ffn_mult = 2;
                   auto p = bkp::init<double>(s, cfg);
                   Rng rng(s, "grad.bkp");
                   // Move parameters off their init so every bias and gain matters.
                   for (auto& [name, t] : p.parameters()) {
                     auto h = t;
                     for (auto& x : h.mutable_values()) x += rng.normal(0.0, 0.3);
                   }
                   const std::size_t k = 3;
                   auto ci = nm::l2_normalize(weights(rng, {k, 8}));
                   auto cc = nm::l2_normalize(weights(rng, {k, 8}));
                   auto w = weights(rng, {3, 8});
                   TensorD image({1, 8}, rng.normal_vector(8), true);
                   auto fn = [&](std::span<const TensorD>) {
                     return nm::dot(bkp::project_batch(p, image, TensorD({k, 8}, {ci.values().begin(), ci.values().end()}),
                                                       TensorD({k, 8}, {cc.values().begin(), cc.values().end()}), k),
                                    w);
                   };
                   std::vector<TensorD> inputs{image}, key_biases;
                   for (auto& [name, t] : p.parameters()) {
                     (name.ends_with(".bk") ? key_biases : inputs).push_back(t);
                   }
                   const double err = check(fn, inputs, tol);
                   for (auto& t : key_biases) t.zero_grad();
                   fn({}).backward();
                   const double base = fn({}).item();
                   double worst = 0.0;
                   for (auto& t : key_biases) {
                     for (double g : t.grad()) worst = std::max(worst, std::abs(g));
                     auto v = t.mutable_values();
                     const double saved = v[0];
                     v[0] = saved + 1e-3;
                     worst = std::max(worst, std::abs(fn({}).item() - base));
                     v[0] = saved;
                   }
                   // A nonzero key-bias sensitivity is a real failure; report it as error 1.
                   return worst < 1e-10 ? err : std::max(err, 1.0);
                 }});
  out.push_back({"contrastive_loss", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.contrastive");
                   return check(
                       [](std::span<const TensorD> in) { return trainer::contrastive_loss(in[0], in[1], 10.0); },
                       {leaf(rng, {4, 6}), leaf(rng, {4, 6})}, tol);
                 }});
  out.push_back({"registration_loss", [](std::uint64_t s, double tol) {
                   Rng rng(s, "grad.registration");
                   return check(
                       [](std::span<const TensorD> in) {
                         return trainer::registration_loss(in[0], in[1], in[2], in[3], 0.7);
                       },
                       {leaf(rng, {3, 6}), leaf(rng, {3, 6}), leaf(rng, {3, 6}), leaf(rng, {3, 6})}, tol);
                 }});
  return out;
}

}  // namespace

bool GradientReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
}

GradientReport run_gradient_suite(std::size_t seeds, double tolerance) {
  const auto t0 = std::chrono::steady_clock::now();
  GradientReport report;
  for (const auto& c : cases()) {
    GradientCase gc{c.name, seeds, 0.0, true, {}};
    for (std::uint64_t s = 0; s < seeds; ++s) {
      try {
        const double e = c.run(s, tolerance);
        gc.max_rel_error = std::max(gc.max_rel_error, std::isnan(e) ? 1.0 : e);
        if (!(e < tolerance)) {
          gc.passed = false;
          if (gc.detail.empty()) gc.detail = "seed " + std::to_string(s);
        }
      } catch (const std::exception& ex) {
        gc.passed = false;
        gc.detail = "seed " + std::to_string(s) + ": " + ex.what();
      }
    }
    report.cases.push_back(std::move(gc));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string format_report(const GradientReport& report) {
  std::string out;
  char line[256];
  for (const auto& c : report.cases) {
    std::snprintf(line, sizeof line, "%-18s seeds=%zu max_rel_err=%.3e %s%s%s\n", c.name.c_str(), c.seeds,
                  c.max_rel_error, c.passed ? "ok" : "FAIL", c.detail.empty() ? "" : " ", c.detail.c_str());
    out += line;
  }
  std::snprintf(line, sizeof line, "%zu ops, %.2fs, %s\n", report.cases.size(), report.seconds,
                report.passed() ? "all passed" : "FAILED");
  out += line;
  return out;
}

}  // namespace keds::cli
