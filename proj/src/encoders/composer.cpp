#include "keds/encoders/composer.hpp"

#include <cmath>
#include <cstring>

#include "keds/error.hpp"
#include "keds/numeric/ops.hpp"
#include "keds/random.hpp"

namespace keds::encoders {

namespace nm = numeric;

namespace {

template <typename T>
nm::Tensor<T> uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return nm::Tensor<T>({rows, cols}, std::move(v));
}

template <typename T>
nm::Tensor<T> normal_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return nm::Tensor<T>({rows, cols}, std::move(v));
}

template <typename T>
nm::Tensor<T> filled(std::size_t n, T value) {
  return nm::Tensor<T>({n}, std::vector<T>(n, value));
}

template <typename T>
nm::Tensor<T> linear(const nm::Tensor<T>& x, const nm::Tensor<T>& w, const nm::Tensor<T>& b) {
  return nm::add_row(nm::matmul(x, w), b);
}

}  // namespace

template <typename T>
FrozenComposer<T>::FrozenComposer(const ComposerConfig& config,
                                  const store::EmbeddingMatrix* vocab_table)
    : config_(config) {
  const std::size_t d = config.dim;
  if (d == 0 || config.heads == 0 || d % config.heads != 0) {
    throw ConfigError("composer dim " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(config.heads));
  }
  if (config.max_len == 0 || config.vocab_size == 0) throw ConfigError("composer needs max_len and vocab");

  if (vocab_table) {
    if (vocab_table->dim() != d || vocab_table->count() != config.vocab_size) {
      throw ConfigError("vocab table is " + std::to_string(vocab_table->count()) + "x" +
                        std::to_string(vocab_table->dim()) + ", composer expects " +
                        std::to_string(config.vocab_size) + "x" + std::to_string(d));
    }
    auto src = vocab_table->values();
    vocab_ = Tensor({config.vocab_size, d}, std::vector<T>(src.begin(), src.end()));
  } else {
    Rng rng(config.seed, "composer.vocab");
    vocab_ = normal_matrix<T>(rng, config.vocab_size, d, 1.0);
  }
  {
    Rng rng(config.seed, "composer.positions");
    positions_ = normal_matrix<T>(rng, config.max_len, d, config.position_scale);
  }
  const std::size_t hidden = d * config.ffn_mult;
  for (std::uint32_t l = 0; l < config.layers; ++l) {
    Rng rng(config.seed, "composer.block." + std::to_string(l));
    const double bd = 1.0 / std::sqrt(double(d));
    const double bh = 1.0 / std::sqrt(double(hidden));
    Block b;
    b.ln1_g = filled<T>(d, T(1));
    b.ln1_b = filled<T>(d, T(0));
    b.wq = uniform_matrix<T>(rng, d, d, bd);
    b.bq = filled<T>(d, T(0));
    b.wk = uniform_matrix<T>(rng, d, d, bd);
    b.bk = filled<T>(d, T(0));
    b.wv = uniform_matrix<T>(rng, d, d, bd);
    b.bv = filled<T>(d, T(0));
    b.wo = uniform_matrix<T>(rng, d, d, bd * config.residual_scale);
    b.bo = filled<T>(d, T(0));
    b.ln2_g = filled<T>(d, T(1));
    b.ln2_b = filled<T>(d, T(0));
    b.w1 = uniform_matrix<T>(rng, d, hidden, bd);
    b.b1 = filled<T>(hidden, T(0));
    b.w2 = uniform_matrix<T>(rng, hidden, d, bh * config.residual_scale);
    b.b2 = filled<T>(d, T(0));
    blocks_.push_back(std::move(b));
  }
}

template <typename T>
void FrozenComposer<T>::check(std::span<const TokenSequence> seqs, std::uint32_t p,
                              std::size_t pseudo_rows) const {
  if (seqs.empty()) throw LengthError("compose needs at least one sequence");
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& seq = seqs[b];
    if (seq.empty()) throw LengthError("sequence " + std::to_string(b) + " is empty");
    if (seq.size() > config_.max_len) {
      throw LengthError("sequence of " + std::to_string(seq.size()) + " tokens exceeds L_max " +
                        std::to_string(config_.max_len));
    }
    for (const auto& t : seq) {
      if (t.is_slot()) {
        if (t.value >= p || (b + 1) * std::size_t(p) > pseudo_rows) {
          throw InjectionError("slot " + std::to_string(t.value) + " but only " + std::to_string(p) +
                               " pseudo rows per sequence");
        }
      } else if (t.value >= config_.vocab_size) {
        throw LookupError("token id " + std::to_string(t.value) + " outside vocab of " +
                          std::to_string(config_.vocab_size));
      }
    }
  }
}

template <typename T>
typename FrozenComposer<T>::Tensor FrozenComposer<T>::compose_batch(
    std::span<const TokenSequence> seqs, const Tensor& pseudo, std::uint32_t p) const {
  const std::size_t d = config_.dim;
  const std::size_t pseudo_rows = pseudo.defined() ? pseudo.rows() : 0;
  if (pseudo.defined() && pseudo.cols() != d) {
    throw DimensionError("pseudo block width " + std::to_string(pseudo.cols()) + " != composer dim " +
                         std::to_string(d));
  }
  check(seqs, p, pseudo_rows);

  std::vector<nm::RowRef> tok_refs, pos_refs;
  std::vector<std::size_t> offsets{0};
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    for (std::size_t i = 0; i < seqs[b].size(); ++i) {
      const auto& t = seqs[b][i];
      tok_refs.push_back(t.is_slot() ? nm::RowRef{1, b * p + t.value} : nm::RowRef{0, t.value});
      pos_refs.push_back({0, i});
    }
    offsets.push_back(offsets.back() + seqs[b].size());
  }
  std::vector<Tensor> sources{vocab_};
  if (pseudo.defined()) sources.push_back(pseudo);
  Tensor x = nm::add(nm::gather_rows<T>(sources, tok_refs),
                     nm::gather_rows<T>(std::span<const Tensor>(&positions_, 1), pos_refs));

  for (const auto& b : blocks_) {
    Tensor h = nm::layer_norm(x, b.ln1_g, b.ln1_b);
    Tensor a = nm::attention(linear(h, b.wq, b.bq), linear(h, b.wk, b.bk), linear(h, b.wv, b.bv),
                             offsets, offsets, config_.heads);
    x = nm::add(x, linear(a, b.wo, b.bo));
    Tensor h2 = nm::layer_norm(x, b.ln2_g, b.ln2_b);
    x = nm::add(x, linear(nm::gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
  }
  return nm::l2_normalize(nm::segment_mean(x, offsets));
}

template <typename T>
typename FrozenComposer<T>::Tensor FrozenComposer<T>::encode(
    std::span<const TokenSequence> seqs) const {
  return compose_batch(seqs, Tensor(), 0);
}

template <typename T>
typename FrozenComposer<T>::Tensor FrozenComposer<T>::compose(const TokenSequence& seq,
                                                             const Tensor& pseudo) const {
  const auto p = static_cast<std::uint32_t>(pseudo.rows());
  auto out = compose_batch(std::span<const TokenSequence>(&seq, 1), pseudo, p);
  return nm::reshape(out, {config_.dim});
}

template <typename T>
std::vector<std::pair<std::string, const typename FrozenComposer<T>::Tensor*>>
FrozenComposer<T>::weights() const {
  std::vector<std::pair<std::string, const Tensor*>> out{{"vocab", &vocab_},
                                                         {"positions", &positions_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "block" + std::to_string(l) + ".";
    for (auto [name, t] : {std::pair{"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b}, {"wq", &b.wq},
                           {"bq", &b.bq}, {"wk", &b.wk}, {"bk", &b.bk}, {"wv", &b.wv},
                           {"bv", &b.bv}, {"wo", &b.wo}, {"bo", &b.bo}, {"ln2_g", &b.ln2_g},
                           {"ln2_b", &b.ln2_b}, {"w1", &b.w1}, {"b1", &b.b1}, {"w2", &b.w2},
                           {"b2", &b.b2}}) {
      out.emplace_back(p + name, t);
    }
  }
  return out;
}

template <typename T>
std::vector<unsigned char> FrozenComposer<T>::serialize() const {
  std::vector<unsigned char> bytes;
  for (const auto& [name, t] : weights()) {
    auto v = t->values();
    const auto* p = reinterpret_cast<const unsigned char*>(v.data());
    bytes.insert(bytes.end(), p, p + v.size() * sizeof(T));
  }
  return bytes;
}

template <typename T>
std::uint64_t FrozenComposer<T>::digest() const {
  auto bytes = serialize();
  return fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

template class FrozenComposer<float>;
template class FrozenComposer<double>;

}  // namespace keds::encoders
