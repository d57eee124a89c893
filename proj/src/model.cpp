// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/model.hpp"

#include <cmath>
#include <optional>

#include "lca_scope/error.hpp"
#include "lca_scope/rng.hpp"

namespace lca_scope::model {

using nlohmann::json;

namespace {

constexpr double kMaskValue = -1e9;
constexpr double kLayerNormEps = 1e-5;

std::string activation_name(Activation a) { return a == Activation::kGelu ? "gelu" : "relu"; }

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "relu") return Activation::kRelu;
  throw UsageError("unknown activation '" + s + "' (expected gelu|relu)");
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw UsageError(std::string("model config: ") + name + " must be >= 1");
  };
  positive(num_layers, "num_layers");
  positive(d_model, "d_model");
  positive(num_heads, "num_heads");
  positive(ffn_dim, "ffn_dim");
  positive(max_len, "max_len");
  if (src_vocab < 4 || tgt_vocab < 4) throw UsageError("model config: vocabularies must be >= 4");
  if (d_model % num_heads != 0) throw UsageError("model config: d_model must be divisible by num_heads");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"num_layers", c.num_layers}, {"d_model", c.d_model},     {"num_heads", c.num_heads},
           {"ffn_dim", c.ffn_dim},       {"src_vocab", c.src_vocab}, {"tgt_vocab", c.tgt_vocab},
           {"max_len", c.max_len},       {"seed", c.seed},           {"activation", activation_name(c.activation)},
           {"output_bias", c.output_bias}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.num_layers = j.value("num_layers", d.num_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.src_vocab = j.value("src_vocab", d.src_vocab);
  c.tgt_vocab = j.value("tgt_vocab", d.tgt_vocab);
  c.max_len = j.value("max_len", d.max_len);
  c.seed = j.value("seed", d.seed);
  c.activation = parse_activation(j.value("activation", activation_name(d.activation)));
  c.output_bias = j.value("output_bias", d.output_bias);
}

ParameterLayout::ParameterLayout(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  const std::size_t f = config_.ffn_dim;
  const std::size_t layers = config_.num_layers;

  auto add = [&](std::string name, Shape shape, const std::string& group, TensorKind kind) {
    TensorInfo info{std::move(name), std::move(shape), num_scalars_, 0, group, kind};
    info.size = shape_size(info.shape);
    num_scalars_ += info.size;
    by_name_[info.name] = tensors_.size();
    tensors_.push_back(std::move(info));
  };
  auto add_norm = [&](const std::string& prefix, const std::string& group) {
    add(prefix + ".gain", {d}, group, TensorKind::kNormGain);
    add(prefix + ".bias", {d}, group, TensorKind::kNormBias);
  };
  auto add_attn = [&](const std::string& prefix, const std::string& group) {
    for (const char* p : {"q", "k", "v", "o"}) add(prefix + "." + p, {d, d}, group, TensorKind::kDense);
  };

  group_names_.push_back("en_emb");
  for (std::size_t l = 0; l < layers; ++l) group_names_.push_back("en" + std::to_string(l));
  for (std::size_t l = 0; l < layers; ++l) group_names_.push_back("de" + std::to_string(l));
  group_names_.push_back("de_emb");
  group_names_.push_back("de_softmax");

  add("en_emb", {config_.src_vocab, d}, "en_emb", TensorKind::kEmbedding);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    const std::string g = "en" + std::to_string(l);
    add_norm(p + ".ln1", g);
    add_attn(p + ".self", g);
    add_norm(p + ".ln2", g);
    add(p + ".ffn.w1", {d, f}, g, TensorKind::kDense);
    add(p + ".ffn.w2", {f, d}, g, TensorKind::kDense);
  }
  add_norm("enc.final_ln", "en" + std::to_string(layers - 1));

  add("de_emb", {config_.tgt_vocab, d}, "de_emb", TensorKind::kEmbedding);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    const std::string g = "de" + std::to_string(l);
    add_norm(p + ".ln1", g);
    add_attn(p + ".self", g);
    add_norm(p + ".ln2", g);
    add_attn(p + ".cross", g);
    add_norm(p + ".ln3", g);
    add(p + ".ffn.w1", {d, f}, g, TensorKind::kDense);
    add(p + ".ffn.w2", {f, d}, g, TensorKind::kDense);
  }
  add_norm("dec.final_ln", "de" + std::to_string(layers - 1));

  add("de_softmax.weight", {config_.tgt_vocab, d}, "de_softmax", TensorKind::kDense);
  if (config_.output_bias) add("de_softmax.bias", {config_.tgt_vocab}, "de_softmax", TensorKind::kBias);

  positions_.assign(config_.max_len * d, 0.0);
  for (std::size_t pos = 0; pos < config_.max_len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      positions_[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
}

const TensorInfo& ParameterLayout::find(const std::string& name) const { return tensors_[index(name)]; }

std::size_t ParameterLayout::index(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw DimensionError("no parameter tensor named '" + name + "'");
  return it->second;
}

ParameterSet::ParameterSet(std::shared_ptr<const ParameterLayout> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_->num_scalars()) {
    throw DimensionError("parameter values have length " + std::to_string(values_.size()) + ", layout expects " +
                         std::to_string(layout_->num_scalars()));
  }
}

std::span<const double> ParameterSet::view(const std::string& tensor_name) const {
  const auto& info = layout_->find(tensor_name);
  return std::span<const double>(values_).subspan(info.offset, info.size);
}

Tensor ParameterSet::tensor(const std::string& tensor_name) const {
  const auto& info = layout_->find(tensor_name);
  auto v = view(tensor_name);
  return Tensor(info.shape, std::vector<double>(v.begin(), v.end()));
}

ParameterSet build_model(const ModelConfig& config) {
  auto layout = std::make_shared<const ParameterLayout>(config);
  std::vector<double> values(layout->num_scalars(), 0.0);
  Rng rng(config.seed, "init");
  for (const auto& t : layout->tensors()) {
    double* p = values.data() + t.offset;
    switch (t.kind) {
      case TensorKind::kEmbedding:
        for (std::size_t i = 0; i < t.size; ++i) p[i] = rng.normal(0.0, 0.02);
        break;
      case TensorKind::kDense: {
        // Weights are stored [in, out] except the output projection, stored
        // [vocab, d] so that row v belongs to token v.
        const std::size_t fan_in = t.name == "de_softmax.weight" ? t.shape[1] : t.shape[0];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < t.size; ++i) p[i] = rng.uniform(-bound, bound);
        break;
      }
      case TensorKind::kNormGain:
        for (std::size_t i = 0; i < t.size; ++i) p[i] = 1.0;
        break;
      case TensorKind::kNormBias:
      case TensorKind::kBias:
        break;
    }
  }
  return ParameterSet(std::move(layout), std::move(values));
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t f = c.ffn_dim;
  const std::size_t enc_layer = 4 * d * d + 2 * d * f + 2 * (2 * d);
  const std::size_t dec_layer = 8 * d * d + 2 * d * f + 3 * (2 * d);
  return c.src_vocab * d + c.num_layers * enc_layer + 2 * d + c.tgt_vocab * d + c.num_layers * dec_layer + 2 * d +
         c.tgt_vocab * d + (c.output_bias ? c.tgt_vocab : 0);
}

namespace {

/// Creates each parameter leaf at most once per tape.
class Binder {
 public:
  Binder(ad::Tape& tape, const ParameterLayout& layout, std::span<const double> theta)
      : tape_(tape), layout_(layout), theta_(theta), leaves_(layout.tensors().size()) {}

  ad::Var operator()(const std::string& name) {
    const std::size_t idx = layout_.index(name);
    if (!leaves_[idx]) {
      const auto& info = layout_.tensors()[idx];
      auto slice = theta_.subspan(info.offset, info.size);
      leaves_[idx] = tape_.parameter(Tensor(info.shape, std::vector<double>(slice.begin(), slice.end())), info.offset);
    }
    return *leaves_[idx];
  }

  ad::Tape& tape() { return tape_; }
  const ModelConfig& config() const { return layout_.config(); }

 private:
  ad::Tape& tape_;
  const ParameterLayout& layout_;
  std::span<const double> theta_;
  std::vector<std::optional<ad::Var>> leaves_;
};

/// Multi-head attention. query: [B*n, d], memory: [B*m, d], mask: [B,H,n,m].
ad::Var attention(Binder& p, const std::string& prefix, ad::Var query, ad::Var memory, std::size_t batch,
                  std::size_t n, std::size_t m, ad::Var mask) {
  const auto& c = p.config();
  const std::size_t heads = c.num_heads;
  const std::size_t dh = c.d_model / heads;
  using ad::matmul;
  using ad::reshape;
  using ad::transpose;
  ad::Var q = transpose(reshape(matmul(query, p(prefix + ".q")), {batch, n, heads, dh}), {0, 2, 1, 3});
  ad::Var k = transpose(reshape(matmul(memory, p(prefix + ".k")), {batch, m, heads, dh}), {0, 2, 3, 1});
  ad::Var v = transpose(reshape(matmul(memory, p(prefix + ".v")), {batch, m, heads, dh}), {0, 2, 1, 3});
  ad::Var scores = ad::add(ad::scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(dh))), mask);
  ad::Var ctx = matmul(ad::softmax(scores, -1), v);
  ad::Var merged = reshape(transpose(ctx, {0, 2, 1, 3}), {batch * n, c.d_model});
  return matmul(merged, p(prefix + ".o"));
}

ad::Var feed_forward(Binder& p, const std::string& prefix, ad::Var x) {
  ad::Var h = ad::matmul(x, p(prefix + ".w1"));
  h = p.config().activation == Activation::kGelu ? ad::gelu(h) : ad::relu(h);
  return ad::matmul(h, p(prefix + ".w2"));
}

ad::Var norm(Binder& p, const std::string& prefix, ad::Var x) {
  return ad::layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"), kLayerNormEps);
}

ad::Var embed(Binder& p, const ParameterLayout& layout, const std::string& table, const std::vector<std::int32_t>& ids,
              std::size_t batch, std::size_t width) {
  const std::size_t d = layout.config().d_model;
  ad::Var x = ad::scale(ad::embedding_lookup(p(table), ids), std::sqrt(static_cast<double>(d)));
  Tensor pe({batch * width, d}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(layout.positions().begin(), width * d, pe.data().begin() + static_cast<std::ptrdiff_t>(b * width * d));
  }
  return ad::add(x, p.tape().constant(std::move(pe)));
}

}  // namespace

ForwardPass forward_loss(const ParameterLayout& layout, std::span<const double> theta, const data::Batch& batch) {
  if (theta.size() != layout.num_scalars()) throw DimensionError("forward_loss: parameter length mismatch");
  if (batch.size == 0) throw DegenerateInputError("forward_loss: empty batch");
  const auto& c = layout.config();
  const std::size_t bsz = batch.size;
  const std::size_t ns = batch.src_width;
  const std::size_t nt = batch.tgt_width + 1;
  const std::size_t heads = c.num_heads;
  if (ns > c.max_len || nt > c.max_len) {
    throw DimensionError("forward_loss: sequence longer than max_len=" + std::to_string(c.max_len));
  }
  for (auto id : batch.src) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.src_vocab) throw DimensionError("source id outside vocabulary");
  }
  for (auto id : batch.tgt) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.tgt_vocab) throw DimensionError("target id outside vocabulary");
  }

  ForwardPass out;
  out.tape = std::make_unique<ad::Tape>();
  ad::Tape& tape = *out.tape;
  Binder p(tape, layout, theta);

  // Decoder input [bos, t1..tm] and prediction targets [t1..tm, eos].
  std::vector<std::int32_t> dec_in(bsz * nt, data::kPadId);
  std::vector<std::int32_t> dec_out(bsz * nt, data::kPadId);
  for (std::size_t b = 0; b < bsz; ++b) {
    dec_in[b * nt] = data::kBosId;
    for (std::size_t j = 0; j < batch.tgt_len[b]; ++j) {
      const auto tok = batch.tgt[b * batch.tgt_width + j];
      dec_in[b * nt + j + 1] = tok;
      dec_out[b * nt + j] = tok;
    }
    dec_out[b * nt + batch.tgt_len[b]] = data::kEosId;
  }

  Tensor enc_mask({bsz, heads, ns, ns}, 0.0);
  Tensor self_mask({bsz, heads, nt, nt}, 0.0);
  Tensor cross_mask({bsz, heads, nt, ns}, 0.0);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < ns; ++i) {
        for (std::size_t j = 0; j < ns; ++j) {
          if (!batch.src_valid(b, j)) enc_mask[((b * heads + h) * ns + i) * ns + j] = kMaskValue;
        }
      }
      for (std::size_t i = 0; i < nt; ++i) {
        for (std::size_t j = 0; j < nt; ++j) {
          if (j > i || j > batch.tgt_len[b]) self_mask[((b * heads + h) * nt + i) * nt + j] = kMaskValue;
        }
        for (std::size_t j = 0; j < ns; ++j) {
          if (!batch.src_valid(b, j)) cross_mask[((b * heads + h) * nt + i) * ns + j] = kMaskValue;
        }
      }
    }
  }
  ad::Var enc_mask_v = tape.constant(std::move(enc_mask));
  ad::Var self_mask_v = tape.constant(std::move(self_mask));
  ad::Var cross_mask_v = tape.constant(std::move(cross_mask));

  ad::Var x = embed(p, layout, "en_emb", batch.src, bsz, ns);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    ad::Var h = norm(p, pre + ".ln1", x);
    x = ad::add(x, attention(p, pre + ".self", h, h, bsz, ns, ns, enc_mask_v));
    x = ad::add(x, feed_forward(p, pre + ".ffn", norm(p, pre + ".ln2", x)));
  }
  ad::Var memory = norm(p, "enc.final_ln", x);

  ad::Var y = embed(p, layout, "de_emb", dec_in, bsz, nt);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    ad::Var h = norm(p, pre + ".ln1", y);
    y = ad::add(y, attention(p, pre + ".self", h, h, bsz, nt, nt, self_mask_v));
    y = ad::add(y, attention(p, pre + ".cross", norm(p, pre + ".ln2", y), memory, bsz, nt, ns, cross_mask_v));
    y = ad::add(y, feed_forward(p, pre + ".ffn", norm(p, pre + ".ln3", y)));
  }
  y = norm(p, "dec.final_ln", y);

  ad::Var logits = ad::matmul(y, ad::transpose(p("de_softmax.weight"), {1, 0}));
  if (c.output_bias) {
    ad::Var ones = tape.constant(Tensor({bsz * nt, 1}, 1.0));
    logits = ad::add(logits, ad::matmul(ones, ad::reshape(p("de_softmax.bias"), {1, c.tgt_vocab})));
  }
  out.loss = ad::cross_entropy(logits, dec_out, data::kPadId);
  out.value = out.loss.value().item();
  out.tokens = batch.target_tokens();
  return out;
}

ForwardPass forward_loss(const ParameterSet& params, const data::Batch& batch) {
  return forward_loss(params.layout(), params.values(), batch);
}

LossAndGrad loss_and_grad(const ParameterLayout& layout, std::span<const double> theta, const data::Batch& batch) {
  ForwardPass fp = forward_loss(layout, theta, batch);
  LossAndGrad out;
  out.loss = fp.value;
  out.tokens = fp.tokens;
  out.grad = fp.tape->backward(fp.loss, layout.num_scalars());
  return out;
}

LossAndGrad loss_and_grad(const ParameterSet& params, const data::Batch& batch) {
  return loss_and_grad(params.layout(), params.values(), batch);
}

GroupingSpec module_grouping(const ParameterLayout& layout) {
  GroupingSpec spec;
  spec.names = layout.group_names();
  spec.group_of.assign(layout.num_scalars(), 0);
  for (const auto& t : layout.tensors()) {
    const auto g = static_cast<std::uint32_t>(spec.index_of(t.group));
    std::fill_n(spec.group_of.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size, g);
  }
  return spec;
}

std::string to_string(EmbeddingSide side) {
  switch (side) {
    case EmbeddingSide::kEncoder:
      return "encoder";
    case EmbeddingSide::kDecoder:
      return "decoder";
    case EmbeddingSide::kSoftmax:
      return "softmax";
  }
  return "encoder";
}

EmbeddingSide parse_embedding_side(const std::string& text) {
  if (text == "encoder") return EmbeddingSide::kEncoder;
  if (text == "decoder") return EmbeddingSide::kDecoder;
  if (text == "softmax") return EmbeddingSide::kSoftmax;
  throw UsageError("unknown side '" + text + "' (expected encoder|decoder|softmax)");
}

std::string embedding_tensor(EmbeddingSide side) {
  switch (side) {
    case EmbeddingSide::kEncoder:
      return "en_emb";
    case EmbeddingSide::kDecoder:
      return "de_emb";
    case EmbeddingSide::kSoftmax:
      return "de_softmax.weight";
  }
  return "en_emb";
}

GroupingSpec embedding_row_grouping(const ParameterLayout& layout, const data::BucketAssignment& buckets,
                                    EmbeddingSide side) {
  const auto& table = layout.find(embedding_tensor(side));
  const std::size_t vocab = table.shape[0];
  const std::size_t d = table.shape[1];
  if (buckets.bucket_of.size() != vocab) {
    throw DimensionError("bucket assignment covers " + std::to_string(buckets.bucket_of.size()) +
                         " tokens, embedding has " + std::to_string(vocab) + " rows");
  }
  GroupingSpec spec;
  const std::size_t width = buckets.n_buckets > 100 ? 3 : 2;
  for (std::size_t b = 0; b < buckets.n_buckets; ++b) {
    std::string idx = std::to_string(b);
    spec.names.push_back("b" + std::string(width - std::min(width, idx.size()), '0') + idx);
  }
  spec.names.push_back("other");
  const auto other = static_cast<std::uint32_t>(buckets.n_buckets);
  spec.group_of.assign(layout.num_scalars(), other);
  for (std::size_t row = 0; row < vocab; ++row) {
    std::fill_n(spec.group_of.begin() + static_cast<std::ptrdiff_t>(table.offset + row * d), d,
                buckets.bucket_of[row]);
  }
  if (side == EmbeddingSide::kSoftmax && layout.config().output_bias) {
    const auto& bias = layout.find("de_softmax.bias");
    for (std::size_t row = 0; row < vocab; ++row) spec.group_of[bias.offset + row] = buckets.bucket_of[row];
  }
  return spec;
}

}  // namespace lca_scope::model
