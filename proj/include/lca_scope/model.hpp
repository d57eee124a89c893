// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lca_scope/autodiff.hpp"
#include "lca_scope/data.hpp"
#include "lca_scope/grouping.hpp"

namespace lca_scope::model {

enum class Activation { kGelu, kRelu };

/// Micro encoder-decoder transformer (pre-layer-norm, untied embeddings,
/// sinusoidal positions, no dropout).
struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t d_model = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t src_vocab = 64;
  std::size_t tgt_vocab = 64;
  std::size_t max_len = 64;
  std::uint64_t seed = 1;
  Activation activation = Activation::kGelu;
  bool output_bias = false;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class TensorKind { kEmbedding, kDense, kNormGain, kNormBias, kBias };

struct TensorInfo {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::string group;
  TensorKind kind = TensorKind::kDense;
};

/// Deterministic enumeration of every learned tensor and its slice of the
/// flat parameter vector. Shared by all ParameterSets of one config.
class ParameterLayout {
 public:
  explicit ParameterLayout(const ModelConfig& config);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const std::vector<TensorInfo>& tensors() const { return tensors_; }
  [[nodiscard]] std::size_t num_scalars() const { return num_scalars_; }
  [[nodiscard]] const TensorInfo& find(const std::string& name) const;
  [[nodiscard]] std::size_t index(const std::string& name) const;
  /// Group names in canonical order: en_emb, en0.., de0.., de_emb, de_softmax.
  [[nodiscard]] const std::vector<std::string>& group_names() const { return group_names_; }
  /// Sinusoidal table [max_len, d_model].
  [[nodiscard]] const std::vector<double>& positions() const { return positions_; }

 private:
  ModelConfig config_;
  std::vector<TensorInfo> tensors_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::vector<std::string> group_names_;
  std::vector<double> positions_;
  std::size_t num_scalars_ = 0;
};

/// theta: K scalars with a stable index per scalar.
class ParameterSet {
 public:
  ParameterSet(std::shared_ptr<const ParameterLayout> layout, std::vector<double> values);

  [[nodiscard]] const ParameterLayout& layout() const { return *layout_; }
  [[nodiscard]] std::shared_ptr<const ParameterLayout> layout_ptr() const { return layout_; }
  [[nodiscard]] const ModelConfig& config() const { return layout_->config(); }
  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] std::vector<double>& mutable_values() { return values_; }
  [[nodiscard]] std::span<const double> view(const std::string& tensor_name) const;
  [[nodiscard]] Tensor tensor(const std::string& tensor_name) const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.values_ == b.values_; }

 private:
  std::shared_ptr<const ParameterLayout> layout_;
  std::vector<double> values_;
};

/// Dense weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings ~ N(0, 0.02);
/// layer-norm gain 1, bias 0; output bias 0. Fully determined by config.seed.
ParameterSet build_model(const ModelConfig& config);

/// Closed-form K for a config, computed from tensor shapes.
std::size_t parameter_count(const ModelConfig& config);

struct ForwardPass {
  std::unique_ptr<ad::Tape> tape;
  ad::Var loss;
  double value = 0.0;
  /// Non-pad predicted positions the mean loss is taken over.
  std::size_t tokens = 0;
};

/// Token-mean cross entropy of the batch under the given parameter values.
ForwardPass forward_loss(const ParameterLayout& layout, std::span<const double> theta, const data::Batch& batch);
ForwardPass forward_loss(const ParameterSet& params, const data::Batch& batch);

struct LossAndGrad {
  double loss = 0.0;
  std::size_t tokens = 0;
  ad::Gradient grad;
};

LossAndGrad loss_and_grad(const ParameterLayout& layout, std::span<const double> theta, const data::Batch& batch);
LossAndGrad loss_and_grad(const ParameterSet& params, const data::Batch& batch);

/// Module groups: en_emb, en0..en{L-1}, de0..de{L-1}, de_emb, de_softmax. The
/// final encoder/decoder layer norms belong to the last layer of their side.
GroupingSpec module_grouping(const ParameterLayout& layout);

enum class EmbeddingSide { kEncoder, kDecoder, kSoftmax };
std::string to_string(EmbeddingSide side);
EmbeddingSide parse_embedding_side(const std::string& text);
/// Name of the tensor holding per-token rows for a side.
std::string embedding_tensor(EmbeddingSide side);

/// Scalars of the side's embedding rows go to their token's bucket
/// ("b00".."bNN"); every other scalar goes to "other".
GroupingSpec embedding_row_grouping(const ParameterLayout& layout, const data::BucketAssignment& buckets,
                                    EmbeddingSide side);

}  // namespace lca_scope::model
