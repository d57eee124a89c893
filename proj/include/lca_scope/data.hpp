// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lca_scope/rng.hpp"

namespace lca_scope::data {

// Reserved ids shared by both vocabularies. Content tokens start at 3, and
// content id 3 + r holds Zipf rank r + 1.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kFirstContentId = 3;

enum class Task { kCopy, kReverse };
enum class Split { kTrain, kTest };
enum class Side { kSource, kTarget };

std::string to_string(Task task);
std::string to_string(Split split);
Task parse_task(const std::string& text);
Split parse_split(const std::string& text);

struct Example {
  std::vector<std::int32_t> source;
  std::vector<std::int32_t> target;

  friend bool operator==(const Example&, const Example&) = default;
};

struct CorpusSpec {
  std::size_t vocab = 64;
  std::size_t n_examples = 1000;
  std::size_t min_len = 2;
  std::size_t max_len = 6;
  double zipf_exponent = 1.0;
  Task task = Task::kCopy;
  std::uint64_t seed = 1;
  Split split = Split::kTrain;
};

struct Corpus {
  std::vector<Example> examples;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  Split split = Split::kTrain;
  /// Generation parameters when synthetic; zero-initialized otherwise.
  CorpusSpec spec;
  bool synthetic = false;

  [[nodiscard]] std::size_t size() const { return examples.size(); }
  [[nodiscard]] std::size_t vocab(Side side) const { return side == Side::kSource ? src_vocab : tgt_vocab; }
};

/// Generation fields only; split is not serialized.
void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

/// Zipfian copy/reverse corpus. The test split uses a seed stream disjoint
/// from the train split for the same base seed.
Corpus gen_corpus(const CorpusSpec& spec);

/// Padded, length-annotated batch. Source rows hold the source tokens;
/// target rows hold the content target tokens (bos/eos are added by the
/// model when building decoder inputs and outputs).
struct Batch {
  std::size_t size = 0;
  std::size_t src_width = 0;
  std::size_t tgt_width = 0;
  std::vector<std::int32_t> src;  // [size, src_width]
  std::vector<std::int32_t> tgt;  // [size, tgt_width]
  std::vector<std::size_t> src_len;
  std::vector<std::size_t> tgt_len;

  [[nodiscard]] bool src_valid(std::size_t b, std::size_t j) const { return j < src_len[b]; }
  [[nodiscard]] bool tgt_valid(std::size_t b, std::size_t j) const { return j < tgt_len[b]; }
  /// Predicted positions: every target token plus the closing eos.
  [[nodiscard]] std::size_t target_tokens() const;
  [[nodiscard]] std::vector<Example> unpad() const;
};

Batch make_batch(std::span<const Example> examples);
Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices);

/// Batches of one epoch. Every example appears once; the last batch may be
/// short. The shuffle for epoch e is a function of (seed, e) only.
std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed, bool shuffle,
                                std::size_t epoch = 0);

/// Endless epoch-by-epoch batch stream.
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed, bool shuffle);
  Batch next();
  [[nodiscard]] std::size_t epoch() const { return epoch_; }

 private:
  const Corpus* corpus_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;

  void reshuffle();
};

/// Uniform with replacement over examples.
Batch sample_batch(const Corpus& corpus, std::size_t batch_size, Rng& rng);

struct BucketAssignment {
  std::size_t n_buckets = 0;
  Side side = Side::kSource;
  std::vector<std::uint32_t> bucket_of;           // per token id
  std::vector<std::uint64_t> token_frequency;     // per token id
  std::vector<std::uint64_t> bucket_frequency;    // per bucket
  std::vector<std::size_t> bucket_size;           // tokens per bucket
};

/// Sorts the side's vocabulary by descending corpus frequency (ties by id)
/// and cuts it into n_buckets contiguous groups whose sizes differ by at most
/// one, larger groups first.
BucketAssignment frequency_buckets(const Corpus& corpus, std::size_t n_buckets = 25, Side side = Side::kSource);

// Corpus files: one example per line, "src ids<TAB>tgt ids", plus a JSON
// sidecar at <path>.json.
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& path);

/// Whitespace-tokenized parallel text. Vocabularies are built per side with
/// the reserved ids first and remaining words by descending frequency.
struct TextCorpus {
  Corpus corpus;
  std::vector<std::string> src_words;
  std::vector<std::string> tgt_words;
};
TextCorpus load_text_corpus(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path);

}  // namespace lca_scope::data
