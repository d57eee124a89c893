// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "lca_scope/error.hpp"

namespace lca_scope::data {

using nlohmann::json;

std::string to_string(Task task) { return task == Task::kCopy ? "copy" : "reverse"; }
std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Task parse_task(const std::string& text) {
  if (text == "copy") return Task::kCopy;
  if (text == "reverse") return Task::kReverse;
  throw UsageError("unknown task '" + text + "' (expected copy|reverse)");
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "test") return Split::kTest;
  throw UsageError("unknown split '" + text + "' (expected train|test)");
}

Corpus gen_corpus(const CorpusSpec& spec) {
  if (spec.vocab < 4) throw UsageError("vocab must be >= 4 (ids 0..2 are reserved for pad/bos/eos)");
  if (spec.n_examples == 0) throw UsageError("n_examples must be >= 1");
  if (spec.min_len == 0 || spec.max_len < spec.min_len) throw UsageError("invalid sequence length range");
  if (!(spec.zipf_exponent >= 0.0) || !std::isfinite(spec.zipf_exponent)) {
    throw UsageError("zipf exponent must be a finite non-negative number");
  }

  const std::size_t content = spec.vocab - static_cast<std::size_t>(kFirstContentId);
  std::vector<double> cdf(content);
  double total = 0.0;
  for (std::size_t r = 0; r < content; ++r) {
    total += std::pow(static_cast<double>(r + 1), -spec.zipf_exponent);
    cdf[r] = total;
  }

  Rng rng(spec.seed, spec.split == Split::kTrain ? "data.train" : "data.test");
  Corpus corpus;
  corpus.src_vocab = spec.vocab;
  corpus.tgt_vocab = spec.vocab;
  corpus.split = spec.split;
  corpus.spec = spec;
  corpus.synthetic = true;
  corpus.examples.reserve(spec.n_examples);
  const std::size_t span = spec.max_len - spec.min_len + 1;
  for (std::size_t e = 0; e < spec.n_examples; ++e) {
    const std::size_t len = spec.min_len + static_cast<std::size_t>(rng.below(span));
    Example ex;
    ex.source.reserve(len);
    for (std::size_t j = 0; j < len; ++j) {
      const double u = rng.uniform() * total;
      auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      const auto rank = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cdf.begin(), content - 1));
      ex.source.push_back(kFirstContentId + static_cast<std::int32_t>(rank));
    }
    ex.target = ex.source;
    if (spec.task == Task::kReverse) std::reverse(ex.target.begin(), ex.target.end());
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

std::size_t Batch::target_tokens() const {
  std::size_t n = 0;
  for (auto len : tgt_len) n += len + 1;
  return n;
}

std::vector<Example> Batch::unpad() const {
  std::vector<Example> out(size);
  for (std::size_t b = 0; b < size; ++b) {
    out[b].source.assign(src.begin() + static_cast<std::ptrdiff_t>(b * src_width),
                         src.begin() + static_cast<std::ptrdiff_t>(b * src_width + src_len[b]));
    out[b].target.assign(tgt.begin() + static_cast<std::ptrdiff_t>(b * tgt_width),
                         tgt.begin() + static_cast<std::ptrdiff_t>(b * tgt_width + tgt_len[b]));
  }
  return out;
}

namespace {

template <typename GetExample>
Batch assemble(std::size_t count, GetExample&& get) {
  if (count == 0) throw DegenerateInputError("batch must contain at least one example");
  Batch batch;
  batch.size = count;
  for (std::size_t b = 0; b < count; ++b) {
    const Example& ex = get(b);
    if (ex.source.empty() || ex.target.empty()) throw FormatError("examples must have non-empty sequences");
    batch.src_width = std::max(batch.src_width, ex.source.size());
    batch.tgt_width = std::max(batch.tgt_width, ex.target.size());
  }
  batch.src.assign(count * batch.src_width, kPadId);
  batch.tgt.assign(count * batch.tgt_width, kPadId);
  batch.src_len.resize(count);
  batch.tgt_len.resize(count);
  for (std::size_t b = 0; b < count; ++b) {
    const Example& ex = get(b);
    std::copy(ex.source.begin(), ex.source.end(), batch.src.begin() + static_cast<std::ptrdiff_t>(b * batch.src_width));
    std::copy(ex.target.begin(), ex.target.end(), batch.tgt.begin() + static_cast<std::ptrdiff_t>(b * batch.tgt_width));
    batch.src_len[b] = ex.source.size();
    batch.tgt_len[b] = ex.target.size();
  }
  return batch;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, bool shuffle, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed, "shuffle.epoch." + std::to_string(epoch));
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.below(i));
      std::swap(order[i - 1], order[j]);
    }
  }
  return order;
}

}  // namespace

Batch make_batch(std::span<const Example> examples) {
  return assemble(examples.size(), [&](std::size_t b) -> const Example& { return examples[b]; });
}

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices) {
  return assemble(indices.size(), [&](std::size_t b) -> const Example& { return corpus.examples.at(indices[b]); });
}

std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed, bool shuffle,
                                std::size_t epoch) {
  if (batch_size == 0) throw UsageError("batch_size must be >= 1");
  const auto order = epoch_order(corpus.size(), seed, shuffle, epoch);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.push_back(make_batch(corpus, std::span(order).subspan(start, end - start)));
  }
  return batches;
}

BatchStream::BatchStream(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : corpus_(&corpus), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size == 0) throw UsageError("batch_size must be >= 1");
  if (corpus.size() == 0) throw DegenerateInputError("cannot stream batches from an empty corpus");
  reshuffle();
}

void BatchStream::reshuffle() { order_ = epoch_order(corpus_->size(), seed_, shuffle_, epoch_); }

Batch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    cursor_ = 0;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  Batch batch = make_batch(*corpus_, std::span(order_).subspan(cursor_, end - cursor_));
  cursor_ = end;
  return batch;
}

Batch sample_batch(const Corpus& corpus, std::size_t batch_size, Rng& rng) {
  if (corpus.size() == 0) throw DegenerateInputError("cannot sample from an empty corpus");
  if (batch_size == 0) throw UsageError("batch_size must be >= 1");
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(corpus.size()));
  return make_batch(corpus, idx);
}

BucketAssignment frequency_buckets(const Corpus& corpus, std::size_t n_buckets, Side side) {
  const std::size_t vocab = corpus.vocab(side);
  if (n_buckets == 0 || n_buckets > vocab) {
    throw UsageError("n_buckets must be in [1, vocab=" + std::to_string(vocab) + "]");
  }
  BucketAssignment out;
  out.n_buckets = n_buckets;
  out.side = side;
  out.token_frequency.assign(vocab, 0);
  for (const auto& ex : corpus.examples) {
    const auto& seq = side == Side::kSource ? ex.source : ex.target;
    for (auto id : seq) ++out.token_frequency.at(static_cast<std::size_t>(id));
  }
  std::vector<std::uint32_t> order(vocab);
  std::iota(order.begin(), order.end(), 0U);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return out.token_frequency[a] > out.token_frequency[b];
  });
  out.bucket_of.assign(vocab, 0);
  out.bucket_frequency.assign(n_buckets, 0);
  out.bucket_size.assign(n_buckets, 0);
  const std::size_t base = vocab / n_buckets;
  const std::size_t extra = vocab % n_buckets;
  std::size_t pos = 0;
  for (std::size_t b = 0; b < n_buckets; ++b) {
    const std::size_t len = base + (b < extra ? 1 : 0);
    for (std::size_t j = 0; j < len; ++j, ++pos) {
      const auto tok = order[pos];
      out.bucket_of[tok] = static_cast<std::uint32_t>(b);
      out.bucket_frequency[b] += out.token_frequency[tok];
    }
    out.bucket_size[b] = len;
  }
  return out;
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

namespace {

void write_ids(std::ostream& os, const std::vector<std::int32_t>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) os << ' ';
    os << ids[i];
  }
}

std::vector<std::int32_t> parse_ids(const std::string& text, std::size_t line_no) {
  std::vector<std::int32_t> ids;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || v < 0 || v > INT32_MAX) {
      throw FormatError("corpus line " + std::to_string(line_no) + ": bad token id '" + tok + "'");
    }
    ids.push_back(static_cast<std::int32_t>(v));
  }
  return ids;
}

}  // namespace

void to_json(json& j, const CorpusSpec& s) {
  j = json{{"vocab", s.vocab},
           {"n_examples", s.n_examples},
           {"min_len", s.min_len},
           {"max_len", s.max_len},
           {"zipf_exponent", s.zipf_exponent},
           {"task", to_string(s.task)},
           {"seed", s.seed}};
}

void from_json(const json& j, CorpusSpec& s) {
  const CorpusSpec d;
  s.vocab = j.value("vocab", d.vocab);
  s.n_examples = j.value("n_examples", d.n_examples);
  s.min_len = j.value("min_len", d.min_len);
  s.max_len = j.value("max_len", d.max_len);
  s.zipf_exponent = j.value("zipf_exponent", d.zipf_exponent);
  s.task = parse_task(j.value("task", to_string(d.task)));
  s.seed = j.value("seed", d.seed);
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& ex : corpus.examples) {
    write_ids(os, ex.source);
    os << '\t';
    write_ids(os, ex.target);
    os << '\n';
  }
  if (!os) throw IoError("failed writing '" + path.string() + "'");

  json meta = {{"format", "lca-corpus"},
               {"src_vocab", corpus.src_vocab},
               {"tgt_vocab", corpus.tgt_vocab},
               {"split", to_string(corpus.split)},
               {"examples", corpus.size()}};
  if (corpus.synthetic) {
    meta["synthetic"] = corpus.spec;
  }
  std::ofstream ms(sidecar_path(path), std::ios::binary);
  if (!ms) throw IoError("cannot open '" + sidecar_path(path).string() + "' for writing");
  ms << meta.dump(2) << '\n';
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open corpus '" + path.string() + "'");
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  std::int32_t max_src = kEosId;
  std::int32_t max_tgt = kEosId;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("corpus line " + std::to_string(line_no) + ": missing TAB");
    Example ex{parse_ids(line.substr(0, tab), line_no), parse_ids(line.substr(tab + 1), line_no)};
    if (ex.source.empty() || ex.target.empty()) {
      throw FormatError("corpus line " + std::to_string(line_no) + ": empty sequence");
    }
    for (auto id : ex.source) max_src = std::max(max_src, id);
    for (auto id : ex.target) max_tgt = std::max(max_tgt, id);
    corpus.examples.push_back(std::move(ex));
  }
  corpus.src_vocab = static_cast<std::size_t>(max_src) + 1;
  corpus.tgt_vocab = static_cast<std::size_t>(max_tgt) + 1;

  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream ms(side);
    json meta;
    try {
      meta = json::parse(ms);
    } catch (const json::exception& e) {
      throw FormatError("corpus sidecar '" + side.string() + "': " + e.what());
    }
    const auto sv = meta.at("src_vocab").get<std::size_t>();
    const auto tv = meta.at("tgt_vocab").get<std::size_t>();
    if (sv < corpus.src_vocab || tv < corpus.tgt_vocab) {
      throw FormatError("corpus '" + path.string() + "' has ids beyond the vocabulary declared in its sidecar");
    }
    corpus.src_vocab = sv;
    corpus.tgt_vocab = tv;
    if (meta.contains("split")) corpus.split = parse_split(meta["split"].get<std::string>());
    if (meta.contains("synthetic")) {
      corpus.synthetic = true;
      corpus.spec = meta["synthetic"].get<CorpusSpec>();
      corpus.spec.split = corpus.split;
    }
  }
  return corpus;
}

TextCorpus load_text_corpus(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path) {
  auto read_lines = [](const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw IoError("cannot open text corpus '" + p.string() + "'");
    std::vector<std::vector<std::string>> lines;
    std::string line;
    while (std::getline(is, line)) {
      std::istringstream ls(line);
      std::vector<std::string> words;
      std::string w;
      while (ls >> w) words.push_back(w);
      lines.push_back(std::move(words));
    }
    return lines;
  };
  const auto src = read_lines(src_path);
  const auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size()) throw FormatError("source and target files have different line counts");

  auto build_vocab = [](const std::vector<std::vector<std::string>>& lines) {
    std::map<std::string, std::size_t> counts;
    for (const auto& l : lines) {
      for (const auto& w : l) ++counts[w];
    }
    std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words = {"<pad>", "<bos>", "<eos>"};
    for (auto& [w, c] : sorted) words.push_back(w);
    return words;
  };

  TextCorpus out;
  out.src_words = build_vocab(src);
  out.tgt_words = build_vocab(tgt);
  std::unordered_map<std::string, std::int32_t> src_ids;
  std::unordered_map<std::string, std::int32_t> tgt_ids;
  for (std::size_t i = 0; i < out.src_words.size(); ++i) src_ids[out.src_words[i]] = static_cast<std::int32_t>(i);
  for (std::size_t i = 0; i < out.tgt_words.size(); ++i) tgt_ids[out.tgt_words[i]] = static_cast<std::int32_t>(i);
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty()) continue;
    Example ex;
    for (const auto& w : src[i]) ex.source.push_back(src_ids.at(w));
    for (const auto& w : tgt[i]) ex.target.push_back(tgt_ids.at(w));
    out.corpus.examples.push_back(std::move(ex));
  }
  out.corpus.src_vocab = out.src_words.size();
  out.corpus.tgt_vocab = out.tgt_words.size();
  return out;
}

}  // namespace lca_scope::data
