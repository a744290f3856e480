#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tablefree/random.hpp"

namespace tablefree::data {

using Token = std::int32_t;

inline constexpr int kByteVocabulary = 256;
inline constexpr Token kDocumentSeparator = 0;

struct Document {
  std::uint64_t id = 0;
  std::string bytes;
};

using Corpus = std::vector<Document>;

enum class CorpusFormat {
  Auto,        // directory -> Directory, file -> BlankLines
  Directory,   // one document per regular file, ids hashed from file names
  BlankLines,  // one file, documents separated by blank lines, ids = ordinal
};

CorpusFormat parse_corpus_format(const std::string& text);
Corpus load_corpus(const std::string& path, CorpusFormat format = CorpusFormat::Auto);
Corpus split_blank_lines(const std::string& text);

// One token per byte, id = byte value.
std::vector<Token> tokenize_bytes(const Document& doc);
std::string detokenize(std::span<const Token> ids);

enum class Split { Train, Validation };

// A document's split is a function of (id, seed, val_fraction) only: it goes
// to validation iff the top 53 bits of hash_combine(id, seed), read as a
// fraction in [0, 1), fall below val_fraction.
class SplitAssignment {
 public:
  SplitAssignment(double val_fraction, std::uint64_t seed);

  Split assign(std::uint64_t id) const;
  double val_fraction() const { return val_fraction_; }
  std::uint64_t seed() const { return seed_; }

  // Recorded assignment for the corpus it was built from.
  const std::unordered_map<std::uint64_t, Split>& assignment() const { return assignment_; }
  void record(std::uint64_t id) { assignment_[id] = assign(id); }

 private:
  double val_fraction_;
  std::uint64_t seed_;
  std::unordered_map<std::uint64_t, Split> assignment_;
};

// Throws EmptyCorpus, or InvalidArgs unless 0 < val_fraction < 1.
SplitAssignment split_documents(const Corpus& corpus, double val_fraction, std::uint64_t seed);

struct PartitionedCorpus {
  std::vector<std::vector<Token>> train;
  std::vector<std::vector<Token>> validation;
};

// Tokenizes each document into its split, in corpus order.
PartitionedCorpus partition(const Corpus& corpus, const SplitAssignment& split);

// Next-token batch; tokens and targets are [batch, time] row-major.
struct Batch {
  int batch = 0;
  int time = 0;
  std::vector<Token> tokens;
  std::vector<Token> targets;
};

// Packs documents into one stream (a separator between neighbours) and cuts
// it into non-overlapping windows of time+1 tokens; tokens are a window's
// first `time` entries and targets its last `time`.
std::vector<std::vector<Token>> pack_windows(std::span<const std::vector<Token>> docs,
                                             std::span<const std::size_t> order, int time);

// Training stream. Each epoch reshuffles document order with a generator
// derived from (seed, epoch), packs, and emits `batch` consecutive windows
// per batch; windows that do not fill a final batch are dropped.
class BatchStream {
 public:
  // Throws InsufficientData if one epoch cannot fill a single batch.
  BatchStream(std::vector<std::vector<Token>> docs, int time, int batch, std::uint64_t seed);

  Batch next();
  std::uint64_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  // Tokens per epoch including separators.
  std::size_t stream_length() const { return stream_length_; }

 private:
  void start_epoch();

  std::vector<std::vector<Token>> docs_;
  int time_;
  int batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t stream_length_ = 0;
  std::size_t batches_per_epoch_ = 0;
  std::vector<std::vector<Token>> windows_;
  std::size_t cursor_ = 0;
  bool started_ = false;
};

// Validation batches: same packing and window length as training, documents
// in corpus order, every window used once. The last batch may be short.
// max_batches = 0 keeps all; otherwise that many batches evenly spaced over
// the split.
std::vector<Batch> validation_batches(std::span<const std::vector<Token>> docs, int time,
                                      int batch, std::size_t max_batches = 0);

}  // namespace tablefree::data
