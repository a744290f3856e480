#include "tablefree/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tablefree/error.hpp"

namespace tablefree::data {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t hash_bytes(std::string_view s) {
  // FNV-1a, then mixed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

Batch make_batch(std::span<const std::vector<Token>> windows, int time) {
  Batch b;
  b.batch = static_cast<int>(windows.size());
  b.time = time;
  b.tokens.reserve(windows.size() * static_cast<std::size_t>(time));
  b.targets.reserve(windows.size() * static_cast<std::size_t>(time));
  for (const auto& w : windows) {
    b.tokens.insert(b.tokens.end(), w.begin(), w.end() - 1);
    b.targets.insert(b.targets.end(), w.begin() + 1, w.end());
  }
  return b;
}

}  // namespace

CorpusFormat parse_corpus_format(const std::string& text) {
  if (text == "auto") return CorpusFormat::Auto;
  if (text == "directory") return CorpusFormat::Directory;
  if (text == "blank_lines") return CorpusFormat::BlankLines;
  throw Error(Errc::InvalidConfig, "unknown corpus format '" + text + "'");
}

Corpus split_blank_lines(const std::string& text) {
  Corpus corpus;
  std::istringstream in(text);
  std::string line;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      corpus.push_back({corpus.size(), std::move(current)});
      current.clear();
    }
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    current += line;
    current += '\n';
  }
  flush();
  return corpus;
}

Corpus load_corpus(const std::string& path, CorpusFormat format) {
  const fs::path p(path);
  if (!fs::exists(p)) throw Error(Errc::IoFailure, "corpus path does not exist: " + path);
  if (format == CorpusFormat::Auto) {
    format = fs::is_directory(p) ? CorpusFormat::Directory : CorpusFormat::BlankLines;
  }
  Corpus corpus;
  if (format == CorpusFormat::BlankLines) {
    corpus = split_blank_lines(read_file(p));
  } else {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(p)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto bytes = read_file(f);
      if (bytes.empty()) continue;
      corpus.push_back({hash_bytes(f.filename().string()), std::move(bytes)});
    }
  }
  if (corpus.empty()) throw Error(Errc::EmptyCorpus, "no documents in " + path);
  return corpus;
}

std::vector<Token> tokenize_bytes(const Document& doc) {
  std::vector<Token> ids(doc.bytes.size());
  std::transform(doc.bytes.begin(), doc.bytes.end(), ids.begin(),
                 [](char c) { return static_cast<Token>(static_cast<unsigned char>(c)); });
  return ids;
}

std::string detokenize(std::span<const Token> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= kByteVocabulary) {
      throw Error(Errc::TokenOutOfRange, "token " + std::to_string(ids[i]) + " is not a byte");
    }
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

SplitAssignment::SplitAssignment(double val_fraction, std::uint64_t seed)
    : val_fraction_(val_fraction), seed_(seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw Error(Errc::InvalidArgs, "val_fraction must lie in (0, 1)");
  }
}

Split SplitAssignment::assign(std::uint64_t id) const {
  const double u = static_cast<double>(hash_combine(id, seed_) >> 11) * 0x1.0p-53;
  return u < val_fraction_ ? Split::Validation : Split::Train;
}

SplitAssignment split_documents(const Corpus& corpus, double val_fraction, std::uint64_t seed) {
  if (corpus.empty()) throw Error(Errc::EmptyCorpus, "cannot split an empty corpus");
  SplitAssignment split(val_fraction, seed);
  for (const auto& doc : corpus) split.record(doc.id);
  return split;
}

PartitionedCorpus partition(const Corpus& corpus, const SplitAssignment& split) {
  PartitionedCorpus out;
  for (const auto& doc : corpus) {
    if (doc.bytes.empty()) continue;
    auto& dest = split.assign(doc.id) == Split::Validation ? out.validation : out.train;
    dest.push_back(tokenize_bytes(doc));
  }
  return out;
}

std::vector<std::vector<Token>> pack_windows(std::span<const std::vector<Token>> docs,
                                             std::span<const std::size_t> order, int time) {
  const auto window = static_cast<std::size_t>(time) + 1;
  std::vector<std::vector<Token>> windows;
  std::vector<Token> current;
  current.reserve(window);
  auto push = [&](Token t) {
    current.push_back(t);
    if (current.size() == window) {
      windows.push_back(std::move(current));
      current.clear();
      current.reserve(window);
    }
  };
  bool first = true;
  for (auto idx : order) {
    if (!first) push(kDocumentSeparator);
    first = false;
    for (auto t : docs[idx]) push(t);
  }
  return windows;
}

BatchStream::BatchStream(std::vector<std::vector<Token>> docs, int time, int batch,
                         std::uint64_t seed)
    : docs_(std::move(docs)), time_(time), batch_(batch), seed_(seed) {
  if (time < 1 || batch < 1) throw Error(Errc::InvalidArgs, "time and batch must be positive");
  std::size_t total = 0;
  for (const auto& d : docs_) total += d.size();
  stream_length_ = docs_.empty() ? 0 : total + docs_.size() - 1;
  batches_per_epoch_ = stream_length_ / (static_cast<std::size_t>(time) + 1) /
                       static_cast<std::size_t>(batch);
  if (batches_per_epoch_ == 0) {
    throw Error(Errc::InsufficientData,
                std::to_string(stream_length_) + " tokens cannot fill one batch of " +
                    std::to_string(batch) + " x " + std::to_string(time + 1));
  }
}

void BatchStream::start_epoch() {
  std::vector<std::size_t> order(docs_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(hash_combine(seed_, epoch_));
  rng.shuffle(std::span<std::size_t>(order));
  windows_ = pack_windows(docs_, order, time_);
  cursor_ = 0;
}

Batch BatchStream::next() {
  if (!started_) {
    start_epoch();
    started_ = true;
  } else if (cursor_ + static_cast<std::size_t>(batch_) > windows_.size()) {
    ++epoch_;
    start_epoch();
  }
  const auto span = std::span<const std::vector<Token>>(windows_).subspan(
      cursor_, static_cast<std::size_t>(batch_));
  cursor_ += static_cast<std::size_t>(batch_);
  return make_batch(span, time_);
}

std::vector<Batch> validation_batches(std::span<const std::vector<Token>> docs, int time,
                                      int batch, std::size_t max_batches) {
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto windows = pack_windows(docs, order, time);
  const auto per_batch = static_cast<std::size_t>(batch);
  const std::size_t total = (windows.size() + per_batch - 1) / per_batch;
  const std::size_t keep = max_batches == 0 ? total : std::min(total, max_batches);
  std::vector<Batch> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    // Evenly spaced over the whole split when capped.
    const std::size_t start = (i * total / keep) * per_batch;
    const auto count = std::min(per_batch, windows.size() - start);
    out.push_back(make_batch(std::span<const std::vector<Token>>(windows).subspan(start, count),
                             time));
  }
  return out;
}

}  // namespace tablefree::data
