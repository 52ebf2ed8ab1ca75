#include "resbm/data.hpp"

#include <fstream>
#include <iterator>

#include "resbm/error.hpp"

namespace resbm::data {

Corpus make_corpus(std::string name, std::vector<std::uint8_t> bytes, std::size_t context_len) {
  if (context_len == 0) throw ContractError("corpus: context_len must be >= 1");
  if (bytes.size() < context_len + 2) {
    throw DataError("corpus " + name + ": " + std::to_string(bytes.size()) + " bytes, need at least " +
                    std::to_string(context_len + 2));
  }
  return Corpus{std::move(name), std::move(bytes)};
}

Corpus load_corpus(const std::filesystem::path& path, std::size_t context_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return make_corpus(path.filename().string(), std::move(bytes), context_len);
}

Window window_at(const Corpus& corpus, std::size_t start, std::size_t context_len) {
  if (start + context_len >= corpus.length()) {
    throw ContractError("window_at: start " + std::to_string(start) + " leaves no target byte");
  }
  Window w;
  w.inputs.resize(context_len);
  w.targets.resize(context_len);
  for (std::size_t t = 0; t < context_len; ++t) {
    w.inputs[t] = corpus.bytes[start + t];
    w.targets[t] = corpus.bytes[start + t + 1];
  }
  return w;
}

BatchStream::BatchStream(std::shared_ptr<const Corpus> corpus, std::size_t context_len, std::size_t batch_size,
                         std::uint64_t seed, std::string_view stream_name)
    : corpus_(std::move(corpus)),
      context_len_(context_len),
      batch_size_(batch_size),
      rng_(Xoshiro256::stream(seed, stream_name)) {
  if (!corpus_) throw ContractError("BatchStream: null corpus");
  if (batch_size_ == 0) throw ContractError("BatchStream: batch_size must be >= 1");
  if (corpus_->length() < context_len_ + 2) {
    throw DataError("corpus " + corpus_->name + " too short for context_len " + std::to_string(context_len_));
  }
}

Batch BatchStream::next_batch() {
  // Last valid start is len - L - 1, so there are len - L choices.
  const std::uint64_t choices = corpus_->length() - context_len_;
  Batch batch;
  batch.rows.reserve(batch_size_);
  batch.starts.reserve(batch_size_);
  for (std::size_t b = 0; b < batch_size_; ++b) {
    const std::size_t start = rng_.below(choices);
    batch.starts.push_back(start);
    batch.rows.push_back(window_at(*corpus_, start, context_len_));
  }
  ++emitted_;
  return batch;
}

}  // namespace resbm::data
