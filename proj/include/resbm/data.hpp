#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "resbm/rng.hpp"

namespace resbm::data {

/// Raw bytes; token ids are the byte values.
struct Corpus {
  std::string name;
  std::vector<std::uint8_t> bytes;

  std::size_t length() const { return bytes.size(); }
};

/// Throws DataError if the file is missing or shorter than
/// context_len + 2 bytes.
Corpus load_corpus(const std::filesystem::path& path, std::size_t context_len);
/// In-memory corpus with the same length rule.
Corpus make_corpus(std::string name, std::vector<std::uint8_t> bytes, std::size_t context_len);

struct Window {
  std::vector<int> inputs;   // L ids
  std::vector<int> targets;  // inputs shifted by one
};

/// Window of L inputs starting at `start`; needs start + L < length.
Window window_at(const Corpus& corpus, std::size_t start, std::size_t context_len);

struct Batch {
  std::vector<Window> rows;
  std::vector<std::size_t> starts;
};

/// Samples B windows per call with starts uniform in [0, len - L - 1].
class BatchStream {
 public:
  BatchStream(std::shared_ptr<const Corpus> corpus, std::size_t context_len, std::size_t batch_size,
              std::uint64_t seed, std::string_view stream_name = "data");

  Batch next_batch();

  std::size_t context_len() const { return context_len_; }
  std::size_t batch_size() const { return batch_size_; }
  std::uint64_t batches_emitted() const { return emitted_; }

 private:
  std::shared_ptr<const Corpus> corpus_;
  std::size_t context_len_;
  std::size_t batch_size_;
  Xoshiro256 rng_;
  std::uint64_t emitted_ = 0;
};

}  // namespace resbm::data
