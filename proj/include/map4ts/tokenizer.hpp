#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace map4ts::prompt {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<int> encode(std::string_view text) const = 0;
  virtual int eos_id() const = 0;
  virtual std::size_t vocab_size() const = 0;
  // True when counts are only an upper bound on the reference tokenizer.
  virtual bool approximate() const = 0;
  virtual std::string name() const = 0;
};

// One id per UTF-8 byte plus a trailing end-of-sequence id.
class ByteTokenizer final : public Tokenizer {
 public:
  std::vector<int> encode(std::string_view text) const override;
  int eos_id() const override { return 256; }
  std::size_t vocab_size() const override { return 257; }
  bool approximate() const override { return true; }
  std::string name() const override { return "byte"; }
};

// Byte-level BPE read from a vocabulary JSON and a merges text file.
class BpeTokenizer final : public Tokenizer {
 public:
  BpeTokenizer(const std::string& vocab_path, const std::string& merges_path);

  std::vector<int> encode(std::string_view text) const override;
  int eos_id() const override { return eos_id_; }
  std::size_t vocab_size() const override { return vocab_size_; }
  bool approximate() const override { return false; }
  std::string name() const override { return "bpe"; }

  // Pre-tokenization split (exposed for tests).
  static std::vector<std::string> pretokenize(std::string_view text);

 private:
  std::vector<int> encode_word(const std::string& word) const;

  std::unordered_map<std::string, int> vocab_;
  std::unordered_map<std::string, int> ranks_;  // "left right" -> rank
  std::vector<std::string> byte_to_unicode_;
  int eos_id_ = 0;
  std::size_t vocab_size_ = 0;
  mutable std::mutex cache_mutex_;
  mutable std::unordered_map<std::string, std::vector<int>> cache_;
};

struct TokenizerConfig {
  std::string kind = "byte";  // "byte" or "bpe"
  std::string vocab_path;
  std::string merges_path;
  bool allow_fallback = true;
};

// Falls back to ByteTokenizer when BPE files are unusable and fallback is
// allowed; `warning` (optional) receives the reason.
std::shared_ptr<const Tokenizer> make_tokenizer(const TokenizerConfig& cfg,
                                                std::string* warning = nullptr);

std::size_t count_tokens(std::string_view text, const Tokenizer& tok);

}  // namespace map4ts::prompt
