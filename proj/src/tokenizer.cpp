#include "map4ts/tokenizer.hpp"

#include <fstream>
#include <limits>
#include "json.hpp"

#include "map4ts/error.hpp"

namespace map4ts::prompt {

namespace {

std::string utf8(unsigned cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return s;
}

// Reversible byte -> printable code point table used by byte-level BPE.
std::vector<std::string> make_byte_table() {
  std::vector<int> printable;
  for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) printable.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) printable.push_back(b);
  std::vector<std::string> table(256);
  std::vector<bool> direct(256, false);
  for (int b : printable) direct[static_cast<std::size_t>(b)] = true;
  unsigned extra = 0;
  for (int b = 0; b < 256; ++b) {
    if (direct[static_cast<std::size_t>(b)]) {
      table[static_cast<std::size_t>(b)] = utf8(static_cast<unsigned>(b));
    } else {
      table[static_cast<std::size_t>(b)] = utf8(256 + extra++);
    }
  }
  return table;
}

enum class CharClass { Letter, Number, Space, Other };

// ASCII classification; bytes of multi-byte sequences count as letters.
CharClass classify(unsigned char c) {
  if (c >= 0x80 || std::isalpha(c)) return CharClass::Letter;
  if (std::isdigit(c)) return CharClass::Number;
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return CharClass::Space;
  return CharClass::Other;
}

}  // namespace

std::vector<int> ByteTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::vector<std::string> BpeTokenizer::pretokenize(std::string_view text) {
  std::vector<std::string> out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto cls = [&](std::size_t k) { return classify(static_cast<unsigned char>(text[k])); };
  auto run = [&](std::size_t from, CharClass c) {
    std::size_t j = from;
    while (j < n && cls(j) == c) ++j;
    return j;
  };
  while (i < n) {
    if (text[i] == '\'' && i + 1 < n) {
      static const char* kContractions[] = {"re", "ve", "ll", "s", "t", "m", "d"};
      bool matched = false;
      for (const char* c : kContractions) {
        const std::string_view cv(c);
        if (text.substr(i + 1, cv.size()) == cv) {
          out.emplace_back(text.substr(i, cv.size() + 1));
          i += cv.size() + 1;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t start = i;
    std::size_t j = i;
    if (text[j] == ' ' && j + 1 < n && cls(j + 1) != CharClass::Space) ++j;
    const CharClass c = cls(j);
    if (c != CharClass::Space) {
      const std::size_t end = run(j, c);
      out.emplace_back(text.substr(start, end - start));
      i = end;
      continue;
    }
    const std::size_t end = run(i, CharClass::Space);
    if (end < n && end - i > 1) {
      // Leave the last whitespace to prefix the following token.
      out.emplace_back(text.substr(i, end - i - 1));
      i = end - 1;
    } else {
      out.emplace_back(text.substr(i, end - i));
      i = end;
    }
  }
  return out;
}

BpeTokenizer::BpeTokenizer(const std::string& vocab_path, const std::string& merges_path)
    : byte_to_unicode_(make_byte_table()) {
  std::ifstream vin(vocab_path);
  if (!vin) throw Error(ErrorCode::TokenizerUnavailable, "cannot open " + vocab_path);
  nlohmann::json vj;
  try {
    vin >> vj;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::TokenizerUnavailable, vocab_path + ": " + e.what());
  }
  int max_id = -1;
  for (auto it = vj.begin(); it != vj.end(); ++it) {
    const int id = it.value().get<int>();
    vocab_.emplace(it.key(), id);
    max_id = std::max(max_id, id);
  }
  std::ifstream min(merges_path);
  if (!min) throw Error(ErrorCode::TokenizerUnavailable, "cannot open " + merges_path);
  std::string line;
  int rank = 0;
  while (std::getline(min, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    ranks_.emplace(line, rank++);
  }
  for (const auto& b : byte_to_unicode_) {
    if (!vocab_.count(b)) throw Error(ErrorCode::TokenizerUnavailable, "vocabulary lacks a byte symbol");
  }
  auto eos = vocab_.find("<|endoftext|>");
  if (eos != vocab_.end()) {
    eos_id_ = eos->second;
    vocab_size_ = static_cast<std::size_t>(max_id) + 1;
  } else {
    eos_id_ = max_id + 1;
    vocab_size_ = static_cast<std::size_t>(max_id) + 2;
  }
}

std::vector<int> BpeTokenizer::encode_word(const std::string& word) const {
  {
    std::lock_guard<std::mutex> lock(cache_mutex_);
    auto it = cache_.find(word);
    if (it != cache_.end()) return it->second;
  }
  std::vector<std::string> parts;
  for (unsigned char c : word) parts.push_back(byte_to_unicode_[c]);
  while (parts.size() > 1) {
    int best = std::numeric_limits<int>::max();
    std::size_t best_i = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto it = ranks_.find(parts[i] + " " + parts[i + 1]);
      if (it != ranks_.end() && it->second < best) {
        best = it->second;
        best_i = i;
      }
    }
    if (best == std::numeric_limits<int>::max()) break;
    // Merge every occurrence of the best pair, left to right.
    const std::string a = parts[best_i];
    const std::string b = parts[best_i + 1];
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (i + 1 < parts.size() && parts[i] == a && parts[i + 1] == b) {
        merged.push_back(a + b);
        ++i;
      } else {
        merged.push_back(parts[i]);
      }
    }
    parts = std::move(merged);
  }
  std::vector<int> ids;
  for (const auto& p : parts) {
    auto it = vocab_.find(p);
    if (it == vocab_.end()) throw Error(ErrorCode::TokenizerUnavailable, "symbol missing from vocabulary");
    ids.push_back(it->second);
  }
  std::lock_guard<std::mutex> lock(cache_mutex_);
  cache_.emplace(word, ids);
  return ids;
}

std::vector<int> BpeTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : pretokenize(text)) {
    const auto part = encode_word(w);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

std::shared_ptr<const Tokenizer> make_tokenizer(const TokenizerConfig& cfg, std::string* warning) {
  if (cfg.kind == "byte") return std::make_shared<ByteTokenizer>();
  if (cfg.kind != "bpe") throw Error(ErrorCode::InvalidConfig, "unknown tokenizer kind '" + cfg.kind + "'");
  try {
    return std::make_shared<BpeTokenizer>(cfg.vocab_path, cfg.merges_path);
  } catch (const Error& e) {
    if (!cfg.allow_fallback) throw;
    if (warning) *warning = std::string("BPE tokenizer unavailable (") + e.what() +
                            "); byte-level counts are approximate upper bounds";
    return std::make_shared<ByteTokenizer>();
  }
}

std::size_t count_tokens(std::string_view text, const Tokenizer& tok) {
  if (text.empty()) return 0;
  return tok.encode(text).size();
}

}  // namespace map4ts::prompt
