#pragma once

#include <mutex>
#include <string>
#include <vector>

namespace map4ts {

// Collects warnings and notes emitted during a run (e.g. tokenizer or remote
// fallbacks). Thread-safe.
class RunLog {
 public:
  void note(std::string line) {
    std::lock_guard<std::mutex> lock(mu_);
    lines_.push_back(std::move(line));
  }

  std::vector<std::string> lines() const {
    std::lock_guard<std::mutex> lock(mu_);
    return lines_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::string> lines_;
};

}  // namespace map4ts
