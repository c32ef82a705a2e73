#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmasr/corpus/types.hpp"

namespace mmasr::corpus {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static inline const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};

  Vocabulary() {
    for (const auto& r : kReserved) push(r);
  }

  /// Builds from an explicit word list (reserved tokens are prepended and
  /// must not reappear).
  static Vocabulary from_words(const std::vector<std::string>& words) {
    Vocabulary v;
    for (const auto& w : words) {
      if (v.index_.count(w)) throw ArgumentError("vocabulary word listed twice: " + w);
      v.push(w);
    }
    return v;
  }

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& w) const { return index_.count(w) > 0; }

  int index(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw ArgumentError("vocabulary index out of range");
    return words_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& words() const { return words_; }

  // Transcript -> ids wrapped in bos/eos.
  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size() + 2);
    ids.push_back(kBos);
    for (const auto& w : words) ids.push_back(index(w));
    ids.push_back(kEos);
    return ids;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    for (int id : ids) {
      if (id == kEos) break;
      if (id == kBos || id == kPad) continue;
      out.push_back(word(id));
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write vocabulary " + path.string());
    for (std::size_t i = kReserved.size(); i < words_.size(); ++i) os << words_[i] << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("missing vocabulary " + path.string());
    std::vector<std::string> words;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) words.push_back(line);
    }
    return from_words(words);
  }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  void push(const std::string& w) {
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Words with count >= min_count, ordered by descending frequency with
/// lexicographic tie-break, after the four reserved tokens.
inline Vocabulary build_vocab(const Corpus& corpus, std::size_t min_count = 1) {
  if (min_count < 1) throw ArgumentError("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& u : corpus.utterances) {
    for (const auto& w : u.words) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> items;
  for (const auto& [w, c] : counts) {
    const bool reserved = std::find(Vocabulary::kReserved.begin(), Vocabulary::kReserved.end(), w) !=
                          Vocabulary::kReserved.end();
    if (c >= min_count && !reserved) items.emplace_back(w, c);
  }
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> words;
  words.reserve(items.size());
  for (auto& [w, c] : items) words.push_back(w);
  return Vocabulary::from_words(words);
}

}  // namespace mmasr::corpus
