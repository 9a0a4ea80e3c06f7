#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace tmt {

/// Lowercase, split on whitespace, and split punctuation into its own
/// tokens. Idempotent on its own output.
std::vector<std::string> tokenize(const std::string& text);

/// Token table with fixed reserved ids. Unknown tokens map to <unk>.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int unk_id = 1;
  static constexpr int sos_id = 2;
  static constexpr int eos_id = 3;

  /// Counts tokens over the corpus texts, drops those below min_count,
  /// and orders the rest by descending count, ties lexicographic.
  static Vocabulary build(const std::vector<std::string>& corpus, int min_count);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;
  const std::string& token(int id) const;

  /// Tokenize and map to ids, appending eos when asked.
  std::vector<int> encode(const std::string& text, bool append_eos) const;
  /// Space-joined tokens; reserved ids are skipped.
  std::string decode(const std::vector<int>& ids) const;
  /// Token strings with reserved ids skipped.
  std::vector<std::string> decode_tokens(const std::vector<int>& ids) const;

 private:
  Vocabulary();
  void index();
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace tmt
