#pragma once

#include <map>
#include <string>
#include <vector>

#include "tmt/tensor.hpp"
#include "tmt/vocab.hpp"

namespace tmt {

struct DialogTurn {
  std::string question;
  std::string answer;
  std::vector<std::string> answer_refs;  // optional extra references for scoring
};

/// One dialog as stored on disk: raw text plus the id that names its
/// feature files.
struct DialogRecord {
  std::string id;
  std::string caption;
  std::string summary;
  std::vector<DialogTurn> turns;
};

// One JSON object per line with fields id, caption, summary,
// turns[{question, answer, refs?}].
std::vector<DialogRecord> load_dialogs(const std::string& path);
void save_dialogs(const std::string& path, const std::vector<DialogRecord>& dialogs);

/// Dataset directory layout: where the dialog file lives, where feature
/// files live, and how modality names map to file suffixes and widths.
struct DatasetManifest {
  std::string dialog_file;
  std::string feature_dir;
  std::map<std::string, std::string> suffixes;
  std::map<std::string, int> widths;

  static DatasetManifest load(const std::string& path);
  void save(const std::string& path) const;
  std::string feature_path(const std::string& modality, const std::string& dialog_id) const;
};

/// Manifest plus its dialogs; `open` reads <dir>/manifest.json.
struct Dataset {
  DatasetManifest manifest;
  std::vector<DialogRecord> records;
  static Dataset open(const std::string& dir);
};

/// One training example: a dialog truncated to one answered turn, with
/// all text mapped to token ids. Every sequence ends with eos.
struct TokenizedExample {
  std::string dialog_id;
  int turn_index = 0;
  std::vector<std::vector<int>> history;  // prior turns, question+answer merged
  std::vector<int> question;
  std::vector<int> answer;
  std::vector<int> caption;
  std::vector<int> summary;
  std::vector<std::vector<int>> answer_refs;
};

/// Each turn of each dialog becomes one example whose history is all
/// preceding turns.
std::vector<TokenizedExample> expand_examples(const std::vector<DialogRecord>& dialogs,
                                              const Vocabulary& vocab);

struct PaddedTokens {
  std::vector<std::vector<int>> ids;    // [B][L], padded with <pad>
  std::vector<std::vector<char>> mask;  // 1 where real
  int width = 0;
  std::vector<int> unpad(int b) const;
};

struct DialogBatch {
  int size = 0;
  std::vector<std::string> dialog_ids;
  std::vector<int> turn_index;
  PaddedTokens question, answer, caption, summary, history;
};

/// Chunks examples in order into batches of at most `batch_size`, padding
/// each stream to its in-batch maximum. History turns are flattened per
/// example before padding (turn boundaries are recoverable from eos).
std::vector<DialogBatch> batch_and_pad(const std::vector<TokenizedExample>& examples,
                                       int batch_size);

/// Lazy feature-file access with caching and a read counter, so tests can
/// audit that text-only runs touch no feature files.
class FeatureLoader {
 public:
  explicit FeatureLoader(DatasetManifest manifest) : manifest_(std::move(manifest)) {}
  const Tensor& get(const std::string& modality, const std::string& dialog_id);
  /// Preloads a tensor so `get` never touches the filesystem for it.
  void put(const std::string& modality, const std::string& dialog_id, Tensor t);
  int width(const std::string& modality) const;
  int64_t files_read() const { return files_read_; }

 private:
  DatasetManifest manifest_;
  std::map<std::string, Tensor> cache_;
  int64_t files_read_ = 0;
};

}  // namespace tmt
