#include "tmt/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <map>

#include "tmt/error.hpp"

namespace tmt {

namespace {

const char* kReserved[4] = {"<pad>", "<unk>", "<sos>", "<eos>"};

bool is_punct(char c) {
  return std::strchr(".,!?;:'\"()-", c) != nullptr;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.push_back(std::string(1, c));
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* r : kReserved) tokens_.emplace_back(r);
  index();
}

void Vocabulary::index() {
  ids_.clear();
  for (size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, int min_count) {
  std::map<std::string, int64_t> counts;
  for (const std::string& text : corpus)
    for (const std::string& tok : tokenize(text)) ++counts[tok];
  if (counts.empty()) throw FormatError("empty corpus: no tokens to build a vocabulary from");

  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const auto& [tok, count] : ranked) {
    if (count < min_count) continue;
    if (v.ids_.count(tok)) continue;  // a reserved literal appearing in text
    v.tokens_.push_back(tok);
  }
  v.index();
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(msg("cannot open vocabulary file ", path));
  Vocabulary v;
  v.tokens_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) throw FormatError(msg("empty line in vocabulary file ", path));
    v.tokens_.push_back(line);
  }
  if (v.tokens_.size() < 4)
    throw FormatError(msg("vocabulary file ", path, " has fewer than the 4 reserved tokens"));
  for (int i = 0; i < 4; ++i)
    if (v.tokens_[static_cast<size_t>(i)] != kReserved[i])
      throw FormatError(msg("vocabulary file ", path, " reserved slot ", i, " holds ",
                            v.tokens_[static_cast<size_t>(i)], ", expected ", kReserved[i]));
  v.index();
  if (v.ids_.size() != v.tokens_.size())
    throw FormatError(msg("vocabulary file ", path, " contains duplicate tokens"));
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(msg("cannot write vocabulary file ", path));
  for (const std::string& tok : tokens_) out << tok << '\n';
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? unk_id : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw VocabError(msg("token id ", id, " outside [0,", size(), ")"));
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text, bool append_eos) const {
  std::vector<int> out;
  for (const std::string& tok : tokenize(text)) out.push_back(id(tok));
  if (append_eos) out.push_back(eos_id);
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (const auto& t : decode_tokens(ids)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<std::string> Vocabulary::decode_tokens(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i == pad_id || i == sos_id || i == eos_id) continue;
    out.push_back(token(i));
  }
  return out;
}

}  // namespace tmt
