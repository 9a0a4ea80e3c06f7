#include "tmt/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tmt/tnsr.hpp"

namespace tmt {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string json_string(const json& j, const char* field, int line) {
  if (!j.contains(field) || !j[field].is_string())
    throw FormatError(msg("dialog record on line ", line, " lacks string field ", field));
  return j[field].get<std::string>();
}

}  // namespace

std::vector<DialogRecord> load_dialogs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(msg("cannot open dialog file ", path));
  std::vector<DialogRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(msg("dialog file ", path, " line ", line_no, ": ", e.what()));
    }
    DialogRecord rec;
    rec.id = json_string(j, "id", line_no);
    rec.caption = json_string(j, "caption", line_no);
    rec.summary = json_string(j, "summary", line_no);
    if (!j.contains("turns") || !j["turns"].is_array())
      throw FormatError(msg("dialog record on line ", line_no, " lacks a turns array"));
    for (const json& t : j["turns"]) {
      DialogTurn turn;
      turn.question = json_string(t, "question", line_no);
      turn.answer = json_string(t, "answer", line_no);
      if (t.contains("refs")) {
        if (!t["refs"].is_array())
          throw FormatError(msg("refs on line ", line_no, " is not an array"));
        for (const json& r : t["refs"]) turn.answer_refs.push_back(r.get<std::string>());
      }
      rec.turns.push_back(std::move(turn));
    }
    if (rec.turns.empty())
      throw FormatError(msg("dialog record on line ", line_no, " has no turns"));
    out.push_back(std::move(rec));
  }
  return out;
}

void save_dialogs(const std::string& path, const std::vector<DialogRecord>& dialogs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(msg("cannot write dialog file ", path));
  for (const DialogRecord& rec : dialogs) {
    json j;
    j["id"] = rec.id;
    j["caption"] = rec.caption;
    j["summary"] = rec.summary;
    j["turns"] = json::array();
    for (const DialogTurn& t : rec.turns) {
      json jt;
      jt["question"] = t.question;
      jt["answer"] = t.answer;
      if (!t.answer_refs.empty()) jt["refs"] = t.answer_refs;
      j["turns"].push_back(std::move(jt));
    }
    out << j.dump() << '\n';
  }
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(msg("cannot open manifest ", path));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(msg("manifest ", path, ": ", e.what()));
  }
  DatasetManifest m;
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    return fs::path(p).is_absolute() ? p : (base / p).string();
  };
  if (!j.contains("dialogs") || !j.contains("features"))
    throw FormatError(msg("manifest ", path, " needs dialogs and features entries"));
  m.dialog_file = resolve(j["dialogs"].get<std::string>());
  m.feature_dir = resolve(j["features"].get<std::string>());
  if (j.contains("modalities"))
    for (auto& [name, spec] : j["modalities"].items()) {
      m.suffixes[name] = spec.at("suffix").get<std::string>();
      m.widths[name] = spec.at("width").get<int>();
    }
  return m;
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(msg("cannot write manifest ", path));
  const fs::path base = fs::path(path).parent_path();
  auto relativize = [&](const std::string& p) {
    const fs::path fp(p);
    if (!fp.is_absolute() || base.empty()) return fp.string();
    std::error_code ec;
    const fs::path rel = fs::relative(fp, base, ec);
    return ec ? fp.string() : rel.string();
  };
  json j;
  j["dialogs"] = relativize(dialog_file);
  j["features"] = relativize(feature_dir);
  j["modalities"] = json::object();
  for (const auto& [name, suffix] : suffixes) {
    json spec;
    spec["suffix"] = suffix;
    spec["width"] = widths.count(name) ? widths.at(name) : 0;
    j["modalities"][name] = std::move(spec);
  }
  out << j.dump(2) << '\n';
}

std::string DatasetManifest::feature_path(const std::string& modality,
                                          const std::string& dialog_id) const {
  auto it = suffixes.find(modality);
  if (it == suffixes.end())
    throw FormatError(msg("manifest declares no modality named ", modality));
  return (fs::path(feature_dir) / (dialog_id + it->second)).string();
}

Dataset Dataset::open(const std::string& dir) {
  Dataset d;
  d.manifest = DatasetManifest::load((fs::path(dir) / "manifest.json").string());
  d.records = load_dialogs(d.manifest.dialog_file);
  return d;
}

std::vector<TokenizedExample> expand_examples(const std::vector<DialogRecord>& dialogs,
                                              const Vocabulary& vocab) {
  std::vector<TokenizedExample> out;
  for (const DialogRecord& rec : dialogs) {
    std::vector<std::vector<int>> history;
    for (size_t t = 0; t < rec.turns.size(); ++t) {
      const DialogTurn& turn = rec.turns[t];
      TokenizedExample ex;
      ex.dialog_id = rec.id;
      ex.turn_index = static_cast<int>(t);
      ex.history = history;
      ex.question = vocab.encode(turn.question, true);
      ex.answer = vocab.encode(turn.answer, true);
      ex.caption = vocab.encode(rec.caption, true);
      ex.summary = vocab.encode(rec.summary, true);
      for (const std::string& ref : turn.answer_refs)
        ex.answer_refs.push_back(vocab.encode(ref, true));
      out.push_back(std::move(ex));

      // This turn joins the history for later turns: question and answer
      // merged into one eos-terminated sentence.
      std::vector<int> sentence = vocab.encode(turn.question, false);
      std::vector<int> ans = vocab.encode(turn.answer, false);
      sentence.insert(sentence.end(), ans.begin(), ans.end());
      sentence.push_back(Vocabulary::eos_id);
      history.push_back(std::move(sentence));
    }
  }
  return out;
}

std::vector<int> PaddedTokens::unpad(int b) const {
  const auto& row = ids.at(static_cast<size_t>(b));
  const auto& m = mask.at(static_cast<size_t>(b));
  std::vector<int> out;
  for (size_t i = 0; i < row.size(); ++i)
    if (m[i]) out.push_back(row[i]);
  return out;
}

namespace {

PaddedTokens pad_stream(const std::vector<std::vector<int>>& rows) {
  PaddedTokens p;
  for (const auto& r : rows) p.width = std::max(p.width, static_cast<int>(r.size()));
  for (const auto& r : rows) {
    std::vector<int> ids(static_cast<size_t>(p.width), Vocabulary::pad_id);
    std::vector<char> mask(static_cast<size_t>(p.width), 0);
    std::copy(r.begin(), r.end(), ids.begin());
    std::fill(mask.begin(), mask.begin() + static_cast<int64_t>(r.size()), 1);
    p.ids.push_back(std::move(ids));
    p.mask.push_back(std::move(mask));
  }
  return p;
}

}  // namespace

std::vector<DialogBatch> batch_and_pad(const std::vector<TokenizedExample>& examples,
                                       int batch_size) {
  if (batch_size < 1) throw ContractError(msg("batch size ", batch_size, " < 1"));
  std::vector<DialogBatch> out;
  for (size_t start = 0; start < examples.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(examples.size(), start + static_cast<size_t>(batch_size));
    DialogBatch b;
    b.size = static_cast<int>(end - start);
    std::vector<std::vector<int>> q, a, c, s, h;
    for (size_t i = start; i < end; ++i) {
      const TokenizedExample& ex = examples[i];
      b.dialog_ids.push_back(ex.dialog_id);
      b.turn_index.push_back(ex.turn_index);
      q.push_back(ex.question);
      a.push_back(ex.answer);
      c.push_back(ex.caption);
      s.push_back(ex.summary);
      std::vector<int> flat;
      for (const auto& turn : ex.history) flat.insert(flat.end(), turn.begin(), turn.end());
      h.push_back(std::move(flat));
    }
    b.question = pad_stream(q);
    b.answer = pad_stream(a);
    b.caption = pad_stream(c);
    b.summary = pad_stream(s);
    b.history = pad_stream(h);
    out.push_back(std::move(b));
  }
  return out;
}

const Tensor& FeatureLoader::get(const std::string& modality, const std::string& dialog_id) {
  const std::string key = modality + "/" + dialog_id;
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  const std::string path = manifest_.feature_path(modality, dialog_id);
  Tensor t = load_features(path);
  ++files_read_;
  const int declared = width(modality);
  if (t.extent(1) != declared)
    throw FormatError(msg("feature file ", path, " has width ", t.extent(1),
                          " but the manifest declares ", declared));
  return cache_.emplace(key, std::move(t)).first->second;
}

void FeatureLoader::put(const std::string& modality, const std::string& dialog_id, Tensor t) {
  cache_.insert_or_assign(modality + "/" + dialog_id, std::move(t));
}

int FeatureLoader::width(const std::string& modality) const {
  auto it = manifest_.widths.find(modality);
  if (it == manifest_.widths.end())
    throw FormatError(msg("manifest declares no width for modality ", modality));
  return it->second;
}

}  // namespace tmt
