#include "tmt/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "tmt/error.hpp"

namespace tmt {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

int parse_int(const std::string& key, const std::string& s) {
  int v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError(msg("config key '", key, "': expected integer, got '", s, "'"));
  return v;
}

uint64_t parse_u64(const std::string& key, const std::string& s) {
  uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError(msg("config key '", key, "': expected unsigned integer, got '", s, "'"));
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError(msg("config key '", key, "': expected number, got '", s, "'"));
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError(msg("config key '", key, "': expected true or false, got '", s, "'"));
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Key>& key_table() {
  auto int_key = [](std::string n, int RunConfig::*f) {
    return Key{n,
               [n, f](RunConfig& c, const std::string& s) { c.*f = parse_int(n, s); },
               [f](const RunConfig& c) { return std::to_string(c.*f); }};
  };
  auto dbl_key = [](std::string n, double RunConfig::*f) {
    return Key{n,
               [n, f](RunConfig& c, const std::string& s) { c.*f = parse_double(n, s); },
               [f](const RunConfig& c) { return format_double(c.*f); }};
  };
  auto str_key = [](std::string n, std::string RunConfig::*f) {
    return Key{n, [f](RunConfig& c, const std::string& s) { c.*f = s; },
               [f](const RunConfig& c) { return c.*f; }};
  };
  static const std::vector<Key> table = {
      int_key("d", &RunConfig::d),
      int_key("heads", &RunConfig::heads),
      int_key("ffn", &RunConfig::ffn),
      int_key("depth_m", &RunConfig::depth_m),
      int_key("depth_n", &RunConfig::depth_n),
      int_key("depth_answer", &RunConfig::depth_answer),
      dbl_key("keep_prob", &RunConfig::keep_prob),
      int_key("batch", &RunConfig::batch),
      int_key("epochs", &RunConfig::epochs),
      int_key("warmup", &RunConfig::warmup),
      dbl_key("alpha", &RunConfig::alpha),
      dbl_key("beta", &RunConfig::beta),
      str_key("task", &RunConfig::task),
      str_key("vct", &RunConfig::vct),
      str_key("dst", &RunConfig::dst),
      Key{"seed",
          [](RunConfig& c, const std::string& s) { c.seed = parse_u64("seed", s); },
          [](const RunConfig& c) { return std::to_string(c.seed); }},
      dbl_key("clip", &RunConfig::clip),
      dbl_key("lr_factor", &RunConfig::lr_factor),
      Key{"decay_weights",
          [](RunConfig& c, const std::string& s) { c.decay_weights = parse_bool("decay_weights", s); },
          [](const RunConfig& c) { return c.decay_weights ? "true" : "false"; }},
      int_key("max_len", &RunConfig::max_len),
      int_key("beam", &RunConfig::beam),
      str_key("data", &RunConfig::data),
      str_key("dev", &RunConfig::dev),
      str_key("out", &RunConfig::out),
      str_key("vocab_file", &RunConfig::vocab_file),
  };
  return table;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(msg("config line ", lineno, ": expected key=value, got '", line, "'"));
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (!seen.insert(key).second)
      throw ConfigError(msg("config line ", lineno, ": duplicate key '", key, "'"));
    bool matched = false;
    for (const auto& k : key_table()) {
      if (k.name == key) {
        k.set(cfg, val);
        matched = true;
        break;
      }
    }
    if (!matched)
      throw ConfigError(msg("config line ", lineno, ": unknown key '", key, "'"));
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(msg("cannot open config file: ", path));
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& k : key_table()) out << k.name << " = " << k.get(*this) << "\n";
  return out.str();
}

void RunConfig::validate() const {
  if (batch < 1) throw ConfigError("batch must be at least 1");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (warmup < 1) throw ConfigError("warmup must be at least 1");
  if (clip <= 0.0) throw ConfigError("clip must be positive");
  if (lr_factor <= 0.0) throw ConfigError("lr_factor must be positive");
  if (max_len < 1) throw ConfigError("max_len must be at least 1");
  if (beam < 1) throw ConfigError("beam must be at least 1");
  if (ffn < 0) throw ConfigError("ffn must be non-negative");
  task_mode();
  vct_toggle();
  dst_toggle();
}

TaskMode RunConfig::task_mode() const {
  if (task == "video-text") return TaskMode::video_text;
  if (task == "text-only") return TaskMode::text_only;
  throw ConfigError(msg("task must be video-text or text-only, got '", task, "'"));
}

namespace {
Toggle parse_toggle(const std::string& key, const std::string& s) {
  if (s == "auto") return Toggle::automatic;
  if (s == "on") return Toggle::on;
  if (s == "off") return Toggle::off;
  throw ConfigError(msg("config key '", key, "': expected auto, on or off, got '", s, "'"));
}
}  // namespace

Toggle RunConfig::vct_toggle() const { return parse_toggle("vct", vct); }
Toggle RunConfig::dst_toggle() const { return parse_toggle("dst", dst); }

ModelConfig RunConfig::model_config(int vocab, int d_feat_video, int d_feat_audio) const {
  validate();
  ModelConfig m;
  m.d = d;
  m.heads = heads;
  m.d_ff = ffn_width();
  m.depth_m = depth_m;
  m.depth_n = depth_n;
  m.depth_answer = depth_answer;
  m.vocab = vocab;
  m.d_feat_video = d_feat_video;
  m.d_feat_audio = d_feat_audio;
  m.keep_prob = keep_prob;
  m.alpha = alpha;
  m.beta = beta;
  m.task = task_mode();
  m.vct = vct_toggle();
  m.dst = dst_toggle();
  return m;
}

std::string resolve_data_path(const std::string& path) {
  if (path.empty() || path.front() == '/') return path;
  const char* root = std::getenv("TMT_DATA_ROOT");
  if (root == nullptr || *root == '\0') return path;
  std::string r(root);
  if (r.back() != '/') r += '/';
  return r + path;
}

}  // namespace tmt
