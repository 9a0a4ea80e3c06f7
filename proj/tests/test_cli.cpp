#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>

#include "helpers.hpp"
#include "tmt/data.hpp"

#ifndef TMT_BIN
#error "TMT_BIN must name the command-line binary under test"
#endif

namespace fs = std::filesystem;
using testutil::read_file;
using testutil::TempDir;
using testutil::write_file;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Spawns the real binary through the shell with stdout/stderr captured.
// TempDir paths never contain spaces, so no quoting is needed.
RunResult run_cli(const std::string& args) {
  static TempDir scratch;
  static int n = 0;
  const std::string out_path = scratch.file("out" + std::to_string(n));
  const std::string err_path = scratch.file("err" + std::to_string(n));
  ++n;
  const std::string cmd =
      std::string(TMT_BIN) + " " + args + " >" + out_path + " 2>" + err_path;
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  return r;
}

std::string gen_flags(uint64_t seed, const std::string& out) {
  return "gen-data --dialogs 6 --turns 2 --actions 4 --actions-per-dialog 2 "
         "--frames-per-action 1 --d-feat 8 --seed " +
         std::to_string(seed) + " --out " + out;
}

// One tiny dataset and one one-epoch training run, shared by the cases
// that only need some trained artifact to poke at.
struct Pipeline {
  TempDir dir;
  std::string data;
  std::string run_out;
  RunResult gen, train;

  Pipeline() {
    data = dir.file("data");
    run_out = dir.file("run");
    gen = run_cli(gen_flags(5, data));
    train = run_cli(train_flags() + " --out " + run_out);
  }

  std::string train_flags() const {
    return "train --data " + data +
           " --d 8 --heads 2 --ffn 16 --depth-m 1 --depth-n 1 --depth-answer 1"
           " --keep-prob 1.0 --batch 4 --epochs 1 --warmup 10 --max-len 8 --beam 2 --seed 7";
  }
  std::string config_file() const { return run_out + "/config.txt"; }
  std::string checkpoint() const { return run_out + "/best.ckpt"; }
};

Pipeline& pipe() {
  static Pipeline p;
  return p;
}

// Relative paths of all regular files under a directory, sorted.
std::set<std::string> file_set(const std::string& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.insert(fs::relative(e.path(), root).string());
  return out;
}

bool single_line(const std::string& s) {
  return !s.empty() && s.find('\n') == s.size() - 1;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("help lists the subcommands and flag defaults") {
  RunResult top = run_cli("--help");
  CHECK(top.exit_code == 0);
  for (const char* name : {"gen-data", "build-vocab", "train", "grid-search", "evaluate",
                           "generate", "grad-check", "repeat"}) {
    INFO(top.out);
    CHECK(top.out.find(name) != std::string::npos);
  }

  RunResult train = run_cli("train --help");
  CHECK(train.exit_code == 0);
  for (const char* needle : {"--alpha", "0.3", "--beta", "0.8", "--keep-prob", "0.5",
                             "--decay-weights", "--config"}) {
    INFO(train.out);
    CHECK(train.out.find(needle) != std::string::npos);
  }
}

TEST_CASE("generating, training, evaluating and decoding work end to end") {
  Pipeline& p = pipe();
  INFO(p.gen.err);
  REQUIRE(p.gen.exit_code == 0);
  CHECK(p.gen.out.find("dialogs=6") != std::string::npos);
  CHECK(fs::exists(p.data + "/manifest.json"));
  CHECK(fs::exists(p.data + "/spec.txt"));

  INFO(p.train.err);
  REQUIRE(p.train.exit_code == 0);
  CHECK(p.train.out.find("epochs=1") != std::string::npos);
  CHECK(p.train.out.find("best_epoch=0") != std::string::npos);
  for (const char* f : {"best.ckpt", "vocab.txt", "run.jsonl", "config.txt", "manifest.json"})
    CHECK(fs::exists(p.run_out + "/" + f));

  // The effective configuration is echoed into the run record.
  const std::string record = read_file(p.run_out + "/run.jsonl");
  CHECK(record.find("\"record\":\"run\"") != std::string::npos);
  CHECK(record.find("\"record\":\"epoch\"") != std::string::npos);
  CHECK(record.find("seed = 7") != std::string::npos);
  CHECK(record.find("batch = 4") != std::string::npos);

  TempDir work;
  const std::string eval_out = work.file("eval");
  RunResult ev = run_cli("evaluate --config " + p.config_file() + " --checkpoint " +
                         p.checkpoint() + " --out " + eval_out);
  INFO(ev.err);
  REQUIRE(ev.exit_code == 0);
  for (const char* needle : {"BLEU-4", "ROUGE-L", "CIDEr", "perplexity"})
    CHECK(ev.out.find(needle) != std::string::npos);
  for (const char* f : {"metrics.txt", "metrics.jsonl", "hypotheses.txt", "config.txt"})
    CHECK(fs::exists(eval_out + "/" + f));
  CHECK(read_file(eval_out + "/metrics.jsonl").find("\"record\":\"config\"") !=
        std::string::npos);

  const std::string gen_out = work.file("gen");
  RunResult gen = run_cli("generate --config " + p.config_file() + " --checkpoint " +
                          p.checkpoint() + " --out " + gen_out);
  INFO(gen.err);
  REQUIRE(gen.exit_code == 0);
  CHECK(gen.out.find("hypotheses=12") != std::string::npos);
  const std::string hyps = read_file(gen_out + "/hypotheses.txt");
  CHECK(std::count(hyps.begin(), hyps.end(), '\n') == 12);
  CHECK(std::count(hyps.begin(), hyps.end(), '\t') == 12);
}

TEST_CASE("an epoch count of zero validates the setup without training") {
  Pipeline& p = pipe();
  TempDir work;
  const std::string out = work.file("dry");
  RunResult r = run_cli("train --data " + p.data + " --d 8 --heads 2 --epochs 0 --out " + out);
  INFO(r.err);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("epochs=0") != std::string::npos);
  CHECK(!fs::exists(out + "/best.ckpt"));
  CHECK(fs::exists(out + "/run.jsonl"));
}

TEST_CASE("configuration mistakes exit 2 with one stderr line") {
  TempDir work;
  write_file(work.file("bad.cfg"), "bogus = 1\n");
  RunResult r = run_cli("train --config " + work.file("bad.cfg") + " --out " + work.file("o"));
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("tmt: ConfigError") != std::string::npos);
  CHECK(r.err.find("unknown key 'bogus'") != std::string::npos);
  CHECK(single_line(r.err));

  RunResult task = run_cli("train --task nonsense --out " + work.file("o2"));
  CHECK(task.exit_code == 2);
  CHECK(task.err.find("tmt: ConfigError") != std::string::npos);

  RunResult flag = run_cli("train --no-such-flag 1");
  CHECK(flag.exit_code == 2);
  CHECK(flag.err.find("tmt: ConfigError") != std::string::npos);

  RunResult missing_out = run_cli("gen-data --dialogs 2");
  CHECK(missing_out.exit_code == 2);
}

TEST_CASE("a missing dataset exits 3 as a data error") {
  TempDir work;
  RunResult r = run_cli("train --data " + work.file("nowhere") + " --epochs 1 --out " +
                        work.file("o"));
  CHECK(r.exit_code == 3);
  CHECK(r.err.find("tmt: FormatError") != std::string::npos);
  CHECK(single_line(r.err));
}

TEST_CASE("reruns with one seed are byte-identical") {
  TempDir work;
  const std::string a = work.file("a");
  const std::string b = work.file("b");
  REQUIRE(run_cli(gen_flags(42, a)).exit_code == 0);
  REQUIRE(run_cli(gen_flags(42, b)).exit_code == 0);
  const std::set<std::string> files = file_set(a);
  CHECK(files == file_set(b));
  CHECK(files.size() >= 4);
  for (const std::string& f : files) {
    INFO(f);
    CHECK(read_file(a + "/" + f) == read_file(b + "/" + f));
  }

  // A fresh training run with the pipeline's flags reports the same numbers.
  Pipeline& p = pipe();
  RunResult again = run_cli(p.train_flags() + " --out " + work.file("run2"));
  REQUIRE(again.exit_code == 0);
  CHECK(again.out == p.train.out);
}

TEST_CASE("hypotheses that quote the references score a perfect overlap") {
  Pipeline& p = pipe();
  tmt::Dataset ds = tmt::Dataset::open(p.data);
  std::string lines;
  for (const tmt::DialogRecord& rec : ds.records)
    for (size_t t = 0; t < rec.turns.size(); ++t)
      lines += rec.id + ":" + std::to_string(t) + "\t" + rec.turns[t].answer + "\n";
  TempDir work;
  write_file(work.file("hyps.txt"), lines);

  RunResult r = run_cli("evaluate --config " + p.config_file() + " --hyps " +
                        work.file("hyps.txt") + " --out " + work.file("scored"));
  INFO(r.err);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("1.000000") != std::string::npos);
  const std::string table = read_file(work.file("scored") + "/metrics.txt");
  const size_t bleu_row = table.find("BLEU-4");
  REQUIRE(bleu_row != std::string::npos);
  CHECK(table.substr(bleu_row, table.find('\n', bleu_row) - bleu_row).find("1.000000") !=
        std::string::npos);
}

TEST_CASE("the gradient audit is addressable by module name") {
  RunResult ok = run_cli("grad-check --module linear");
  INFO(ok.err);
  CHECK(ok.exit_code == 0);
  CHECK(ok.out.find("linear") != std::string::npos);
  CHECK(ok.out.find(" pass") != std::string::npos);
  CHECK(ok.out.find("max relative error") != std::string::npos);
  CHECK(ok.out.find("FAIL") == std::string::npos);

  RunResult bad = run_cli("grad-check --module no_such_layer");
  CHECK(bad.exit_code == 2);
  CHECK(bad.err.find("unknown module 'no_such_layer'") != std::string::npos);
  CHECK(bad.err.find("full_model_loss") != std::string::npos);
}

TEST_SUITE_END();
