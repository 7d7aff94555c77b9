// End-to-end tests for the embedkit command-line binary. Each test spawns the
// real executable (path injected at compile time), then checks exit codes,
// artifact bytes, and agreement with the equivalent library calls.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "embedkit/checkpoint.hpp"
#include "embedkit/data.hpp"
#include "embedkit/retrieval.hpp"
#include "embedkit/training.hpp"

namespace {

namespace fs = std::filesystem;

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fresh working directory per test case; all artifact paths are relative to it.
struct Workspace {
  fs::path dir;

  Workspace() {
    static int counter = 0;
    dir = fs::temp_directory_path() /
          ("embedkit_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(dir);
  }
  ~Workspace() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  CliResult run(const std::string& args) const {
    const std::string out_file = path("_stdout"), err_file = path("_stderr");
    const std::string cmd = std::string(EMBEDKIT_CLI_PATH) + " " + args + " > " + out_file +
                            " 2> " + err_file;
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
  }
};

std::string padded_id(char prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%03zu", prefix, i);
  return buf;
}

std::vector<embedkit::CorpusDoc> toy_corpus() {
  const std::vector<std::string> topics = {"alpha", "bravo", "carbon", "delta",
                                           "ember", "fjord", "glade", "harbor"};
  std::vector<embedkit::CorpusDoc> docs;
  for (std::size_t i = 0; i < topics.size(); ++i) {
    docs.push_back({padded_id('d', i), "passage about " + topics[i] + " with extra words on " + topics[i] +
                            " systems and tooling"});
  }
  return docs;
}

std::vector<embedkit::PairRecord> toy_pairs() {
  const std::vector<std::string> topics = {"alpha", "bravo", "carbon", "delta",
                                           "ember", "fjord", "glade", "harbor"};
  auto docs = toy_corpus();
  std::vector<embedkit::PairRecord> pairs;
  for (std::size_t i = 0; i < topics.size(); ++i) {
    embedkit::PairRecord rec;
    rec.query = "find " + topics[i] + " notes";
    rec.positive = docs[i].text;
    rec.dataset = "toy";
    pairs.push_back(std::move(rec));
  }
  return pairs;
}

// Queries reuse the corpus JSONL shape: one {"id","text"} record per line.
void write_queries(const Workspace& ws) {
  auto pairs = toy_pairs();
  std::vector<embedkit::CorpusDoc> qs;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    qs.push_back({padded_id('q', i), pairs[i].query});
  }
  embedkit::save_corpus(ws.path("queries.jsonl"), qs);
}

void write_qrels(const Workspace& ws) {
  embedkit::Qrels qrels;
  for (std::size_t i = 0; i < 8; ++i) {
    qrels.grades[padded_id('q', i)][padded_id('d', i)] = 1;
  }
  embedkit::save_qrels(ws.path("qrels.tsv"), qrels);
}

void write_stage_config(const Workspace& ws, const std::string& name,
                        const std::map<std::string, std::string>& extra) {
  std::map<std::string, std::string> kv = {
      {"kind", "contrastive"},   {"pairs", ws.path("pairs.jsonl")},
      {"vocab", ws.path("vocab.txt")}, {"steps", "30"},
      {"batch_size", "4"},       {"seed", "11"},
      {"layers", "1"},           {"hidden", "16"},
      {"intermediate", "32"},    {"heads", "2"},
      {"max_seq", "16"},         {"learning_rate", "3e-3"},
  };
  for (const auto& [k, v] : extra) kv[k] = v;
  std::ofstream out(ws.path(name));
  for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
}

// Write the shared fixtures and build the vocabulary through the CLI itself.
void seed_workspace(const Workspace& ws) {
  embedkit::save_corpus(ws.path("corpus.jsonl"), toy_corpus());
  embedkit::save_pairs(ws.path("pairs.jsonl"), toy_pairs());
  write_queries(ws);
  write_qrels(ws);
  const auto r = ws.run("vocab --corpus " + ws.path("corpus.jsonl") + " --pairs " +
                        ws.path("pairs.jsonl") + " --output " + ws.path("vocab.txt"));
  REQUIRE(r.exit_code == 0);
}

std::map<std::string, std::string> parse_report(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::map<std::string, std::string> cells;
  std::string line;
  REQUIRE(std::getline(in, line));
  REQUIRE(line == "metric,k,value");
  while (std::getline(in, line)) {
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    REQUIRE(c2 != std::string::npos);
    cells[line.substr(0, c1)] = line.substr(c2 + 1);
  }
  return cells;
}

}  // namespace

TEST_CASE("version flag exits zero") {
  Workspace ws;
  const auto r = ws.run("--version");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("embedkit") != std::string::npos);
}

TEST_CASE("dense pipeline retrieves perfectly on separable topics") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "stage.cfg", {});

  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --output " + ws.path("model.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("index dense --model " + ws.path("model.ckpt") + " --vocab " +
                 ws.path("vocab.txt") + " --corpus " + ws.path("corpus.jsonl") + " --output " +
                 ws.path("dense.idx"))
              .exit_code == 0);
  REQUIRE(ws.run("search --index " + ws.path("dense.idx") + " --model " + ws.path("model.ckpt") +
                 " --vocab " + ws.path("vocab.txt") + " --queries " + ws.path("queries.jsonl") +
                 " --k 3 --output " + ws.path("run.tsv"))
              .exit_code == 0);
  REQUIRE(ws.run("eval --run " + ws.path("run.tsv") + " --qrels " + ws.path("qrels.tsv") +
                 " --output " + ws.path("report.csv"))
              .exit_code == 0);

  // 8 queries with disjoint topic words are trivially separable after training
  const auto cells = parse_report(ws.path("report.csv"));
  CHECK(std::strtod(cells.at("ndcg").c_str(), nullptr) == 1.0);
  CHECK(std::strtod(cells.at("mrr").c_str(), nullptr) == 1.0);
  CHECK(std::strtod(cells.at("recall").c_str(), nullptr) == 1.0);
  CHECK(cells.at("evaluated_queries") == "8");

  // the CSV must agree exactly with evaluating the same run in-process
  const auto run = embedkit::load_run(ws.path("run.tsv"));
  const auto qrels = embedkit::load_qrels(ws.path("qrels.tsv"));
  const auto summary = embedkit::evaluate_run(run, qrels, 10, 5, 10);
  CHECK(std::strtod(cells.at("ndcg").c_str(), nullptr) == summary.ndcg);
  CHECK(std::strtod(cells.at("mrr").c_str(), nullptr) == summary.mrr);
  CHECK(std::strtod(cells.at("recall").c_str(), nullptr) == summary.recall);
}

TEST_CASE("eval CSV matches library metrics on an imperfect run") {
  Workspace ws;
  write_qrels(ws);
  // hand-build a run where some queries rank their document late or miss it
  embedkit::RunResult run;
  for (std::size_t i = 0; i < 8; ++i) {
    std::vector<embedkit::SearchHit> hits;
    for (std::size_t r = 0; r < 4; ++r) {
      // query i finds its own doc at rank (i % 4) + 1, others are misses
      const std::size_t doc = (r == i % 4) ? i : (i + r + 1) % 8;
      hits.push_back({padded_id('d', doc), 1.0 - 0.1 * static_cast<double>(r)});
    }
    run.per_query[padded_id('q', i)] = hits;
  }
  embedkit::save_run(ws.path("run.tsv"), run);
  const auto r = ws.run("eval --run " + ws.path("run.tsv") + " --qrels " + ws.path("qrels.tsv") +
                        " --ndcg-k 4 --mrr-k 4 --recall-k 2 --output " + ws.path("report.csv"));
  REQUIRE(r.exit_code == 0);

  const auto cells = parse_report(ws.path("report.csv"));
  const auto qrels = embedkit::load_qrels(ws.path("qrels.tsv"));
  const auto summary = embedkit::evaluate_run(embedkit::load_run(ws.path("run.tsv")), qrels, 4, 4, 2);
  CHECK(std::strtod(cells.at("ndcg").c_str(), nullptr) == summary.ndcg);
  CHECK(std::strtod(cells.at("mrr").c_str(), nullptr) == summary.mrr);
  CHECK(std::strtod(cells.at("recall").c_str(), nullptr) == summary.recall);
  CHECK(summary.ndcg < 1.0);  // the run really is imperfect
}

TEST_CASE("training reruns are byte-identical") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "stage.cfg", {{"steps", "10"}});
  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --output " + ws.path("a.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --output " + ws.path("b.ckpt"))
              .exit_code == 0);
  CHECK(slurp(ws.path("a.ckpt")) == slurp(ws.path("b.ckpt")));
  CHECK(slurp(ws.path("a.ckpt.metrics.csv")) == slurp(ws.path("b.ckpt.metrics.csv")));
  CHECK(embedkit::detail::fnv1a64_file(ws.path("a.ckpt")) ==
        embedkit::detail::fnv1a64_file(ws.path("b.ckpt")));
}

TEST_CASE("resumed run matches an uninterrupted one byte for byte") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "full.cfg", {{"steps", "12"}});
  write_stage_config(ws, "half.cfg", {{"steps", "6"}});
  REQUIRE(ws.run("train --config " + ws.path("full.cfg") + " --output " + ws.path("full.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("train --config " + ws.path("half.cfg") + " --output " + ws.path("part.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("train --config " + ws.path("full.cfg") + " --output " + ws.path("part.ckpt") +
                 " --resume")
              .exit_code == 0);
  CHECK(slurp(ws.path("full.ckpt")) == slurp(ws.path("part.ckpt")));
}

TEST_CASE("seed flag overrides the config seed") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "stage.cfg", {{"steps", "5"}});
  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --output " + ws.path("a.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --seed 99 --output " +
                 ws.path("b.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --seed 11 --output " +
                 ws.path("c.ckpt"))
              .exit_code == 0);
  CHECK(slurp(ws.path("a.ckpt")) != slurp(ws.path("b.ckpt")));
  CHECK(slurp(ws.path("a.ckpt")) == slurp(ws.path("c.ckpt")));  // flag equal to config is a no-op
}

TEST_CASE("merged checkpoint equals a hand-averaged one, and search agrees") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "s1.cfg", {{"steps", "8"}, {"seed", "1"}});
  write_stage_config(ws, "s2.cfg", {{"steps", "8"}, {"seed", "2"}});
  REQUIRE(ws.run("train --config " + ws.path("s1.cfg") + " --output " + ws.path("m1.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("train --config " + ws.path("s2.cfg") + " --output " + ws.path("m2.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("merge --inputs " + ws.path("m1.ckpt") + " " + ws.path("m2.ckpt") +
                 " --weights 0.5 0.5 --output " + ws.path("merged.ckpt"))
              .exit_code == 0);

  // independently average every parameter element by hand
  embedkit::Checkpoint a = embedkit::load_checkpoint(ws.path("m1.ckpt"));
  const embedkit::Checkpoint b = embedkit::load_checkpoint(ws.path("m2.ckpt"));
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t p = 0; p < a.params.size(); ++p) {
    REQUIRE(a.params[p].name == b.params[p].name);
    for (std::size_t i = 0; i < a.params[p].data.size(); ++i) {
      a.params[p].data[i] = 0.5 * a.params[p].data[i] + 0.5 * b.params[p].data[i];
    }
  }
  embedkit::save_checkpoint(ws.path("manual.ckpt"), a);
  CHECK(slurp(ws.path("merged.ckpt")) == slurp(ws.path("manual.ckpt")));

  // searching with either checkpoint must produce identical run files
  for (const char* model : {"merged.ckpt", "manual.ckpt"}) {
    const std::string m = ws.path(model);
    REQUIRE(ws.run("index dense --model " + m + " --vocab " + ws.path("vocab.txt") +
                   " --corpus " + ws.path("corpus.jsonl") + " --output " + m + ".idx")
                .exit_code == 0);
    REQUIRE(ws.run("search --index " + m + ".idx --model " + m + " --vocab " +
                   ws.path("vocab.txt") + " --queries " + ws.path("queries.jsonl") +
                   " --k 3 --output " + m + ".run")
                .exit_code == 0);
  }
  CHECK(slurp(ws.path("merged.ckpt.run")) == slurp(ws.path("manual.ckpt.run")));
}

TEST_CASE("sparse pipeline runs and is invariant to thread count") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "sp.cfg", {{"steps", "10"},
                                    {"pooling", "max_sparse"},
                                    {"lambda_q", "1e-3"},
                                    {"lambda_p", "1e-3"}});
  REQUIRE(ws.run("train --config " + ws.path("sp.cfg") + " --output " + ws.path("sp.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("index sparse --model " + ws.path("sp.ckpt") + " --vocab " + ws.path("vocab.txt") +
                 " --corpus " + ws.path("corpus.jsonl") + " --output " + ws.path("sp1.idx"))
              .exit_code == 0);
  REQUIRE(ws.run("--threads 3 index sparse --model " + ws.path("sp.ckpt") + " --vocab " +
                 ws.path("vocab.txt") + " --corpus " + ws.path("corpus.jsonl") + " --output " +
                 ws.path("sp3.idx"))
              .exit_code == 0);
  CHECK(slurp(ws.path("sp1.idx")) == slurp(ws.path("sp3.idx")));

  REQUIRE(ws.run("search --index " + ws.path("sp1.idx") + " --model " + ws.path("sp.ckpt") +
                 " --vocab " + ws.path("vocab.txt") + " --queries " + ws.path("queries.jsonl") +
                 " --k 3 --output " + ws.path("sp.run"))
              .exit_code == 0);
  const auto run = embedkit::load_run(ws.path("sp.run"));
  CHECK(run.per_query.size() == 8);
}

TEST_CASE("mine attaches corpus negatives distinct from each positive") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "stage.cfg", {{"steps", "10"}});
  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --output " + ws.path("model.ckpt"))
              .exit_code == 0);
  REQUIRE(ws.run("mine --pairs " + ws.path("pairs.jsonl") + " --corpus " + ws.path("corpus.jsonl") +
                 " --model " + ws.path("model.ckpt") + " --vocab " + ws.path("vocab.txt") +
                 " --output " + ws.path("mined.jsonl") + " --negatives 2 --top-k 5 --seed 3")
              .exit_code == 0);

  std::vector<std::string> corpus_texts;
  for (const auto& d : toy_corpus()) corpus_texts.push_back(d.text);
  const auto mined = embedkit::load_pairs(ws.path("mined.jsonl"));
  REQUIRE(mined.size() == 8);
  for (const auto& rec : mined) {
    CHECK(rec.negatives.size() <= 2);
    for (const auto& neg : rec.negatives) {
      CHECK(neg != rec.positive);
      CHECK(std::find(corpus_texts.begin(), corpus_texts.end(), neg) != corpus_texts.end());
    }
  }
}

TEST_CASE("perturb emits pseudo pairs that keep the original passage") {
  Workspace ws;
  embedkit::save_corpus(ws.path("corpus.jsonl"), toy_corpus());
  REQUIRE(ws.run("perturb --corpus " + ws.path("corpus.jsonl") + " --output " +
                 ws.path("pseudo.jsonl") + " --mode swap_spans --seed 5 --dataset adapt")
              .exit_code == 0);
  const auto pseudo = embedkit::load_pairs(ws.path("pseudo.jsonl"));
  const auto docs = toy_corpus();
  REQUIRE(pseudo.size() == docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    CHECK(pseudo[i].positive == docs[i].text);
    CHECK(pseudo[i].query != docs[i].text);
    CHECK(pseudo[i].dataset == "adapt");
    // swapping spans must preserve the token multiset
    auto toks = [](const std::string& s) {
      std::istringstream in(s);
      std::vector<std::string> v;
      std::string w;
      while (in >> w) v.push_back(w);
      std::sort(v.begin(), v.end());
      return v;
    };
    CHECK(toks(pseudo[i].query) == toks(pseudo[i].positive));
  }
}

TEST_CASE("manifests record the inputs that produced each artifact") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "stage.cfg", {{"steps", "5"}});
  REQUIRE(ws.run("train --config " + ws.path("stage.cfg") + " --output " + ws.path("model.ckpt"))
              .exit_code == 0);
  const auto man = nlohmann::json::parse(slurp(ws.path("model.ckpt.manifest.json")));
  CHECK(man.at("command") == "train");
  CHECK(man.at("seed") == 11);
  char expect[19];
  std::snprintf(expect, sizeof expect, "0x%016llx",
                static_cast<unsigned long long>(
                    embedkit::detail::fnv1a64_file(ws.path("pairs.jsonl"))));
  CHECK(man.at("inputs").at("pairs").at("fnv1a64") == expect);
  CHECK(man.at("outputs").contains("checkpoint"));
  CHECK(man.at("outputs").contains("metrics"));
}

TEST_CASE("failures exit nonzero with a diagnostic") {
  Workspace ws;
  seed_workspace(ws);
  write_stage_config(ws, "stage.cfg", {{"steps", "5"}});

  SECTION("unknown override key") {
    const auto r = ws.run("train --config " + ws.path("stage.cfg") + " --set bogus=1 --output " +
                          ws.path("x.ckpt"));
    CHECK(r.exit_code != 0);
    CHECK(r.err.find("error:") != std::string::npos);
    CHECK(r.err.find("bogus") != std::string::npos);
  }
  SECTION("stage kind rejected by the wrong subcommand") {
    const auto r = ws.run("distill --config " + ws.path("stage.cfg") + " --output " +
                          ws.path("x.ckpt"));
    CHECK(r.exit_code != 0);
    CHECK(r.err.find("contrastive") != std::string::npos);
  }
  SECTION("mask ratio override outside the unit interval") {
    write_stage_config(ws, "pre.cfg",
                       {{"kind", "retromae_pretrain"},
                        {"corpus", ws.path("corpus.jsonl")},
                        {"pairs", ""},
                        {"steps", "2"}});
    const auto r = ws.run("pretrain --config " + ws.path("pre.cfg") +
                          " --set mask_high=1.5 --output " + ws.path("x.ckpt"));
    CHECK(r.exit_code != 0);
    CHECK(r.err.find("error:") != std::string::npos);
  }
  SECTION("missing input file names the path") {
    const auto r = ws.run("train --config " + ws.path("stage.cfg") + " --set pairs=missing.jsonl" +
                          " --output " + ws.path("x.ckpt"));
    CHECK(r.exit_code != 0);
    CHECK(r.err.find("missing.jsonl") != std::string::npos);
  }
  SECTION("searching a non-index file") {
    const auto r = ws.run("search --index " + ws.path("qrels.tsv") + " --model " +
                          ws.path("nope.ckpt") + " --vocab " + ws.path("vocab.txt") +
                          " --queries " + ws.path("queries.jsonl") + " --output " +
                          ws.path("x.tsv"));
    CHECK(r.exit_code != 0);
  }
}
