// embedkit: command-line surface for the embedding toolkit. One binary with
// subcommands covering vocabulary building, the training stages, checkpoint
// merging, hard-negative mining, positive perturbation, index building,
// search, and ranked-retrieval evaluation. Every run is fully determined by
// (config file, flags, seed), and every artifact gets a manifest recording
// input hashes and the seed actually used.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "embedkit/checkpoint.hpp"
#include "embedkit/data.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/retrieval.hpp"
#include "embedkit/training.hpp"
#include "embedkit/vocab.hpp"

namespace {

constexpr const char* kVersion = "embedkit 0.1.0";

using embedkit::detail::fnv1a64_file;

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Manifest written next to each artifact: enough provenance to tell which
// inputs, config, and seed produced it.
struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  nlohmann::ordered_json outputs = nlohmann::ordered_json::object();
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  void add_input(const std::string& role, const std::string& path) {
    inputs[role] = {{"path", path}, {"fnv1a64", hex64(fnv1a64_file(path))}};
  }

  void add_output(const std::string& role, const std::string& path) {
    outputs[role] = {{"path", path}, {"fnv1a64", hex64(fnv1a64_file(path))}};
  }

  void write(const std::string& artifact_path) const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["version"] = kVersion;
    j["created_utc"] = utc_now();
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    if (!extra.empty()) j["extra"] = extra;
    std::ofstream out(artifact_path + ".manifest.json", std::ios::binary);
    if (!out) throw embedkit::IoError("manifest: cannot write " + artifact_path + ".manifest.json");
    out << j.dump(2) << "\n";
  }
};

// Deterministic multi-threaded corpus encoding: workers fill disjoint slots,
// so the result is identical for any thread count.
std::vector<embedkit::Tensor> encode_rows(const embedkit::EncoderModel& model,
                                          const std::vector<embedkit::TokenSeq>& seqs,
                                          std::size_t threads, bool sparse) {
  std::vector<embedkit::Tensor> rows(seqs.size());
  threads = std::max<std::size_t>(1, std::min(threads, seqs.size()));
  auto worker = [&](std::size_t first, std::size_t last) {
    for (std::size_t i = first; i < last; ++i) {
      rows[i] = sparse ? model.sparse_weight_row({seqs[i]})
                       : model.encode_dense({seqs[i]});
    }
  };
  if (threads == 1) {
    worker(0, seqs.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (seqs.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t first = t * chunk, last = std::min(seqs.size(), first + chunk);
      if (first < last) pool.emplace_back(worker, first, last);
    }
    for (auto& th : pool) th.join();
  }
  return rows;
}

struct StageCommand {
  std::string config_path, output, metrics;
  std::vector<std::string> overrides;  // key=value, applied after the file
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool resume = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "stage config file (key = value lines)")
        ->required();
    cmd->add_option("--output", output, "checkpoint to write")->required();
    cmd->add_option("--metrics", metrics, "loss curve CSV (default: <output>.metrics.csv)");
    cmd->add_option("--set", overrides, "override a config key, e.g. --set steps=100")
        ->take_all();
    cmd->add_flag("--resume", resume, "continue a previous run from <output> and its state file");
    auto* s = cmd->add_option("--seed", seed, "override the stage seed");
    s->each([this](const std::string&) { seed_set = true; });
  }

  int run(const std::string& name, const std::vector<embedkit::StageKind>& allowed) {
    embedkit::StageConfig cfg = embedkit::StageConfig::from_file(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        throw embedkit::ConfigError("--set expects key=value, got '" + kv + "'");
      }
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed_set) cfg.seed = seed;
    bool ok = false;
    for (auto k : allowed) ok = ok || cfg.kind == k;
    if (!ok) {
      std::string kinds;
      for (auto k : allowed) kinds += std::string(kinds.empty() ? "" : "|") + stage_kind_name(k);
      throw embedkit::ConfigError(name + ": stage kind must be " + kinds + ", config says " +
                                  stage_kind_name(cfg.kind));
    }
    if (metrics.empty()) metrics = output + ".metrics.csv";
    const auto art = embedkit::run_stage_files(cfg, output, metrics, resume);

    Manifest man;
    man.command = name;
    man.seed = cfg.seed;
    man.add_input("config", config_path);
    if (!cfg.pairs.empty()) man.add_input("pairs", cfg.pairs);
    if (!cfg.corpus.empty()) man.add_input("corpus", cfg.corpus);
    if (!cfg.vocab.empty()) man.add_input("vocab", cfg.vocab);
    if (!cfg.init.empty()) man.add_input("init", cfg.init);
    if (!cfg.teacher.empty()) man.add_input("teacher", cfg.teacher);
    man.add_output("checkpoint", output);
    man.add_output("metrics", metrics);
    man.extra["kind"] = stage_kind_name(cfg.kind);
    man.extra["steps_run"] = art.steps_run;
    man.extra["final_loss"] = art.final_loss;
    man.extra["overrides"] = overrides;
    man.write(output);

    std::printf("%s: %zu steps, final loss %.6f -> %s\n", name.c_str(), art.steps_run,
                art.final_loss, output.c_str());
    return 0;
  }
};

embedkit::EncoderModel load_model(const std::string& path) {
  return embedkit::EncoderModel::from_checkpoint(embedkit::load_checkpoint(path));
}

std::vector<embedkit::TokenSeq> tokenize_all(const std::vector<std::string>& texts,
                                             const embedkit::Vocab& vocab, std::size_t max_seq) {
  std::vector<embedkit::TokenSeq> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(embedkit::tokenize(t, vocab, max_seq));
  return seqs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"embedkit: train, index, search, and evaluate toy text embedding models"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for encoding (results are identical)")
      ->check(CLI::PositiveNumber);

  // ---- vocab -------------------------------------------------------------
  auto* cmd_vocab = app.add_subcommand("vocab", "build a vocabulary from corpus/pair files");
  std::string v_corpus, v_pairs, v_output;
  std::size_t v_max = 2048;
  cmd_vocab->add_option("--corpus", v_corpus, "corpus JSONL ({\"id\",\"text\"})");
  cmd_vocab->add_option("--pairs", v_pairs, "pairs JSONL to include");
  cmd_vocab->add_option("--output", v_output, "vocabulary file to write")->required();
  cmd_vocab->add_option("--max-size", v_max, "maximum vocabulary size");

  // ---- training stages ---------------------------------------------------
  StageCommand pretrain_cmd, train_cmd, distill_cmd;
  pretrain_cmd.attach(
      app.add_subcommand("pretrain", "masked-autoencoder pretraining or its distilled variant"));
  train_cmd.attach(app.add_subcommand("train", "contrastive or domain-adaptation training"));
  distill_cmd.attach(app.add_subcommand("distill", "score distillation or self-distillation"));

  // ---- merge ---------------------------------------------------------------
  auto* cmd_merge = app.add_subcommand("merge", "weighted-average aligned checkpoints");
  std::vector<std::string> m_inputs;
  std::vector<double> m_weights;
  std::string m_output;
  cmd_merge->add_option("--inputs", m_inputs, "checkpoints to merge")->required()->expected(-1);
  cmd_merge->add_option("--weights", m_weights, "nonnegative weights summing to 1")
      ->required()
      ->expected(-1);
  cmd_merge->add_option("--output", m_output, "merged checkpoint")->required();

  // ---- mine ----------------------------------------------------------------
  auto* cmd_mine = app.add_subcommand("mine", "mine hard negatives for a pairs file");
  std::string mi_pairs, mi_corpus, mi_model, mi_vocab, mi_output;
  std::size_t mi_topk = 100, mi_negs = 3;
  double mi_threshold = 0.8;
  std::uint64_t mi_seed = 0;
  cmd_mine->add_option("--pairs", mi_pairs)->required();
  cmd_mine->add_option("--corpus", mi_corpus)->required();
  cmd_mine->add_option("--model", mi_model, "checkpoint used to score candidates")->required();
  cmd_mine->add_option("--vocab", mi_vocab)->required();
  cmd_mine->add_option("--output", mi_output, "pairs JSONL with mined negatives")->required();
  cmd_mine->add_option("--top-k", mi_topk, "candidate pool per query");
  cmd_mine->add_option("--threshold", mi_threshold, "false-negative cosine threshold");
  cmd_mine->add_option("--negatives", mi_negs, "negatives per query");
  cmd_mine->add_option("--seed", mi_seed);

  // ---- perturb ---------------------------------------------------------------
  auto* cmd_perturb =
      app.add_subcommand("perturb", "make pseudo query-passage pairs by perturbing passages");
  std::string pe_corpus, pe_output, pe_mode = "delete_span", pe_dataset = "perturbed";
  double pe_low = 0.1, pe_high = 0.3;
  std::uint64_t pe_seed = 0;
  cmd_perturb->add_option("--corpus", pe_corpus)->required();
  cmd_perturb->add_option("--output", pe_output, "pairs JSONL to write")->required();
  cmd_perturb->add_option("--mode", pe_mode, "delete_span or swap_spans");
  cmd_perturb->add_option("--low", pe_low, "span fraction lower bound");
  cmd_perturb->add_option("--high", pe_high, "span fraction upper bound");
  cmd_perturb->add_option("--dataset", pe_dataset, "dataset tag for the output records");
  cmd_perturb->add_option("--seed", pe_seed);

  // ---- index ----------------------------------------------------------------
  auto* cmd_index = app.add_subcommand("index", "build a retrieval index from a corpus");
  cmd_index->require_subcommand(1);
  std::string ix_model, ix_vocab, ix_corpus, ix_output;
  for (const char* sub : {"dense", "sparse"}) {
    auto* c = cmd_index->add_subcommand(sub, std::string(sub) + " index");
    c->add_option("--model", ix_model)->required();
    c->add_option("--vocab", ix_vocab)->required();
    c->add_option("--corpus", ix_corpus)->required();
    c->add_option("--output", ix_output)->required();
  }

  // ---- search ----------------------------------------------------------------
  auto* cmd_search = app.add_subcommand("search", "run queries against an index");
  std::string se_index, se_model, se_vocab, se_queries, se_output, se_instruction;
  std::size_t se_k = 10;
  cmd_search->add_option("--index", se_index)->required();
  cmd_search->add_option("--model", se_model)->required();
  cmd_search->add_option("--vocab", se_vocab)->required();
  cmd_search->add_option("--queries", se_queries, "queries JSONL ({\"id\",\"text\"})")->required();
  cmd_search->add_option("--output", se_output, "run TSV to write")->required();
  cmd_search->add_option("--k", se_k, "results per query");
  cmd_search->add_option("--instruction", se_instruction,
                         "task definition prepended via the instruction template");

  // ---- eval ----------------------------------------------------------------
  auto* cmd_eval = app.add_subcommand("eval", "score a run file against qrels");
  std::string ev_run, ev_qrels, ev_output;
  std::size_t ev_ndcg_k = 10, ev_mrr_k = 5, ev_recall_k = 10;
  cmd_eval->add_option("--run", ev_run)->required();
  cmd_eval->add_option("--qrels", ev_qrels)->required();
  cmd_eval->add_option("--output", ev_output, "metrics CSV to write")->required();
  cmd_eval->add_option("--ndcg-k", ev_ndcg_k);
  cmd_eval->add_option("--mrr-k", ev_mrr_k);
  cmd_eval->add_option("--recall-k", ev_recall_k);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_vocab->parsed()) {
      if (v_corpus.empty() && v_pairs.empty()) {
        throw embedkit::ConfigError("vocab: need --corpus and/or --pairs");
      }
      std::vector<std::string> texts;
      if (!v_corpus.empty()) {
        for (const auto& d : embedkit::load_corpus(v_corpus)) texts.push_back(d.text);
      }
      if (!v_pairs.empty()) {
        for (const auto& r : embedkit::load_pairs(v_pairs)) {
          texts.push_back(r.query);
          texts.push_back(r.positive);
          for (const auto& n : r.negatives) texts.push_back(n);
        }
      }
      const embedkit::Vocab vocab = embedkit::Vocab::build(texts, v_max);
      vocab.save(v_output);
      Manifest man;
      man.command = "vocab";
      if (!v_corpus.empty()) man.add_input("corpus", v_corpus);
      if (!v_pairs.empty()) man.add_input("pairs", v_pairs);
      man.add_output("vocab", v_output);
      man.extra["size"] = vocab.size();
      man.write(v_output);
      std::printf("vocab: %zu tokens -> %s\n", vocab.size(), v_output.c_str());
      return 0;
    }

    if (app.get_subcommand("pretrain")->parsed()) {
      return pretrain_cmd.run("pretrain", {embedkit::StageKind::retromae_pretrain,
                                           embedkit::StageKind::retromae_distill});
    }
    if (app.get_subcommand("train")->parsed()) {
      return train_cmd.run("train", {embedkit::StageKind::contrastive,
                                     embedkit::StageKind::domain_adapt});
    }
    if (app.get_subcommand("distill")->parsed()) {
      return distill_cmd.run("distill", {embedkit::StageKind::score_distill,
                                         embedkit::StageKind::self_distill});
    }

    if (cmd_merge->parsed()) {
      if (m_inputs.size() != m_weights.size()) {
        throw embedkit::ConfigError("merge: got " + std::to_string(m_inputs.size()) +
                                    " inputs but " + std::to_string(m_weights.size()) +
                                    " weights");
      }
      std::vector<std::pair<embedkit::Checkpoint, double>> spec;
      for (std::size_t i = 0; i < m_inputs.size(); ++i) {
        spec.emplace_back(embedkit::load_checkpoint(m_inputs[i]), m_weights[i]);
      }
      embedkit::save_checkpoint(m_output, embedkit::merge_models(spec));
      Manifest man;
      man.command = "merge";
      for (std::size_t i = 0; i < m_inputs.size(); ++i) {
        man.add_input("input" + std::to_string(i), m_inputs[i]);
      }
      man.extra["weights"] = m_weights;
      man.add_output("checkpoint", m_output);
      man.write(m_output);
      std::printf("merge: %zu checkpoints -> %s\n", m_inputs.size(), m_output.c_str());
      return 0;
    }

    if (cmd_mine->parsed()) {
      const embedkit::Vocab vocab = embedkit::Vocab::load(mi_vocab);
      const embedkit::EncoderModel model = load_model(mi_model);
      auto pairs = embedkit::load_pairs(mi_pairs);
      const auto corpus = embedkit::load_corpus(mi_corpus);
      std::vector<std::string> corpus_texts;
      for (const auto& d : corpus) corpus_texts.push_back(d.text);
      const auto corpus_seqs = tokenize_all(corpus_texts, vocab, model.config().max_seq);
      const auto corpus_rows = encode_rows(model, corpus_seqs, threads, false);
      const embedkit::Tensor corpus_embs = embedkit::concat_rows(corpus_rows);

      embedkit::MinerConfig mcfg;
      mcfg.top_k = mi_topk;
      mcfg.false_negative_threshold = mi_threshold;
      mcfg.negatives_per_query = mi_negs;
      mcfg.seed = mi_seed;
      std::size_t empty_pools = 0;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const embedkit::Tensor q =
            model.encode_dense({embedkit::tokenize(pairs[i].query, vocab, model.config().max_seq)});
        const embedkit::Tensor p = model.encode_dense(
            {embedkit::tokenize(pairs[i].positive, vocab, model.config().max_seq)});
        embedkit::Rng rng(embedkit::Rng::derive(mi_seed, 3, i));
        const auto res = embedkit::mine_hard_negatives(q, p, corpus_embs, corpus_texts,
                                                       pairs[i].positive, mcfg, rng);
        if (res.empty_pool) {
          ++empty_pools;
          std::fprintf(stderr, "warning: no usable negatives for query '%s'\n",
                       pairs[i].query.c_str());
        }
        pairs[i].negatives = res.negatives;
      }
      embedkit::save_pairs(mi_output, pairs);
      Manifest man;
      man.command = "mine";
      man.seed = mi_seed;
      man.add_input("pairs", mi_pairs);
      man.add_input("corpus", mi_corpus);
      man.add_input("model", mi_model);
      man.add_input("vocab", mi_vocab);
      man.add_output("pairs", mi_output);
      man.extra["empty_pools"] = empty_pools;
      man.write(mi_output);
      std::printf("mine: %zu queries, %zu empty pools -> %s\n", pairs.size(), empty_pools,
                  mi_output.c_str());
      return 0;
    }

    if (cmd_perturb->parsed()) {
      const auto corpus = embedkit::load_corpus(pe_corpus);
      embedkit::PerturbConfig pcfg;
      pcfg.mode = embedkit::parse_perturb_mode(pe_mode);
      pcfg.span_frac_low = pe_low;
      pcfg.span_frac_high = pe_high;
      std::vector<embedkit::PairRecord> out;
      for (std::size_t i = 0; i < corpus.size(); ++i) {
        embedkit::Rng rng(embedkit::Rng::derive(pe_seed, 4, i));
        embedkit::PairRecord rec;
        rec.query = embedkit::perturb_positive(corpus[i].text, pcfg, rng);
        rec.positive = corpus[i].text;
        rec.dataset = pe_dataset;
        out.push_back(std::move(rec));
      }
      embedkit::save_pairs(pe_output, out);
      Manifest man;
      man.command = "perturb";
      man.seed = pe_seed;
      man.add_input("corpus", pe_corpus);
      man.add_output("pairs", pe_output);
      man.extra["mode"] = pe_mode;
      man.write(pe_output);
      std::printf("perturb: %zu pairs -> %s\n", out.size(), pe_output.c_str());
      return 0;
    }

    if (cmd_index->parsed()) {
      const bool sparse = cmd_index->get_subcommand("sparse")->parsed();
      const embedkit::Vocab vocab = embedkit::Vocab::load(ix_vocab);
      const embedkit::EncoderModel model = load_model(ix_model);
      const auto corpus = embedkit::load_corpus(ix_corpus);
      std::vector<std::string> ids, texts;
      for (const auto& d : corpus) {
        ids.push_back(d.id);
        texts.push_back(d.text);
      }
      const auto seqs = tokenize_all(texts, vocab, model.config().max_seq);
      const auto rows = encode_rows(model, seqs, threads, sparse);
      if (sparse) {
        std::vector<embedkit::SparseVector> vecs(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
          for (std::size_t t = 0; t < vocab.size(); ++t) {
            const double w = rows[i].at(0, t);
            if (w > 0.0) vecs[i].entries.emplace_back(t, w);
          }
        }
        embedkit::InvertedIndex index(ids, vecs);
        index.save(ix_output);
        std::printf("index: %zu docs, %zu terms, mean nnz %.2f -> %s\n", index.doc_count(),
                    index.term_count(), index.mean_nnz(), ix_output.c_str());
      } else {
        embedkit::DenseIndex index(ids, embedkit::concat_rows(rows));
        index.save(ix_output);
        std::printf("index: %zu docs, dim %zu -> %s\n", index.size(), index.dim(),
                    ix_output.c_str());
      }
      Manifest man;
      man.command = sparse ? "index sparse" : "index dense";
      man.add_input("model", ix_model);
      man.add_input("vocab", ix_vocab);
      man.add_input("corpus", ix_corpus);
      man.add_output("index", ix_output);
      man.write(ix_output);
      return 0;
    }

    if (cmd_search->parsed()) {
      const embedkit::Vocab vocab = embedkit::Vocab::load(se_vocab);
      const embedkit::EncoderModel model = load_model(se_model);
      const auto queries = embedkit::load_corpus(se_queries);

      // the index file's magic line says which kind it is
      std::string magic;
      {
        std::ifstream in(se_index, std::ios::binary);
        if (!in) throw embedkit::IoError("search: cannot open index " + se_index);
        std::getline(in, magic);
      }
      embedkit::RunResult run;
      if (magic == "embedkit-dense-index v1") {
        const embedkit::DenseIndex index = embedkit::DenseIndex::load(se_index);
        for (const auto& q : queries) {
          const std::string text = se_instruction.empty()
                                       ? q.text
                                       : embedkit::format_instruction_query(se_instruction, q.text);
          const embedkit::Tensor emb =
              model.encode_dense({embedkit::tokenize(text, vocab, model.config().max_seq)});
          run.per_query[q.id] = embedkit::search_dense(index, emb, se_k);
        }
      } else if (magic == "embedkit-sparse-index v1") {
        const embedkit::InvertedIndex index = embedkit::InvertedIndex::load(se_index);
        for (const auto& q : queries) {
          const std::string text = se_instruction.empty()
                                       ? q.text
                                       : embedkit::format_instruction_query(se_instruction, q.text);
          const auto vecs =
              model.encode_sparse({embedkit::tokenize(text, vocab, model.config().max_seq)});
          run.per_query[q.id] = embedkit::search_sparse(index, vecs[0], se_k);
        }
      } else {
        throw embedkit::DataError("search: " + se_index + " is not an embedkit index");
      }
      embedkit::save_run(se_output, run);
      Manifest man;
      man.command = "search";
      man.add_input("index", se_index);
      man.add_input("model", se_model);
      man.add_input("vocab", se_vocab);
      man.add_input("queries", se_queries);
      man.add_output("run", se_output);
      man.extra["k"] = se_k;
      man.write(se_output);
      std::printf("search: %zu queries -> %s\n", queries.size(), se_output.c_str());
      return 0;
    }

    if (cmd_eval->parsed()) {
      const auto run = embedkit::load_run(ev_run);
      const auto qrels = embedkit::load_qrels(ev_qrels);
      const auto s = embedkit::evaluate_run(run, qrels, ev_ndcg_k, ev_mrr_k, ev_recall_k);
      std::ofstream out(ev_output, std::ios::binary);
      if (!out) throw embedkit::IoError("eval: cannot write " + ev_output);
      char buf[64];
      out << "metric,k,value\n";
      auto row = [&](const char* name, std::size_t k, double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << name << "," << k << "," << buf << "\n";
      };
      row("ndcg", ev_ndcg_k, s.ndcg);
      row("mrr", ev_mrr_k, s.mrr);
      row("recall", ev_recall_k, s.recall);
      out << "evaluated_queries,," << s.evaluated << "\n";
      out << "skipped_no_qrels,," << s.skipped_no_qrels << "\n";
      out << "skipped_no_relevant,," << s.skipped_no_relevant << "\n";
      out.close();
      Manifest man;
      man.command = "eval";
      man.add_input("run", ev_run);
      man.add_input("qrels", ev_qrels);
      man.add_output("report", ev_output);
      man.write(ev_output);
      std::printf("eval: nDCG@%zu %.4f, MRR@%zu %.4f, recall@%zu %.4f over %zu queries\n",
                  ev_ndcg_k, s.ndcg, ev_mrr_k, s.mrr, ev_recall_k, s.recall, s.evaluated);
      return 0;
    }
  } catch (const embedkit::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
