#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "embedkit/encoder.hpp"
#include "fd_check.hpp"

using namespace embedkit;
using testutil::check_gradients;

namespace {

Vocab toy_vocab() {
  return Vocab::build({"the cat sat on the mat", "a dog ran over the hill",
                       "queries and passages share words", "red green blue tokens here"},
                      64);
}

EncoderConfig tiny_config(std::size_t vocab_size) {
  EncoderConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.layers = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.intermediate = 16;
  cfg.max_seq = 16;
  return cfg;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("vocab build, lookup, and persistence") {
  Vocab v = toy_vocab();
  REQUIRE(v.token_of(v.pad_id()) == "[PAD]");
  REQUIRE(v.is_special(v.mask_id()));
  REQUIRE(v.id_of("the") < v.size());
  REQUIRE(v.id_of("zebra") == v.unk_id());

  auto path = temp_file("embedkit_vocab_test.txt");
  v.save(path.string());
  Vocab loaded = Vocab::load(path.string());
  REQUIRE(loaded.tokens() == v.tokens());
  REQUIRE(loaded.id_of("cat") == v.id_of("cat"));
  std::filesystem::remove(path);

  REQUIRE_THROWS_AS(Vocab({"[PAD]", "[UNK]", "[CLS]", "[SEP]"}), DataError);  // no [MASK]
  REQUIRE_THROWS_AS(Vocab({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "x", "x"}), DataError);
}

TEST_CASE("tokenize shapes and truncation") {
  Vocab v = toy_vocab();
  TokenSeq empty = tokenize("", v, 16);
  REQUIRE(empty.ids == std::vector<std::size_t>{v.cls_id(), v.sep_id()});
  REQUIRE(empty.mask == std::vector<int>{1, 1});

  std::string long_text;
  for (int i = 0; i < 1000; ++i) long_text += "cat ";
  TokenSeq truncated = tokenize(long_text, v, 512);
  REQUIRE(truncated.ids.size() == 512);
  REQUIRE(truncated.ids.front() == v.cls_id());
  REQUIRE(truncated.ids.back() == v.sep_id());

  TokenSeq two = tokenize("the cat", v, 16);
  REQUIRE(two.ids ==
          std::vector<std::size_t>{v.cls_id(), v.id_of("the"), v.id_of("cat"), v.sep_id()});
}

TEST_CASE("encode_dense is deterministic and shape-correct") {
  Vocab v = toy_vocab();
  Rng rng(1);
  EncoderModel model(tiny_config(v.size()), rng);
  TokenSeq x = tokenize("the cat sat", v, 16);
  Tensor a = model.encode_dense({x});
  Tensor b = model.encode_dense({x});
  REQUIRE(a.values() == b.values());
  REQUIRE(a.shape() == std::vector<std::size_t>{1, 8});

  // hidden-size flows through to the embedding width
  EncoderConfig wide = tiny_config(v.size());
  wide.hidden = 384;
  wide.heads = 6;
  wide.intermediate = 512;
  wide.lm_head = false;
  Rng rng2(2);
  EncoderModel wide_model(wide, rng2);
  REQUIRE(wide_model.encode_dense({x, x}).shape() == std::vector<std::size_t>{2, 384});
}

TEST_CASE("padding never changes a real sequence's outputs") {
  Vocab v = toy_vocab();
  Rng rng(3);
  EncoderModel model(tiny_config(v.size()), rng);
  TokenSeq x = tokenize("the cat sat", v, 16);
  TokenSeq y = tokenize("a dog ran over the hill and kept running", v, 16);

  Tensor alone = model.encode_dense({x});
  auto padded = pad_batch({x, y}, v.pad_id());
  Tensor batched = model.encode_dense(padded);
  for (std::size_t j = 0; j < 8; ++j) {
    REQUIRE(batched.at(0, j) == alone.at(0, j));  // bit-identical
  }

  auto sparse_alone = model.encode_sparse({x});
  auto sparse_batched = model.encode_sparse(padded);
  REQUIRE(sparse_alone[0].entries == sparse_batched[0].entries);
}

TEST_CASE("sequence longer than max_seq is rejected") {
  Vocab v = toy_vocab();
  Rng rng(4);
  EncoderModel model(tiny_config(v.size()), rng);
  TokenSeq too_long;
  too_long.ids.assign(17, v.unk_id());
  too_long.mask.assign(17, 1);
  REQUIRE_THROWS_AS(model.encode_dense({too_long}), DimensionError);
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg = tiny_config(64);
  cfg.heads = 3;  // 8 % 3 != 0
  Rng rng(5);
  REQUIRE_THROWS_AS(EncoderModel(cfg, rng), ConfigError);
  cfg = tiny_config(64);
  cfg.max_seq = 1;
  REQUIRE_THROWS_AS(EncoderModel(cfg, rng), ConfigError);
  cfg = tiny_config(64);
  cfg.pooling = "mean";
  REQUIRE_THROWS_AS(EncoderModel(cfg, rng), ConfigError);
}

TEST_CASE("sparse encoding follows the pooled log1p(relu(max)) rule") {
  Vocab v = toy_vocab();
  Rng rng(6);
  EncoderConfig cfg = tiny_config(v.size());
  EncoderModel model(cfg, rng);
  TokenSeq x = tokenize("queries and passages share words", v, 16);

  // all logits <= 0 -> empty sparse vector
  Tensor lm_w = model.param("enc.lm.w");
  Tensor lm_b = model.param("enc.lm.b");
  std::vector<double> saved_w = lm_w.values();
  std::fill(lm_w.values().begin(), lm_w.values().end(), 0.0);
  std::fill(lm_b.values().begin(), lm_b.values().end(), -1.0);
  REQUIRE(model.encode_sparse({x})[0].entries.empty());

  // one term with logit e-1 -> weight exactly 1.0 on that term
  lm_b.values()[7] = std::exp(1.0) - 1.0;
  auto sv = model.encode_sparse({x})[0];
  REQUIRE(sv.entries.size() == 1);
  REQUIRE(sv.entries[0].first == 7);
  REQUIRE(sv.entries[0].second == Catch::Approx(1.0).margin(1e-12));

  // restore and compare the sparse path against a dense evaluation
  lm_w.values() = saved_w;
  std::fill(lm_b.values().begin(), lm_b.values().end(), 0.0);
  Tensor logits = model.lm_logits(model.forward_hidden(x));
  std::vector<double> expect(v.size(), 0.0);
  for (std::size_t t = 0; t < v.size(); ++t) {
    double mx = logits.at(0, t);
    for (std::size_t p = 1; p < x.length(); ++p) mx = std::max(mx, logits.at(p, t));
    expect[t] = std::log1p(std::max(0.0, mx));
  }
  auto sparse_vecs = model.encode_sparse({x});
  auto dense = sparse_vecs[0].to_dense(v.size());
  for (std::size_t t = 0; t < v.size(); ++t) {
    REQUIRE(dense[t] == Catch::Approx(expect[t]).margin(1e-12));
  }
  for (const auto& [t, w] : sparse_vecs[0].entries) REQUIRE(w > 0.0);
}

TEST_CASE("models without an LM head refuse sparse work") {
  Vocab v = toy_vocab();
  EncoderConfig cfg = tiny_config(v.size());
  cfg.lm_head = false;
  Rng rng(7);
  EncoderModel model(cfg, rng);
  TokenSeq x = tokenize("the cat", v, 16);
  REQUIRE_THROWS_AS(model.encode_sparse({x}), ConfigError);
}

TEST_CASE("apply_mask counting and special-token safety") {
  Vocab v = toy_vocab();
  std::vector<std::size_t> ids;
  ids.push_back(v.cls_id());
  for (int i = 0; i < 20; ++i) ids.push_back(v.id_of("the"));
  ids.push_back(v.sep_id());

  MaskSpec unchanged{0.0, 0.0, 9};
  MaskResult none = apply_mask(ids, unchanged, v);
  REQUIRE(none.ids == ids);
  REQUIRE(none.labels.empty());

  MaskSpec exact{0.30, 0.30, 9};
  MaskResult r = apply_mask(ids, exact, v);
  REQUIRE(r.labels.size() == 6);  // floor(0.30 * 20)
  for (const auto& [pos, orig] : r.labels) {
    REQUIRE(r.ids[pos] == v.mask_id());
    REQUIRE(orig == ids[pos]);
  }

  MaskSpec spec{0.15, 0.30, 0};
  Rng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    MaskResult m = apply_mask(ids, spec, v, rng);
    REQUIRE(m.ratio_drawn >= 0.15);
    REQUIRE(m.ratio_drawn <= 0.30);
    REQUIRE(m.ids[0] == v.cls_id());
    REQUIRE(m.ids.back() == v.sep_id());
  }

  MaskSpec bad{0.5, 0.2, 0};
  REQUIRE_THROWS_AS(apply_mask(ids, bad, v), ConfigError);
}

TEST_CASE("retromae forward wiring") {
  Vocab v = toy_vocab();
  Rng init(11);
  EncoderModel model(tiny_config(v.size()), init, /*with_decoder=*/true);
  TokenSeq x = tokenize("the cat sat on the mat", v, 16);
  MaskSpec moderate{0.15, 0.30, 0};
  MaskSpec aggressive{0.50, 0.70, 0};

  Rng rng(21);
  RetroMaeOutput out = retromae_forward(model, x, moderate, aggressive, v, rng);
  REQUIRE(out.moderate_ratio >= 0.15);
  REQUIRE(out.moderate_ratio <= 0.30);
  REQUIRE(out.aggressive_ratio >= 0.50);
  REQUIRE(out.aggressive_ratio <= 0.70);
  REQUIRE(out.dec_logits.shape() == std::vector<std::size_t>{x.length(), v.size()});
  REQUIRE(out.enc_logits.shape() == std::vector<std::size_t>{x.length(), v.size()});

  // the CLS row equals encode_dense of the same moderately-masked input
  Rng replay(21);
  MaskResult mod = apply_mask(x.ids, moderate, v, replay);
  Tensor direct = model.encode_dense({TokenSeq{mod.ids, x.mask}});
  REQUIRE(out.cls.values() == direct.values());

  // zeroing the injected CLS embedding changes the decoder logits
  Rng replay2(21);
  (void)apply_mask(x.ids, moderate, v, replay2);
  MaskResult agg = apply_mask(x.ids, aggressive, v, replay2);
  Tensor zeroed = model.decoder_logits(agg.ids, x.mask, Tensor::zeros({1, 8}));
  bool any_diff = false;
  for (std::size_t i = 0; i < zeroed.numel(); ++i) {
    if (zeroed.values()[i] != out.dec_logits.values()[i]) any_diff = true;
  }
  REQUIRE(any_diff);

  EncoderModel no_dec(tiny_config(v.size()), init);
  REQUIRE_THROWS_AS(retromae_forward(no_dec, x, moderate, aggressive, v, rng), ConfigError);
}

TEST_CASE("checkpoint round-trip preserves every byte") {
  Vocab v = toy_vocab();
  Rng rng(12);
  EncoderModel model(tiny_config(v.size()), rng, /*with_decoder=*/true);
  auto p1 = temp_file("embedkit_ckpt_a.bin");
  auto p2 = temp_file("embedkit_ckpt_b.bin");
  save_checkpoint(p1.string(), model.to_checkpoint());
  Checkpoint loaded = load_checkpoint(p1.string());
  save_checkpoint(p2.string(), loaded);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);
  REQUIRE(!b1.empty());

  EncoderModel restored = EncoderModel::from_checkpoint(loaded);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    REQUIRE(restored.params()[i].first == model.params()[i].first);
    REQUIRE(restored.params()[i].second.values() == model.params()[i].second.values());
  }

  // same input, same outputs after the round trip
  TokenSeq x = tokenize("red green blue tokens here", v, 16);
  REQUIRE(restored.encode_dense({x}).values() == model.encode_dense({x}).values());
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("end-to-end encoder gradients match finite differences") {
  Vocab v = toy_vocab();
  Rng rng(13);
  EncoderConfig cfg = tiny_config(v.size());
  EncoderModel model(cfg, rng, /*with_decoder=*/true);
  TokenSeq x = tokenize("the cat sat on", v, 16);
  TokenSeq y = tokenize("a dog ran", v, 16);
  auto batch = pad_batch({x, y}, v.pad_id());
  Tensor w = Tensor::randn({2, 8}, rng);

  auto f = [&] { return sum(mul(model.encode_dense(batch), w)); };
  std::vector<Tensor> leaves;
  for (auto& [name, t] : model.params()) {
    if (name.rfind("enc.", 0) == 0 && name.find(".lm.") == std::string::npos) {
      leaves.push_back(t);
    }
  }
  REQUIRE(check_gradients(f, leaves, 1e-5) < 1e-4);

  // sparse path: gradients reach the LM head through max pooling
  Tensor ws = Tensor::randn({1, v.size()}, rng);
  auto fs = [&] { return sum(mul(model.sparse_weight_matrix({x}), ws)); };
  REQUIRE(check_gradients(fs, {model.param("enc.lm.w"), model.param("enc.lm.b")}, 1e-5) < 1e-4);
}
