#include <catch2/catch_amalgamated.hpp>

#include "mvsl/encoders.hpp"

using namespace mvsl;
using namespace mvsl::enc;

namespace {

ImageBatch random_batch(int b, const EncoderConfig& c, std::uint64_t seed) {
  ImageBatch img(b, c.channels, c.image_side);
  SplitMix64 g(seed);
  for (auto& x : img.v) x = g.next_uniform();
  return img;
}

}  // namespace

TEST_CASE("config validation and token-count law", "[encoders]") {
  EncoderConfig c;
  REQUIRE_NOTHROW(c.validate());
  REQUIRE(c.n_tokens() == 17);  // (16/4)^2 + 1

  EncoderConfig bad = c;
  bad.embed_dim = 64;  // D must stay < d
  REQUIRE_THROWS_AS(build_encoders(bad), ConfigError);

  bad = c;
  bad.patch_side = 5;
  REQUIRE_THROWS_AS(build_encoders(bad), ConfigError);

  bad = c;
  bad.n_heads = 5;
  REQUIRE_THROWS_AS(build_encoders(bad), ConfigError);
}

TEST_CASE("seeded construction is reproducible and seed-sensitive", "[encoders]") {
  EncoderConfig c;
  auto [v1, t1] = build_encoders(c);
  auto [v2, t2] = build_encoders(c);
  REQUIRE(weight_checksum(v1) == weight_checksum(v2));
  REQUIRE(weight_checksum(t1) == weight_checksum(t2));

  EncoderConfig c2 = c;
  c2.seed = 2;
  auto [v3, t3] = build_encoders(c2);
  REQUIRE(weight_checksum(v1) != weight_checksum(v3));
  REQUIRE(weight_checksum(t1) != weight_checksum(t3));
}

TEST_CASE("tokenizer word-split, case folding, determinism", "[encoders]") {
  EncoderConfig c;
  auto seq = tokenize("a photo of a", c);
  REQUIRE(seq.ids.size() == 4);
  REQUIRE(seq.ids[0] == seq.ids[3]);  // same word, same id

  REQUIRE(tokenize("Glioma Tumor", c).ids == tokenize("glioma tumor", c).ids);
  REQUIRE(tokenize("dyed-lifted polyps", c).ids.size() == 3);  // punctuation splits
  REQUIRE(tokenize("x", c).ids == tokenize("x", c).ids);

  for (int id : tokenize("one two three four five", c).ids) {
    REQUIRE(id >= 1);
    REQUIRE(id < c.vocab_size);
  }

  REQUIRE_THROWS_AS(tokenize("", c), InputError);
  REQUIRE_THROWS_AS(tokenize("..., !!", c), InputError);

  std::string over;
  for (int i = 0; i < 40; ++i) over += "w" + std::to_string(i) + " ";
  REQUIRE_THROWS_AS(tokenize(over, c), InputError);
}

TEST_CASE("frozen image encoding: shapes, purity, determinism", "[encoders]") {
  EncoderConfig c;
  c.n_blocks = 3;  // keep the test quick; shape law is per-block anyway
  auto [ve, te] = build_encoders(c);
  auto before = weight_checksum(ve);

  ImageBatch img = random_batch(2, c, 99);
  auto acts1 = encode_image_frozen(ve, img);
  auto acts2 = encode_image_frozen(ve, img);

  REQUIRE(acts1.per_block.size() == 3);
  for (const auto& blk : acts1.per_block) {
    REQUIRE(blk.d0 == 2);
    REQUIRE(blk.d1 == 17);
    REQUIRE(blk.d2 == 64);
    REQUIRE(all_finite(blk));
  }
  REQUIRE(acts1.f_cls.rows() == 2);
  REQUIRE(acts1.f_cls.cols() == 32);

  // bit-identical across calls, weights untouched
  REQUIRE(acts1.f_cls == acts2.f_cls);
  for (std::size_t k = 0; k < acts1.per_block.size(); ++k)
    REQUIRE(acts1.per_block[k].v == acts2.per_block[k].v);
  REQUIRE(weight_checksum(ve) == before);

  // empty batch keeps the shape contract
  auto empty = encode_image_frozen(ve, ImageBatch(0, c.channels, c.image_side));
  REQUIRE(empty.per_block.size() == 3);
  REQUIRE(empty.per_block[0].d0 == 0);
  REQUIRE(empty.per_block[0].d1 == 17);
  REQUIRE(empty.f_cls.rows() == 0);
  REQUIRE(empty.f_cls.cols() == 32);

  ImageBatch wrong(1, c.channels, 8);
  REQUIRE_THROWS_AS(encode_image_frozen(ve, wrong), InputError);
}

TEST_CASE("frozen text encoding: shapes, purity, permutation", "[encoders]") {
  EncoderConfig c;
  c.n_blocks = 3;
  auto [ve, te] = build_encoders(c);

  auto s1 = tokenize("glioma tumor", c);
  auto s2 = tokenize("meningioma tumor", c);
  auto s3 = tokenize("normal brain", c);

  Mat one = encode_text_frozen(te, {s1});
  REQUIRE(one.rows() == 1);
  REQUIRE(one.cols() == 32);

  Mat same = encode_text_frozen(te, {s1, s1});
  REQUIRE(same.row(0) == same.row(1));

  Mat abc = encode_text_frozen(te, {s1, s2, s3});
  Mat cab = encode_text_frozen(te, {s3, s1, s2});
  REQUIRE(abc.row(0) == cab.row(1));  // per-sequence purity
  REQUIRE(abc.row(1) == cab.row(2));
  REQUIRE(abc.row(2) == cab.row(0));

  TokenSequence over;
  over.ids.assign(c.max_text_len + 1, 1);
  REQUIRE_THROWS_AS(encode_text_frozen(te, {over}), InputError);
}

TEST_CASE("pooling rows differ by final token", "[encoders]") {
  // Final-token pooling: sequences sharing a prefix but differing in the last
  // token must encode differently.
  EncoderConfig c;
  c.n_blocks = 2;
  auto [ve, te] = build_encoders(c);
  auto a = tokenize("class 00", c);
  auto b = tokenize("class 01", c);
  Mat out = encode_text_frozen(te, {a, b});
  REQUIRE((out.row(0) - out.row(1)).norm() > 1e-6);
}
