#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <set>
#include <vector>

#include "dart/tokenizer.hpp"

using dart::Config;
using dart::RngStream;
using dart::Tensor;
using dart::Tokenizer;

namespace {

dart::Config tiny_config() {
  Config c = dart::desk_profile();
  c.tok_codebook_size = 16;
  c.tok_embed_dim = 8;
  c.tok_base_channels = 4;
  c.tok_res_blocks = 1;
  c.tok_self_attention = false;
  return c;
}

Tensor<float> solid_color(float r, float g, float b) {
  Tensor<float> img = Tensor<float>::zeros({3, 16, 16});
  for (int i = 0; i < 256; ++i) {
    img.data[static_cast<std::size_t>(i)] = r;
    img.data[static_cast<std::size_t>(256 + i)] = g;
    img.data[static_cast<std::size_t>(512 + i)] = b;
  }
  return img;
}

// Reference scan in double precision, first index wins ties.
std::vector<int> nearest_rows(const Tensor<float>& latents, const Tensor<float>& codebook) {
  const int K = latents.shape[0], N = codebook.shape[0], d = latents.shape[1];
  std::vector<int> out(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int i = 0; i < N; ++i) {
      double dist = 0;
      for (int j = 0; j < d; ++j) {
        const double diff = static_cast<double>(latents.at(k, j)) - static_cast<double>(codebook.at(i, j));
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = i;
      }
    }
    out[static_cast<std::size_t>(k)] = arg;
  }
  return out;
}

}  // namespace

TEST_CASE("quantize matches a double-precision reference scan") {
  for (int N : {4, 64, 512}) {
    Config c = tiny_config();
    c.tok_codebook_size = N;
    Tokenizer<float> tok(c, 7);
    RngStream rng(99, "quantize_probe");
    Tensor<float> latents = Tensor<float>::zeros({16, c.tok_embed_dim});
    for (auto& v : latents.data) v = static_cast<float>(rng.uniform() * 4.0 - 2.0);
    REQUIRE(tok.quantize_indices(latents) == nearest_rows(latents, tok.codebook().value));
  }
}

TEST_CASE("quantize picks the closer row and breaks ties low") {
  Config c = tiny_config();
  c.tok_codebook_size = 2;
  c.tok_embed_dim = 2;
  Tokenizer<float> tok(c, 3);
  auto& cb = tok.codebook().value;
  cb.at(0, 0) = 0.0f;
  cb.at(0, 1) = 0.0f;
  cb.at(1, 0) = 1.0f;
  cb.at(1, 1) = 1.0f;
  Tensor<float> z = Tensor<float>::zeros({1, 2});
  z.at(0, 0) = 0.9f;
  z.at(0, 1) = 0.8f;
  CHECK(tok.quantize_indices(z) == std::vector<int>{1});

  Config c4 = tiny_config();
  c4.tok_codebook_size = 4;
  c4.tok_embed_dim = 2;
  Tokenizer<float> tok4(c4, 3);
  auto& cb4 = tok4.codebook().value;
  const float rows[4][2] = {{1.0f, 0.0f}, {5.0f, 5.0f}, {7.0f, 7.0f}, {-1.0f, 0.0f}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j) cb4.at(i, j) = rows[i][j];
  Tensor<float> origin = Tensor<float>::zeros({1, 2});
  // rows 0 and 3 are both at distance 1; the scan must keep index 0
  CHECK(tok4.quantize_indices(origin) == std::vector<int>{0});
}

TEST_CASE("same seed builds identical tokenizers") {
  Config c = tiny_config();
  Tokenizer<float> a(c, 42), b(c, 42);
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(a.params()[i].value.data == b.params()[i].value.data);
  }
}

TEST_CASE("tokenize and decode_tokens are deterministic and in range") {
  Config c = tiny_config();
  Tokenizer<float> tok(c, 11);
  Tensor<std::uint8_t> frame = Tensor<std::uint8_t>::zeros({3, 16, 16});
  RngStream rng(5, "frame");
  for (auto& v : frame.data) v = static_cast<std::uint8_t>(rng.uniform_int(256));

  auto ids = tok.tokenize(frame);
  REQUIRE(ids.size() == 16);
  CHECK(tok.tokenize(frame) == ids);
  for (int id : ids) {
    CHECK(id >= 0);
    CHECK(id < c.tok_codebook_size);
  }

  Tensor<float> recon = tok.decode_tokens(ids);
  REQUIRE(recon.shape == dart::Shape{3, 16, 16});
  for (auto v : recon.data) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  CHECK(tok.decode_tokens(ids).data == recon.data);
}

TEST_CASE("train_step report is coherent") {
  Config c = tiny_config();
  Tokenizer<float> tok(c, 21);
  dart::AdamConfig ac;
  ac.lr = c.tok_lr;
  dart::Adam<float> opt(tok.params(), ac);
  std::vector<Tensor<float>> batch{solid_color(1.0f, 0.0f, 0.0f), solid_color(0.0f, 0.0f, 1.0f)};
  auto rep = tok.train_step(batch, opt);
  CHECK(rep.rec > 0.0f);
  CHECK(rep.codebook >= 0.0f);
  CHECK(rep.commit >= 0.0f);
  CHECK(rep.total == Catch::Approx(rep.rec + rep.codebook + 0.25f * rep.commit).margin(1e-5));
  CHECK(opt.t() == 1);
}

TEST_CASE("training on a palette of solid colors reduces loss and uses several codes") {
  Config c = tiny_config();
  Tokenizer<float> tok(c, 123);
  dart::AdamConfig ac;
  ac.lr = 3e-3;
  dart::Adam<float> opt(tok.params(), ac);

  std::vector<Tensor<float>> palette;
  const float lv[2] = {0.1f, 0.9f};
  for (int r = 0; r < 2; ++r)
    for (int g = 0; g < 2; ++g)
      for (int b = 0; b < 2; ++b) palette.push_back(solid_color(lv[r], lv[g], lv[b]));

  float first = 0, last = 0;
  const int steps = 120;
  for (int s = 0; s < steps; ++s) {
    auto rep = tok.train_step(palette, opt);
    if (s == 0) first = rep.total;
    if (s == steps - 1) last = rep.total;
  }
  CHECK(last < 0.5f * first);

  std::set<int> used;
  std::set<std::vector<int>> signatures;
  float worst_rec = 0;
  for (const auto& img : palette) {
    dart::Tape<float> tp(true, true);
    auto ids = tok.quantize_indices(tp.val(tok.encode(tp, img)));
    used.insert(ids.begin(), ids.end());
    signatures.insert(ids);
    Tensor<float> recon = tok.decode_tokens(ids);
    for (std::int64_t i = 0; i < recon.size(); ++i) worst_rec = std::max(worst_rec, std::abs(recon[i] - img[i]));
  }
  CHECK(used.size() >= 4);
  CHECK(signatures.size() >= 4);
  CHECK(worst_rec < 0.25f);
}

TEST_CASE("tokenizer rejects malformed input") {
  Config c = tiny_config();
  Tokenizer<float> tok(c, 2);
  dart::Tape<float> tp;
  CHECK_THROWS_AS(tok.encode(tp, Tensor<float>::zeros({3, 8, 8})), dart::ShapeError);
  Tensor<float> hot = Tensor<float>::zeros({3, 16, 16});
  hot.data[0] = 1.5f;
  CHECK_THROWS_AS(tok.encode(tp, hot), dart::ContractError);
  CHECK_THROWS_AS(tok.decode_tokens({0, 1, 2}), dart::ShapeError);
  CHECK_THROWS_AS(tok.codebook_rows({c.tok_codebook_size}), dart::ContractError);
}
