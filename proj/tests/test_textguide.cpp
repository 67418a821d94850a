#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "tmkd/errors.hpp"
#include "tmkd/gradcheck.hpp"
#include "tmkd/rng.hpp"
#include "tmkd/textguide.hpp"

using namespace tmkd;
using namespace tmkd::text;

namespace {

// Test-only TMKD-EMB writer, independent of encode_embeddings.
struct EmbFile {
  std::vector<std::uint8_t> b;
  void raw(const char* s, std::size_t n) { b.insert(b.end(), s, s + n); }
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  }
  void header(std::uint32_t count, std::uint32_t dim, std::uint32_t version = 1) {
    raw("TMKD", 4);
    le(version, 4);
    le(count, 4);
    le(dim, 4);
  }
  void record(const std::string& key, const std::vector<float>& v) {
    le(key.size(), 2);
    raw(key.data(), key.size());
    for (float f : v) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      le(u, 4);
    }
  }
};

Tensor random_param(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return Tensor({n}, std::move(v));
}

void set_all(Tensor t, double value) {
  for (auto& x : t.mutable_data()) x = value;
}

}  // namespace

TEST_CASE("embedding file written by the test writer loads") {
  EmbFile f;
  f.header(2, 4);
  f.record("cardinal/rgb", {1.0f, 0.0f, 0.0f, 0.0f});
  f.record("cardinal/edge", {0.0f, 0.5f, -0.25f, 1e-7f});
  auto t = parse_embeddings(f.b);
  CHECK(t.dim() == 4);
  CHECK(t.size() == 2);
  REQUIRE(t.find("cardinal/edge"));
  CHECK((*t.find("cardinal/edge"))[3] == 1e-7f);
  CHECK(encode_embeddings(t) == f.b);
}

TEST_CASE("embedding file errors carry the record index") {
  SUBCASE("duplicate key") {
    EmbFile f;
    f.header(3, 2);
    f.record("a/rgb", {1, 0});
    f.record("a/edge", {1, 0});
    f.record("a/rgb", {0, 1});
    try {
      parse_embeddings(f.b);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 2);
      CHECK(std::string(e.what()).find("a/rgb") != std::string::npos);
    }
  }
  SUBCASE("declared count exceeds records") {
    EmbFile f;
    f.header(3, 2);
    f.record("a/rgb", {1, 0});
    f.record("a/edge", {1, 0});
    try {
      parse_embeddings(f.b);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 2);
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SUBCASE("record cut mid-vector") {
    EmbFile f;
    f.header(1, 4);
    f.record("a/rgb", {1, 0, 0, 0});
    f.b.resize(f.b.size() - 3);
    CHECK_THROWS_AS(parse_embeddings(f.b), ParseError);
  }
  SUBCASE("bad magic") {
    EmbFile f;
    f.header(0, 2);
    f.b[0] = 'X';
    CHECK_THROWS_AS(parse_embeddings(f.b), ParseError);
    CHECK_THROWS_AS(parse_embeddings(std::vector<std::uint8_t>{'T', 'M'}), ParseError);
  }
  SUBCASE("version") {
    EmbFile f;
    f.header(0, 2, 2);
    CHECK_THROWS_AS(parse_embeddings(f.b), UnsupportedFormat);
  }
  SUBCASE("zero dim") {
    EmbFile f;
    f.header(0, 0);
    CHECK_THROWS_AS(parse_embeddings(f.b), ParseError);
  }
}

TEST_CASE("table add rejects duplicates and dimension mismatches") {
  EmbeddingTable t(3);
  t.add("x/rgb", {1, 2, 3});
  CHECK_THROWS_AS(t.add("x/rgb", {1, 2, 3}), ContractError);
  CHECK_THROWS_AS(t.add("x/edge", {1, 2}), ContractError);
}

TEST_CASE("embedding round trip is bit exact") {
  auto table = pseudo_embeddings({"cardinal", "sparrow", "Blue Jay"}, {}, 64, 11);
  auto bytes = encode_embeddings(table);
  auto back = parse_embeddings(bytes);
  CHECK(back == table);
  CHECK(encode_embeddings(back) == bytes);
  CHECK(bytes.size() == 16 + 9 * 64 * 4 + 2 * 9 + (12 + 13 + 11) + (11 + 12 + 10) + (12 + 13 + 11));
}

TEST_CASE("pseudo embeddings are unit norm, seeded and distinct") {
  const std::vector<std::string> classes = {"circle_coarse", "circle_fine", "square_coarse", "square_fine",
                                            "cardinal", "sparrow", "wren", "finch"};
  auto a = pseudo_embeddings(classes, {}, 64, 3);
  auto b = pseudo_embeddings(classes, {}, 64, 3);
  auto c = pseudo_embeddings(classes, {}, 64, 4);
  CHECK(encode_embeddings(a) == encode_embeddings(b));
  CHECK_FALSE(encode_embeddings(a) == encode_embeddings(c));
  CHECK(a.size() == classes.size() * 3);
  for (const auto& [key, v] : a.entries()) {
    double ss = 0.0;
    for (float x : v) ss += static_cast<double>(x) * x;
    CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-6);
  }
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) CHECK(a.entries()[i].second != a.entries()[j].second);
  // Normalised prompts: case and spacing of the class do not matter.
  auto d = pseudo_embeddings({"Cardinal"}, {}, 8, 3);
  auto e = pseudo_embeddings({"cardinal"}, {}, 8, 3);
  CHECK(d.entries()[0].second == e.entries()[0].second);
}

TEST_CASE("prompt templates") {
  PromptTemplateSet p;
  CHECK(p.instantiate("Cardinal", ViewKind::rgb) == "a photo of a cardinal");
  CHECK(p.instantiate("cardinal", ViewKind::edge) == "an edge enhanced image of a cardinal");
  CHECK(p.instantiate("cardinal", ViewKind::hf) == "a high-frequency enhanced image of a cardinal");
  p.rgb = "  a   {class}  photo ";
  CHECK(p.instantiate("Blue  Jay", ViewKind::rgb) == "a blue jay photo");
  p.rgb = "no placeholder";
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.rgb = "{class} and {class}";
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("class embedding lookup") {
  EmbeddingTable t(2);
  t.add("cardinal/rgb", {1, 0});
  t.add("cardinal/edge", {0, 1});
  t.add("cardinal/hf", {0.6f, 0.8f});
  t.add("wren/rgb", {1, 0});
  t.add("wren/edge", {1, 0});
  auto c = lookup_class_embeddings(t, "cardinal");
  CHECK(c.rgb == std::vector<float>{1, 0});
  CHECK(c.edge == std::vector<float>{0, 1});
  CHECK(c.hf == std::vector<float>{0.6f, 0.8f});
  CHECK(c.get(ViewKind::hf) == c.hf);
  auto c2 = lookup_class_embeddings(t, "cardinal");
  CHECK(std::memcmp(c.hf.data(), c2.hf.data(), 8) == 0);
  try {
    lookup_class_embeddings(t, "wren");
    FAIL("expected LookupError");
  } catch (const LookupError& e) {
    CHECK(e.key() == "wren/hf");
  }
  CHECK_THROWS_AS(lookup_class_embeddings(t, "finch"), LookupError);
  CHECK(missing_keys(t, {"cardinal", "wren", "finch"}) ==
        std::vector<std::string>{"wren/hf", "finch/rgb", "finch/edge", "finch/hf"});
}

TEST_CASE("weight net outputs") {
  Rng rng(5);
  auto net = WeightNet::create(8, 16, rng);
  CHECK(net.embed_dim() == 8);
  CHECK(net.hidden() == 16);
  auto ta = random_vec(rng, 8), tb = random_vec(rng, 8), tc = random_vec(rng, 8);

  SUBCASE("zero output layer gives equal weights") {
    set_all(net.w2, 0.0);
    Tape tape;
    auto w = weightnet_forward(tape, net, ta, tb, tc);
    REQUIRE(w.shape() == Shape{3});
    for (int i = 0; i < 3; ++i) CHECK(w[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("saturated bias") {
    set_all(net.w2, 0.0);
    net.b2.mutable_data()[0] = 1000.0;
    Tape tape;
    auto w = weightnet_forward(tape, net, ta, tb, tc);
    CHECK(w[0] == 1.0);
    CHECK(w[1] == 0.0);
    CHECK(std::isfinite(w[1]));
  }
  SUBCASE("subset softmax") {
    Tape tape;
    auto all = weightnet_forward(tape, net, ta, tb, tc);
    auto two = weightnet_forward(tape, net, ta, tb, tc, {ViewKind::rgb, ViewKind::hf});
    REQUIRE(two.shape() == Shape{2});
    CHECK(two[0] + two[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(two[0] / two[1] == doctest::Approx(all[0] / all[2]).epsilon(1e-12));
    auto one = weightnet_forward(tape, net, ta, tb, tc, {ViewKind::rgb});
    CHECK(one[0] == 1.0);
  }
  SUBCASE("dimension mismatch") {
    Tape tape;
    CHECK_THROWS_AS(weightnet_forward(tape, net, ta, tb, random_vec(rng, 7)), DimensionError);
  }
}

TEST_CASE("weight net rows sum to one over random parameterisations") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    auto net = WeightNet::create(6, 5, rng);
    const double s = rng.uniform(0.1, 50.0);
    for (auto* t : {&net.w1, &net.b1, &net.w2, &net.b2})
      for (auto& x : t->mutable_data()) x = s * rng.normal();
    Tape tape;
    Tensor e({4, 6}, std::vector<double>(24));
    for (auto& x : e.mutable_data()) x = rng.normal();
    auto w = weightnet_forward(tape, net, e, e, e);
    for (std::size_t r = 0; r < 4; ++r) {
      const double sum = w.at(r, 0) + w.at(r, 1) + w.at(r, 2);
      CHECK(std::abs(sum - 1.0) <= 1e-9);
      for (std::size_t c = 0; c < 3; ++c) CHECK(w.at(r, c) >= 0.0);
    }
  }
}

TEST_CASE("weight net gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    auto net = WeightNet::create(4, 6, rng);
    for (auto& x : net.b1.mutable_data()) x = rng.uniform(-0.5, 0.5);
    for (auto& x : net.b2.mutable_data()) x = rng.uniform(-0.5, 0.5);
    Tensor ea({3, 4}, std::vector<double>(12)), eb({3, 4}, std::vector<double>(12)), ec({3, 4}, std::vector<double>(12));
    for (auto* e : {&ea, &eb, &ec})
      for (auto& x : e->mutable_data()) x = rng.normal();
    auto probe = random_param(rng, {3, 3});
    probe.set_requires_grad(false);
    auto loss_fn = [&](Tape& tape) {
      auto w = weightnet_forward(tape, net, ea, eb, ec);
      return ops::sum(tape, ops::scale_rows(tape, ops::select_cols(tape, w, {0}), ops::select_cols(tape, probe, {1})));
    };
    Tape t0;
    loss_fn(t0);
    if (t0.relu_margin() < 1e-3) continue;
    auto params = net.parameters();
    // The probe makes every output weight matter.
    auto loss_all = [&](Tape& tape) {
      auto w = weightnet_forward(tape, net, ea, eb, ec);
      return ops::sum(tape, ops::log(tape, ops::add(tape, w, Tensor::full({3, 3}, 0.5))));
    };
    auto r = check_gradients(params, loss_all);
    CHECK(r.max_rel_error < 1e-4);
    auto r2 = check_gradients(params, loss_fn);
    CHECK(r2.max_rel_error < 1e-4);
  }
}

TEST_CASE("fusion examples") {
  Tape tape;
  auto w = Tensor::vector({0.2, 0.3, 0.5});
  auto f = fuse_features(tape, w, {Tensor::vector({1.0}), Tensor::vector({2.0}), Tensor::vector({3.0})});
  CHECK(f.shape() == Shape{1});
  CHECK(f[0] == doctest::Approx(2.3).epsilon(1e-12));

  Rng rng(9);
  auto fa = random_vec(rng, 10), fb = random_vec(rng, 10), fc = random_vec(rng, 10);
  auto one_hot = fuse_features(tape, Tensor::vector({0.0, 1.0, 0.0}), {fa, fb, fc});
  for (std::size_t i = 0; i < 10; ++i) CHECK(one_hot[i] == fb[i]);

  auto same = fuse_features(tape, Tensor::vector({1.0 / 3, 1.0 / 3, 1.0 / 3}), {fa, fa, fa});
  for (std::size_t i = 0; i < 10; ++i) CHECK(same[i] == doctest::Approx(fa[i]).epsilon(1e-14));

  CHECK_THROWS_AS(fuse_features(tape, w, {fa, fb, random_vec(rng, 9)}), DimensionError);
  CHECK_THROWS_AS(fuse_features(tape, Tensor::vector({0.5, 0.5}), {fa, fb, fc}), DimensionError);
}

TEST_CASE("fusion stays in the componentwise convex hull") {
  Rng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> raw = {rng.uniform(), rng.uniform(), rng.uniform()};
    const double s = raw[0] + raw[1] + raw[2];
    for (auto& x : raw) x /= s;
    auto fa = random_vec(rng, 16), fb = random_vec(rng, 16), fc = random_vec(rng, 16);
    Tape tape;
    auto f = fuse_features(tape, Tensor::vector(raw), {fa, fb, fc});
    for (std::size_t i = 0; i < 16; ++i) {
      const double lo = std::min({fa[i], fb[i], fc[i]});
      const double hi = std::max({fa[i], fb[i], fc[i]});
      CHECK(f[i] >= lo - 1e-12);
      CHECK(f[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("fusion has no hidden view-order dependence") {
  Rng rng(12);
  auto net = WeightNet::create(5, 7, rng);
  const std::size_t d = 5;
  std::vector<Tensor> emb = {random_vec(rng, d), random_vec(rng, d), random_vec(rng, d)};
  std::vector<Tensor> feat = {random_vec(rng, 6), random_vec(rng, 6), random_vec(rng, 6)};
  const std::size_t perm[3] = {2, 0, 1};

  // Permuted net: the column blocks of W1 and the rows of W2/b2 follow the views.
  auto pnet = WeightNet::create(5, 7, rng);
  for (std::size_t h = 0; h < 7; ++h)
    for (std::size_t v = 0; v < 3; ++v)
      for (std::size_t k = 0; k < d; ++k)
        pnet.w1.mutable_data()[h * 3 * d + v * d + k] = net.w1[h * 3 * d + perm[v] * d + k];
  for (std::size_t h = 0; h < 7; ++h) pnet.b1.mutable_data()[h] = net.b1[h];
  for (std::size_t v = 0; v < 3; ++v) {
    for (std::size_t h = 0; h < 7; ++h) pnet.w2.mutable_data()[v * 7 + h] = net.w2[perm[v] * 7 + h];
    pnet.b2.mutable_data()[v] = net.b2[perm[v]];
  }

  Tape tape;
  auto w = weightnet_forward(tape, net, emb[0], emb[1], emb[2]);
  auto f = fuse_features(tape, w, feat);
  auto pw = weightnet_forward(tape, pnet, emb[perm[0]], emb[perm[1]], emb[perm[2]]);
  auto pf = fuse_features(tape, pw, {feat[perm[0]], feat[perm[1]], feat[perm[2]]});
  for (std::size_t v = 0; v < 3; ++v) CHECK(pw[v] == doctest::Approx(w[perm[v]]).epsilon(1e-14));
  for (std::size_t i = 0; i < 6; ++i) CHECK(pf[i] == doctest::Approx(f[i]).epsilon(1e-12));
}

TEST_CASE("fusion gradients reach weights and features") {
  Rng rng(4);
  auto w = random_param(rng, {2, 3}, 0.1, 1.0);
  auto fa = random_param(rng, {2, 4}), fb = random_param(rng, {2, 4}), fc = random_param(rng, {2, 4});
  auto loss = [&](Tape& tape) {
    auto f = fuse_features(tape, w, {fa, fb, fc});
    return ops::sum(tape, ops::exp(tape, f));
  };
  auto r = check_gradients({{"w", w}, {"fa", fa}, {"fb", fb}, {"fc", fc}}, loss);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("fusion weight rows and stacked embeddings") {
  auto w = Tensor::matrix(2, 2, {0.25, 0.75, 0.6, 0.4});
  auto row = fusion_weights_row(w, 1, {ViewKind::rgb, ViewKind::hf});
  CHECK(row.w_rgb == 0.6);
  CHECK(row.w_edge == 0.0);
  CHECK(row.w_hf == 0.4);
  CHECK_THROWS_AS(fusion_weights_row(w, 2, {ViewKind::rgb, ViewKind::hf}), DimensionError);

  std::vector<float> a = {1, 2}, b = {3, 4}, c = {5};
  auto s = stack_rows({&a, &b});
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.at(1, 0) == 3.0);
  CHECK_FALSE(s.requires_grad());
  CHECK_THROWS_AS(stack_rows({&a, &c}), DimensionError);
}
