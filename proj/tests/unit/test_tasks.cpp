#include <doctest.h>

#include <set>

#include "primroute/binary_io.hpp"
#include "primroute/errors.hpp"
#include "primroute/rng.hpp"
#include "primroute/tasks.hpp"

using namespace primroute;

TEST_SUITE("rng") {
  TEST_CASE("streams are reproducible and tags separate them") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(derive_seed(7, "x") == derive_seed(7, "x"));
    CHECK(derive_seed(7, "x") != derive_seed(7, "y"));
    CHECK(derive_seed(7, "x", {1}) != derive_seed(7, "x", {2}));
  }

  TEST_CASE("uniform_open stays inside (0, 1) and below(n) inside [0, n)") {
    Rng r(1);
    for (int i = 0; i < 10000; ++i) {
      const double u = r.uniform_open();
      CHECK((u > 0.0 && u < 1.0));
      CHECK(r.below(7) < 7u);
    }
  }

  TEST_CASE("normal draws have the right moments") {
    Rng r(9);
    double s = 0, s2 = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double x = r.normal();
      s += x;
      s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.02);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
  }
}

TEST_SUITE("binary_io") {
  TEST_CASE("round trip and truncation") {
    ByteWriter w;
    w.magic("TEST");
    w.u32(7);
    w.f64(-1.25);
    w.f32(0.5f);
    const auto bytes = w.buffer();
    ByteReader r(bytes);
    r.expect_magic("TEST");
    CHECK(r.u32() == 7u);
    CHECK(r.f64() == -1.25);
    CHECK(r.f32() == 0.5f);
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 6);
    ByteReader t(cut);
    t.expect_magic("TEST");
    CHECK_THROWS_AS(t.u32(), FormatError);
  }

  TEST_CASE("fnv1a64 reference value") {
    // Published FNV-1a 64-bit test vector for "a".
    CHECK(fnv1a64(std::string_view("a")) == 0xaf63dc4c8601ec8cULL);
  }
}

TEST_SUITE("tasks") {
  TEST_CASE("generation is deterministic") {
    for (Skill s : kAllSkills) {
      const auto a = generate_tasks(SkillSpec{s}, 50, 3, Split::kTrain);
      const auto b = generate_tasks(SkillSpec{s}, 50, 3, Split::kTrain);
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].seed == b[i].seed);
        CHECK(a[i].prompt == b[i].prompt);
        CHECK(a[i].gold == b[i].gold);
      }
    }
  }

  TEST_CASE("train and eval prompts never collide") {
    std::size_t drawn = 0;
    for (Skill s : kAllSkills) {
      const SkillSpec spec{s};
      const auto [tb, te] = spec.seed_range(Split::kTrain);
      const auto [eb, ee] = spec.seed_range(Split::kEval);
      CHECK(te <= eb);
      std::set<Tokens> train;
      for (std::uint64_t k = tb; k < te; ++k) train.insert(make_instance(s, k).prompt);
      for (std::uint64_t k = eb; k < ee; ++k) CHECK(train.count(make_instance(s, k).prompt) == 0);
      drawn += (te - tb) + (ee - eb);
    }
    CHECK(drawn >= 10000);
  }

  TEST_CASE("too many instances for a split is a data error") {
    const SkillSpec spec{Skill::kParity};
    const auto [b, e] = spec.seed_range(Split::kEval);
    CHECK_THROWS_AS(generate_tasks(spec, e - b + 1, 1, Split::kEval), DataError);
  }

  TEST_CASE("verify normalizes at the end marker") {
    const auto inst = make_instance(Skill::kArithmetic, 12);
    const Tokens& g = inst.gold;
    Tokens junk = {vocab::digit(9), vocab::letter(3)};
    int cases = 0, ones = 0;
    auto expect = [&](Tokens answer, int want) {
      CHECK(verify(answer, inst) == want);
      ++cases;
      ones += want;
    };
    expect(g, 1);
    expect({}, 0);
    expect({vocab::kEos}, 0);
    Tokens t = g;
    t.push_back(vocab::kEos);
    expect(t, 1);
    t.insert(t.end(), junk.begin(), junk.end());
    expect(t, 1);
    t.push_back(vocab::kEos);
    expect(t, 1);
    Tokens extra = g;
    extra.push_back(vocab::digit(1));
    expect(extra, 0);
    extra.push_back(vocab::kEos);
    expect(extra, 0);
    for (int d = 0; d < 10; ++d) {
      Tokens wrong = g;
      wrong.back() = vocab::digit(d);
      wrong.push_back(vocab::kEos);
      wrong.push_back(vocab::digit(d));
      expect(wrong, wrong.front() == g.front() && vocab::digit(d) == g.back() ? 1 : 0);
    }
    Tokens prefixed = {vocab::kEos};
    prefixed.insert(prefixed.end(), g.begin(), g.end());
    expect(prefixed, 0);
    Tokens doubled = g;
    doubled.insert(doubled.end(), g.begin(), g.end());
    expect(doubled, 0);
    CHECK(cases == 20);
    CHECK(ones >= 5);
  }

  TEST_CASE("framing is applied once and strips back to the payload") {
    const auto inst = make_instance(Skill::kLookup, 40);
    const auto pair = make_contrast_pair(inst, 1, 128);
    CHECK(strip_frame(pair.positive_prompt) == strip_frame(pair.negative_prompt));
    CHECK(strip_frame(pair.positive_prompt) == inst.prompt);
    CHECK_THROWS_AS(with_frame(pair.positive_prompt, vocab::positive_frame(0)), DataError);
    CHECK(make_contrast_pair(inst, 0, 128).positive_prompt != pair.positive_prompt);
  }

  TEST_CASE("quality filter verdicts") {
    const auto inst = make_instance(Skill::kReversal, 5);
    Tokens good = inst.gold;
    good.push_back(vocab::kEos);
    Tokens bad = good;
    bad[0] = bad[0] == vocab::letter(0) ? vocab::letter(1) : vocab::letter(0);
    CHECK(quality_filter(good, bad, inst).accepted);
    const auto both = quality_filter(good, good, inst);
    CHECK_FALSE(both.accepted);
    CHECK(both.reason == "no reasoning gap");
    Tokens long_bad;
    for (int i = 0; i < 5; ++i) long_bad.insert(long_bad.end(), bad.begin(), bad.end() - 1);
    long_bad.push_back(vocab::kEos);
    const auto parity = quality_filter(good, long_bad, inst);
    CHECK_FALSE(parity.accepted);
    CHECK(parity.reason == "structural parity");
  }

  TEST_CASE("task dump round trip") {
    const auto tasks = generate_tasks(SkillSpec{Skill::kPattern}, 20, 4, Split::kEval);
    const auto back = parse_task_dump(dump_tasks(tasks));
    REQUIRE(back.size() == tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      CHECK(back[i].prompt == tasks[i].prompt);
      CHECK(back[i].gold == tasks[i].gold);
    }
  }
}
