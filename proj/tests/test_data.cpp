#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "llip/data.hpp"
#include "test_util.hpp"

using namespace llip;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "llip_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("dataset generation is byte deterministic") {
  auto d1 = fresh_dir("gen1");
  auto d2 = fresh_dir("gen2");
  data::generate_dataset(10, 7, d1);
  data::generate_dataset(10, 7, d2);
  CHECK(slurp(d1 / "manifest.jsonl") == slurp(d2 / "manifest.jsonl"));
  for (int i : {0, 5, 9}) {
    char name[32];
    std::snprintf(name, sizeof(name), "img/%06d.ppm", i);
    CHECK(slurp(d1 / name) == slurp(d2 / name));
  }
  auto d3 = fresh_dir("gen3");
  data::generate_dataset(10, 8, d3);
  CHECK(slurp(d1 / "manifest.jsonl") != slurp(d3 / "manifest.jsonl"));
}

TEST_CASE("manifest round-trips through disk") {
  auto dir = fresh_dir("roundtrip");
  auto written = data::generate_dataset(25, 3, dir);
  auto loaded = data::load_manifest(dir);
  REQUIRE(loaded.entries.size() == written.entries.size());
  for (std::size_t i = 0; i < loaded.entries.size(); ++i) {
    CHECK(loaded.entries[i].image_path == written.entries[i].image_path);
    CHECK(loaded.entries[i].captions == written.entries[i].captions);
    CHECK(loaded.entries[i].aspects.shape == written.entries[i].aspects.shape);
    CHECK(loaded.entries[i].aspects.background == written.entries[i].aspects.background);
  }
  auto ds = data::load_dataset(dir);
  CHECK(ds.size() == 25);
  CHECK(ds.images[0].size() == static_cast<std::size_t>(data::image_bytes));
}

TEST_CASE("every generated caption is a true description") {
  for (long i = 0; i < 300; ++i) {
    auto s = data::generate_scene(99, i);
    for (const auto& c : s.captions) {
      INFO("caption: " << c);
      CHECK(data::verify_caption(c, s.aspects));
    }
    // and the verifier can actually fail
    data::SceneAspects wrong = s.aspects;
    wrong.shape = (wrong.shape + 1) % 8;
    CHECK_FALSE(data::verify_caption(s.captions[0], wrong));
  }
}

TEST_CASE("background never matches the shape color") {
  for (long i = 0; i < 500; ++i) {
    auto s = data::generate_scene(4, i);
    CHECK(s.aspects.background != s.aspects.color);
  }
}

TEST_CASE("aspect marginals are uniform within three points") {
  const long n = 10000;
  std::vector<long> shape(8, 0), color(8, 0), pos(9, 0), size(3, 0), bg(8, 0);
  for (long i = 0; i < n; ++i) {
    Rng rng(derive_seed(123, "scene/" + std::to_string(i)));
    data::SceneAspects a;
    a.shape = static_cast<long>(rng.uniform_int(8));
    a.color = static_cast<long>(rng.uniform_int(8));
    a.position = static_cast<long>(rng.uniform_int(9));
    a.size = static_cast<long>(rng.uniform_int(3));
    do {
      a.background = static_cast<long>(rng.uniform_int(8));
    } while (a.background == a.color);
    ++shape[a.shape];
    ++color[a.color];
    ++pos[a.position];
    ++size[a.size];
    ++bg[a.background];
  }
  auto check_uniform = [&](const std::vector<long>& counts) {
    const double expect = 1.0 / static_cast<double>(counts.size());
    for (long c : counts) CHECK(std::abs(static_cast<double>(c) / n - expect) <= 0.03);
  };
  check_uniform(shape);
  check_uniform(color);
  check_uniform(pos);
  check_uniform(size);
  check_uniform(bg);
}

TEST_CASE("ppm format") {
  SUBCASE("all-black 2x2 image is header plus twelve zero bytes") {
    std::vector<float> img(12, 0.0f);
    const std::string bytes = data::write_ppm(img.data(), 2, 2);
    CHECK(bytes == std::string("P6\n2 2\n255\n") + std::string(12, '\0'));
  }
  SUBCASE("round-trip stays within one quantization step") {
    Rng rng(5);
    std::vector<float> img(static_cast<std::size_t>(data::image_bytes));
    for (auto& v : img) v = static_cast<float>(rng.uniform());
    auto back = data::read_ppm(data::write_ppm(img.data(), 32, 32));
    CHECK(back.w == 32);
    CHECK(back.h == 32);
    auto chw = data::to_chw_float(back.pixels, 32, 32);
    double max_err = 0;
    for (std::size_t i = 0; i < img.size(); ++i) max_err = std::max(max_err, std::abs(static_cast<double>(chw[i] - img[i])));
    CHECK(max_err <= 1.0 / 255.0);
  }
  SUBCASE("malformed inputs raise format errors") {
    CHECK_THROWS_AS(data::read_ppm("P5\n2 2\n255\nxxxx"), format_error);
    CHECK_THROWS_AS(data::read_ppm("P6\n2 2\n255\nxx"), format_error);
    CHECK_THROWS_AS(data::read_ppm("P6\n2\n"), format_error);
    CHECK_THROWS_AS(data::read_ppm(""), format_error);
  }
  SUBCASE("out-of-range pixels are rejected") {
    std::vector<float> img(12, 1.5f);
    CHECK_THROWS_AS(data::write_ppm(img.data(), 2, 2), value_error);
  }
}

TEST_CASE("tokenizer") {
  data::Vocabulary v;
  v.index["red"] = 4;
  v.index["square"] = 5;
  v.words = {"red", "square"};

  SUBCASE("construction") {
    CHECK(data::tokenize("red square", v, 6) == std::vector<int>{1, 4, 5, 2, 0, 0});
  }
  SUBCASE("empty caption") {
    CHECK(data::tokenize("", v, 6) == std::vector<int>{1, 2, 0, 0, 0, 0});
  }
  SUBCASE("unknown words map to unk") {
    CHECK(data::tokenize("red blob", v, 6) == std::vector<int>{1, 4, 3, 2, 0, 0});
  }
  SUBCASE("long captions truncate before the eos") {
    CHECK(data::tokenize("red square red square red", v, 5) == std::vector<int>{1, 4, 5, 4, 2});
  }
}

TEST_CASE("vocabulary is deterministic and round-trips") {
  auto ds = llip::testing::in_memory_dataset(40, 11);
  auto v2 = data::build_vocabulary(ds.manifest);
  CHECK(ds.vocab.words == v2.words);
  CHECK(ds.vocab.size() == v2.size());

  auto dir = fresh_dir("vocab");
  data::save_vocabulary(ds.vocab, dir / "vocab.txt");
  auto v3 = data::load_vocabulary(dir / "vocab.txt");
  CHECK(ds.vocab.words == v3.words);
  for (const auto& [w, id] : ds.vocab.index) CHECK(v3.id_of(w) == id);
}

TEST_CASE("sampler covers one epoch exactly once") {
  auto ds = llip::testing::in_memory_dataset(12, 21);
  std::set<long> seen;
  for (long step = 0; step < 3; ++step) {
    auto b = data::sample_batch(ds, 4, 77, step);
    for (long s : b.scene_idx) CHECK(seen.insert(s).second);  // no repeats within the epoch
  }
  CHECK(seen.size() == 12);
}

TEST_CASE("caption choice is uniform over epochs") {
  auto ds = llip::testing::in_memory_dataset(1, 22);
  REQUIRE(ds.manifest.entries[0].captions.size() == 6);
  std::vector<long> counts(6, 0);
  for (long step = 0; step < 3000; ++step) {
    auto b = data::sample_batch(ds, 1, 5, step);
    ++counts[static_cast<std::size_t>(b.caption_idx[0])];
  }
  for (long c : counts) CHECK(std::abs(static_cast<double>(c) / 3000.0 - 1.0 / 6.0) <= 0.05);
}

TEST_CASE("sampler is reproducible and validates arguments") {
  auto ds = llip::testing::in_memory_dataset(8, 23);
  auto a = data::sample_batch(ds, 4, 9, 3);
  auto b = data::sample_batch(ds, 4, 9, 3);
  CHECK(a.scene_idx == b.scene_idx);
  CHECK(a.caption_idx == b.caption_idx);
  for (long i = 0; i < a.images.numel(); ++i) CHECK(a.images.data()[i] == b.images.data()[i]);

  CHECK_THROWS_AS(data::sample_batch(ds, 9, 9, 0), value_error);
}

TEST_CASE("batch tokens follow the chosen captions") {
  auto ds = llip::testing::in_memory_dataset(6, 24);
  auto b = data::sample_batch(ds, 3, 1, 0);
  auto tb = data::batch_tokens(ds, b, 16);
  CHECK(tb.n == 3);
  CHECK(tb.len == 16);
  for (long r = 0; r < 3; ++r) {
    CHECK(tb.ids[r * 16] == tok::bos);
    const auto& caption =
        ds.manifest.entries[static_cast<std::size_t>(b.scene_idx[static_cast<std::size_t>(r)])]
            .captions[static_cast<std::size_t>(b.caption_idx[static_cast<std::size_t>(r)])];
    auto expect = data::tokenize(caption, ds.vocab, 16);
    for (long i = 0; i < 16; ++i) CHECK(tb.ids[r * 16 + i] == expect[static_cast<std::size_t>(i)]);
  }
}
