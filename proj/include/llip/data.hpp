#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "llip/core/ops.hpp"
#include "llip/core/rng.hpp"
#include "llip/core/tensor.hpp"
#include "llip/tokens.hpp"

namespace llip::data {

constexpr long image_side = 32;
constexpr long image_bytes = 3 * image_side * image_side;

struct Rgb {
  std::uint8_t r, g, b;
};

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v = {"circle", "square", "triangle", "diamond",
                                             "cross",  "ring",   "stripe",   "column"};
  return v;
}

inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v = {"red", "green", "blue", "yellow", "purple", "orange", "teal", "pink"};
  return v;
}

inline Rgb color_rgb(long idx) {
  static const std::array<Rgb, 8> v = {{{220, 40, 40},
                                        {40, 180, 70},
                                        {50, 90, 220},
                                        {230, 210, 50},
                                        {150, 60, 200},
                                        {240, 140, 40},
                                        {40, 190, 190},
                                        {240, 130, 180}}};
  return v[static_cast<std::size_t>(idx)];
}

inline const std::vector<std::string>& position_names() {
  static const std::vector<std::string> v = {"top left",    "top center",    "top right",
                                             "middle left", "center",        "middle right",
                                             "bottom left", "bottom center", "bottom right"};
  return v;
}

inline const std::vector<std::string>& size_names() {
  static const std::vector<std::string> v = {"small", "medium", "large"};
  return v;
}

inline long size_radius(long idx) { return idx == 0 ? 3 : idx == 1 ? 5 : 7; }

struct SceneAspects {
  long shape = 0, color = 0, position = 0, size = 0, background = 0;

  std::string shape_name() const { return shape_names()[static_cast<std::size_t>(shape)]; }
  std::string color_name() const { return color_names()[static_cast<std::size_t>(color)]; }
  std::string position_name() const { return position_names()[static_cast<std::size_t>(position)]; }
  std::string size_name() const { return size_names()[static_cast<std::size_t>(size)]; }
  std::string background_name() const { return color_names()[static_cast<std::size_t>(background)]; }
};

struct SyntheticScene {
  std::vector<std::uint8_t> image;  // interleaved RGB, row-major
  SceneAspects aspects;
  std::vector<std::string> captions;
};

struct ManifestEntry {
  std::string image_path;
  std::vector<std::string> captions;
  SceneAspects aspects;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
};

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace detail {

inline bool shape_hit(long shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;                                        // circle
    case 1: return std::max(std::abs(dx), std::abs(dy)) <= r * 0.85;                  // square
    case 2: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.55;            // triangle (apex up)
    case 3: return std::abs(dx) + std::abs(dy) <= r * 1.15;                           // diamond
    case 4:                                                                           // cross
      return (std::abs(dx) <= r / 2.8 && std::abs(dy) <= r) || (std::abs(dy) <= r / 2.8 && std::abs(dx) <= r);
    case 5: {                                                                         // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    }
    case 6: return std::abs(dy) <= r / 2.6 && std::abs(dx) <= r;                      // stripe
    case 7: return std::abs(dx) <= r / 2.6 && std::abs(dy) <= r;                      // column
  }
  return false;
}

}  // namespace detail

// Rasterizes one scene at 32x32. cx/cy are the shape center in pixels.
inline std::vector<std::uint8_t> render_scene(const SceneAspects& a, double cx, double cy) {
  std::vector<std::uint8_t> img(static_cast<std::size_t>(image_bytes));
  const Rgb bg = color_rgb(a.background);
  const Rgb fg = color_rgb(a.color);
  const double r = static_cast<double>(size_radius(a.size));
  for (long y = 0; y < image_side; ++y) {
    for (long x = 0; x < image_side; ++x) {
      const bool hit = detail::shape_hit(a.shape, static_cast<double>(x) - cx, static_cast<double>(y) - cy, r);
      const Rgb c = hit ? fg : bg;
      const long o = (y * image_side + x) * 3;
      img[static_cast<std::size_t>(o)] = c.r;
      img[static_cast<std::size_t>(o + 1)] = c.g;
      img[static_cast<std::size_t>(o + 2)] = c.b;
    }
  }
  return img;
}

// The caption set: one scene, several true sentences, each mentioning a
// different aspect subset.
inline std::vector<std::string> make_captions(const SceneAspects& a) {
  const std::string shape = a.shape_name(), color = a.color_name(), pos = a.position_name(), size = a.size_name(),
                    bg = a.background_name();
  return {
      "a photo of a " + color + " " + shape,
      "a " + shape + " in the " + pos,
      "a " + size + " shape on a " + bg + " background",
      "a " + color + " shape in the " + pos,
      "an image of a " + size + " " + color + " " + shape,
      "a " + size + " " + color + " " + shape + " in the " + pos + " on a " + bg + " background",
  };
}

inline SyntheticScene generate_scene(std::uint64_t seed, long index) {
  Rng rng(derive_seed(seed, "scene/" + std::to_string(index)));
  SyntheticScene s;
  s.aspects.shape = static_cast<long>(rng.uniform_int(shape_names().size()));
  s.aspects.color = static_cast<long>(rng.uniform_int(color_names().size()));
  s.aspects.position = static_cast<long>(rng.uniform_int(position_names().size()));
  s.aspects.size = static_cast<long>(rng.uniform_int(size_names().size()));
  do {
    s.aspects.background = static_cast<long>(rng.uniform_int(color_names().size()));
  } while (s.aspects.background == s.aspects.color);
  const long row = s.aspects.position / 3, col = s.aspects.position % 3;
  const double cx = 6.0 + 10.0 * col + (rng.uniform() * 2.0 - 1.0);
  const double cy = 6.0 + 10.0 * row + (rng.uniform() * 2.0 - 1.0);
  s.image = render_scene(s.aspects, cx, cy);
  s.captions = make_captions(s.aspects);
  return s;
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)
// ---------------------------------------------------------------------------

// Pixels come in as [0,1] floats, channel-planar; bytes go out interleaved.
inline std::string write_ppm(const float* chw, long w, long h) {
  for (long i = 0; i < 3 * w * h; ++i)
    if (!(chw[i] >= -1e-6f && chw[i] <= 1.0f + 1e-6f)) throw value_error("write_ppm: pixel values must lie in [0,1]");
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(3 * w * h));
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (long c = 0; c < 3; ++c) {
        const float v = std::clamp(chw[(c * h + y) * w + x], 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0f))));
      }
  return out;
}

inline std::string write_ppm_bytes(const std::uint8_t* interleaved, long w, long h) {
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(interleaved), static_cast<std::size_t>(3 * w * h));
  return out;
}

struct PpmImage {
  long w = 0, h = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB
};

inline PpmImage read_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {  // comment to end of line
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw format_error("read_ppm: truncated header");
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P6") throw format_error("read_ppm: bad magic");
  PpmImage img;
  try {
    img.w = std::stol(next_token());
    img.h = std::stol(next_token());
    if (std::stol(next_token()) != 255) throw format_error("read_ppm: unsupported maxval");
  } catch (const std::logic_error&) {
    throw format_error("read_ppm: malformed header");
  }
  if (img.w < 1 || img.h < 1) throw format_error("read_ppm: bad dimensions");
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(3 * img.w * img.h);
  if (bytes.size() - pos < need) throw format_error("read_ppm: truncated payload");
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + need));
  return img;
}

// Interleaved bytes -> channel-planar [0,1] floats.
inline std::vector<float> to_chw_float(const std::vector<std::uint8_t>& pixels, long w, long h) {
  std::vector<float> out(static_cast<std::size_t>(3 * w * h));
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (long c = 0; c < 3; ++c)
        out[static_cast<std::size_t>((c * h + y) * w + x)] =
            static_cast<float>(pixels[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// dataset generation and loading
// ---------------------------------------------------------------------------

inline Manifest generate_dataset(long n, std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (n < 1) throw value_error("generate_dataset: n must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "img", ec);
  if (ec) throw io_error("generate_dataset: cannot create " + (out_dir / "img").string());

  Manifest manifest;
  std::ofstream mf(out_dir / "manifest.jsonl", std::ios::binary);
  if (!mf) throw io_error("generate_dataset: cannot open manifest for writing");
  for (long i = 0; i < n; ++i) {
    SyntheticScene s = generate_scene(seed, i);
    char name[32];
    std::snprintf(name, sizeof(name), "img/%06ld.ppm", i);
    {
      std::ofstream img(out_dir / name, std::ios::binary);
      if (!img) throw io_error("generate_dataset: cannot write image file");
      const std::string ppm = write_ppm_bytes(s.image.data(), image_side, image_side);
      img.write(ppm.data(), static_cast<long>(ppm.size()));
    }
    nlohmann::json j;
    j["image"] = name;
    j["captions"] = s.captions;
    j["aspects"] = {{"shape", s.aspects.shape_name()},
                    {"color", s.aspects.color_name()},
                    {"position", s.aspects.position_name()},
                    {"size", s.aspects.size_name()},
                    {"background", s.aspects.background_name()}};
    mf << j.dump() << "\n";
    manifest.entries.push_back({name, s.captions, s.aspects});
  }
  return manifest;
}

namespace detail {

inline long index_of(const std::vector<std::string>& names, const std::string& s, const char* what) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<long>(i);
  throw format_error(std::string("manifest: unknown ") + what + " '" + s + "'");
}

}  // namespace detail

inline Manifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.jsonl", std::ios::binary);
  if (!mf) throw io_error("load_manifest: cannot open " + (dir / "manifest.jsonl").string());
  Manifest manifest;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw format_error("load_manifest: malformed JSON line");
    ManifestEntry e;
    e.image_path = j.at("image").get<std::string>();
    e.captions = j.at("captions").get<std::vector<std::string>>();
    const auto& a = j.at("aspects");
    e.aspects.shape = detail::index_of(shape_names(), a.at("shape").get<std::string>(), "shape");
    e.aspects.color = detail::index_of(color_names(), a.at("color").get<std::string>(), "color");
    e.aspects.position = detail::index_of(position_names(), a.at("position").get<std::string>(), "position");
    e.aspects.size = detail::index_of(size_names(), a.at("size").get<std::string>(), "size");
    e.aspects.background = detail::index_of(color_names(), a.at("background").get<std::string>(), "background");
    if (e.captions.empty()) throw format_error("load_manifest: entry without captions");
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// caption truthfulness
// ---------------------------------------------------------------------------

// Maps a caption back to aspect predicates and checks them against the scene
// record. Color words name the shape unless they sit right before
// "background"; the words after "in the" name the position.
inline bool verify_caption(const std::string& caption, const SceneAspects& a) {
  std::vector<std::string> words;
  std::istringstream is(caption);
  for (std::string w; is >> w;) words.push_back(w);

  const auto is_in = [](const std::vector<std::string>& names, const std::string& w) {
    return std::find(names.begin(), names.end(), w) != names.end();
  };

  for (std::size_t i = 0; i < words.size(); ++i) {
    const std::string& w = words[i];
    if (is_in(shape_names(), w)) {
      if (w != a.shape_name()) return false;
    } else if (is_in(size_names(), w)) {
      if (w != a.size_name()) return false;
    } else if (is_in(color_names(), w)) {
      const bool is_bg = i + 1 < words.size() && words[i + 1] == "background";
      if (is_bg ? w != a.background_name() : w != a.color_name()) return false;
    } else if (w == "the" && i > 0 && words[i - 1] == "in") {
      std::string pos = i + 1 < words.size() ? words[i + 1] : "";
      if (pos != "center" && i + 2 < words.size() && words[i + 2] != "on") pos += " " + words[i + 2];
      if (pos != a.position_name()) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// vocabulary and tokenizer
// ---------------------------------------------------------------------------

struct Vocabulary {
  std::vector<std::string> words;          // id = tok::first_word + index
  std::map<std::string, int> index;

  long size() const { return tok::first_word + static_cast<long>(words.size()); }
  int id_of(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? tok::unk : it->second;
  }
};

inline Vocabulary build_vocabulary(const Manifest& manifest) {
  std::set<std::string> uniq;
  for (const auto& e : manifest.entries)
    for (const auto& c : e.captions) {
      std::istringstream is(c);
      for (std::string w; is >> w;) uniq.insert(w);
    }
  Vocabulary v;
  for (const auto& w : uniq) {
    v.index[w] = static_cast<int>(tok::first_word + v.words.size());
    v.words.push_back(w);
  }
  return v;
}

inline void save_vocabulary(const Vocabulary& v, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("save_vocabulary: cannot open " + path.string());
  for (const auto& w : v.words) f << w << "\n";
}

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("load_vocabulary: cannot open " + path.string());
  Vocabulary v;
  for (std::string w; std::getline(f, w);) {
    if (w.empty()) continue;
    v.index[w] = static_cast<int>(tok::first_word + v.words.size());
    v.words.push_back(w);
  }
  return v;
}

// [<bos>, word ids, <eos>, <pad>...] of fixed length; captions that do not
// fit are truncated before the <eos> (and noted on stderr).
inline std::vector<int> tokenize(const std::string& caption, const Vocabulary& vocab, long context_length) {
  if (context_length < 3) throw value_error("tokenize: context_length must be >= 3");
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(context_length));
  ids.push_back(tok::bos);
  std::istringstream is(caption);
  for (std::string w; is >> w;) {
    if (static_cast<long>(ids.size()) == context_length - 1) {
      std::fprintf(stderr, "tokenize: truncating caption '%s' to %ld tokens\n", caption.c_str(), context_length);
      break;
    }
    ids.push_back(vocab.id_of(w));
  }
  ids.push_back(tok::eos);
  ids.resize(static_cast<std::size_t>(context_length), tok::pad);
  return ids;
}

inline TokenBatch tokenize_batch(const std::vector<std::string>& captions, const Vocabulary& vocab,
                                 long context_length) {
  TokenBatch tb;
  tb.n = static_cast<long>(captions.size());
  tb.len = context_length;
  tb.ids.reserve(static_cast<std::size_t>(tb.n * tb.len));
  for (const auto& c : captions) {
    auto ids = tokenize(c, vocab, context_length);
    tb.ids.insert(tb.ids.end(), ids.begin(), ids.end());
  }
  return tb;
}

// ---------------------------------------------------------------------------
// in-memory dataset and batch sampling
// ---------------------------------------------------------------------------

struct Dataset {
  Manifest manifest;
  std::vector<std::vector<std::uint8_t>> images;  // interleaved RGB per scene
  Vocabulary vocab;

  long size() const { return static_cast<long>(manifest.entries.size()); }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = load_manifest(dir);
  ds.images.reserve(ds.manifest.entries.size());
  for (const auto& e : ds.manifest.entries) {
    std::ifstream f(dir / e.image_path, std::ios::binary);
    if (!f) throw io_error("load_dataset: missing image " + e.image_path);
    std::stringstream buf;
    buf << f.rdbuf();
    PpmImage img = read_ppm(buf.str());
    if (img.w != image_side || img.h != image_side) throw format_error("load_dataset: unexpected image size");
    ds.images.push_back(std::move(img.pixels));
  }
  ds.vocab = build_vocabulary(ds.manifest);
  return ds;
}

struct Batch {
  Tensor<float> images;          // [N, 3*H*W] channel-planar in [0,1]
  std::vector<long> scene_idx;   // which manifest entry each row came from
  std::vector<long> caption_idx; // which caption of that entry
};

// Deterministic without-replacement sampler. Epoch e visits the scenes in a
// permutation derived from (seed, e); the caption for global draw p is an
// independent uniform pick from that scene's caption list. A pure function
// of (seed, step), which is what makes checkpoint resume bitwise exact.
inline Batch sample_batch(const Dataset& ds, long batch_size, std::uint64_t seed, long step) {
  const long n = ds.size();
  if (batch_size > n) throw value_error("sample_batch: batch size exceeds dataset size");
  if (batch_size < 1 || step < 0) throw value_error("sample_batch: bad arguments");

  Batch batch;
  batch.images = Tensor<float>::zeros({batch_size, image_bytes});
  long epoch = -1;
  std::vector<long> perm;
  for (long i = 0; i < batch_size; ++i) {
    const long p = step * batch_size + i;
    const long e = p / n;
    if (e != epoch) {
      Rng r(derive_seed(seed, "epoch/" + std::to_string(e)));
      perm = r.permutation(n);
      epoch = e;
    }
    const long scene = perm[static_cast<std::size_t>(p % n)];
    Rng rc(derive_seed(seed, "caption/" + std::to_string(p)));
    const long cap = static_cast<long>(rc.uniform_int(ds.manifest.entries[static_cast<std::size_t>(scene)].captions.size()));
    batch.scene_idx.push_back(scene);
    batch.caption_idx.push_back(cap);
    const auto chw = to_chw_float(ds.images[static_cast<std::size_t>(scene)], image_side, image_side);
    std::copy(chw.begin(), chw.end(), batch.images.data() + i * image_bytes);
  }
  return batch;
}

inline TokenBatch batch_tokens(const Dataset& ds, const Batch& batch, long context_length) {
  std::vector<std::string> captions;
  captions.reserve(batch.scene_idx.size());
  for (std::size_t i = 0; i < batch.scene_idx.size(); ++i) {
    const auto& e = ds.manifest.entries[static_cast<std::size_t>(batch.scene_idx[i])];
    captions.push_back(e.captions[static_cast<std::size_t>(batch.caption_idx[i])]);
  }
  return tokenize_batch(captions, ds.vocab, context_length);
}

// Images of a fixed scene-index list as one [N, 3*H*W] tensor.
inline Tensor<float> image_tensor(const Dataset& ds, const std::vector<long>& idx) {
  Tensor<float> out = Tensor<float>::zeros({static_cast<long>(idx.size()), image_bytes});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto chw = to_chw_float(ds.images[static_cast<std::size_t>(idx[i])], image_side, image_side);
    std::copy(chw.begin(), chw.end(), out.data() + static_cast<long>(i) * image_bytes);
  }
  return out;
}

}  // namespace llip::data
