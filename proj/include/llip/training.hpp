#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "llip/data.hpp"
#include "llip/encoders.hpp"
#include "llip/mixer.hpp"
#include "llip/objectives.hpp"

namespace llip {

struct TrainConfig {
  PoolingVariant variant = PoolingVariant::llip;
  long steps = 5000;
  long batch = 64;
  double lr_peak = 3e-4;
  long warmup_steps = 200;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  std::uint64_t seed = 1;
  long eval_every = 500;

  void validate() const {
    if (steps < 1) throw config_error("train: steps must be >= 1");
    if (batch < 2) throw config_error("train: batch must be >= 2 (the objective needs in-batch negatives)");
    if (!(lr_peak > 0)) throw config_error("train: lr_peak must be positive");
    if (warmup_steps < 0 || warmup_steps >= steps) throw config_error("train: warmup must lie in [0, steps)");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw config_error("train: betas must lie in [0,1)");
    if (weight_decay < 0) throw config_error("train: weight_decay must be >= 0");
    if (eval_every < 1) throw config_error("train: eval_every must be >= 1");
  }
};

// Linear warmup to lr_peak, then cosine decay to zero at cfg.steps.
inline double lr_schedule(long step, const TrainConfig& cfg) {
  if (step < 0) throw value_error("lr_schedule: negative step");
  if (step <= cfg.warmup_steps)
    return cfg.warmup_steps == 0 ? cfg.lr_peak : cfg.lr_peak * static_cast<double>(step) / cfg.warmup_steps;
  const double t = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.steps - cfg.warmup_steps);
  return 0.5 * cfg.lr_peak * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

// ---------------------------------------------------------------------------
// model aggregate
// ---------------------------------------------------------------------------

template <class S>
struct Model {
  VitConfig vit_cfg;
  TextConfig txt_cfg;
  PoolingVariant variant = PoolingVariant::llip;
  VitParams<S> vit;
  TextParams<S> txt;
  MixerParams<S> mixer;
  LossParams<S> loss;
};

template <class S>
Model<S> init_model(const VitConfig& vit_cfg, const TextConfig& txt_cfg, long mixer_heads, double tau,
                    PoolingVariant variant, std::uint64_t seed) {
  vit_cfg.validate();
  txt_cfg.validate();
  if (variant == PoolingVariant::siglip_cls && vit_cfg.mixture_tokens != 1)
    throw config_error("siglip variant requires exactly one learned token");
  Model<S> m;
  m.vit_cfg = vit_cfg;
  m.txt_cfg = txt_cfg;
  m.variant = variant;
  const std::uint64_t init_seed = derive_seed(seed, "init");
  m.vit = init_vit_params<S>(vit_cfg, init_seed);
  m.txt = init_text_params<S>(txt_cfg, init_seed);
  m.mixer = init_mixer_params<S>(txt_cfg.width, vit_cfg.width, mixer_heads, static_cast<S>(tau),
                                 variant == PoolingVariant::learned_average, init_seed);
  m.loss = init_loss_params<S>();
  return m;
}

template <class S, class F>
void visit_params(Model<S>& m, F&& f) {
  visit_params(m.vit, f);
  visit_params(m.txt, f);
  visit_params(m.mixer, f);
  visit_params(m.loss, f);
}

// Score grid for an (images, captions) pair batch under the model's variant.
// Built from taped primitives, so it is the training forward as well.
template <class S>
Tensor<S> score_grid(Model<S>& m, const Tensor<S>& images, const TokenBatch& tokens) {
  auto h = encode_image(images, m.vit, m.vit_cfg);
  auto g = encode_text(tokens, m.txt, m.txt_cfg);
  return pairwise_scores(pool_variant(h, g, m.mixer, m.variant));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <class S>
struct AdamState {
  std::map<std::string, std::vector<S>> m, v;
  long step = 0;  // completed optimizer steps
};

// One decoupled-weight-decay Adam update for a single named tensor. The
// caller decides whether cfg.weight_decay applies (wd_scale 0 or 1).
template <class S, class GradVec>
void adamw_update(const std::string& name, Tensor<S>& p, const GradVec& grad, AdamState<S>& st, long step,
                  double lr, const TrainConfig& cfg, double wd_scale = 1.0) {
  if (step < 1) throw value_error("adamw_update: step must be >= 1");
  auto& m = st.m[name];
  auto& v = st.v[name];
  if (m.empty()) m.assign(grad.size(), S(0));
  if (v.empty()) v.assign(grad.size(), S(0));
  if (m.size() != grad.size() || static_cast<long>(grad.size()) != p.numel())
    throw shape_error("adamw_update: moment/gradient size mismatch for " + name);
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S bc1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
  const S bc2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
  const S eps = static_cast<S>(1e-8), lrs = static_cast<S>(lr), wd = static_cast<S>(cfg.weight_decay * wd_scale);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const S g = grad[i];
    if (!std::isfinite(static_cast<double>(g)))
      throw numeric_error("adamw_update: non-finite gradient in " + name);
    m[i] = b1 * m[i] + (S(1) - b1) * g;
    v[i] = b2 * v[i] + (S(1) - b2) * g * g;
    const S mhat = m[i] / bc1;
    const S vhat = v[i] / bc2;
    S pv = p.data()[static_cast<long>(i)];
    pv -= lrs * (mhat / (std::sqrt(vhat) + eps) + wd * pv);
    p.data()[static_cast<long>(i)] = pv;
  }
}

// Updates every parameter that received a gradient this step, then clears
// the gradients. Iteration order is the fixed visitor order. All gradients
// are validated before anything mutates, so a NaN aborts with the previous
// parameters intact.
template <class S>
void adamw_step(Model<S>& model, AdamState<S>& st, double lr, const TrainConfig& cfg) {
  visit_params(model, [&](const std::string& name, Tensor<S>& p) {
    if (!p.has_grad()) return;
    for (S g : p.grad())
      if (!std::isfinite(static_cast<double>(g))) throw numeric_error("adamw_step: non-finite gradient in " + name);
  });
  const long step = st.step + 1;
  visit_params(model, [&](const std::string& name, Tensor<S>& p) {
    if (!p.has_grad()) return;
    // matrices decay; vectors and scalars (norm gains, biases, loss scale) do not
    adamw_update(name, p, p.grad(), st, step, lr, cfg, p.rank() >= 2 ? 1.0 : 0.0);
    p.zero_grad();
  });
  st.step = step;
}

// ---------------------------------------------------------------------------
// checkpoint file format
// ---------------------------------------------------------------------------
//
// magic "LLIP" | version u32 LE | entry count u32 LE
// per entry: name_len u16 LE | name | ndim u8 | dims u32 LE each | f32 LE data
// trailing CRC32 (IEEE, reflected) over everything after the 12-byte header.

constexpr std::uint32_t checkpoint_version = 1;

namespace detail {

inline std::uint32_t crc32(const unsigned char* data, std::size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::string& s;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > s.size()) throw format_error("checkpoint: truncated file");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(s[pos]) | (static_cast<std::uint16_t>(static_cast<std::uint8_t>(s[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(s[pos++]);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string v = s.substr(pos, n);
    pos += n;
    return v;
  }
};

}  // namespace detail

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct CheckpointData {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  void add_scalar(const std::string& name, float v) { entries.push_back({name, {1}, {v}}); }
  float scalar(const std::string& name) const {
    const auto* e = find(name);
    if (!e || e->data.size() != 1) throw compat_error("checkpoint: missing scalar entry " + name);
    return e->data[0];
  }
};

inline std::string serialize_checkpoint(const CheckpointData& ckpt) {
  std::string body;
  for (const auto& e : ckpt.entries) {
    if (e.name.size() > 0xFFFF) throw value_error("checkpoint: entry name too long");
    if (e.dims.size() > 0xFF) throw value_error("checkpoint: too many dims");
    detail::put_u16(body, static_cast<std::uint16_t>(e.name.size()));
    body += e.name;
    body.push_back(static_cast<char>(e.dims.size()));
    std::uint64_t n = 1;
    for (std::uint32_t d : e.dims) {
      detail::put_u32(body, d);
      n *= d;
    }
    if (n != e.data.size()) throw shape_error("checkpoint: dims do not match data for " + e.name);
    const std::size_t off = body.size();
    body.resize(off + 4 * e.data.size());
    std::memcpy(body.data() + off, e.data.data(), 4 * e.data.size());
  }
  std::string out = "LLIP";
  detail::put_u32(out, checkpoint_version);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  out += body;
  detail::put_u32(out, detail::crc32(reinterpret_cast<const unsigned char*>(body.data()), body.size()));
  return out;
}

inline CheckpointData parse_checkpoint(const std::string& bytes) {
  detail::ByteReader r{bytes};
  if (r.bytes(4) != "LLIP") throw format_error("checkpoint: bad magic");
  if (r.u32() != checkpoint_version) throw format_error("checkpoint: unsupported version");
  const std::uint32_t count = r.u32();
  if (bytes.size() < 16) throw format_error("checkpoint: truncated file");
  const std::string body = bytes.substr(12, bytes.size() - 16);
  const std::uint32_t stored_crc =
      detail::ByteReader{bytes, bytes.size() - 4}.u32();
  if (detail::crc32(reinterpret_cast<const unsigned char*>(body.data()), body.size()) != stored_crc)
    throw format_error("checkpoint: CRC mismatch");
  CheckpointData ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint16_t name_len = r.u16();
    e.name = r.bytes(name_len);
    const std::uint8_t ndim = r.u8();
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      e.dims.push_back(r.u32());
      n *= e.dims.back();
    }
    const std::string payload = r.bytes(4 * n);
    e.data.resize(n);
    std::memcpy(e.data.data(), payload.data(), 4 * n);
    ckpt.entries.push_back(std::move(e));
  }
  if (r.pos != bytes.size() - 4) throw format_error("checkpoint: trailing bytes");
  return ckpt;
}

inline void save_checkpoint_file(const CheckpointData& ckpt, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("save_checkpoint: cannot open " + path.string());
  const std::string bytes = serialize_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<long>(bytes.size()));
  if (!f) throw io_error("save_checkpoint: write failed for " + path.string());
}

inline CheckpointData load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("load_checkpoint: cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// model <-> checkpoint
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t f32_bits(float v) { return std::bit_cast<std::uint32_t>(v); }
inline float bits_f32(std::uint32_t v) { return std::bit_cast<float>(v); }

inline void echo_config(CheckpointData& c, const Model<float>& m, const TrainConfig& cfg) {
  c.add_scalar("cfg.vit.image_size", static_cast<float>(m.vit_cfg.image_size));
  c.add_scalar("cfg.vit.patch_size", static_cast<float>(m.vit_cfg.patch_size));
  c.add_scalar("cfg.vit.width", static_cast<float>(m.vit_cfg.width));
  c.add_scalar("cfg.vit.depth", static_cast<float>(m.vit_cfg.depth));
  c.add_scalar("cfg.vit.heads", static_cast<float>(m.vit_cfg.heads));
  c.add_scalar("cfg.vit.mixture_tokens", static_cast<float>(m.vit_cfg.mixture_tokens));
  c.add_scalar("cfg.vit.patch_tokens", m.vit_cfg.emit_patch_tokens ? 1.0f : 0.0f);
  c.add_scalar("cfg.txt.vocab", static_cast<float>(m.txt_cfg.vocab_size));
  c.add_scalar("cfg.txt.context", static_cast<float>(m.txt_cfg.context_length));
  c.add_scalar("cfg.txt.width", static_cast<float>(m.txt_cfg.width));
  c.add_scalar("cfg.txt.depth", static_cast<float>(m.txt_cfg.depth));
  c.add_scalar("cfg.txt.heads", static_cast<float>(m.txt_cfg.heads));
  c.add_scalar("cfg.mixer.heads", static_cast<float>(m.mixer.heads));
  c.add_scalar("cfg.mixer.tau", m.mixer.tau);
  c.add_scalar("cfg.variant", static_cast<float>(static_cast<int>(m.variant)));
  c.add_scalar("cfg.train.steps", static_cast<float>(cfg.steps));
  c.add_scalar("cfg.train.batch", static_cast<float>(cfg.batch));
  c.add_scalar("cfg.train.lr_peak", static_cast<float>(cfg.lr_peak));
  c.add_scalar("cfg.train.warmup", static_cast<float>(cfg.warmup_steps));
  c.add_scalar("cfg.train.weight_decay", static_cast<float>(cfg.weight_decay));
  c.add_scalar("cfg.train.beta1", static_cast<float>(cfg.beta1));
  c.add_scalar("cfg.train.beta2", static_cast<float>(cfg.beta2));
  c.add_scalar("cfg.seed.lo", bits_f32(static_cast<std::uint32_t>(cfg.seed & 0xFFFFFFFFu)));
  c.add_scalar("cfg.seed.hi", bits_f32(static_cast<std::uint32_t>(cfg.seed >> 32)));
}

inline void check_echo(const CheckpointData& c, const Model<float>& m, const TrainConfig& cfg) {
  CheckpointData expect;
  echo_config(expect, m, cfg);
  for (const auto& e : expect.entries) {
    const auto* got = c.find(e.name);
    if (!got) throw compat_error("checkpoint: missing config entry " + e.name);
    if (f32_bits(got->data[0]) != f32_bits(e.data[0]))
      throw compat_error("checkpoint: config mismatch on " + e.name);
  }
}

}  // namespace detail

inline CheckpointData make_checkpoint(Model<float>& model, const AdamState<float>& st, const TrainConfig& cfg) {
  CheckpointData c;
  visit_params(model, [&](const std::string& name, Tensor<float>& p) {
    CheckpointEntry e;
    e.name = name;
    for (long d : p.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
    if (e.dims.empty()) e.dims.push_back(1);
    e.data.assign(p.values().begin(), p.values().end());
    c.entries.push_back(std::move(e));
  });
  for (const auto& [name, m] : st.m) c.entries.push_back({"opt.m." + name, {static_cast<std::uint32_t>(m.size())}, m});
  for (const auto& [name, v] : st.v) c.entries.push_back({"opt.v." + name, {static_cast<std::uint32_t>(v.size())}, v});
  c.add_scalar("opt.step", static_cast<float>(st.step));
  detail::echo_config(c, model, cfg);
  return c;
}

inline void restore_checkpoint(Model<float>& model, AdamState<float>& st, const TrainConfig& cfg,
                               const CheckpointData& c) {
  detail::check_echo(c, model, cfg);
  visit_params(model, [&](const std::string& name, Tensor<float>& p) {
    const auto* e = c.find(name);
    if (!e) throw compat_error("checkpoint: missing parameter " + name);
    long n = 1;
    for (std::uint32_t d : e->dims) n *= d;
    if (n != p.numel()) throw compat_error("checkpoint: shape mismatch for " + name);
    p.values().assign(e->data.begin(), e->data.end());
    p.zero_grad();
    const auto* em = c.find("opt.m." + name);
    const auto* ev = c.find("opt.v." + name);
    if (em) st.m[name] = em->data;
    if (ev) st.v[name] = ev->data;
  });
  st.step = static_cast<long>(c.scalar("opt.step"));
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  std::filesystem::path checkpoint_path;
  double final_loss = 0;
  long steps_run = 0;
};

// One optimization step: sample, forward under the variant, backward, AdamW.
// Returns (loss, in-batch image->text top-1 hit rate).
template <class S>
std::pair<double, double> train_step(Model<S>& model, AdamState<S>& st, const TrainConfig& cfg,
                                     const data::Dataset& ds, long step_index) {
  auto batch = data::sample_batch(ds, cfg.batch, derive_seed(cfg.seed, "sampling"), step_index - 1);
  auto tokens = data::batch_tokens(ds, batch, model.txt_cfg.context_length);

  double loss_value = 0, batch_top1 = 0;
  {
    Tape<S> tape;
    auto scores = score_grid(model, batch.images, tokens);
    auto loss = detail::sigmoid_pair_loss(scores, model.loss);
    loss_value = static_cast<double>(loss.item());
    backward(loss, tape);

    const long n = scores.dim(0);
    long hits = 0;
    for (long i = 0; i < n; ++i) {
      long best = 0;
      for (long j = 1; j < n; ++j)
        if (scores.at({i, j}) > scores.at({i, best})) best = j;
      hits += best == i;
    }
    batch_top1 = static_cast<double>(hits) / static_cast<double>(n);
  }
  adamw_step(model, st, lr_schedule(step_index, cfg), cfg);
  return {loss_value, batch_top1};
}

// Runs (or resumes) training, appending a metrics CSV and writing the final
// checkpoint. halt_at stops early with a resumable checkpoint, which is also
// how the resume-equals-uninterrupted contract is exercised.
inline TrainResult train_run(Model<float>& model, const TrainConfig& cfg, const data::Dataset& ds,
                             const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                             long halt_at = -1) {
  cfg.validate();
  if (cfg.batch > ds.size()) throw config_error("train: batch exceeds dataset size");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw io_error("train: cannot create output dir " + out_dir.string());

  AdamState<float> st;
  // fixed moment key set regardless of which parameters receive gradients
  visit_params(model, [&](const std::string& name, Tensor<float>& p) {
    st.m[name].assign(static_cast<std::size_t>(p.numel()), 0.0f);
    st.v[name].assign(static_cast<std::size_t>(p.numel()), 0.0f);
  });
  if (resume_from) restore_checkpoint(model, st, cfg, load_checkpoint_file(*resume_from));

  const long stop = halt_at > 0 ? std::min(halt_at, cfg.steps) : cfg.steps;
  std::ofstream metrics(out_dir / "metrics.csv", resume_from ? std::ios::app : std::ios::trunc);
  if (!metrics) throw io_error("train: cannot open metrics.csv");
  if (!resume_from) metrics << "step,loss,lr,batch_top1\n";

  TrainResult result;
  char line[160];
  for (long step = st.step + 1; step <= stop; ++step) {
    double loss_value, top1;
    try {
      std::tie(loss_value, top1) = train_step(model, st, cfg, ds, step);
    } catch (const numeric_error&) {
      // parameters still hold the last completed step; keep them reachable
      save_checkpoint_file(make_checkpoint(model, st, cfg), out_dir / "last_good.ckpt");
      throw;
    }
    result.final_loss = loss_value;
    result.steps_run = step;
    if (step % cfg.eval_every == 0 || step == stop) {
      std::snprintf(line, sizeof(line), "%ld,%.9g,%.9g,%.9g\n", step, loss_value, lr_schedule(step, cfg), top1);
      metrics << line;
    }
  }

  result.checkpoint_path = out_dir / "final.ckpt";
  save_checkpoint_file(make_checkpoint(model, st, cfg), result.checkpoint_path);
  return result;
}

}  // namespace llip
