// Mask-estimation separation network: STFT front end, a temporal
// convolutional separator on log-compressed magnitudes, and sum-to-one
// masks applied with the mixture phase.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixsep/autodiff.hpp"
#include "mixsep/dsp.hpp"

namespace mixsep {

struct ModelConfig {
  int repeats = 3;            // repeats of the dilated-conv stack
  int dilations_per_block = 4;  // dilations double: 1, 2, 4, 8, ...
  int channels = 64;          // residual width
  int hidden = 64;            // width inside a block
  int n_outputs = 2;          // mask channels (4 for the MixIT head)
  StftConfig stft;
  int sample_rate = 8000;

  void validate() const {
    if (repeats < 1 || dilations_per_block < 1) throw std::invalid_argument("ModelConfig: need >= 1 block");
    if (channels < 1 || hidden < 1) throw std::invalid_argument("ModelConfig: widths must be positive");
    if (n_outputs != 2 && n_outputs != 4) throw std::invalid_argument("ModelConfig: n_outputs must be 2 or 4");
    stft.validate();
  }

  // Receptive field in frames of the stacked dilated convolutions (kernel 3).
  int receptive_field_frames() const {
    int sum = 0;
    for (int r = 0; r < repeats; ++r)
      for (int d = 0; d < dilations_per_block; ++d) sum += 1 << d;
    return 1 + 2 * sum;
  }
};

inline void to_json(nlohmann::json& j, const StftConfig& c) {
  j = {{"window_size", c.window_size}, {"hop_size", c.hop_size}, {"window_kind", c.window_kind}};
}
inline void from_json(const nlohmann::json& j, StftConfig& c) {
  c.window_size = j.at("window_size");
  c.hop_size = j.at("hop_size");
  c.window_kind = j.at("window_kind");
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"repeats", c.repeats},   {"dilations_per_block", c.dilations_per_block},
       {"channels", c.channels}, {"hidden", c.hidden},
       {"n_outputs", c.n_outputs}, {"stft", c.stft},
       {"sample_rate", c.sample_rate}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.repeats = j.at("repeats");
  c.dilations_per_block = j.at("dilations_per_block");
  c.channels = j.at("channels");
  c.hidden = j.at("hidden");
  c.n_outputs = j.at("n_outputs");
  c.stft = j.at("stft");
  c.sample_rate = j.at("sample_rate");
}

struct ModelParameters {
  ModelConfig config;
  long step = 0;  // training step counter tau
  std::vector<std::pair<std::string, Arr>> tensors;

  Arr& at(const std::string& name) {
    for (auto& [n, a] : tensors)
      if (n == name) return a;
    throw std::out_of_range("no parameter named " + name);
  }
  const Arr& at(const std::string& name) const {
    return const_cast<ModelParameters*>(this)->at(name);
  }

  bool finite() const {
    for (const auto& [n, a] : tensors)
      if (!a.allFinite()) return false;
    return true;
  }
};

// A frozen, detached copy of the parameters; never receives gradients.
struct TeacherSnapshot {
  ModelParameters params;
};

inline TeacherSnapshot snapshot_teacher(const ModelParameters& params) {
  if (!params.finite()) throw std::runtime_error("snapshot_teacher: non-finite parameters");
  return TeacherSnapshot{params};
}

namespace model {

inline ModelParameters init(const ModelConfig& cfg, std::mt19937& rng) {
  cfg.validate();
  ModelParameters p;
  p.config = cfg;
  const int f = cfg.stft.num_bins();
  auto randn = [&rng](int rows, int cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Arr a(rows, cols);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = dist(rng);
    return a;
  };
  auto fan_in = [&](int rows, int cols) { return randn(rows, cols, std::sqrt(1.0 / double(cols))); };

  p.tensors.emplace_back("in.w", fan_in(cfg.channels, f));
  p.tensors.emplace_back("in.b", Arr::Zero(cfg.channels, 1));
  for (int r = 0; r < cfg.repeats; ++r) {
    for (int d = 0; d < cfg.dilations_per_block; ++d) {
      std::string pre = "block" + std::to_string(r) + "." + std::to_string(d) + ".";
      p.tensors.emplace_back(pre + "ln1.g", Arr::Ones(cfg.channels, 1));
      p.tensors.emplace_back(pre + "ln1.b", Arr::Zero(cfg.channels, 1));
      p.tensors.emplace_back(pre + "w1", fan_in(cfg.hidden, cfg.channels));
      p.tensors.emplace_back(pre + "b1", Arr::Zero(cfg.hidden, 1));
      p.tensors.emplace_back(pre + "a1", Arr::Constant(cfg.hidden, 1, 0.25));
      p.tensors.emplace_back(pre + "dw", randn(cfg.hidden, 3, std::sqrt(1.0 / 3.0)));
      p.tensors.emplace_back(pre + "a2", Arr::Constant(cfg.hidden, 1, 0.25));
      p.tensors.emplace_back(pre + "ln2.g", Arr::Ones(cfg.hidden, 1));
      p.tensors.emplace_back(pre + "ln2.b", Arr::Zero(cfg.hidden, 1));
      p.tensors.emplace_back(pre + "w2", fan_in(cfg.channels, cfg.hidden));
      p.tensors.emplace_back(pre + "b2", Arr::Zero(cfg.channels, 1));
    }
  }
  p.tensors.emplace_back("out.ln.g", Arr::Ones(cfg.channels, 1));
  p.tensors.emplace_back("out.ln.b", Arr::Zero(cfg.channels, 1));
  p.tensors.emplace_back("out.a", Arr::Constant(cfg.channels, 1, 0.25));
  p.tensors.emplace_back("out.w", fan_in(cfg.n_outputs * f, cfg.channels));
  p.tensors.emplace_back("out.b", Arr::Zero(cfg.n_outputs * f, 1));
  return p;
}

// Forward pass on one mixture. The returned estimates are time-domain
// [1 x L] variables; masks are the stacked softmax output.
struct Forward {
  Spectrogram mix_spec;
  ad::Var masks;                  // [(n_outputs*F) x T]
  std::vector<ad::Var> estimates; // n_outputs, each [1 x L]
};

struct TapedParams {
  std::vector<std::pair<std::string, ad::Var>> vars;

  ad::Var at(const std::string& name) const {
    for (const auto& [n, v] : vars)
      if (n == name) return v;
    throw std::out_of_range("no taped parameter named " + name);
  }
};

inline TapedParams put_on_tape(ad::Tape& tape, const ModelParameters& params) {
  TapedParams tp;
  tp.vars.reserve(params.tensors.size());
  for (const auto& [name, arr] : params.tensors) tp.vars.emplace_back(name, tape.leaf(arr));
  return tp;
}

inline Forward forward(ad::Tape& tape, const TapedParams& w, const ModelConfig& cfg,
                       const AudioSegment& mix) {
  cfg.validate();
  Forward out;
  out.mix_spec = dsp::stft(mix, cfg.stft);
  const int f = cfg.stft.num_bins();

  Arr feat = (1.0 + out.mix_spec.magnitude).log();
  ad::Var h = ad::add_bias(ad::matmul(w.at("in.w"), tape.constant(feat)), w.at("in.b"));
  for (int r = 0; r < cfg.repeats; ++r) {
    for (int d = 0; d < cfg.dilations_per_block; ++d) {
      std::string pre = "block" + std::to_string(r) + "." + std::to_string(d) + ".";
      ad::Var u = ad::chan_layernorm(h, w.at(pre + "ln1.g"), w.at(pre + "ln1.b"));
      u = ad::add_bias(ad::matmul(w.at(pre + "w1"), u), w.at(pre + "b1"));
      u = ad::prelu(u, w.at(pre + "a1"));
      u = ad::dilated_conv(u, w.at(pre + "dw"), 1 << d);
      u = ad::prelu(u, w.at(pre + "a2"));
      u = ad::chan_layernorm(u, w.at(pre + "ln2.g"), w.at(pre + "ln2.b"));
      u = ad::add_bias(ad::matmul(w.at(pre + "w2"), u), w.at(pre + "b2"));
      h = ad::add(h, u);
    }
  }
  h = ad::prelu(ad::chan_layernorm(h, w.at("out.ln.g"), w.at("out.ln.b")), w.at("out.a"));
  ad::Var logits = ad::add_bias(ad::matmul(w.at("out.w"), h), w.at("out.b"));
  out.masks = ad::group_softmax(logits, cfg.n_outputs);

  ad::Var mag = tape.constant(out.mix_spec.magnitude);
  for (int k = 0; k < cfg.n_outputs; ++k) {
    ad::Var mask_k = ad::slice_rows(out.masks, k * f, f);
    ad::Var est_mag = ad::mul(mask_k, mag);
    out.estimates.push_back(
        ad::istft_mag(est_mag, out.mix_spec.phase, cfg.stft, out.mix_spec.num_samples));
  }

  for (const auto& est : out.estimates)
    if (!tape.value(est).allFinite())
      throw std::runtime_error("model forward produced non-finite output");
  return out;
}

// Inference-only forward returning plain waveforms.
inline std::vector<AudioSegment> separate(const ModelParameters& params, const AudioSegment& mix) {
  ad::Tape tape(false);
  TapedParams w = put_on_tape(tape, params);
  Forward fwd = forward(tape, w, params.config, mix);
  std::vector<AudioSegment> out;
  for (const auto& est : fwd.estimates) {
    const Arr& v = tape.value(est);
    out.emplace_back(std::vector<double>(v.data(), v.data() + v.size()), mix.sample_rate);
  }
  return out;
}

// ---- checkpoint format -----------------------------------------------------
//
// "MSEPCKPT" magic, u32 version, u64 header length, JSON header (config,
// tensor names/shapes, step, optimizer state shapes, rng state), then the
// raw little-endian doubles for all tensors in header order.

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParameters params;
  std::map<std::string, std::pair<Arr, Arr>> adam_state;  // name -> (m, v)
  long adam_t = 0;
  std::string rng_state;
  nlohmann::json metadata;
};

namespace detail {
inline void write_arr(std::ostream& os, const Arr& a) {
  os.write(reinterpret_cast<const char*>(a.data()), std::streamsize(sizeof(double)) * a.size());
}
inline Arr read_arr(std::istream& is, int rows, int cols) {
  Arr a(rows, cols);
  is.read(reinterpret_cast<char*>(a.data()), std::streamsize(sizeof(double)) * a.size());
  if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
  return a;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["config"] = ck.params.config;
  header["step"] = ck.params.step;
  header["adam_t"] = ck.adam_t;
  header["rng_state"] = ck.rng_state;
  header["metadata"] = ck.metadata;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, a] : ck.params.tensors)
    tensors.push_back({{"name", name}, {"rows", a.rows()}, {"cols", a.cols()}});
  header["tensors"] = tensors;
  nlohmann::json adam = nlohmann::json::array();
  for (const auto& [name, mv] : ck.adam_state)
    adam.push_back({{"name", name}, {"rows", mv.first.rows()}, {"cols", mv.first.cols()}});
  header["adam"] = adam;

  std::string hs = header.dump();
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write("MSEPCKPT", 8);
    uint32_t ver = kCheckpointVersion;
    os.write(reinterpret_cast<const char*>(&ver), 4);
    uint64_t hlen = hs.size();
    os.write(reinterpret_cast<const char*>(&hlen), 8);
    os.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, a] : ck.params.tensors) detail::write_arr(os, a);
    for (const auto& [name, mv] : ck.adam_state) {
      detail::write_arr(os, mv.first);
      detail::write_arr(os, mv.second);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "MSEPCKPT") throw std::runtime_error("not a checkpoint: " + path);
  uint32_t ver = 0;
  is.read(reinterpret_cast<char*>(&ver), 4);
  if (ver != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
  uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  is.read(hs.data(), std::streamsize(hlen));
  nlohmann::json header = nlohmann::json::parse(hs);

  Checkpoint ck;
  ck.params.config = header.at("config");
  ck.params.step = header.at("step");
  ck.adam_t = header.at("adam_t");
  ck.rng_state = header.at("rng_state");
  ck.metadata = header.at("metadata");
  for (const auto& t : header.at("tensors"))
    ck.params.tensors.emplace_back(t.at("name"), detail::read_arr(is, t.at("rows"), t.at("cols")));
  for (const auto& t : header.at("adam")) {
    Arr m = detail::read_arr(is, t.at("rows"), t.at("cols"));
    Arr v = detail::read_arr(is, t.at("rows"), t.at("cols"));
    ck.adam_state.emplace(t.at("name"), std::make_pair(std::move(m), std::move(v)));
  }
  return ck;
}

}  // namespace model
}  // namespace mixsep
