// Corpus ingestion, segment sampling, batch construction, and the synthetic
// toy-corpus generator.
//
// Manifests are JSON Lines, one record per line:
//   {"mixture": "<path>", "sources": ["<p1>", "<p2>"], "samples": <int>}
// where "sources" is optional (records without it are unsupervised-only).
#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixsep/audio.hpp"
#include "mixsep/dsp.hpp"

namespace mixsep::data {

struct ManifestRecord {
  std::string mixture_path;
  std::vector<std::string> source_paths;  // empty or exactly 2
  std::size_t duration_samples = 0;

  bool has_sources() const { return source_paths.size() == 2; }
};

struct Manifest {
  std::vector<ManifestRecord> records;
  int sample_rate = 8000;

  std::size_t size() const { return records.size(); }
  bool all_have_sources() const {
    return std::all_of(records.begin(), records.end(), [](const auto& r) { return r.has_sources(); });
  }
};

struct LoadedRecord {
  AudioSegment mixture;
  std::vector<AudioSegment> sources;
};

inline LoadedRecord load_record(const ManifestRecord& rec) {
  LoadedRecord out;
  out.mixture = wav::read(rec.mixture_path);
  for (const auto& p : rec.source_paths) out.sources.push_back(wav::read(p));
  return out;
}

// Reads and validates a manifest: files must exist, share the configured
// sample rate, and sources (when present) must sum to the mixture within
// 1e-4 max-abs.
inline Manifest load_manifest(const std::string& path, int expected_rate = 8000) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest: " + path);
  Manifest m;
  m.sample_rate = expected_rate;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest " + path + " record " + std::to_string(line_no) +
                               ": bad JSON: " + e.what());
    }
    ManifestRecord rec;
    rec.mixture_path = j.at("mixture");
    rec.duration_samples = j.at("samples");
    if (j.contains("sources")) {
      rec.source_paths = j.at("sources").get<std::vector<std::string>>();
      if (rec.source_paths.size() != 2)
        throw std::runtime_error("manifest record " + std::to_string(line_no) + ": need exactly 2 sources");
    }

    auto rec_error = [&](const std::string& msg) {
      return std::runtime_error("manifest " + path + " record " + std::to_string(line_no) + ": " + msg);
    };
    AudioSegment mix;
    try {
      mix = wav::read(rec.mixture_path);
    } catch (const std::exception& e) {
      throw rec_error(e.what());
    }
    if (mix.sample_rate != expected_rate)
      throw rec_error("sample rate " + std::to_string(mix.sample_rate) + " != expected " +
                      std::to_string(expected_rate));
    if (mix.length() != rec.duration_samples)
      throw rec_error("samples field " + std::to_string(rec.duration_samples) + " != actual " +
                      std::to_string(mix.length()));
    if (rec.has_sources()) {
      std::vector<double> sum(mix.length(), 0.0);
      for (const auto& sp : rec.source_paths) {
        AudioSegment s;
        try {
          s = wav::read(sp);
        } catch (const std::exception& e) {
          throw rec_error(e.what());
        }
        if (s.sample_rate != expected_rate) throw rec_error("source sample-rate mismatch: " + sp);
        if (s.length() != mix.length()) throw rec_error("source length mismatch: " + sp);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += s.samples[i];
      }
      double err = 0.0;
      for (std::size_t i = 0; i < sum.size(); ++i) err = std::max(err, std::abs(sum[i] - mix.samples[i]));
      if (err > 1e-4)
        throw rec_error("sources do not sum to mixture (max-abs " + std::to_string(err) + " > 1e-4)");
    }
    m.records.push_back(std::move(rec));
  }
  return m;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write manifest: " + path);
  for (const auto& rec : m.records) {
    nlohmann::json j;
    j["mixture"] = rec.mixture_path;
    if (rec.has_sources()) j["sources"] = rec.source_paths;
    j["samples"] = rec.duration_samples;
    f << j.dump() << "\n";
  }
}

// Builds a manifest from the standard LibriMix directory layout
// (mix_clean/, s1/, s2/ with matching file names).
inline Manifest manifest_from_librimix(const std::string& dir, int expected_rate = 8000) {
  namespace fs = std::filesystem;
  fs::path mix_dir = fs::path(dir) / "mix_clean";
  if (!fs::is_directory(mix_dir)) throw std::runtime_error("no mix_clean/ under " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(mix_dir))
    if (e.path().extension() == ".wav") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::string tmp = (fs::temp_directory_path() / "librimix_manifest.jsonl").string();
  {
    std::ofstream f(tmp, std::ios::trunc);
    for (const auto& p : files) {
      AudioSegment mix = wav::read(p.string());
      nlohmann::json j;
      j["mixture"] = p.string();
      fs::path s1 = fs::path(dir) / "s1" / p.filename();
      fs::path s2 = fs::path(dir) / "s2" / p.filename();
      if (fs::exists(s1) && fs::exists(s2)) j["sources"] = {s1.string(), s2.string()};
      j["samples"] = mix.length();
      f << j.dump() << "\n";
    }
  }
  return load_manifest(tmp, expected_rate);
}

struct SegmentSampler {
  std::size_t segment_length = 24000;  // 3 s at 8 kHz

  // Uniform random start offset; short utterances are right-padded with
  // zeros. Sources are cut (and padded) at identical offsets.
  LoadedRecord sample(const LoadedRecord& rec, std::mt19937& rng) const {
    const std::size_t n = rec.mixture.length();
    std::size_t offset = 0;
    if (n > segment_length) {
      std::uniform_int_distribution<std::size_t> dist(0, n - segment_length);
      offset = dist(rng);
    }
    auto cut = [&](const AudioSegment& x) {
      AudioSegment out;
      out.sample_rate = x.sample_rate;
      out.samples.assign(segment_length, 0.0);
      std::size_t avail = x.length() > offset ? std::min(segment_length, x.length() - offset) : 0;
      std::copy_n(x.samples.begin() + long(offset), avail, out.samples.begin());
      return out;
    };
    LoadedRecord out;
    out.mixture = cut(rec.mixture);
    for (const auto& s : rec.sources) out.sources.push_back(cut(s));
    return out;
  }
};

struct SupervisedBatch {
  std::vector<AudioSegment> mixtures;
  std::vector<std::array<AudioSegment, 2>> references;
};

struct MoMBatch {
  std::vector<AudioSegment> mix_1;
  std::vector<AudioSegment> mix_2;
  std::vector<AudioSegment> mom;  // mix_1 + mix_2, sample-wise
};

struct MixturePairBatch {
  std::vector<AudioSegment> mix_1;
  std::vector<AudioSegment> mix_2;
};

namespace detail {

// Draws n distinct record indices; when the manifest is smaller than n,
// indices may repeat across pairs but never within one.
inline std::vector<std::size_t> draw_indices(std::size_t manifest_size, std::size_t n, std::mt19937& rng) {
  std::vector<std::size_t> all(manifest_size);
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> out;
  out.reserve(n);
  while (out.size() < n) {
    std::shuffle(all.begin(), all.end(), rng);
    std::size_t take = std::min(n - out.size(), all.size());
    out.insert(out.end(), all.begin(), all.begin() + long(take));
  }
  return out;
}

}  // namespace detail

inline SupervisedBatch make_supervised_batch(const Manifest& m, const SegmentSampler& sampler,
                                             std::size_t batch_size, std::mt19937& rng) {
  if (m.size() < 1) throw std::runtime_error("make_supervised_batch: empty manifest");
  SupervisedBatch b;
  auto idx = detail::draw_indices(m.size(), batch_size, rng);
  for (std::size_t i : idx) {
    const auto& rec = m.records[i];
    if (!rec.has_sources()) throw std::runtime_error("supervised batch needs references: " + rec.mixture_path);
    LoadedRecord cut = sampler.sample(load_record(rec), rng);
    b.mixtures.push_back(cut.mixture);
    b.references.push_back({cut.sources[0], cut.sources[1]});
  }
  return b;
}

// Pairs are formed from distinct records, drawn without replacement within
// the batch; the MoM channel is the exact sample-wise sum.
inline MoMBatch make_mom_batch(const Manifest& m, const SegmentSampler& sampler, std::size_t batch_size,
                               std::mt19937& rng) {
  if (m.size() < 2) throw std::runtime_error("make_mom_batch: need at least 2 records");
  MoMBatch b;
  auto idx = detail::draw_indices(m.size(), 2 * batch_size, rng);
  for (std::size_t p = 0; p < batch_size; ++p) {
    std::size_t ia = idx[2 * p], ib = idx[2 * p + 1];
    if (ia == ib) ib = idx[(2 * p + 2) % idx.size()];  // only possible on tiny manifests
    LoadedRecord a = sampler.sample(load_record(m.records[ia]), rng);
    LoadedRecord c = sampler.sample(load_record(m.records[ib]), rng);
    b.mix_1.push_back(a.mixture);
    b.mix_2.push_back(c.mixture);
    b.mom.push_back(a.mixture + c.mixture);
  }
  return b;
}

inline MixturePairBatch make_pair_batch(const Manifest& m, const SegmentSampler& sampler,
                                        std::size_t n_pairs, std::mt19937& rng) {
  MoMBatch mom = make_mom_batch(m, sampler, n_pairs, rng);
  return MixturePairBatch{std::move(mom.mix_1), std::move(mom.mix_2)};
}

// Dynamic mixing: single-speaker source segments from different records are
// summed on the fly into never-before-seen mixtures with references.
inline SupervisedBatch make_dynamic_mix_batch(const Manifest& m, const SegmentSampler& sampler,
                                              std::size_t batch_size, std::mt19937& rng) {
  if (m.size() < 2) throw std::runtime_error("make_dynamic_mix_batch: need at least 2 records");
  SupervisedBatch b;
  auto idx = detail::draw_indices(m.size(), 2 * batch_size, rng);
  std::uniform_int_distribution<int> pick(0, 1);
  for (std::size_t p = 0; p < batch_size; ++p) {
    std::size_t ia = idx[2 * p], ib = idx[2 * p + 1];
    if (ia == ib) ib = idx[(2 * p + 2) % idx.size()];
    const auto& ra = m.records[ia];
    const auto& rb = m.records[ib];
    if (!ra.has_sources() || !rb.has_sources())
      throw std::runtime_error("dynamic mixing needs references on every record");
    LoadedRecord a = sampler.sample(load_record(ra), rng);
    LoadedRecord c = sampler.sample(load_record(rb), rng);
    // Independent source picks keep the dynamic pair distribution as close
    // to uniform over source combinations as the corpus allows.
    AudioSegment s1 = a.sources[std::size_t(pick(rng))];
    AudioSegment s2 = c.sources[std::size_t(pick(rng))];
    b.mixtures.push_back(s1 + s2);
    b.references.push_back({std::move(s1), std::move(s2)});
  }
  return b;
}

// ---- synthetic toy corpus --------------------------------------------------

struct ToySpec {
  int n_train = 200;
  int n_val = 50;
  int n_test = 50;
  int sample_rate = 8000;
  double utterance_seconds = 4.0;
  int source_families = 6;
  unsigned seed = 17;
};

namespace detail {

// A family fixes an amplitude-modulation rate band (geometric spread over
// 1.8-16 Hz); the carrier is drawn independently of the family, either a
// harmonic complex or a noise band placed anywhere in the usable spectrum.
// Sources in a mixture therefore overlap in frequency but differ in their
// temporal envelopes: masks must adapt per input, and no global output
// ordering (such as low band vs high band) exists for a model to lock onto.
inline double family_rate(int family, int n_families) {
  const double lo = 1.8, hi = 16.0;
  const double fr = n_families > 1 ? double(family) / double(n_families - 1) : 0.0;
  return lo * std::pow(hi / lo, fr);
}

inline std::vector<double> synth_source(std::size_t n, int rate, int family, int n_families,
                                        std::mt19937& rng) {
  const double nyq = rate / 2.0;
  std::uniform_real_distribution<double> phd(0.0, 2.0 * M_PI);
  const double rc = family_rate(family, n_families);
  std::uniform_real_distribution<double> rate_d(rc / 1.1, rc * 1.1);
  const double am_rate = rate_d(rng), am_phase = phd(rng);

  // Carrier: a narrow band at a random center, independent of the family.
  // Random per-utterance placement means there is no corpus-wide frequency
  // ordering between the two sources of a mixture, while each individual
  // mixture usually admits an (input-dependent) spectral split.
  std::uniform_real_distribution<double> fcd(500.0, std::min(2800.0, 0.8 * nyq)),
      bwd(400.0, 1200.0);
  const double fc = fcd(rng), bw = bwd(rng);
  const double flo = std::max(60.0, fc - bw / 2), fhi = std::min(0.95 * nyq, fc + bw / 2);
  std::vector<double> freqs, weights;
  if (std::uniform_int_distribution<int>(0, 1)(rng) == 0) {
    // Harmonic cluster: partials of a common fundamental inside the band.
    std::uniform_real_distribution<double> f0d(80.0, 300.0);
    const double f0 = f0d(rng);
    for (int h = std::max(1, int(std::ceil(flo / f0))); h * f0 <= fhi; ++h) {
      freqs.push_back(f0 * h);
      weights.push_back(1.0 / std::sqrt(double(h)));
    }
    while (freqs.size() < 2) {  // band narrower than one harmonic spacing
      freqs.push_back(fc + (freqs.empty() ? 0.0 : f0 / 4.0));
      weights.push_back(1.0);
    }
  } else {
    // Noise band: random-phase sinusoids spread across the band.
    std::uniform_real_distribution<double> fd(flo, fhi);
    for (int c = 0; c < 24; ++c) {
      freqs.push_back(fd(rng));
      weights.push_back(1.0);
    }
  }
  std::vector<double> phases(freqs.size());
  for (auto& p : phases) p = phd(rng);
  double norm = 0.0;
  for (double w : weights) norm += w * w;
  norm = std::sqrt(norm);
  std::vector<double> carrier(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double tsec = double(i) / rate;
    double v = 0.0;
    for (std::size_t c = 0; c < freqs.size(); ++c)
      v += weights[c] * std::sin(2.0 * M_PI * freqs[c] * tsec + phases[c]);
    carrier[i] = v / norm;
  }

  // Deep raised-cosine envelope at the family's modulation rate.
  std::vector<double> x(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double tsec = double(i) / rate;
    double env = 0.1 + 0.9 * 0.5 * (1.0 - std::cos(2.0 * M_PI * am_rate * tsec + am_phase));
    x[i] = env * carrier[i];
  }
  return x;
}

// Rescales to the given peak so two sources always sum below full scale
// (no clipping on the 16-bit grid, keeping source sums exact).
inline void normalize_peak(std::vector<double>& x, double peak) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m > 1e-12) {
    double s = peak / m;
    for (double& v : x) v *= s;
  }
}

inline AudioSegment quantized(std::vector<double> raw, int rate) {
  AudioSegment a;
  a.sample_rate = rate;
  a.samples.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) a.samples[i] = double(wav::quantize(raw[i])) / 32768.0;
  return a;
}

inline Manifest synth_split(const std::filesystem::path& dir, int count, const ToySpec& spec,
                            std::mt19937& rng) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "mix_clean");
  fs::create_directories(dir / "s1");
  fs::create_directories(dir / "s2");
  Manifest m;
  m.sample_rate = spec.sample_rate;
  const std::size_t n = std::size_t(spec.utterance_seconds * spec.sample_rate);
  std::uniform_real_distribution<double> peak_d(0.25, 0.45);
  std::uniform_int_distribution<int> fam_d(0, spec.source_families - 1);
  for (int i = 0; i < count; ++i) {
    // Two distinct families per mixture keeps separation well posed.
    int fa = fam_d(rng), fb = fam_d(rng);
    while (fb == fa) fb = fam_d(rng);
    auto raw1 = synth_source(n, spec.sample_rate, fa, spec.source_families, rng);
    auto raw2 = synth_source(n, spec.sample_rate, fb, spec.source_families, rng);
    normalize_peak(raw1, peak_d(rng));
    normalize_peak(raw2, peak_d(rng));
    AudioSegment s1 = quantized(std::move(raw1), spec.sample_rate);
    AudioSegment s2 = quantized(std::move(raw2), spec.sample_rate);
    // Consistent source roles: s1 carries the lower-indexed family. Losses
    // and evaluation are permutation invariant, so this only matters for
    // dynamic mixing, where complementary roles then rarely pair two
    // sources of the same family.
    if (fa > fb) std::swap(s1, s2);
    AudioSegment mix = s1 + s2;  // exact on the 16-bit grid

    char name[32];
    std::snprintf(name, sizeof(name), "%05d.wav", i);
    ManifestRecord rec;
    rec.mixture_path = (dir / "mix_clean" / name).string();
    rec.source_paths = {(dir / "s1" / name).string(), (dir / "s2" / name).string()};
    rec.duration_samples = n;
    wav::write(rec.source_paths[0], s1);
    wav::write(rec.source_paths[1], s2);
    wav::write(rec.mixture_path, mix);
    m.records.push_back(std::move(rec));
  }
  save_manifest((dir / "manifest.jsonl").string(), m);
  return m;
}

}  // namespace detail

struct ToyCorpus {
  Manifest train, val, test;
};

inline ToyCorpus synth_toy_corpus(const std::string& out_dir, const ToySpec& spec) {
  if (spec.n_train <= 0 || spec.n_val <= 0 || spec.n_test <= 0)
    throw std::invalid_argument("synth_toy_corpus: empty split requested");
  if (spec.source_families < 2)
    throw std::invalid_argument("synth_toy_corpus: need at least 2 source families");
  std::mt19937 rng(spec.seed);
  namespace fs = std::filesystem;
  ToyCorpus c;
  c.train = detail::synth_split(fs::path(out_dir) / "train", spec.n_train, spec, rng);
  c.val = detail::synth_split(fs::path(out_dir) / "val", spec.n_val, spec, rng);
  c.test = detail::synth_split(fs::path(out_dir) / "test", spec.n_test, spec, rng);
  return c;
}

}  // namespace mixsep::data
