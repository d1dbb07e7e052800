// Mono waveform container and 16-bit PCM WAV I/O.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixsep {

struct AudioSegment {
  std::vector<double> samples;
  int sample_rate = 8000;

  AudioSegment() = default;
  AudioSegment(std::vector<double> s, int rate) : samples(std::move(s)), sample_rate(rate) {
    if (sample_rate <= 0) throw std::invalid_argument("sample_rate must be positive");
  }

  std::size_t length() const { return samples.size(); }

  bool finite() const {
    for (double v : samples)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline AudioSegment operator+(const AudioSegment& a, const AudioSegment& b) {
  if (a.length() != b.length() || a.sample_rate != b.sample_rate)
    throw std::invalid_argument("cannot add segments with mismatched length or rate");
  AudioSegment out = a;
  for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] += b.samples[i];
  return out;
}

namespace wav {

namespace detail {
inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char((v >> 8) & 0xff));
}
inline uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
inline uint16_t get_u16(const unsigned char* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }
}  // namespace detail

inline int16_t quantize(double v) {
  double s = v * 32768.0;
  if (s > 32767.0) s = 32767.0;
  if (s < -32768.0) s = -32768.0;
  return int16_t(std::lrint(s));
}

inline void write(const std::string& path, const AudioSegment& audio) {
  std::string out;
  const uint32_t n = uint32_t(audio.samples.size());
  const uint32_t data_bytes = n * 2;
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, uint32_t(audio.sample_rate));
  detail::put_u32(out, uint32_t(audio.sample_rate) * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (double v : audio.samples) {
    int16_t q = quantize(v);
    out.push_back(char(q & 0xff));
    out.push_back(char((q >> 8) & 0xff));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline AudioSegment read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("not a RIFF/WAVE file: " + path);

  int sample_rate = 0;
  int bits = 0;
  int channels = 0;
  std::size_t data_off = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* p = buf.data() + pos;
    uint32_t chunk_len = detail::get_u32(p + 4);
    if (std::memcmp(p, "fmt ", 4) == 0 && chunk_len >= 16) {
      uint16_t fmt = detail::get_u16(p + 8);
      channels = detail::get_u16(p + 10);
      sample_rate = int(detail::get_u32(p + 12));
      bits = detail::get_u16(p + 22);
      if (fmt != 1) throw std::runtime_error("only PCM wav supported: " + path);
    } else if (std::memcmp(p, "data", 4) == 0) {
      data_off = pos + 8;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (sample_rate == 0 || data_off == 0) throw std::runtime_error("malformed wav: " + path);
  if (channels != 1) throw std::runtime_error("only mono wav supported: " + path);
  if (bits != 16) throw std::runtime_error("only 16-bit wav supported: " + path);
  if (data_off + data_len > buf.size()) data_len = buf.size() - data_off;

  AudioSegment audio;
  audio.sample_rate = sample_rate;
  audio.samples.resize(data_len / 2);
  for (std::size_t i = 0; i < audio.samples.size(); ++i) {
    const unsigned char* p = buf.data() + data_off + 2 * i;
    int16_t q = int16_t(uint16_t(p[0]) | uint16_t(p[1]) << 8);
    audio.samples[i] = double(q) / 32768.0;
  }
  return audio;
}

}  // namespace wav
}  // namespace mixsep
