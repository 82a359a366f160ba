#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace usv {

/// Canonical sample rate the default detection and preprocessing parameters
/// were tuned for.
inline constexpr int kCanonicalSampleRate = 250000;

class WavError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mono waveform with amplitudes in [-1, 1]. Immutable once constructed.
class Recording {
 public:
  Recording(std::string id, std::vector<double> samples, int sample_rate_hz)
      : id_(std::move(id)), samples_(std::move(samples)), sample_rate_hz_(sample_rate_hz) {
    if (samples_.empty()) throw std::invalid_argument("Recording: no samples");
    if (sample_rate_hz_ <= 0) throw std::invalid_argument("Recording: sample rate must be positive");
    for (double s : samples_)
      if (!std::isfinite(s)) throw std::invalid_argument("Recording: non-finite sample");
  }

  const std::string& id() const { return id_; }
  std::span<const double> samples() const { return samples_; }
  int sample_rate_hz() const { return sample_rate_hz_; }
  std::size_t size() const { return samples_.size(); }
  double duration_s() const { return static_cast<double>(samples_.size()) / sample_rate_hz_; }

 private:
  std::string id_;
  std::vector<double> samples_;
  int sample_rate_hz_;
};

namespace wav_detail {

inline std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

constexpr std::uint16_t kFormatPcm = 0x0001;
constexpr std::uint16_t kFormatFloat = 0x0003;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace wav_detail

/// Decode a RIFF/WAVE byte buffer. Integer PCM is divided by the type's
/// maximum magnitude (2^(bits-1)); 8-bit data is unsigned with offset 128.
inline Recording decode_wav(std::span<const std::uint8_t> bytes, std::string id) {
  using namespace wav_detail;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw WavError("malformed RIFF header");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || body + size > bytes.size()) throw WavError("truncated fmt chunk");
      const std::uint8_t* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      block_align = read_u16(f + 12);
      bits = read_u16(f + 14);
      if (format == kFormatExtensible) {
        if (size < 40) throw WavError("truncated WAVE_FORMAT_EXTENSIBLE fmt chunk");
        format = read_u16(f + 24);  // first two bytes of the subformat GUID
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = std::min<std::size_t>(size, bytes.size() - body);
    }
    pos = body + size + (size & 1u);
  }

  if (!have_fmt) throw WavError("missing fmt chunk");
  if (data == nullptr) throw WavError("missing data chunk");
  if (channels != 1)
    throw WavError("expected mono WAV, got " + std::to_string(channels) + " channels");
  if (rate == 0) throw WavError("sample rate is zero");

  const bool is_int = format == kFormatPcm && (bits == 8 || bits == 16 || bits == 24 || bits == 32);
  const bool is_float = format == kFormatFloat && bits == 32;
  if (!is_int && !is_float)
    throw WavError("unsupported encoding (format " + std::to_string(format) + ", " +
                   std::to_string(bits) + " bits)");
  const std::size_t width = bits / 8;
  if (block_align != width) throw WavError("inconsistent block alignment");

  const std::size_t n = data_size / width;
  if (n == 0) throw WavError("empty data chunk");
  std::vector<double> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = data + i * width;
    double v = 0.0;
    if (is_float) {
      float f;
      std::uint32_t u = read_u32(p);
      std::memcpy(&f, &u, 4);
      v = f;
      if (!std::isfinite(v)) throw WavError("non-finite float sample at index " + std::to_string(i));
      if (v < -1.0 || v > 1.0) throw WavError("float sample outside [-1, 1] at index " + std::to_string(i));
    } else if (bits == 8) {
      v = (static_cast<int>(p[0]) - 128) / 128.0;
    } else if (bits == 16) {
      v = static_cast<std::int16_t>(read_u16(p)) / 32768.0;
    } else if (bits == 24) {
      std::int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
      if (s & 0x800000) s -= 0x1000000;
      v = s / 8388608.0;
    } else {
      v = static_cast<std::int32_t>(read_u32(p)) / 2147483648.0;
    }
    samples[i] = v;
  }
  return Recording(std::move(id), std::move(samples), static_cast<int>(rate));
}

inline Recording load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_wav(bytes, path.stem().string());
  } catch (const WavError& e) {
    throw WavError(path.string() + ": " + e.what());
  }
}

/// 16-bit PCM mono encoding: sample = round(x * 32768) clamped to 32767, so
/// the decode error stays within one LSB and 1.0 maps to 32767.
inline std::vector<std::uint8_t> encode_wav16(const Recording& rec) {
  using namespace wav_detail;
  const auto samples = rec.samples();
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(rec.sample_rate_hz()));
  put_u32(out, static_cast<std::uint32_t>(rec.sample_rate_hz()) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double x = samples[i];
    if (x < -1.0 || x > 1.0)
      throw WavError("amplitude " + std::to_string(x) + " outside [-1, 1] at index " + std::to_string(i));
    const long q = std::clamp(std::lround(x * 32768.0), -32768L, 32767L);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

inline void write_wav(const Recording& rec, const std::filesystem::path& path) {
  const auto bytes = encode_wav16(rec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WavError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WavError("write failed: " + path.string());
}

}  // namespace usv
