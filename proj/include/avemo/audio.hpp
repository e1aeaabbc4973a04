#pragma once

// 16-bit PCM WAV I/O and a Whisper-style log-mel front end.

#include <fftw3.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "avemo/error.hpp"
#include "avemo/hash.hpp"
#include "avemo/tensor.hpp"

namespace avemo {

struct Waveform {
  std::vector<float> samples;  // mono, in [-1, 1]
  int sample_rate_hz = 16000;
};

/// Decodes a RIFF/WAVE buffer holding 16-bit PCM; multi-channel input is
/// averaged to mono.
inline Waveform decode_wav(std::span<const std::uint8_t> bytes, const std::string& what = "wav") {
  auto bad = [&](const std::string& why) -> Waveform { fail(ErrorCode::kDecodeError, what + ": " + why); };
  auto u32 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(bytes[at]) | static_cast<std::uint32_t>(bytes[at + 1]) << 8 |
           static_cast<std::uint32_t>(bytes[at + 2]) << 16 | static_cast<std::uint32_t>(bytes[at + 3]) << 24;
  };
  auto u16 = [&](std::size_t at) {
    return static_cast<std::uint16_t>(bytes[at] | static_cast<std::uint16_t>(bytes[at + 1]) << 8);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    return bad("not a RIFF/WAVE file");
  std::size_t pos = 12;
  int channels = 0, rate = 0, bits = 0, format = 0;
  bool have_fmt = false;
  while (pos + 8 <= bytes.size()) {
    const auto id = std::string(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    const std::size_t size = u32(pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) return bad("chunk '" + id + "' overruns file");
    if (id == "fmt ") {
      if (size < 16) return bad("short fmt chunk");
      format = u16(body);
      channels = u16(body + 2);
      rate = static_cast<int>(u32(body + 4));
      bits = u16(body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) return bad("data before fmt");
      if (format != 1 || bits != 16) return bad("only 16-bit PCM is supported");
      if (channels < 1) return bad("no channels");
      Waveform w;
      w.sample_rate_hz = rate;
      const std::size_t frames = size / (2 * static_cast<std::size_t>(channels));
      w.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        float acc = 0;
        for (int c = 0; c < channels; ++c) {
          const auto raw = static_cast<std::int16_t>(u16(body + 2 * (i * static_cast<std::size_t>(channels) + c)));
          acc += static_cast<float>(raw) / 32768.0f;
        }
        w.samples[i] = acc / static_cast<float>(channels);
      }
      return w;
    }
    pos = body + size + (size & 1);
  }
  return bad("no data chunk");
}

inline Waveform read_wav(const std::filesystem::path& p) {
  const std::string bytes = read_file(p);
  return decode_wav({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()}, p.string());
}

inline std::string encode_wav(const Waveform& w) {
  std::string out;
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  auto put16 = [&](std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
  };
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out += "RIFF";
  put32(36 + data_bytes);
  out += "WAVEfmt ";
  put32(16);
  put16(1);
  put16(1);
  put32(static_cast<std::uint32_t>(w.sample_rate_hz));
  put32(static_cast<std::uint32_t>(w.sample_rate_hz) * 2);
  put16(2);
  put16(16);
  out += "data";
  put32(data_bytes);
  for (float s : w.samples) {
    const float c = std::clamp(s, -1.0f, 1.0f);
    put16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32767.0f))));
  }
  return out;
}

inline void write_wav(const std::filesystem::path& p, const Waveform& w) { atomic_write(p, encode_wav(w)); }

struct MelConfig {
  int sample_rate_hz = 16000;
  int n_mels = 80;
  int window_samples = 400;
  int hop_samples = 160;
  double log_floor = 1e-10;

  void validate() const {
    if (n_mels < 1) fail(ErrorCode::kConfigError, "n_mels must be >= 1");
    if (hop_samples < 1 || hop_samples > window_samples)
      fail(ErrorCode::kConfigError, "hop_samples must be in [1, window_samples]");
    if (sample_rate_hz < 1 || log_floor <= 0) fail(ErrorCode::kConfigError, "bad mel config");
  }
  std::string hash() const {
    return Sha256()
        .update_pod(sample_rate_hz)
        .update_pod(n_mels)
        .update_pod(window_samples)
        .update_pod(hop_samples)
        .update_pod(log_floor)
        .hex();
  }
};

namespace detail {

// FFTW planner calls are not thread-safe; plan execution is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

inline double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}
inline double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

}  // namespace detail

/// Slaney-normalized triangular filters on the Slaney mel scale,
/// n_mels x (n_fft / 2 + 1).
inline MatD mel_filterbank(const MelConfig& cfg) {
  const int n_fft = cfg.window_samples;
  const int bins = n_fft / 2 + 1;
  const double fmax = cfg.sample_rate_hz / 2.0;
  const double mel_lo = detail::hz_to_mel(0.0), mel_hi = detail::hz_to_mel(fmax);
  std::vector<double> hz(static_cast<std::size_t>(cfg.n_mels + 2));
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    hz[i] = detail::mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));
  MatD fb = MatD::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double enorm = 2.0 / (hz[m + 2] - hz[m]);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate_hz / n_fft;
      const double lower = (f - hz[m]) / (hz[m + 1] - hz[m]);
      const double upper = (hz[m + 2] - f) / (hz[m + 2] - hz[m + 1]);
      fb(m, k) = std::max(0.0, std::min(lower, upper)) * enorm;
    }
  }
  return fb;
}

/// Log-mel features, frames x n_mels.
///
/// Frame t is a periodic-Hann window of window_samples centred on sample
/// t * hop_samples, zero-padded beyond the signal edges. The frame count is
/// floor(len / hop_samples); values are ln(max(mel energy, log_floor)).
inline MatF compute_log_mel(const Waveform& wav, const MelConfig& cfg = {}) {
  cfg.validate();
  if (wav.samples.empty()) fail(ErrorCode::kEmptyAudio, "waveform has no samples");
  if (wav.sample_rate_hz != cfg.sample_rate_hz)
    fail(ErrorCode::kSampleRateMismatch, "expected " + std::to_string(cfg.sample_rate_hz) + " Hz, got " +
                                             std::to_string(wav.sample_rate_hz) + " Hz");
  const int n_fft = cfg.window_samples;
  const int bins = n_fft / 2 + 1;
  const auto n = static_cast<long>(wav.samples.size());
  const long frames = n / cfg.hop_samples;
  const MatD fb = mel_filterbank(cfg);

  std::vector<double> window(static_cast<std::size_t>(n_fft));
  for (int i = 0; i < n_fft; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n_fft);

  double* in = fftw_alloc_real(static_cast<std::size_t>(n_fft));
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(bins));
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(n_fft, in, out, FFTW_ESTIMATE);
  }

  MatF result(frames, cfg.n_mels);
  Eigen::VectorXd power(bins);
  for (long t = 0; t < frames; ++t) {
    const long start = t * cfg.hop_samples - n_fft / 2;
    for (int i = 0; i < n_fft; ++i) {
      const long s = start + i;
      in[i] = (s >= 0 && s < n) ? window[i] * wav.samples[static_cast<std::size_t>(s)] : 0.0;
    }
    fftw_execute(plan);
    for (int k = 0; k < bins; ++k) power[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    const Eigen::VectorXd mel = fb * power;
    for (int m = 0; m < cfg.n_mels; ++m)
      result(t, m) = static_cast<float>(std::log(std::max(mel[m], cfg.log_floor)));
  }
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return result;
}

}  // namespace avemo
