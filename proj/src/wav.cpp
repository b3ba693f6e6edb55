#include "cocola/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace cocola {

namespace {

[[noreturn]] void fail(const std::filesystem::path& path,
                       const std::string& why) {
  throw std::runtime_error("wav: " + path.string() + ": " + why);
}

std::uint32_t rd_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t rd_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

struct FmtChunk {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t bits = 0;
};

struct ChunkMap {
  FmtChunk fmt;
  std::vector<unsigned char> data;
  std::uint64_t data_frames = 0;
};

ChunkMap parse_wav(const std::filesystem::path& path, bool want_samples) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open file");

  unsigned char hdr[12];
  if (!in.read(reinterpret_cast<char*>(hdr), 12)) fail(path, "truncated RIFF header");
  if (std::memcmp(hdr, "RIFF", 4) != 0 || std::memcmp(hdr + 8, "WAVE", 4) != 0)
    fail(path, "not a RIFF/WAVE file");

  ChunkMap out;
  bool have_fmt = false;
  bool have_data = false;

  unsigned char chdr[8];
  while (in.read(reinterpret_cast<char*>(chdr), 8)) {
    std::uint32_t size = rd_u32(chdr + 4);
    if (std::memcmp(chdr, "fmt ", 4) == 0) {
      if (size < 16) fail(path, "fmt chunk too small");
      std::vector<unsigned char> buf(size);
      if (!in.read(reinterpret_cast<char*>(buf.data()), size)) fail(path, "truncated fmt chunk");
      out.fmt.format = rd_u16(buf.data());
      out.fmt.channels = rd_u16(buf.data() + 2);
      out.fmt.sample_rate = rd_u32(buf.data() + 4);
      out.fmt.bits = rd_u16(buf.data() + 14);
      if (out.fmt.format == 0xFFFE) {
        // WAVE_FORMAT_EXTENSIBLE: the actual format is the first word of the GUID.
        if (size < 40) fail(path, "extensible fmt chunk too small");
        out.fmt.format = rd_u16(buf.data() + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chdr, "data", 4) == 0) {
      if (want_samples) {
        out.data.resize(size);
        if (!in.read(reinterpret_cast<char*>(out.data.data()), size))
          fail(path, "truncated data chunk");
      } else {
        in.seekg(size, std::ios::cur);
      }
      out.data_frames = size;  // bytes for now; converted below
      have_data = true;
    } else {
      in.seekg(size, std::ios::cur);
      if (!in) fail(path, "truncated chunk");
    }
    if (size % 2 == 1) in.seekg(1, std::ios::cur);  // chunk padding
  }

  if (!have_fmt) fail(path, "missing fmt chunk");
  if (!have_data) fail(path, "missing data chunk");
  if (out.fmt.channels == 0) fail(path, "zero channels");
  if (out.fmt.sample_rate == 0) fail(path, "zero sample rate");

  int bytes_per_sample = out.fmt.bits / 8;
  if (out.fmt.format == 1) {
    if (out.fmt.bits != 16 && out.fmt.bits != 24) fail(path, "unsupported PCM bit depth " + std::to_string(out.fmt.bits));
  } else if (out.fmt.format == 3) {
    if (out.fmt.bits != 32) fail(path, "unsupported float bit depth " + std::to_string(out.fmt.bits));
  } else {
    fail(path, "unsupported format tag " + std::to_string(out.fmt.format));
  }
  out.data_frames /= static_cast<std::uint64_t>(bytes_per_sample) * out.fmt.channels;
  return out;
}

void wr_u32(std::ofstream& o, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  o.write(reinterpret_cast<char*>(b), 4);
}

void wr_u16(std::ofstream& o, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  o.write(reinterpret_cast<char*>(b), 2);
}

void write_header(std::ofstream& o, int format, int channels, int sample_rate,
                  int bits, std::uint32_t data_bytes) {
  bool is_float = format == 3;
  std::uint32_t fmt_size = 16;
  std::uint32_t riff_size = 4 + (8 + fmt_size) + (is_float ? 8 + 4 : 0) + 8 + data_bytes;
  o.write("RIFF", 4);
  wr_u32(o, riff_size);
  o.write("WAVE", 4);
  o.write("fmt ", 4);
  wr_u32(o, fmt_size);
  wr_u16(o, static_cast<std::uint16_t>(format));
  wr_u16(o, static_cast<std::uint16_t>(channels));
  wr_u32(o, static_cast<std::uint32_t>(sample_rate));
  std::uint32_t block_align = static_cast<std::uint32_t>(channels * bits / 8);
  wr_u32(o, static_cast<std::uint32_t>(sample_rate) * block_align);
  wr_u16(o, static_cast<std::uint16_t>(block_align));
  wr_u16(o, static_cast<std::uint16_t>(bits));
  if (is_float) {
    o.write("fact", 4);
    wr_u32(o, 4);
    wr_u32(o, data_bytes / block_align);
  }
  o.write("data", 4);
  wr_u32(o, data_bytes);
}

}  // namespace

WavData read_wav(const std::filesystem::path& path) {
  ChunkMap c = parse_wav(path, /*want_samples=*/true);
  WavData out;
  out.sample_rate = static_cast<int>(c.fmt.sample_rate);
  out.channels = c.fmt.channels;
  std::size_t n = static_cast<std::size_t>(c.data_frames) * c.fmt.channels;
  out.samples.resize(n);
  const unsigned char* p = c.data.data();
  if (c.fmt.format == 1 && c.fmt.bits == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      std::int16_t v = static_cast<std::int16_t>(p[2 * i] | (p[2 * i + 1] << 8));
      out.samples[i] = static_cast<double>(v) / 32768.0;
    }
  } else if (c.fmt.format == 1 && c.fmt.bits == 24) {
    for (std::size_t i = 0; i < n; ++i) {
      std::int32_t v = p[3 * i] | (p[3 * i + 1] << 8) | (p[3 * i + 2] << 16);
      if (v & 0x800000) v |= ~0xFFFFFF;  // sign extend
      out.samples[i] = static_cast<double>(v) / 8388608.0;
    }
  } else {  // float32
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, p + 4 * i, 4);
      out.samples[i] = static_cast<double>(f);
    }
  }
  return out;
}

WavInfo probe_wav(const std::filesystem::path& path) {
  ChunkMap c = parse_wav(path, /*want_samples=*/false);
  return WavInfo{static_cast<int>(c.fmt.sample_rate), c.fmt.channels, c.data_frames};
}

void write_wav_float32(const std::filesystem::path& path, int sample_rate,
                       const std::vector<double>& mono) {
  std::ofstream o(path, std::ios::binary);
  if (!o) fail(path, "cannot open for writing");
  std::uint32_t bytes = static_cast<std::uint32_t>(mono.size() * 4);
  write_header(o, 3, 1, sample_rate, 32, bytes);
  for (double v : mono) {
    float f = static_cast<float>(v);
    char b[4];
    std::memcpy(b, &f, 4);
    o.write(b, 4);
  }
  if (!o) fail(path, "write failed");
}

void write_wav_pcm16(const std::filesystem::path& path, int sample_rate,
                     int channels, const std::vector<double>& interleaved) {
  std::ofstream o(path, std::ios::binary);
  if (!o) fail(path, "cannot open for writing");
  std::uint32_t bytes = static_cast<std::uint32_t>(interleaved.size() * 2);
  write_header(o, 1, channels, sample_rate, 16, bytes);
  for (double v : interleaved) {
    double c = std::clamp(v, -1.0, 1.0);
    auto s = static_cast<std::int16_t>(std::lrint(c * 32767.0));
    unsigned char b[2] = {static_cast<unsigned char>(s & 0xff),
                          static_cast<unsigned char>((s >> 8) & 0xff)};
    o.write(reinterpret_cast<char*>(b), 2);
  }
  if (!o) fail(path, "write failed");
}

void write_wav_pcm24(const std::filesystem::path& path, int sample_rate,
                     int channels, const std::vector<double>& interleaved) {
  std::ofstream o(path, std::ios::binary);
  if (!o) fail(path, "cannot open for writing");
  std::uint32_t bytes = static_cast<std::uint32_t>(interleaved.size() * 3);
  write_header(o, 1, channels, sample_rate, 24, bytes);
  for (double v : interleaved) {
    double c = std::clamp(v, -1.0, 1.0);
    auto s = static_cast<std::int32_t>(std::lrint(c * 8388607.0));
    unsigned char b[3] = {static_cast<unsigned char>(s & 0xff),
                          static_cast<unsigned char>((s >> 8) & 0xff),
                          static_cast<unsigned char>((s >> 16) & 0xff)};
    o.write(reinterpret_cast<char*>(b), 3);
  }
  if (!o) fail(path, "write failed");
}

}  // namespace cocola
