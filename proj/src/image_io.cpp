#include "sdi/image_io.hpp"

#include "sdi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

namespace sdi {

void write_pgm16(const std::filesystem::path& path, const RealGrid& image, double lo, double hi) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.cols() << ' ' << image.rows() << "\n65535\n";
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<unsigned char> buf(2 * image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double t = std::clamp((image[i] - lo) / span, 0.0, 1.0);
    const auto v = static_cast<unsigned>(std::lround(t * 65535.0));
    buf[2 * i] = static_cast<unsigned char>(v >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(v & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_amplitude_pgm(const std::filesystem::path& path, const ComplexField& f) {
  const RealGrid amp = abs(f);
  const auto [mn, mx] = std::minmax_element(amp.values().begin(), amp.values().end());
  write_pgm16(path, amp, *mn, *mx);
}

void write_phase_pgm(const std::filesystem::path& path, const ComplexField& f) {
  RealGrid phase(f.shape());
  for (std::size_t i = 0; i < f.size(); ++i)
    phase[i] = std::arg(f[i]);
  write_pgm16(path, phase, -std::numbers::pi, std::numbers::pi);
}

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty())
        return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

} // namespace

RealGrid read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ConfigError("cannot open " + path.string());
  const std::string magic = next_token(in);
  if (magic != "P5" && magic != "P2")
    throw ConfigError(path.string() + ": not a PGM image");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token(in));
    h = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw ConfigError(path.string() + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
    throw ConfigError(path.string() + ": malformed PGM header");
  RealGrid img(h, w);
  if (magic == "P2") {
    for (std::size_t i = 0; i < img.size(); ++i)
      img[i] = std::stod(next_token(in)) / maxval;
    return img;
  }
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(img.size() * bytes);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw ConfigError(path.string() + ": truncated PGM data");
  for (std::size_t i = 0; i < img.size(); ++i) {
    const unsigned v = bytes == 2 ? (unsigned{buf[2 * i]} << 8) | buf[2 * i + 1] : buf[i];
    img[i] = static_cast<double>(v) / maxval;
  }
  return img;
}

} // namespace sdi
