#include "sdi/field_io.hpp"

#include "sdi/binary.hpp"
#include "sdi/errors.hpp"

#include <array>
#include <fstream>
#include <vector>

namespace sdi {

namespace {
constexpr std::array<char, 8> kMagic = {'C', 'F', 'L', 'D', '0', '0', '0', '1'};
}

void write_cfield(std::ostream& out, const ComplexField& f) {
  out.write(kMagic.data(), kMagic.size());
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.rows()));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.cols()));
  binary::put<double>(out, f.pitch());
  std::vector<float> buf(2 * f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    buf[2 * i] = static_cast<float>(f[i].real());
    buf[2 * i + 1] = static_cast<float>(f[i].imag());
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out)
    throw Error("failed to write complex field");
}

ComplexField read_cfield(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic)
    throw ConfigError("not a complex field file (bad magic)");
  const auto rows = binary::get<std::uint32_t>(in);
  const auto cols = binary::get<std::uint32_t>(in);
  const auto pitch = binary::get<double>(in);
  if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16))
    throw ConfigError("complex field file has implausible dimensions");
  ComplexField f(static_cast<int>(rows), static_cast<int>(cols), pitch);
  std::vector<float> buf(2 * f.size());
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
    throw ConfigError("complex field file is truncated");
  for (std::size_t i = 0; i < f.size(); ++i)
    f[i] = {buf[2 * i], buf[2 * i + 1]};
  return f;
}

void save_cfield(const std::filesystem::path& path, const ComplexField& f) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error("cannot open " + path.string() + " for writing");
  write_cfield(out, f);
}

ComplexField load_cfield(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ConfigError("cannot open " + path.string());
  auto f = read_cfield(in);
  f.set_label(path.stem().string());
  return f;
}

ComplexField quantize_f32(ComplexField f) {
  for (auto& v : f.values())
    v = {static_cast<float>(v.real()), static_cast<float>(v.imag())};
  return f;
}

} // namespace sdi
