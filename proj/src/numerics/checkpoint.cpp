#include "coberl/numerics/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "coberl/error.hpp"

namespace coberl::numerics {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'O', 'B', 'E', 'R', 'L', 'C', 'K'};

template <typename U>
void put(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) throw InputError("checkpoint: truncated file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw InputError("checkpoint: truncated string");
  return s;
}

}  // namespace

Checkpoint Checkpoint::from_parameters(const ParameterSet& params, std::string metadata) {
  Checkpoint c;
  c.version = params.version();
  c.metadata = std::move(metadata);
  for (const auto& [name, t] : params.entries()) c.tensors.emplace_back(name, t);
  return c;
}

ParameterSet Checkpoint::to_parameters() const {
  ParameterSet p;
  for (const auto& [name, t] : tensors) p.add(name, t);
  p.set_version(version);
  return p;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt, DType dtype) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointFormat);
  put<std::uint64_t>(out, ckpt.version);
  put_string(out, ckpt.metadata);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_string(out, name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.values()) {
      if (dtype == DType::kFloat64) {
        put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      } else {
        put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  if (!out) throw InputError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw InputError("checkpoint: bad magic");
  const auto format = get<std::uint32_t>(in);
  if (format != kCheckpointFormat) throw InputError("checkpoint: unsupported format " + std::to_string(format));
  Checkpoint c;
  c.version = get<std::uint64_t>(in);
  c.metadata = get_string(in);
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = get_string(in);
    const auto dtype = get<std::uint8_t>(in);
    if (dtype > 1) throw InputError("checkpoint: unknown dtype for '" + name + "'");
    const auto rank = get<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in);
    Tensor t(shape);
    for (double& v : t.values()) {
      v = dtype == 0 ? std::bit_cast<double>(get<std::uint64_t>(in))
                     : static_cast<double>(std::bit_cast<float>(get<std::uint32_t>(in)));
    }
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, DType dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("checkpoint: cannot open '" + path.string() + "' for writing");
  write_checkpoint(out, ckpt, dtype);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint: cannot open '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace coberl::numerics
