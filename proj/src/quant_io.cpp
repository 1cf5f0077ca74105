// Store file layout (all integers little-endian):
//
//   char[8]  magic "DPQSTORE"
//   u32      version (1)
//   u8       n_bits
//   u8       b_min
//   u8       bit order: 0 = code i occupies stream bits [i*n, (i+1)*n),
//            least significant bit first within each byte
//   u8       reserved (0)
//   u64      model checksum
//   u32      layer count
//   per layer, in LayerId order:
//     u32 block, u8 kind, u8[3] reserved, u32 rows, u32 cols,
//     f32 lo[rows], f32 hi[rows],
//     u8 codes[ceil(rows * cols * n_bits / 8)]   (row-major, packed)

#include <array>
#include <cstring>

#include "binio.hpp"
#include "dpllm/quant.hpp"

namespace dpllm {

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'P', 'Q', 'S', 'T', 'O', 'R', 'E'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kBitOrderLsbFirst = 0;

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, unsigned n_bits) {
  std::vector<std::uint8_t> out((codes.size() * n_bits + 7) / 8, 0);
  std::size_t bit = 0;
  for (std::uint8_t c : codes) {
    for (unsigned i = 0; i < n_bits; ++i, ++bit) {
      if ((c >> i) & 1u) {
        out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                       unsigned n_bits) {
  std::vector<std::uint8_t> codes(count, 0);
  std::size_t bit = 0;
  for (std::size_t k = 0; k < count; ++k) {
    unsigned c = 0;
    for (unsigned i = 0; i < n_bits; ++i, ++bit) {
      c |= ((packed[bit / 8] >> (bit % 8)) & 1u) << i;
    }
    codes[k] = static_cast<std::uint8_t>(c);
  }
  return codes;
}

}  // namespace

std::vector<std::uint8_t> BitPlaneStore::serialize() const {
  binio::Writer w;
  w.bytes(kMagic.data(), kMagic.size());
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(n_bits_));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(b_min_));
  w.put<std::uint8_t>(kBitOrderLsbFirst);
  w.put<std::uint8_t>(0);
  w.put<std::uint64_t>(model_hash_);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(layers_.size()));
  for (const auto& [id, layer] : layers_) {
    w.put<std::uint32_t>(id.block);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(id.kind));
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.cols()));
    w.bytes(layer.lo().data(), layer.lo().size() * sizeof(float));
    w.bytes(layer.hi().data(), layer.hi().size() * sizeof(float));
    const auto packed = pack_codes(layer.codes(), n_bits_);
    w.bytes(packed.data(), packed.size());
  }
  return std::move(w.buffer());
}

BitPlaneStore BitPlaneStore::deserialize(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "store file");
  const auto magic = r.bytes(kMagic.size());
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) {
    throw IoError("not a dpllm store file (bad magic)");
  }
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw IoError("unsupported store version " + std::to_string(v));
  }
  const unsigned n_bits = r.get<std::uint8_t>();
  const unsigned b_min = r.get<std::uint8_t>();
  if (r.get<std::uint8_t>() != kBitOrderLsbFirst) {
    throw IoError("unsupported store bit order");
  }
  (void)r.get<std::uint8_t>();
  const auto model_hash = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  std::map<LayerId, QuantizedLayer> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerId id;
    id.block = r.get<std::uint32_t>();
    const auto kind = r.get<std::uint8_t>();
    if (kind >= kKindsPerBlock) {
      throw IoError("store record has invalid layer kind");
    }
    id.kind = static_cast<LayerKind>(kind);
    r.bytes(3);
    const std::size_t rows = r.get<std::uint32_t>();
    const std::size_t cols = r.get<std::uint32_t>();
    std::vector<float> lo(rows), hi(rows);
    const auto lo_bytes = r.bytes(rows * sizeof(float));
    std::memcpy(lo.data(), lo_bytes.data(), lo_bytes.size());
    const auto hi_bytes = r.bytes(rows * sizeof(float));
    std::memcpy(hi.data(), hi_bytes.data(), hi_bytes.size());
    const auto packed = r.bytes((rows * cols * n_bits + 7) / 8);
    auto codes = unpack_codes(packed, rows * cols, n_bits);
    layers.emplace(id, QuantizedLayer(rows, cols, n_bits, b_min, std::move(codes), std::move(lo),
                                      std::move(hi)));
  }
  if (!r.done()) {
    throw IoError("store file has trailing bytes");
  }
  return BitPlaneStore(n_bits, b_min, model_hash, std::move(layers));
}

void BitPlaneStore::save(const std::filesystem::path& path) const {
  write_file_bytes(path, serialize());
}

BitPlaneStore BitPlaneStore::load(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path));
}

}  // namespace dpllm
