#include "resbm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "resbm/error.hpp"
#include "resbm/serialize.hpp"

namespace resbm::model {

namespace {

constexpr char kMagic[8] = {'R', 'E', 'S', 'B', 'M', 'C', 'K', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  Json manifest = Json::array();
  std::uint64_t offset = 0;
  for (const Param& p : checkpoint.params.entries()) {
    const std::uint64_t nbytes = p.tensor.numel() * sizeof(double);
    manifest.push_back(Json{{"name", p.name},
                            {"kind", std::string(to_string(p.kind))},
                            {"shape", p.tensor.shape()},
                            {"offset", offset},
                            {"bytes", nbytes}});
    offset += nbytes;
  }
  const Json header{{"format", "resbm-checkpoint"},
                    {"version", 1},
                    {"step", checkpoint.step},
                    {"config", model_config_to_json(checkpoint.config)},
                    {"params", manifest}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const Param& p : checkpoint.params.entries()) {
    for (double v : p.tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw DataError("checkpoint: truncated header");
  Json header;
  try {
    header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::size_t data_start = 16 + header_len;
  const std::size_t data_len = bytes.size() - data_start;

  Checkpoint ck;
  try {
    if (header.value("format", "") != "resbm-checkpoint" || header.value("version", 0) != 1) {
      throw DataError("checkpoint: unsupported format/version");
    }
    ck.step = header.at("step").get<std::uint64_t>();
    ck.config = model_config_from_json(header.at("config"), "config");
    for (const Json& m : header.at("params")) {
      const auto name = m.at("name").get<std::string>();
      const auto shape = m.at("shape").get<Shape>();
      const auto offset = m.at("offset").get<std::uint64_t>();
      const auto nbytes = m.at("bytes").get<std::uint64_t>();
      if (nbytes != shape_numel(shape) * sizeof(double) || offset > data_len || nbytes > data_len - offset) {
        throw DataError("checkpoint: parameter " + name + " has inconsistent extent");
      }
      std::vector<double> values(shape_numel(shape));
      const std::uint8_t* src = bytes.data() + data_start + offset;
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<double>(get_u64(src + 8 * i));
      }
      ck.params.add(name, param_kind_from_string(m.at("kind").get<std::string>()),
                    Tensor::from(shape, std::move(values), true));
    }
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const DimensionError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace resbm::model
