// SPDX-License-Identifier: Apache-2.0
#include "qadapt/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include "qadapt/errors.hpp"
#include "qadapt/io.hpp"

namespace qadapt {

using nlohmann::json;

std::string encode_checkpoint(const ParamStore& store, const json& config, const std::string& config_hash) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& p : store.params()) {
    tensors.push_back({{"name", p.name},
                       {"shape", p.value.shape()},
                       {"tag", tag_name(p.tag)},
                       {"trainable", p.trainable},
                       {"offset", offset},
                       {"count", p.value.numel()}});
    offset += p.value.numel();
  }
  const json header{{"config", config}, {"config_hash", config_hash}, {"tensors", tensors}};
  const std::string text = header.dump();
  std::ostringstream os(std::ios::binary);
  os.write(kCheckpointMagic, 8);
  io::write_u64_le(os, text.size());
  os << text;
  for (const auto& p : store.params()) io::write_f64_le(os, p.value.data());
  return os.str();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[8] = {};
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint (bad magic)");
  const std::uint64_t len = io::read_u64_le(is);
  if (len > bytes.size()) throw IoError("checkpoint header length exceeds file size");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("truncated checkpoint header");
  Checkpoint ck;
  try {
    const json header = json::parse(text);
    ck.config = header.at("config");
    ck.config_hash = header.at("config_hash").get<std::string>();
    std::size_t expected = 0;
    for (const auto& t : header.at("tensors")) {
      const Shape shape = t.at("shape").get<Shape>();
      const std::size_t count = t.at("count").get<std::size_t>();
      if (shape_numel(shape) != count || t.at("offset").get<std::size_t>() != expected) {
        throw IoError("inconsistent tensor entry '" + t.at("name").get<std::string>() + "'");
      }
      expected += count;
      Tensor value(shape);
      io::read_f64_le(is, value.mutable_data());
      Param& p = ck.params.add(t.at("name").get<std::string>(), std::move(value),
                               tag_from_name(t.at("tag").get<std::string>()));
      p.trainable = t.at("trainable").get<bool>();
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ContractError& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const json& config,
                     const std::string& config_hash) {
  io::write_text(path, encode_checkpoint(store, config, config_hash));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_text(path)); }

}  // namespace qadapt
