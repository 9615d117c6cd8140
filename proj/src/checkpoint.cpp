#include "binary_io.hpp"
#include "uwloc/error.hpp"
#include "uwloc/net.hpp"

#include <fstream>

namespace uwloc {

namespace {

constexpr char kMagic[4] = {'A', 'C', 'A', 'N'};
constexpr std::uint32_t kVersion = 1;
const std::string kBufferPrefix = "buffer:";

void put_tensor(std::ostream& out, const std::string& key, const Tensor<float>& t) {
  detail::put_string(out, key);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  detail::put_floats(out, t.data(), static_cast<std::size_t>(t.size()));
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const NetParams<float>& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, 4);
  detail::put_le(out, kVersion);
  detail::put_string(out, to_canonical_text(p.config));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.params.size() + p.buffers.size()));
  for (const auto& [key, t] : p.params) put_tensor(out, key, t);
  for (const auto& [key, t] : p.buffers) put_tensor(out, kBufferPrefix + key, t);
  if (!out) throw data_error("failed writing checkpoint: " + path.string());
}

NetParams<float> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint: " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, kMagic)) {
    throw data_error("not a checkpoint file: " + path.string());
  }
  if (detail::get_le<std::uint32_t>(in) != kVersion) throw data_error("unsupported checkpoint version");

  const NetConfig cfg = net_config_from_text(detail::get_string(in));
  NetParams<float> p = build_model<float>(cfg);
  const auto count = detail::get_le<std::uint32_t>(in);
  std::size_t seen = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string key = detail::get_string(in);
    auto* group = &p.params;
    if (key.starts_with(kBufferPrefix)) {
      key = key.substr(kBufferPrefix.size());
      group = &p.buffers;
    }
    auto it = group->find(key);
    if (it == group->end()) throw data_error("checkpoint tensor '" + key + "' does not belong to this network");
    const auto rank = detail::get_le<std::uint32_t>(in);
    if (rank != it->second.shape.size()) throw data_error("checkpoint tensor '" + key + "' has the wrong rank");
    for (std::uint32_t d = 0; d < rank; ++d) {
      if (detail::get_le<std::uint32_t>(in) != it->second.shape[d]) {
        throw data_error("checkpoint tensor '" + key + "' has the wrong shape");
      }
    }
    detail::get_floats(in, it->second.data(), static_cast<std::size_t>(it->second.size()));
    ++seen;
  }
  if (seen != p.params.size() + p.buffers.size()) throw data_error("checkpoint is missing tensors");
  return p;
}

}  // namespace uwloc
