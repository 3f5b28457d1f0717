#include "vfm/ad/checkpoint.hpp"

#include <fmt/format.h>

#include <fstream>
#include <sstream>

#include "vfm/binary_io.hpp"
#include "vfm/error.hpp"

namespace vfm::ad {

namespace {

constexpr const char* kMagic = "vfm-checkpoint";

std::uint64_t parse_u64(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(fmt::format("checkpoint header: bad {} '{}'", what, s));
  }
}

void expect_key(const std::string& line, const std::string& key, std::string& value) {
  auto [k, v] = io::split_key(line);
  if (k != key) throw FormatError(fmt::format("checkpoint header: expected '{}', found '{}'", key, k));
  value = std::move(v);
}

}  // namespace

std::string serialize_checkpoint(const CheckpointHeader& header, const ParamStore& params) {
  if (header.config_json.find('\n') != std::string::npos) {
    throw UsageError("checkpoint config json must be a single line");
  }
  std::ostringstream os(std::ios::binary);
  os << kMagic << '\n';
  os << "version " << kCheckpointVersion << '\n';
  os << "seed " << header.seed << '\n';
  os << "config_hash " << header.config_hash << '\n';
  os << "step " << header.step << '\n';
  os << "rng " << header.rng_state << '\n';
  os << "config " << header.config_json << '\n';
  os << "tensors " << params.size() * 3 << '\n';
  for (const char* prefix : {"", "adam_m/", "adam_v/"}) {
    for (const auto& p : params) {
      if (p.name.find_first_of(" \t\n") != std::string::npos) {
        throw UsageError(fmt::format("parameter name '{}' contains whitespace", p.name));
      }
      os << "tensor " << prefix << p.name << ' ' << p.value.rows << ' ' << p.value.cols << '\n';
    }
  }
  os << "end\n";
  for (const auto& p : params) io::write_f64_le(os, p.value.data);
  for (const auto& p : params) io::write_f64_le(os, p.adam_m.data);
  for (const auto& p : params) io::write_f64_le(os, p.adam_v.data);
  return std::move(os).str();
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  if (io::read_header_line(is) != kMagic) throw FormatError("not a vfm checkpoint (bad magic)");
  std::string value;
  expect_key(io::read_header_line(is), "version", value);
  if (value != std::to_string(kCheckpointVersion)) {
    throw FormatError(fmt::format("unsupported checkpoint version '{}' (expected {})", value, kCheckpointVersion));
  }
  Checkpoint ck;
  expect_key(io::read_header_line(is), "seed", value);
  ck.header.seed = parse_u64(value, "seed");
  expect_key(io::read_header_line(is), "config_hash", ck.header.config_hash);
  expect_key(io::read_header_line(is), "step", value);
  ck.header.step = parse_u64(value, "step");
  expect_key(io::read_header_line(is), "rng", ck.header.rng_state);
  expect_key(io::read_header_line(is), "config", ck.header.config_json);
  expect_key(io::read_header_line(is), "tensors", value);
  const auto n_tensors = parse_u64(value, "tensor count");
  if (n_tensors % 3 != 0) throw FormatError("checkpoint tensor count must cover values and moments");

  struct Entry {
    std::string name;
    std::size_t rows, cols;
  };
  std::vector<Entry> entries;
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    expect_key(io::read_header_line(is), "tensor", value);
    std::istringstream ls(value);
    Entry e;
    if (!(ls >> e.name >> e.rows >> e.cols)) throw FormatError(fmt::format("bad tensor line '{}'", value));
    entries.push_back(std::move(e));
  }
  if (io::read_header_line(is) != "end") throw FormatError("checkpoint header missing 'end'");

  const std::size_t n_params = entries.size() / 3;
  for (std::size_t i = 0; i < n_params; ++i) {
    const auto& e = entries[i];
    ck.params.add(e.name, Tensor(e.rows, e.cols, io::read_f64_le(is, e.rows * e.cols)));
  }
  for (std::size_t i = 0; i < n_params; ++i) {
    const auto& e = entries[n_params + i];
    if (e.name != "adam_m/" + ck.params[i].name) throw FormatError(fmt::format("unexpected tensor '{}'", e.name));
    ck.params[i].adam_m = Tensor(e.rows, e.cols, io::read_f64_le(is, e.rows * e.cols));
  }
  for (std::size_t i = 0; i < n_params; ++i) {
    const auto& e = entries[2 * n_params + i];
    if (e.name != "adam_v/" + ck.params[i].name) throw FormatError(fmt::format("unexpected tensor '{}'", e.name));
    ck.params[i].adam_v = Tensor(e.rows, e.cols, io::read_f64_le(is, e.rows * e.cols));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
  ck.params.set_step(ck.header.step);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ParamStore& params) {
  io::write_atomically(path, serialize_checkpoint(header, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError(fmt::format("cannot open checkpoint '{}'", path.string()));
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_checkpoint(buf.str());
}

}  // namespace vfm::ad
