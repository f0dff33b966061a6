#include "chunkflow/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "chunkflow/core/errors.hpp"
#include "json.hpp"

namespace chunkflow {

namespace {

constexpr char kMagic[8] = {'C', 'F', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

const std::string& Checkpoint::meta(const std::string& key) const {
  auto it = metadata_.find(key);
  if (it == metadata_.end()) throw FormatError("checkpoint has no metadata key '" + key + "'");
  return it->second;
}

void Checkpoint::put(const std::string& name, const Tensor& tensor) {
  if (auto it = index_.find(name); it != index_.end()) {
    tensors_[it->second].second = tensor;
    return;
  }
  index_[name] = tensors_.size();
  tensors_.emplace_back(name, tensor);
}

const Tensor& Checkpoint::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("checkpoint has no tensor '" + name + "'");
  return tensors_[it->second].second;
}

void Checkpoint::put_parameters(const ParameterList& params, const std::string& prefix) {
  for (const Parameter* p : params) put(prefix + p->name, p->value);
}

void Checkpoint::get_parameters(const ParameterList& params, const std::string& prefix) const {
  for (Parameter* p : params) {
    const Tensor& t = get(prefix + p->name);
    if (t.shape != p->value.shape) {
      throw FormatError("shape mismatch for '" + p->name + "': stored " + shape_string(t.shape) + ", model " +
                        shape_string(p->value.shape));
    }
    p->value.data = t.data;
  }
}

void Checkpoint::put_optimizer(const OptimizerState& state, const ParameterList& params, const std::string& prefix) {
  set_meta(prefix + "step", std::to_string(state.step));
  for (std::size_t i = 0; i < state.first_moment.size(); ++i) {
    put(prefix + "m." + params[i]->name, state.first_moment[i]);
    put(prefix + "v." + params[i]->name, state.second_moment[i]);
  }
}

OptimizerState Checkpoint::get_optimizer(const ParameterList& params, const std::string& prefix) const {
  OptimizerState s;
  s.step = std::stoll(meta(prefix + "step"));
  if (s.step > 0) {
    for (const Parameter* p : params) {
      s.first_moment.push_back(get(prefix + "m." + p->name));
      s.second_moment.push_back(get(prefix + "v." + p->name));
    }
  }
  return s;
}

std::string Checkpoint::serialize() const {
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["metadata"] = metadata_;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    const std::uint64_t nbytes = t.data.size() * sizeof(double);
    entries.push_back({{"name", name}, {"shape", t.shape}, {"dtype", "f64"}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  manifest["tensors"] = entries;
  const std::string text = manifest.dump();
  std::string out(kMagic, sizeof(kMagic));
  append_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& entry : tensors_) {
    const auto& data = entry.second.data;
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a chunkflow checkpoint");
  }
  const std::uint64_t len = read_u64(bytes, 8);
  if (16 + len > bytes.size()) throw FormatError("truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format_version", 0) != kFormatVersion) throw FormatError("unsupported checkpoint version");
  Checkpoint ck;
  ck.metadata_ = manifest.at("metadata").get<std::map<std::string, std::string>>();
  const std::size_t base = 16 + len;
  for (const auto& e : manifest.at("tensors")) {
    if (e.at("dtype") != "f64") throw FormatError("unsupported dtype in checkpoint");
    Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t off = e.at("offset"), nbytes = e.at("nbytes");
    if (base + off + nbytes > bytes.size() || nbytes != shape_numel(shape) * sizeof(double)) {
      throw FormatError("checkpoint blob out of bounds for " + e.at("name").get<std::string>());
    }
    Tensor t(shape);
    std::memcpy(t.data.data(), bytes.data() + base + off, nbytes);
    ck.put(e.at("name").get<std::string>(), t);
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize();
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

}  // namespace chunkflow
