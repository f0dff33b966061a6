#include "chunkflow/data/shards.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

const std::string& SampleRecord::entry(const std::string& suffix) const {
  for (const auto& [s, bytes] : entries)
    if (s == suffix) return bytes;
  throw FormatError("record " + key + " has no entry " + suffix);
}

std::string encode_array(const Tensor& t) {
  std::string out = "shape=";
  for (std::size_t i = 0; i < t.shape.size(); ++i) out += (i ? "," : "") + std::to_string(t.shape[i]);
  out += " dtype=f64\n";
  const std::size_t header = out.size();
  out.resize(header + t.data.size() * sizeof(double));
  std::memcpy(out.data() + header, t.data.data(), t.data.size() * sizeof(double));
  return out;
}

Tensor decode_array(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos || bytes.compare(0, 6, "shape=") != 0) throw FormatError("array payload: bad header");
  const std::string header = bytes.substr(0, nl);
  const auto sp = header.find(' ');
  if (sp == std::string::npos || header.substr(sp + 1) != "dtype=f64") throw FormatError("array payload: bad dtype");
  Shape shape;
  std::stringstream dims(header.substr(6, sp - 6));
  std::string tok;
  while (std::getline(dims, tok, ',')) {
    try {
      shape.push_back(std::stoll(tok));
    } catch (const std::exception&) {
      throw FormatError("array payload: bad shape '" + header + "'");
    }
  }
  const std::size_t n = static_cast<std::size_t>(shape_numel(shape));
  if (bytes.size() - nl - 1 != n * sizeof(double)) throw FormatError("array payload: size does not match shape");
  std::vector<double> data(n);
  std::memcpy(data.data(), bytes.data() + nl + 1, n * sizeof(double));
  return Tensor(std::move(shape), std::move(data));
}

SampleRecord chunk_to_record(const DemoChunk& chunk, const std::string& key) {
  SampleRecord r;
  r.key = key;
  r.entries.emplace_back("actions.bin", encode_array(chunk.actions));
  r.entries.emplace_back("context.bin", encode_array(Tensor({Index(chunk.context.size())}, chunk.context)));
  r.entries.emplace_back("goals.bin", encode_array(Tensor({Index(chunk.goals.size())}, chunk.goals)));
  r.entries.emplace_back("meta.txt", "instruction_id=" + std::to_string(chunk.instruction_id) +
                                         "\nmode_id=" + std::to_string(chunk.mode_id) + "\n");
  return r;
}

DemoChunk record_to_chunk(const SampleRecord& record) {
  DemoChunk c;
  c.actions = decode_array(record.entry("actions.bin"));
  const Tensor context = decode_array(record.entry("context.bin")), goals = decode_array(record.entry("goals.bin"));
  c.context.assign(context.data.begin(), context.data.end());
  c.goals.assign(goals.data.begin(), goals.data.end());
  std::stringstream meta(record.entry("meta.txt"));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq);
    const int v = std::stoi(line.substr(eq + 1));
    if (k == "instruction_id") c.instruction_id = v;
    if (k == "mode_id") c.mode_id = v;
  }
  return c;
}

namespace {

constexpr std::size_t kBlock = 512;

void put_octal(char* field, std::size_t width, std::uint64_t value) {
  // width-1 digits, then NUL
  std::string digits(width - 1, '0');
  for (std::size_t i = width - 1; i-- > 0 && value;) {
    digits[i] = char('0' + (value & 7));
    value >>= 3;
  }
  if (value) throw ConfigError("tar: value does not fit header field");
  std::memcpy(field, digits.data(), width - 1);
  field[width - 1] = '\0';
}

std::uint64_t get_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width && field[i]; ++i) {
    if (field[i] == ' ') continue;
    if (field[i] < '0' || field[i] > '7') throw FormatError("tar: bad octal field");
    v = v * 8 + std::uint64_t(field[i] - '0');
  }
  return v;
}

unsigned header_checksum(const char* h) {
  unsigned sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) sum += (i >= 148 && i < 156) ? unsigned(' ') : static_cast<unsigned char>(h[i]);
  return sum;
}

void append_entry(std::string& out, const std::string& name, const std::string& data) {
  if (name.size() > 100) throw ConfigError("tar: entry name longer than 100 bytes: " + name);
  char h[kBlock] = {};
  std::memcpy(h, name.data(), name.size());
  put_octal(h + 100, 8, 0644);
  put_octal(h + 108, 8, 0);
  put_octal(h + 116, 8, 0);
  put_octal(h + 124, 12, data.size());
  put_octal(h + 136, 12, 0);
  h[156] = '0';
  std::memcpy(h + 257, "ustar", 6);
  h[263] = '0';
  h[264] = '0';
  const unsigned sum = header_checksum(h);
  put_octal(h + 148, 7, sum);
  h[155] = ' ';
  out.append(h, kBlock);
  out += data;
  out.append((kBlock - data.size() % kBlock) % kBlock, '\0');
}

}  // namespace

std::string tar_records(const std::vector<SampleRecord>& records) {
  std::string out;
  std::set<std::string> keys;
  for (const SampleRecord& r : records) {
    if (r.key.empty() || r.key.find_first_of("./") != std::string::npos)
      throw ConfigError("sample key must be non-empty and contain no '.' or '/': '" + r.key + "'");
    if (!keys.insert(r.key).second) throw ConfigError("duplicate sample key in shard: " + r.key);
    for (const auto& [suffix, bytes] : r.entries) append_entry(out, r.key + "." + suffix, bytes);
  }
  out.append(2 * kBlock, '\0');
  return out;
}

std::vector<SampleRecord> untar_records(const std::string& bytes) {
  std::vector<SampleRecord> records;
  std::set<std::string> finished;
  std::size_t pos = 0;
  while (true) {
    if (pos + kBlock > bytes.size()) throw FormatError("tar: truncated archive");
    const char* h = bytes.data() + pos;
    if (std::all_of(h, h + kBlock, [](char c) { return c == 0; })) break;
    if (std::memcmp(h + 257, "ustar", 5) != 0) throw FormatError("tar: not a ustar header");
    if (get_octal(h + 148, 8) != header_checksum(h)) throw FormatError("tar: header checksum mismatch");
    const std::string name(h, strnlen(h, 100));
    const std::uint64_t size = get_octal(h + 124, 12);
    pos += kBlock;
    if (pos + size > bytes.size()) throw FormatError("tar: truncated entry " + name);
    const std::string data = bytes.substr(pos, size);
    pos += (size + kBlock - 1) / kBlock * kBlock;
    if (h[156] != '0' && h[156] != '\0') continue;

    const auto dot = name.find('.');
    if (dot == std::string::npos) throw FormatError("tar: entry without suffix: " + name);
    const std::string key = name.substr(0, dot);
    if (records.empty() || records.back().key != key) {
      if (!records.empty()) finished.insert(records.back().key);
      if (finished.count(key)) throw FormatError("tar: entries of sample " + key + " are not contiguous");
      records.push_back({key, {}});
    }
    records.back().entries.emplace_back(name.substr(dot + 1), data);
  }
  return records;
}

std::vector<std::filesystem::path> write_shards(const std::vector<SampleRecord>& records, std::size_t shard_size,
                                                const std::filesystem::path& dir, const std::string& prefix) {
  if (shard_size < 1) throw ConfigError("shard_size must be >= 1");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t start = 0; start < records.size(); start += shard_size) {
    const std::size_t end = std::min(records.size(), start + shard_size);
    const std::vector<SampleRecord> part(records.begin() + std::ptrdiff_t(start), records.begin() + std::ptrdiff_t(end));
    char name[64];
    std::snprintf(name, sizeof name, "%s-%06zu.tar", prefix.c_str(), paths.size());
    const auto path = dir / name;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path.string());
    const std::string bytes = tar_records(part);
    f.write(bytes.data(), std::streamsize(bytes.size()));
    paths.push_back(path);
  }
  return paths;
}

std::vector<SampleRecord> read_shard(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read shard " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return untar_records(ss.str());
}

std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".tar") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

ResampleStream::ResampleStream(std::vector<std::filesystem::path> shards, std::uint64_t seed)
    : shards_(std::move(shards)), unreadable_(shards_.size(), false), rng_(seed) {
  if (shards_.empty()) throw ConfigError("resample stream needs at least one shard");
}

std::optional<SampleRecord> ResampleStream::next() {
  while (pos_ >= buffer_.size()) {
    if (std::all_of(unreadable_.begin(), unreadable_.end(), [](bool b) { return b; }))
      throw FormatError("no readable shards among " + std::to_string(shards_.size()));
    current_ = rng_.index(shards_.size());
    if (unreadable_[current_]) continue;
    try {
      buffer_ = read_shard(shards_[current_]);
    } catch (const std::exception& e) {
      spdlog::warn("skipping shard {}: {}", shards_[current_].string(), e.what());
      unreadable_[current_] = true;
      buffer_.clear();
    }
    pos_ = 0;
  }
  return buffer_[pos_++];
}

EpochStream::EpochStream(std::vector<std::filesystem::path> shards, std::uint64_t seed) : shards_(std::move(shards)) {
  order_.resize(shards_.size());
  std::iota(order_.begin(), order_.end(), std::size_t(0));
  Rng rng(seed);
  // Fisher-Yates with our own index draw, so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.index(i)]);
}

std::optional<SampleRecord> EpochStream::next() {
  while (pos_ >= buffer_.size()) {
    if (shard_pos_ >= order_.size()) return std::nullopt;
    const auto& path = shards_[order_[shard_pos_++]];
    try {
      buffer_ = read_shard(path);
    } catch (const std::exception& e) {
      spdlog::warn("skipping shard {}: {}", path.string(), e.what());
      buffer_.clear();
    }
    pos_ = 0;
  }
  return buffer_[pos_++];
}

MixStream::MixStream(std::vector<std::unique_ptr<RecordStream>> sources, std::vector<double> weights,
                     std::uint64_t seed)
    : sources_(std::move(sources)), rng_(seed) {
  set_weights(std::move(weights));
}

void MixStream::set_weights(std::vector<double> weights) {
  if (weights.size() != sources_.size()) throw ConfigError("mix: weight count differs from source count");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("mix: weights must be >= 0");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("mix: all weights are zero");
  weights_ = std::move(weights);
}

std::optional<SampleRecord> MixStream::next() {
  const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
  const double u = rng_.uniform() * total;
  std::size_t pick = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights_[i] == 0.0) continue;
    pick = i;
    acc += weights_[i];
    if (u < acc) break;
  }
  last_ = pick;
  return sources_[pick]->next();
}

PrefetchStream::PrefetchStream(std::unique_ptr<RecordStream> source, std::size_t capacity)
    : source_(std::move(source)), capacity_(std::max<std::size_t>(1, capacity)) {
  reader_ = std::thread([this] { run(); });
}

PrefetchStream::~PrefetchStream() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  not_full_.notify_all();
  reader_.join();
}

void PrefetchStream::run() {
  try {
    while (true) {
      {
        std::unique_lock lock(mu_);
        not_full_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
        if (stop_) return;
      }
      std::optional<SampleRecord> r = source_->next();
      std::lock_guard lock(mu_);
      if (!r) {
        done_ = true;
        not_empty_.notify_all();
        return;
      }
      queue_.push_back(std::move(*r));
      not_empty_.notify_one();
    }
  } catch (...) {
    std::lock_guard lock(mu_);
    error_ = std::current_exception();
    done_ = true;
    not_empty_.notify_all();
  }
}

std::optional<SampleRecord> PrefetchStream::next() {
  std::unique_lock lock(mu_);
  not_empty_.wait(lock, [this] { return !queue_.empty() || done_; });
  if (queue_.empty()) {
    if (error_) std::rethrow_exception(error_);
    return std::nullopt;
  }
  SampleRecord r = std::move(queue_.front());
  queue_.pop_front();
  not_full_.notify_one();
  return r;
}

std::vector<std::pair<std::string, double>> parse_mix(const std::string& text) {
  std::vector<std::pair<std::string, double>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("mix: expected name=weight, got '" + item + "'");
    try {
      out.emplace_back(item.substr(0, eq), std::stod(item.substr(eq + 1)));
    } catch (const std::exception&) {
      throw ConfigError("mix: bad weight in '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("mix: empty specification");
  return out;
}

}  // namespace chunkflow
