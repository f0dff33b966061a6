#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/data/shards.hpp"
#include "doctest.h"

using namespace chunkflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("chunkflow-shards-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<SampleRecord> make_records(std::size_t n, const std::string& stem = "s") {
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord r;
    r.key = stem + std::to_string(i);
    r.entries.emplace_back("actions.bin", encode_array(Tensor({2}, {double(i), -double(i)})));
    r.entries.emplace_back("meta.txt", "i=" + std::to_string(i) + "\n");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::string> external_listing(const fs::path& tar) {
  std::vector<std::string> names;
  FILE* p = popen(("tar -tf '" + tar.string() + "'").c_str(), "r");
  REQUIRE(p != nullptr);
  char line[512];
  while (std::fgets(line, sizeof line, p)) {
    std::string s(line);
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    names.push_back(s);
  }
  CHECK(pclose(p) == 0);
  return names;
}

std::vector<std::string> drain_keys(RecordStream& s, std::size_t limit) {
  std::vector<std::string> keys;
  while (keys.size() < limit) {
    auto r = s.next();
    if (!r) break;
    keys.push_back(r->key);
  }
  return keys;
}

}  // namespace

TEST_CASE("array payload round trip") {
  Rng rng(1);
  const Tensor t = Tensor::randn({3, 5}, rng);
  const std::string bytes = encode_array(t);
  CHECK(bytes.substr(0, bytes.find('\n')) == "shape=3,5 dtype=f64");
  const Tensor back = decode_array(bytes);
  CHECK(back.shape == t.shape);
  CHECK(back.data == t.data);
  CHECK_THROWS_AS(decode_array("shape=3 dtype=f32\n"), FormatError);
  CHECK_THROWS_AS(decode_array(bytes.substr(0, bytes.size() - 1)), FormatError);
}

TEST_CASE("demo chunks survive the record encoding") {
  const Dataset ds = generate_dataset(TaskSpec::default_task(), 3);
  for (const DemoChunk& c : ds.chunks) {
    const DemoChunk back = record_to_chunk(chunk_to_record(c, "k"));
    CHECK(back.actions.data == c.actions.data);
    CHECK(back.context == c.context);
    CHECK(back.goals == c.goals);
    CHECK(back.mode_id == c.mode_id);
    CHECK(back.instruction_id == c.instruction_id);
  }
}

TEST_CASE("write_shards examples") {
  SUBCASE("one record, one shard, entries in order") {
    const fs::path dir = scratch("one");
    const auto recs = make_records(1);
    const auto paths = write_shards(recs, 8, dir);
    REQUIRE(paths.size() == 1);
    const auto back = read_shard(paths[0]);
    REQUIRE(back.size() == 1);
    CHECK(back[0] == recs[0]);
    CHECK(external_listing(paths[0]) == std::vector<std::string>{"s0.actions.bin", "s0.meta.txt"});
  }
  SUBCASE("ceiling split") {
    const fs::path dir = scratch("split");
    const auto recs = make_records(1000);
    const auto paths = write_shards(recs, 256, dir);
    REQUIRE(paths.size() == 4);
    std::vector<std::size_t> sizes;
    std::vector<SampleRecord> all;
    for (const auto& p : paths) {
      auto part = read_shard(p);
      sizes.push_back(part.size());
      all.insert(all.end(), part.begin(), part.end());
    }
    CHECK(sizes == std::vector<std::size_t>{256, 256, 256, 232});
    CHECK(all == recs);
    CHECK(list_shards(dir) == paths);
  }
  SUBCASE("external tar lists exactly the written entries") {
    const fs::path dir = scratch("listing");
    const auto recs = make_records(5);
    const auto paths = write_shards(recs, 5, dir);
    std::vector<std::string> expected;
    for (const auto& r : recs)
      for (const auto& e : r.entries) expected.push_back(r.key + "." + e.first);
    CHECK(external_listing(paths[0]) == expected);
  }
  SUBCASE("duplicate key is rejected") {
    auto recs = make_records(2);
    recs[1].key = recs[0].key;
    CHECK_THROWS_AS(tar_records(recs), ConfigError);
    recs[1].key = "has.dot";
    CHECK_THROWS_AS(tar_records(recs), ConfigError);
    CHECK_THROWS_AS(write_shards(make_records(1), 0, scratch("zero")), ConfigError);
  }
  SUBCASE("corrupt archive") {
    std::string bytes = tar_records(make_records(2));
    bytes[130] ^= 1;
    CHECK_THROWS_AS(untar_records(bytes), FormatError);
    CHECK_THROWS_AS(untar_records(bytes.substr(0, 700)), FormatError);
  }
}

TEST_CASE("record bytes survive shards exactly") {
  const fs::path dir = scratch("bytes");
  const Dataset ds = generate_dataset(TaskSpec::default_task(), 40);
  std::vector<SampleRecord> recs;
  for (std::size_t i = 0; i < ds.chunks.size(); ++i) recs.push_back(chunk_to_record(ds.chunks[i], "c" + std::to_string(i)));
  std::vector<SampleRecord> back;
  for (const auto& p : write_shards(recs, 16, dir)) {
    auto part = read_shard(p);
    back.insert(back.end(), part.begin(), part.end());
  }
  CHECK(back == recs);
}

TEST_CASE("stream_resample examples") {
  SUBCASE("single shard yields its records in order") {
    const fs::path dir = scratch("resample1");
    const auto paths = write_shards(make_records(7), 7, dir);
    ResampleStream s(paths, 3);
    const auto keys = drain_keys(s, 14);
    for (std::size_t i = 0; i < 14; ++i) CHECK(keys[i] == "s" + std::to_string(i % 7));
  }
  SUBCASE("shard choice frequencies") {
    const fs::path dir = scratch("resample2");
    const auto paths = write_shards(make_records(2), 1, dir);
    ResampleStream s(paths, 5);
    const int n = 100000;
    int first = 0;
    for (int i = 0; i < n; ++i) {
      s.next();
      first += s.current_shard() == 0;
    }
    CHECK(std::abs(first - n / 2) <= 3.0 * std::sqrt(n * 0.25));
  }
  SUBCASE("same seed, same keys") {
    const fs::path dir = scratch("resample3");
    const auto paths = write_shards(make_records(50), 7, dir);
    ResampleStream a(paths, 11), b(paths, 11), c(paths, 12);
    const auto ka = drain_keys(a, 1000);
    CHECK(ka == drain_keys(b, 1000));
    CHECK(ka != drain_keys(c, 1000));
  }
  SUBCASE("unreadable shard is skipped") {
    const fs::path dir = scratch("resample4");
    auto paths = write_shards(make_records(3), 3, dir);
    std::ofstream(dir / "broken.tar") << "not a tar file";
    paths.push_back(dir / "broken.tar");
    paths.push_back(dir / "missing.tar");
    ResampleStream s(paths, 1);
    for (const auto& k : drain_keys(s, 200)) CHECK(k[0] == 's');
  }
  SUBCASE("nothing readable") {
    const fs::path dir = scratch("resample5");
    std::ofstream(dir / "broken.tar") << "junk";
    ResampleStream s({dir / "broken.tar"}, 1);
    CHECK_THROWS_AS(s.next(), FormatError);
  }
}

TEST_CASE("random_mix examples") {
  const fs::path dir = scratch("mix");
  const auto a = write_shards(make_records(5, "a"), 5, dir, "a");
  const auto b = write_shards(make_records(5, "b"), 5, dir, "b");
  auto sources = [&] {
    std::vector<std::unique_ptr<RecordStream>> s;
    s.push_back(std::make_unique<ResampleStream>(a, 1));
    s.push_back(std::make_unique<ResampleStream>(b, 2));
    return s;
  };
  SUBCASE("zero weight source never appears") {
    MixStream m(sources(), {1, 0}, 4);
    for (const auto& k : drain_keys(m, 500)) CHECK(k[0] == 'a');
  }
  SUBCASE("3:1 proportions") {
    MixStream m(sources(), {3, 1}, 4);
    const int n = 10000;
    int first = 0;
    for (const auto& k : drain_keys(m, n)) first += k[0] == 'a';
    CHECK(std::abs(first / double(n) - 0.75) <= 3.0 * std::sqrt(0.1875 / n));
  }
  SUBCASE("weight change applies on the next draw") {
    MixStream m(sources(), {1, 0}, 4);
    CHECK(m.next()->key[0] == 'a');
    m.set_weights({0, 1});
    CHECK(m.next()->key[0] == 'b');
  }
  SUBCASE("all-zero weights") {
    CHECK_THROWS_AS(MixStream(sources(), {0, 0}, 4), ConfigError);
    CHECK_THROWS_AS(MixStream(sources(), {1}, 4), ConfigError);
  }
  SUBCASE("prefetched sources give the same blended stream") {
    MixStream plain(sources(), {3, 1}, 9);
    std::vector<std::unique_ptr<RecordStream>> pre;
    for (auto& s : sources()) pre.push_back(std::make_unique<PrefetchStream>(std::move(s), 4));
    MixStream buffered(std::move(pre), {3, 1}, 9);
    CHECK(drain_keys(plain, 3000) == drain_keys(buffered, 3000));
  }
}

TEST_CASE("epoch_once examples") {
  const fs::path dir = scratch("epoch");
  const auto recs = make_records(103);
  const auto paths = write_shards(recs, 10, dir);
  std::multiset<std::string> written;
  for (const auto& r : recs) written.insert(r.key);
  EpochStream a(paths, 1), b(paths, 2);
  const auto ka = drain_keys(a, 1000), kb = drain_keys(b, 1000);
  CHECK(ka.size() == recs.size());
  CHECK(std::multiset<std::string>(ka.begin(), ka.end()) == written);
  CHECK(std::multiset<std::string>(kb.begin(), kb.end()) == written);
  CHECK(a.shard_order() != b.shard_order());
  // In-shard order is preserved: consecutive keys within a shard ascend.
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < ka.size(); ++i) pos[ka[i]] = i;
  for (std::size_t i = 0; i + 1 < recs.size(); ++i)
    if (i / 10 == (i + 1) / 10) CHECK(pos[recs[i + 1].key] == pos[recs[i].key] + 1);
}

TEST_CASE("prefetch keeps order and propagates errors") {
  const fs::path dir = scratch("prefetch");
  const auto paths = write_shards(make_records(300), 64, dir);
  PrefetchStream p(std::make_unique<EpochStream>(paths, 3), 8);
  EpochStream direct(paths, 3);
  CHECK(drain_keys(p, 1000) == drain_keys(direct, 1000));
  CHECK_FALSE(p.next().has_value());

  std::ofstream(dir / "junk.tar") << "junk";
  PrefetchStream bad(std::make_unique<ResampleStream>(std::vector<fs::path>{dir / "junk.tar"}, 1), 8);
  CHECK_THROWS_AS(bad.next(), FormatError);
}

TEST_CASE("mix spec parsing") {
  const auto m = parse_mix("a=3,b=1");
  REQUIRE(m.size() == 2);
  CHECK(m[0].first == "a");
  CHECK(m[0].second == 3.0);
  CHECK(m[1].second == 1.0);
  CHECK_THROWS_AS(parse_mix("a3"), ConfigError);
  CHECK_THROWS_AS(parse_mix("a=x"), ConfigError);
}
