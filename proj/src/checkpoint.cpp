#include "fpnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace fpnet {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename U>
  void put(U v) {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    bytes.append(b, sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) { bytes.append(static_cast<const char*>(p), n); }
  std::string bytes;
};

class Reader {
 public:
  explicit Reader(std::string b) : bytes_(std::move(b)) {}

  template <typename U>
  U get(const std::string& what) {
    U v;
    take(&v, sizeof(U), what);
    return v;
  }
  void take(void* out, std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated while reading " + what);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
CheckpointEntry to_entry(const std::string& name, const Tensor<T>& t) {
  CheckpointEntry e;
  e.name = name;
  for (std::size_t d : t.shape().dims) e.extents.push_back(static_cast<std::uint32_t>(d));
  e.data.assign(t.data().begin(), t.data().end());
  return e;
}

Shape entry_shape(const CheckpointEntry& e) {
  // Lower ranks are left-padded with unit extents.
  Shape s{1, 1, 1, 1};
  const std::size_t offset = 4 - e.extents.size();
  for (std::size_t i = 0; i < e.extents.size(); ++i) s.dims[offset + i] = e.extents[i];
  return s;
}

template <typename T>
void assign(const CheckpointEntry& e, Tensor<T>& target) {
  if (e.extents.size() > 4 || entry_shape(e) != target.shape()) {
    throw FormatError("checkpoint entry '" + e.name + "' has shape " + entry_shape(e).str() + ", model expects " +
                      target.shape().str());
  }
  auto dst = target.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.data[i]);
}

}  // namespace

void write_checkpoint_file(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  Writer w;
  w.put_bytes("FPNT", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw UsageError("checkpoint entry name too long: " + e.name);
    if (e.extents.size() > 0xff) throw UsageError("checkpoint entry rank too large: " + e.name);
    std::size_t count = 1;
    for (auto x : e.extents) count *= x;
    if (count != e.data.size()) throw UsageError("checkpoint entry '" + e.name + "' data does not match extents");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.extents.size()));
    for (auto x : e.extents) w.put<std::uint32_t>(x);
    w.put_bytes(e.data.data(), e.data.size() * sizeof(float));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

std::vector<CheckpointEntry> read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}));
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, "FPNT", 4) != 0) throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const std::string where = "entry #" + std::to_string(k);
    e.name.resize(r.get<std::uint16_t>(where + " name length"));
    r.take(e.name.data(), e.name.size(), where + " name");
    const auto rank = r.get<std::uint8_t>("rank of '" + e.name + "'");
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      e.extents.push_back(r.get<std::uint32_t>("extents of '" + e.name + "'"));
      numel *= e.extents.back();
    }
    e.data.resize(numel);
    r.take(e.data.data(), numel * sizeof(float), "data of '" + e.name + "'");
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last checkpoint entry");
  return entries;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params, const TensorDict<T>& buffers,
                     bool with_optimizer) {
  std::vector<CheckpointEntry> entries;
  for (const auto& [name, t] : params.tensors()) entries.push_back(to_entry(name, t));
  for (const auto& [name, t] : buffers) entries.push_back(to_entry(name, t));
  if (with_optimizer) {
    for (const auto& [name, t] : params.tensors()) entries.push_back(to_entry("adam.m/" + name, params.first_moment(name)));
    for (const auto& [name, t] : params.tensors()) entries.push_back(to_entry("adam.v/" + name, params.second_moment(name)));
    entries.push_back({"adam.t", {1, 1, 1, 1}, {static_cast<float>(params.step_count())}});
  }
  write_checkpoint_file(path, entries);
}

template <typename T>
std::vector<std::string> load_checkpoint(const std::string& path, ParamStore<T>& params, TensorDict<T>& buffers,
                                         LoadMode mode) {
  const std::vector<CheckpointEntry> entries = read_checkpoint_file(path);
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second) throw FormatError("duplicate checkpoint entry '" + e.name + "'");
  }
  auto need = [&](const std::string& name) -> const CheckpointEntry& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing entry '" + name + "'");
    return *it->second;
  };

  for (auto& [name, t] : params.tensors()) assign(need(name), t);
  for (auto& [name, t] : buffers) assign(need(name), t);
  if (mode == LoadMode::resume) {
    for (const auto& [name, t] : params.tensors()) {
      assign(need("adam.m/" + name), params.first_moment(name));
      assign(need("adam.v/" + name), params.second_moment(name));
    }
    const CheckpointEntry& t = need("adam.t");
    if (t.data.size() != 1 || t.data[0] < 0) throw FormatError("checkpoint entry 'adam.t' is malformed");
    params.set_step_count(static_cast<std::size_t>(t.data[0]));
  }

  std::vector<std::string> ignored;
  for (const auto& e : entries) {
    if (params.contains(e.name) || buffers.contains(e.name)) continue;
    if (e.name.rfind("adam.", 0) == 0) continue;
    ignored.push_back(e.name);
  }
  return ignored;
}

template void save_checkpoint(const std::string&, const ParamStore<float>&, const TensorDict<float>&, bool);
template void save_checkpoint(const std::string&, const ParamStore<double>&, const TensorDict<double>&, bool);
template std::vector<std::string> load_checkpoint(const std::string&, ParamStore<float>&, TensorDict<float>&, LoadMode);
template std::vector<std::string> load_checkpoint(const std::string&, ParamStore<double>&, TensorDict<double>&,
                                                  LoadMode);

}  // namespace fpnet
