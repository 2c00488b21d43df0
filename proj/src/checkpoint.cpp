#include "aunet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "aunet/error.hpp"

namespace aunet {

namespace {

constexpr char kMagic[8] = {'A', 'U', 'N', 'E', 'T', 'C', 'K', '\0'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void array(const NamedArray& a) {
    str(a.name);
    pod<std::uint32_t>(static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) pod<std::int32_t>(d);
    pod<std::uint64_t>(a.data.size());
    out_.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(double));
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& s, std::size_t end) : s_(s), end_(end) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  NamedArray array() {
    NamedArray a;
    a.name = str();
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw ParseError("checkpoint array '" + a.name + "' has rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(pod<std::int32_t>());
    const auto n = pod<std::uint64_t>();
    if (n != numel(a.shape)) throw ParseError("checkpoint array '" + a.name + "' size does not match its shape");
    need(n * sizeof(double));
    a.data.resize(n);
    std::memcpy(a.data.data(), s_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return a;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw ParseError("checkpoint is truncated");
  }
  const std::string& s_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes().append(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(ckpt.version);
  w.str(ckpt.config_text);
  w.pod<std::uint64_t>(ckpt.step);
  w.pod<std::uint64_t>(ckpt.params.size());
  for (const NamedArray& a : ckpt.params) w.array(a);
  w.pod<std::uint64_t>(ckpt.optimizer.size());
  for (const NamedArray& a : ckpt.optimizer) w.array(a);
  const std::uint64_t sum = fnv1a(w.bytes().data(), w.bytes().size());
  w.pod<std::uint64_t>(sum);
  return std::move(w.bytes());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw ParseError("not a checkpoint file");
  Checkpoint c;
  std::memcpy(&c.version, bytes.data() + sizeof kMagic, sizeof c.version);
  if (c.version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(c.version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof stored);
  if (stored != fnv1a(bytes.data(), body)) throw ParseError("checkpoint checksum mismatch");

  Reader r(bytes, body);
  r.pod<std::array<char, 8>>();
  r.pod<std::uint32_t>();
  c.config_text = r.str();
  c.step = r.pod<std::uint64_t>();
  const auto np = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < np; ++i) c.params.push_back(r.array());
  const auto no = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < no; ++i) c.optimizer.push_back(r.array());
  if (!r.done()) throw ParseError("trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

Checkpoint capture_checkpoint(const RunConfig& config, const AuNet& model, const Optimizer* optimizer,
                              std::uint64_t step) {
  Checkpoint c;
  c.config_text = dump_config(config);
  c.step = step;
  for (const auto& p : model.params().all()) c.params.push_back({p->name, p->shape, p->value});
  if (optimizer) c.optimizer = optimizer->state();
  return c;
}

void restore_parameters(const Checkpoint& ckpt, AuNet& model) {
  std::unordered_map<std::string, const NamedArray*> by_name;
  for (const NamedArray& a : ckpt.params) by_name[a.name] = &a;
  for (const auto& p : model.params().all()) {
    const auto it = by_name.find(p->name);
    if (it == by_name.end()) throw IntegrityError("checkpoint lacks parameter " + p->name);
    if (it->second->shape != p->shape)
      throw IntegrityError("parameter " + p->name + " has shape " + shape_str(it->second->shape) +
                           " in checkpoint, model expects " + shape_str(p->shape));
    p->value = it->second->data;
  }
  if (by_name.size() != model.params().size())
    throw IntegrityError("checkpoint holds parameters the model does not define");
}

LoadedModel load_model(const std::filesystem::path& path) {
  LoadedModel m;
  m.checkpoint = load_checkpoint(path);
  m.config = parse_config(m.checkpoint.config_text);
  m.model = std::make_unique<AuNet>(m.config.model, m.config.seed);
  restore_parameters(m.checkpoint, *m.model);
  return m;
}

}  // namespace aunet
