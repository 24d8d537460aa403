#include "lrdb/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <set>

#include "lrdb/errors.hpp"
#include "lrdb/io.hpp"

namespace lrdb {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'R', 'D', 'B'};

class Writer {
 public:
  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string(const char* field) {
    const auto n = get<std::uint32_t>(field);
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void get_floats(std::span<float> out, const char* field) {
    need(out.size_bytes(), field);
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + ": " + what + " (byte " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n, const char* field) {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated checkpoint while reading ") + field);
  }

  std::span<const std::uint8_t> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

template <typename Scalar>
Tensor<float> to_f32(Shape shape, std::span<const Scalar> values) {
  std::vector<float> out(values.begin(), values.end());
  return Tensor<float>(std::move(shape), std::move(out));
}

template <typename Scalar>
void copy_into(const Tensor<float>& src, std::span<Scalar> dst, const std::string& name) {
  if (static_cast<std::size_t>(src.size()) != dst.size()) {
    throw FormatError("checkpoint tensor " + name + " has " + std::to_string(src.size()) + " values, expected " +
                      std::to_string(dst.size()));
  }
  std::copy(src.values().begin(), src.values().end(), dst.begin());
}

}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.put(kCheckpointVersion);
  w.put_string(ckpt.spec);
  w.put(static_cast<std::uint64_t>(ckpt.step));
  w.put(ckpt.best_accuracy);
  w.put_string(ckpt.fingerprint);
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.put(static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    w.bytes.insert(w.bytes.end(), p, p + t.size() * sizeof(float));
  }
  return std::move(w.bytes);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  Reader r(bytes, source);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>("magic"));
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, not an LRDB checkpoint");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.spec = r.get_string("spec");
  ckpt.step = static_cast<std::int64_t>(r.get<std::uint64_t>("step"));
  ckpt.best_accuracy = r.get<double>("best accuracy");
  ckpt.fingerprint = r.get_string("fingerprint");
  const auto count = r.get<std::uint32_t>("record count");
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.get_string("record name");
    if (!seen.insert(name).second) r.fail("duplicate record " + name);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) r.fail("record " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint32_t>("dims");
      if (extent == 0) r.fail("record " + name + " has a zero extent");
      shape.push_back(extent);
    }
    Tensor<float> t(shape);
    r.get_floats(t.values(), ("payload of " + name).c_str());
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) r.fail("trailing bytes after the last record");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path), path.string()); }

template <typename Scalar>
Checkpoint make_checkpoint(const Network<Scalar>& net, std::int64_t step, double best_accuracy,
                           std::string fingerprint, const Sgd<Scalar>* optimizer) {
  Checkpoint ckpt;
  ckpt.spec = net.spec().to_string();
  ckpt.step = step;
  ckpt.best_accuracy = best_accuracy;
  ckpt.fingerprint = std::move(fingerprint);
  for (const auto& name : net.parameter_names()) {
    const auto& p = net.parameter(name);
    ckpt.tensors.emplace_back(name, to_f32<Scalar>(p->shape(), p->values()));
  }
  for (const auto& name : net.batchnorm_names()) {
    const auto& bn = net.batchnorm_state(name);
    ckpt.tensors.emplace_back(name + ".running_mean", to_f32<Scalar>({bn.channels()}, bn.running_mean));
    ckpt.tensors.emplace_back(name + ".running_var", to_f32<Scalar>({bn.channels()}, bn.running_var));
  }
  if (optimizer) {
    for (const auto& slot : optimizer->slots()) {
      ckpt.tensors.emplace_back("velocity/" + slot.name, to_f32<Scalar>(slot.param->shape(), slot.velocity));
    }
  }
  return ckpt;
}

template <typename Scalar>
void apply_checkpoint(const Checkpoint& ckpt, Network<Scalar>& net, Sgd<Scalar>* optimizer) {
  const std::string expected = net.spec().to_string();
  if (ckpt.spec != expected) {
    throw FormatError("checkpoint spec " + ckpt.spec + " does not match network spec " + expected);
  }
  std::set<std::string> known;
  auto require = [&](const std::string& name) -> const Tensor<float>& {
    const Tensor<float>* t = ckpt.find(name);
    if (!t) throw FormatError("checkpoint lacks tensor " + name);
    known.insert(name);
    return *t;
  };
  for (const auto& name : net.parameter_names()) {
    const Tensor<float>& src = require(name);
    const auto& dst = net.parameter(name);
    if (src.shape() != dst->shape()) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_string(src.shape()) + ", expected " +
                        shape_string(dst->shape()));
    }
    copy_into<Scalar>(src, dst->values(), name);
  }
  for (const auto& name : net.batchnorm_names()) {
    auto& bn = net.batchnorm_state(name);
    copy_into<Scalar>(require(name + ".running_mean"), bn.running_mean, name + ".running_mean");
    copy_into<Scalar>(require(name + ".running_var"), bn.running_var, name + ".running_var");
  }
  if (optimizer) {
    for (auto& slot : optimizer->slots()) {
      if (const Tensor<float>* v = ckpt.find("velocity/" + slot.name)) {
        copy_into<Scalar>(*v, std::span<Scalar>(slot.velocity), "velocity/" + slot.name);
      }
    }
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (!known.count(name) && name.rfind("velocity/", 0) != 0) {
      throw FormatError("checkpoint holds unknown tensor " + name);
    }
    if (name.rfind("velocity/", 0) == 0 && !net.has_parameter(name.substr(9))) {
      throw FormatError("checkpoint holds velocity for unknown parameter " + name.substr(9));
    }
  }
}

template <typename Scalar>
Network<Scalar> network_from_checkpoint(const Checkpoint& ckpt) {
  Network<Scalar> net = Network<Scalar>::build(parse_spec(ckpt.spec), 0);
  apply_checkpoint(ckpt, net);
  return net;
}

template <typename Scalar>
std::string state_hash(const Network<Scalar>& net) {
  auto bytes_of = [](std::span<const Scalar> v) {
    return std::span(reinterpret_cast<const std::uint8_t*>(v.data()), v.size_bytes());
  };
  std::uint64_t h = fnv1a({});
  for (const auto& name : net.parameter_names()) h = fnv1a(bytes_of(net.parameter(name)->values()), h);
  for (const auto& name : net.batchnorm_names()) {
    const auto& bn = net.batchnorm_state(name);
    h = fnv1a(bytes_of(bn.running_mean), h);
    h = fnv1a(bytes_of(bn.running_var), h);
  }
  return hex64(h);
}

template Checkpoint make_checkpoint<float>(const Network<float>&, std::int64_t, double, std::string, const Sgd<float>*);
template Checkpoint make_checkpoint<double>(const Network<double>&, std::int64_t, double, std::string,
                                            const Sgd<double>*);
template void apply_checkpoint<float>(const Checkpoint&, Network<float>&, Sgd<float>*);
template void apply_checkpoint<double>(const Checkpoint&, Network<double>&, Sgd<double>*);
template Network<float> network_from_checkpoint<float>(const Checkpoint&);
template Network<double> network_from_checkpoint<double>(const Checkpoint&);
template std::string state_hash<float>(const Network<float>&);
template std::string state_hash<double>(const Network<double>&);

}  // namespace lrdb
