#include "core/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

namespace al {

namespace {

constexpr char kMagic[4] = {'A', 'L', 'C', 'K'};
constexpr uint32_t kVersion = 1;
constexpr uint64_t kMaxElems = uint64_t(1) << 33;  // 64 GiB of doubles; sanity cap

struct FileCloser {
  void operator()(FILE* f) const { if (f) std::fclose(f); }
};
using File = std::unique_ptr<FILE, FileCloser>;

void write_raw(FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) fail_io("write failed: " + path);
}
void read_raw(FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) fail_io("truncated or unreadable file: " + path);
}

template <typename T>
void write_val(FILE* f, T v, const std::string& path) {
  write_raw(f, &v, sizeof(T), path);
}
template <typename T>
T read_val(FILE* f, const std::string& path) {
  T v;
  read_raw(f, &v, sizeof(T), path);
  return v;
}

void write_str(FILE* f, const std::string& s, const std::string& path) {
  check(s.size() <= UINT32_MAX, "string too long for container");
  write_val<uint32_t>(f, uint32_t(s.size()), path);
  write_raw(f, s.data(), s.size(), path);
}
std::string read_str(FILE* f, const std::string& path) {
  uint32_t n = read_val<uint32_t>(f, path);
  check(n <= (1u << 20), "container string length implausible: " + path, ErrKind::io);
  std::string s(n, '\0');
  read_raw(f, s.data(), n, path);
  return s;
}

const char* tensor_name_layer(std::string& buf, int layer, const char* field) {
  buf = "layer." + std::to_string(layer) + "." + field;
  return buf.c_str();
}

}  // namespace

Mat NamedTensor::to_mat() const {
  check(dims.size() == 2, "tensor '" + name + "' is not rank-2");
  Mat m{int(dims[0]), int(dims[1])};
  check(data.size() == m.size(), "tensor '" + name + "' payload size mismatch");
  m.v = data;
  return m;
}

uint64_t NamedTensor::elem_count() const {
  uint64_t n = 1;
  for (auto d : dims) {
    check(d == 0 || n <= kMaxElems / (d ? d : 1), "tensor dims overflow");
    n *= d;
  }
  return n;
}

const NamedTensor* TensorBundle::find(const std::string& n) const {
  for (const auto& t : tensors)
    if (t.name == n) return &t;
  return nullptr;
}

const NamedTensor& TensorBundle::require(const std::string& n) const {
  const NamedTensor* t = find(n);
  check(t != nullptr, "container missing tensor '" + n + "'", ErrKind::io);
  return *t;
}

void save_bundle(const std::string& path, const TensorBundle& b) {
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) fail_io("cannot open for writing: " + path);
  write_raw(f.get(), kMagic, 4, path);
  write_val<uint32_t>(f.get(), kVersion, path);
  const ModelConfig& c = b.config;
  for (int32_t v : {c.n_layers, c.d_hidden, c.d_mlp, c.n_heads, c.vocab_size, c.max_seq_len})
    write_val<int32_t>(f.get(), v, path);
  write_val<double>(f.get(), c.norm_eps, path);
  write_val<uint64_t>(f.get(), b.seed, path);
  write_str(f.get(), b.label, path);
  check(b.tensors.size() <= UINT32_MAX, "too many tensors");
  write_val<uint32_t>(f.get(), uint32_t(b.tensors.size()), path);
  for (const auto& t : b.tensors) {
    write_str(f.get(), t.name, path);
    write_val<uint8_t>(f.get(), 0, path);  // dtype 0 = f64
    check(t.dims.size() <= UINT32_MAX, "tensor rank too large");
    write_val<uint32_t>(f.get(), uint32_t(t.dims.size()), path);
    for (uint64_t d : t.dims) write_val<uint64_t>(f.get(), d, path);
    check(t.elem_count() == t.data.size(),
          "tensor '" + t.name + "' dims disagree with payload");
    write_raw(f.get(), t.data.data(), t.data.size() * sizeof(double), path);
  }
  if (std::fflush(f.get()) != 0) fail_io("flush failed: " + path);
}

TensorBundle load_bundle(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) fail_io("cannot open: " + path);
  char magic[4];
  read_raw(f.get(), magic, 4, path);
  check(std::memcmp(magic, kMagic, 4) == 0, "bad magic in " + path, ErrKind::io);
  uint32_t ver = read_val<uint32_t>(f.get(), path);
  check(ver == kVersion, "unsupported container version in " + path, ErrKind::io);

  TensorBundle b;
  ModelConfig& c = b.config;
  for (int32_t* v : {&c.n_layers, &c.d_hidden, &c.d_mlp, &c.n_heads, &c.vocab_size, &c.max_seq_len})
    *v = read_val<int32_t>(f.get(), path);
  c.norm_eps = read_val<double>(f.get(), path);
  b.seed = read_val<uint64_t>(f.get(), path);
  b.label = read_str(f.get(), path);
  uint32_t count = read_val<uint32_t>(f.get(), path);
  b.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = read_str(f.get(), path);
    uint8_t dtype = read_val<uint8_t>(f.get(), path);
    check(dtype == 0, "unknown dtype code in " + path, ErrKind::io);
    uint32_t rank = read_val<uint32_t>(f.get(), path);
    check(rank <= 8, "tensor rank implausible in " + path, ErrKind::io);
    t.dims.resize(rank);
    for (auto& d : t.dims) d = read_val<uint64_t>(f.get(), path);
    uint64_t n = t.elem_count();
    check(n <= kMaxElems, "tensor too large in " + path, ErrKind::io);
    t.data.resize(size_t(n));
    read_raw(f.get(), t.data.data(), size_t(n) * sizeof(double), path);
    b.tensors.push_back(std::move(t));
  }
  return b;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  TensorBundle b;
  b.config = ckpt.config;
  b.seed = ckpt.seed;
  b.label = ckpt.label;
  b.tensors.push_back(NamedTensor::from_mat("embed", ckpt.w.embed));
  std::string buf;
  for (int l = 0; l < ckpt.config.n_layers; ++l) {
    const auto& lw = ckpt.w.layers[l];
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "attn_norm"), lw.attn_norm));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "wq"), lw.wq));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "wk"), lw.wk));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "wv"), lw.wv));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "wo"), lw.wo));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "mlp_norm"), lw.mlp_norm));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "w_gate"), lw.w_gate));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "w_up"), lw.w_up));
    b.tensors.push_back(NamedTensor::from_mat(tensor_name_layer(buf, l, "w_down"), lw.w_down));
  }
  b.tensors.push_back(NamedTensor::from_mat("final_norm", ckpt.w.final_norm));
  b.tensors.push_back(NamedTensor::from_mat("unembed", ckpt.w.unembed));
  save_bundle(path, b);
}

Checkpoint load_checkpoint(const std::string& path) {
  TensorBundle b = load_bundle(path);
  b.config.validate();
  Checkpoint ckpt;
  ckpt.config = b.config;
  ckpt.seed = b.seed;
  ckpt.label = b.label;
  const ModelConfig& c = b.config;

  auto grab = [&](const std::string& name, int rows, int cols) {
    Mat m = b.require(name).to_mat();
    check(m.rows == rows && m.cols == cols,
          "tensor '" + name + "' has unexpected shape in " + path, ErrKind::io);
    return m;
  };

  ckpt.w.embed = grab("embed", c.vocab_size, c.d_hidden);
  ckpt.w.layers.resize(c.n_layers);
  std::string buf;
  for (int l = 0; l < c.n_layers; ++l) {
    auto& lw = ckpt.w.layers[l];
    lw.attn_norm = grab(tensor_name_layer(buf, l, "attn_norm"), 1, c.d_hidden);
    lw.wq = grab(tensor_name_layer(buf, l, "wq"), c.d_hidden, c.d_hidden);
    lw.wk = grab(tensor_name_layer(buf, l, "wk"), c.d_hidden, c.d_hidden);
    lw.wv = grab(tensor_name_layer(buf, l, "wv"), c.d_hidden, c.d_hidden);
    lw.wo = grab(tensor_name_layer(buf, l, "wo"), c.d_hidden, c.d_hidden);
    lw.mlp_norm = grab(tensor_name_layer(buf, l, "mlp_norm"), 1, c.d_hidden);
    lw.w_gate = grab(tensor_name_layer(buf, l, "w_gate"), c.d_hidden, c.d_mlp);
    lw.w_up = grab(tensor_name_layer(buf, l, "w_up"), c.d_hidden, c.d_mlp);
    lw.w_down = grab(tensor_name_layer(buf, l, "w_down"), c.d_mlp, c.d_hidden);
  }
  ckpt.w.final_norm = grab("final_norm", 1, c.d_hidden);
  ckpt.w.unembed = grab("unembed", c.d_hidden, c.vocab_size);
  return ckpt;
}

uint64_t hash_file(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) fail_io("cannot open for hashing: " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f.get())) > 0) h = fnv1a64(buf, n, h);
  if (std::ferror(f.get())) fail_io("read error while hashing: " + path);
  return h;
}

}  // namespace al
