// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (little-endian):
//   "OUSCKPT1" | u32 count | count x entry | u64 FNV-1a of everything before
//   entry = u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | data
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "openus/trainer.hpp"

namespace openus {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'O', 'U', 'S', 'C', 'K', 'P', 'T', '1'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct Entry {
  DType dtype = DType::real64;
  std::vector<std::uint32_t> dims;
  std::string raw;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

template <typename V>
void put(std::string& out, V v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

class Writer {
 public:
  void add(const std::string& name, DType dtype, const std::vector<std::uint32_t>& dims, const void* data,
           std::size_t bytes) {
    if (name.size() > 0xffff) throw CheckpointError("entry name too long: " + name);
    put<std::uint16_t>(body_, static_cast<std::uint16_t>(name.size()));
    body_ += name;
    put<std::uint8_t>(body_, static_cast<std::uint8_t>(dtype));
    put<std::uint8_t>(body_, static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) put<std::uint32_t>(body_, d);
    body_.append(static_cast<const char*>(data), bytes);
    ++count_;
  }
  void add_f32(const std::string& name, const Shape& shape, std::span<const float> v) {
    std::vector<std::uint32_t> dims(shape.begin(), shape.end());
    add(name, DType::real32, dims, v.data(), v.size() * sizeof(float));
  }
  void add_f64(const std::string& name, std::span<const double> v) {
    add(name, DType::real64, {static_cast<std::uint32_t>(v.size())}, v.data(), v.size() * sizeof(double));
  }
  void add_text(const std::string& name, const std::string& text) {
    std::vector<double> codes(text.begin(), text.end());
    add_f64(name, codes);
  }
  std::string finish() const {
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, count_);
    out += body_;
    put<std::uint64_t>(out, fnv1a(out));
    return out;
  }

 private:
  std::string body_;
  std::uint32_t count_ = 0;
};

template <typename V>
V take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw CheckpointError("checkpoint truncated");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

std::map<std::string, Entry> parse(const std::string& in) {
  if (in.size() < sizeof kMagic + 4 + 8 || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a checkpoint (bad magic or version)");
  const std::size_t body_end = in.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, in.data() + body_end, 8);
  if (stored != fnv1a(std::string_view(in.data(), body_end))) throw CheckpointError("checkpoint checksum mismatch");
  const std::string body = in.substr(0, body_end);
  std::size_t pos = sizeof kMagic;
  const auto count = take<std::uint32_t>(body, pos);
  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint16_t>(body, pos);
    if (pos + len > body.size()) throw CheckpointError("checkpoint truncated");
    std::string name = body.substr(pos, len);
    pos += len;
    Entry e;
    const auto dtype = take<std::uint8_t>(body, pos);
    if (dtype > 1) throw CheckpointError("unknown dtype in entry " + name);
    e.dtype = static_cast<DType>(dtype);
    const auto ndim = take<std::uint8_t>(body, pos);
    for (std::uint8_t d = 0; d < ndim; ++d) e.dims.push_back(take<std::uint32_t>(body, pos));
    const std::size_t bytes = e.count() * (e.dtype == DType::real32 ? 4 : 8);
    if (pos + bytes > body.size()) throw CheckpointError("checkpoint truncated in " + name);
    e.raw = body.substr(pos, bytes);
    pos += bytes;
    if (!entries.emplace(std::move(name), std::move(e)).second) throw CheckpointError("duplicate checkpoint entry");
  }
  if (pos != body.size()) throw CheckpointError("trailing bytes after the last entry");
  return entries;
}

const Entry& need(const std::map<std::string, Entry>& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw CheckpointError("checkpoint lacks entry " + name);
  return it->second;
}

std::vector<double> as_f64(const Entry& e, const std::string& name) {
  if (e.dtype != DType::real64) throw CheckpointError(name + ": expected real64");
  std::vector<double> v(e.count());
  std::memcpy(v.data(), e.raw.data(), e.raw.size());
  return v;
}

std::vector<float> as_f32(const Entry& e, const std::string& name) {
  if (e.dtype != DType::real32) throw CheckpointError(name + ": expected real32");
  std::vector<float> v(e.count());
  std::memcpy(v.data(), e.raw.data(), e.raw.size());
  return v;
}

std::string as_text(const Entry& e, const std::string& name) {
  std::string s;
  for (double c : as_f64(e, name)) s.push_back(static_cast<char>(c));
  return s;
}

void fill_tensor(const std::map<std::string, Entry>& m, const std::string& name, Tensor<float>& t) {
  const Entry& e = need(m, name);
  if (std::vector<std::size_t>(e.dims.begin(), e.dims.end()) != t.shape())
    throw CheckpointError(name + ": shape differs from the configured model");
  const std::vector<float> v = as_f32(e, name);
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

}  // namespace

void checkpoint_save(const fs::path& path, const TrainState& s) {
  TrainState& state = const_cast<TrainState&>(s);  // parameter walks take mutable refs; nothing is modified
  Writer w;
  for (const auto& [key, value] : config_items(state.config)) w.add_text("config." + key, value);
  std::vector<ParamRef> student = student_params(state.student);
  for (const ParamRef& p : student) w.add_f32(p.name, p.tensor.shape(), p.tensor.data());
  for (const ParamRef& p : teacher_params(state.teacher)) w.add_f32(p.name, p.tensor.shape(), p.tensor.data());
  if (!state.optimizer.m.empty()) {
    for (std::size_t i = 0; i < student.size(); ++i) {
      w.add_f32("adam.m." + student[i].name, student[i].tensor.shape(), state.optimizer.m[i]);
      w.add_f32("adam.v." + student[i].name, student[i].tensor.shape(), state.optimizer.v[i]);
    }
  }
  const std::vector<double> step{static_cast<double>(state.optimizer.step)};
  w.add_f64("adam.step", step);
  const std::vector<double> epoch{static_cast<double>(state.epoch)}, gstep{static_cast<double>(state.step)};
  w.add_f64("state.epoch", epoch);
  w.add_f64("state.step", gstep);
  w.add_f64("center.cls", state.center_cls.center);
  w.add_f64("center.patch", state.center_patch.center);
  for (const auto& [id, entry] : state.rec_ema.entries()) {
    w.add_f64("recema." + id + ".loss", entry.loss);
    const std::vector<double> obs(entry.observed.begin(), entry.observed.end());
    w.add_f64("recema." + id + ".observed", obs);
  }

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::string bytes = w.finish();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

TrainState checkpoint_load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::map<std::string, Entry> m = parse(ss.str());

  TrainConfig config;
  for (const auto& [name, e] : m)
    if (name.rfind("config.", 0) == 0) {
      try {
        set_config_item(config, name.substr(7), as_text(e, name));
      } catch (const std::invalid_argument& err) {
        throw CheckpointError(std::string("checkpoint config: ") + err.what());
      }
    }
  TrainState s = init_train_state(config);
  std::vector<ParamRef> student = student_params(s.student);
  for (ParamRef& p : student) fill_tensor(m, p.name, p.tensor);
  for (ParamRef& p : teacher_params(s.teacher)) fill_tensor(m, p.name, p.tensor);
  s.optimizer.step = static_cast<std::uint64_t>(as_f64(need(m, "adam.step"), "adam.step").at(0));
  if (m.count("adam.m." + student.front().name)) {
    for (const ParamRef& p : student) {
      s.optimizer.m.push_back(as_f32(need(m, "adam.m." + p.name), p.name));
      s.optimizer.v.push_back(as_f32(need(m, "adam.v." + p.name), p.name));
    }
  }
  s.epoch = static_cast<std::size_t>(as_f64(need(m, "state.epoch"), "state.epoch").at(0));
  s.step = static_cast<std::size_t>(as_f64(need(m, "state.step"), "state.step").at(0));
  s.center_cls.center = as_f64(need(m, "center.cls"), "center.cls");
  s.center_patch.center = as_f64(need(m, "center.patch"), "center.patch");
  for (const auto& [name, e] : m) {
    if (name.rfind("recema.", 0) != 0 || name.size() < 12 || name.compare(name.size() - 5, 5, ".loss") != 0) continue;
    const std::string id = name.substr(7, name.size() - 12);
    RecLossEMA::Entry entry;
    entry.loss = as_f64(e, name);
    for (double v : as_f64(need(m, "recema." + id + ".observed"), name)) entry.observed.push_back(v != 0 ? 1 : 0);
    s.rec_ema.restore(id, std::move(entry));
  }
  return s;
}

}  // namespace openus
