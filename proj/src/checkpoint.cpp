#include "cnnp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

namespace cnnp {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCode::truncated, "checkpoint truncated at byte " + std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& out, const Tensorf& t) {
  out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
}

Tensorf get_tensor(Reader& in, const Shape& shape) {
  Tensorf t(shape);
  std::memcpy(t.data(), in.take(static_cast<std::size_t>(t.size()) * sizeof(float)),
              static_cast<std::size_t>(t.size()) * sizeof(float));
  return t;
}

}  // namespace

std::string encode_checkpoint(const Model& model) {
  nlohmann::json desc = to_json(model.architecture());
  desc["seed"] = model.seed();
  const std::string json = desc.dump();

  std::string out = "CNPM";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, json.size());
  out += json;
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    if (!model.architecture().layers[i].has_parameters()) continue;
    put_tensor(out, model.params(i).weights);
    put_tensor(out, model.params(i).bias);
  }
  return out;
}

Model decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CNPM", 4) != 0) {
    throw Error(ErrorCode::bad_magic, "bad magic: not a checkpoint file");
  }
  in.take(4);
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::version_mismatch, "checkpoint version " + std::to_string(version) +
                                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto length = in.get<std::uint64_t>();
  if (length > in.remaining()) throw Error(ErrorCode::truncated, "checkpoint descriptor truncated");
  const std::string json(in.take(length), length);
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_architecture, std::string("checkpoint descriptor: ") + e.what());
  }
  Model m(architecture_from_json(desc), desc.value("seed", std::uint64_t{0}));
  for (std::size_t i = 0; i < m.layer_count(); ++i) {
    const LayerSpec& l = m.architecture().layers[i];
    if (!l.has_parameters()) continue;
    Tensorf w = get_tensor(in, weight_shape(l));
    Tensorf b = get_tensor(in, bias_shape(l));
    m.set_params(i, {std::move(w), std::move(b)});
  }
  if (in.remaining() != 0) {
    throw Error(ErrorCode::truncated, std::to_string(in.remaining()) + " unexpected trailing bytes in checkpoint");
  }
  return m;
}

std::uintmax_t save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
  return bytes.size();
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace cnnp
