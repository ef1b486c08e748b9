#include "zssrt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "zssrt/errors.hpp"

namespace zssrt {
namespace {

template <typename Real>
const char* dtype_name();
template <>
const char* dtype_name<float>() { return "f32"; }
template <>
const char* dtype_name<double>() { return "f64"; }

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw IoError("checkpoint: unknown dtype " + dtype);
}

}  // namespace

std::size_t NamedArray::count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

template <typename Real>
NamedArray NamedArray::from(const std::vector<Real>& values, std::vector<std::int64_t> shape) {
  NamedArray a;
  a.dtype = dtype_name<Real>();
  a.shape = std::move(shape);
  if (a.count() != values.size()) throw ShapeError("NamedArray: shape does not match data");
  a.bytes.resize(values.size() * sizeof(Real));
  std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
  return a;
}

template <typename Real>
std::vector<Real> NamedArray::to_vector() const {
  std::vector<Real> out(count());
  if (dtype == dtype_name<Real>()) {
    std::memcpy(out.data(), bytes.data(), bytes.size());
  } else if (dtype == "f32") {
    const auto* src = reinterpret_cast<const float*>(bytes.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Real>(src[i]);
  } else {
    const auto* src = reinterpret_cast<const double*>(bytes.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Real>(src[i]);
  }
  return out;
}

template NamedArray NamedArray::from<float>(const std::vector<float>&, std::vector<std::int64_t>);
template NamedArray NamedArray::from<double>(const std::vector<double>&,
                                             std::vector<std::int64_t>);
template std::vector<float> NamedArray::to_vector<float>() const;
template std::vector<double> NamedArray::to_vector<double>() const;

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, arr] : arrays) {
    table.push_back({{"name", name},
                     {"dtype", arr.dtype},
                     {"shape", arr.shape},
                     {"offset", offset},
                     {"nbytes", arr.bytes.size()}});
    offset += arr.bytes.size();
  }
  nlohmann::json header = {{"format", kCheckpointFormat}, {"meta", meta}, {"arrays", table}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling temp file and rename so readers never see a partial file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out << kCheckpointFormat << '\n';
    const std::uint64_t len = text.size();
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, arr] : arrays)
      out.write(reinterpret_cast<const char*>(arr.bytes.data()),
                static_cast<std::streamsize>(arr.bytes.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointFormat)
    throw IoError("not a " + std::string(kCheckpointFormat) + " file: " + path.string());
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(len_bytes[i]) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header: " + path.string());
  const auto header = nlohmann::json::parse(text);

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("arrays")) {
    NamedArray arr;
    arr.dtype = entry.at("dtype").get<std::string>();
    arr.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
    if (nbytes != arr.count() * dtype_size(arr.dtype))
      throw IoError("checkpoint array size mismatch: " + entry.at("name").get<std::string>());
    arr.bytes.resize(nbytes);
    in.read(reinterpret_cast<char*>(arr.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError("truncated checkpoint payload: " + path.string());
    ckpt.arrays.emplace(entry.at("name").get<std::string>(), std::move(arr));
  }
  return ckpt;
}

const NamedArray& Checkpoint::array(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw IoError("checkpoint has no array '" + name + "'");
  return it->second;
}

}  // namespace zssrt
