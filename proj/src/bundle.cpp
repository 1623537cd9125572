#include "mea/bundle.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mea/error.hpp"

namespace mea {

using nlohmann::json;

void TensorBundle::set(const std::string& name, Tensor t) {
  for (auto& [n, v] : entries_)
    if (n == name) {
      v = std::move(t);
      return;
    }
  entries_.emplace_back(name, std::move(t));
}

bool TensorBundle::contains(const std::string& name) const { return find(name).has_value(); }

const Tensor& TensorBundle::get(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw DataError("bundle has no tensor named '" + name + "'");
}

Tensor& TensorBundle::get(const std::string& name) {
  for (auto& [n, v] : entries_)
    if (n == name) return v;
  throw DataError("bundle has no tensor named '" + name + "'");
}

std::optional<Tensor> TensorBundle::find(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  return std::nullopt;
}

std::size_t TensorBundle::payload_bytes() const {
  std::size_t total = 0;
  for (const auto& [n, v] : entries_) total += v.size() * sizeof(double);
  return total;
}

namespace {

static_assert(sizeof(double) == 8);

void append_le(std::string& out, double x) {
  auto bits = std::bit_cast<std::uint64_t>(x);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string TensorBundle::serialize() const {
  std::string header;
  if (!attributes_.empty()) header += json{{"attributes", attributes_}}.dump() + "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : entries_) {
    const std::size_t len = t.size() * sizeof(double);
    json line = {{"name", name}, {"shape", t.shape()}, {"dtype", "f64"},
                 {"offset", offset}, {"len", len}};
    header += line.dump() + "\n";
    offset += len;
  }
  header += "\n";
  std::string out = std::move(header);
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : entries_)
    for (double x : t.data()) append_le(out, x);
  return out;
}

TensorBundle TensorBundle::deserialize(const std::string& bytes) {
  TensorBundle bundle;
  std::size_t pos = 0;
  struct Pending {
    std::string name;
    Shape shape;
    std::size_t offset, len;
  };
  std::vector<Pending> pending;
  while (true) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw DataError("tensor bundle: missing blank line after manifest");
    const std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) break;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(std::string("tensor bundle: bad manifest line: ") + e.what());
    }
    if (j.contains("attributes")) {
      bundle.attributes_ = j["attributes"];
      continue;
    }
    try {
      if (j.at("dtype").get<std::string>() != "f64")
        throw DataError("tensor bundle: unsupported dtype " + j.at("dtype").dump());
      pending.push_back({j.at("name").get<std::string>(), j.at("shape").get<Shape>(),
                         j.at("offset").get<std::size_t>(), j.at("len").get<std::size_t>()});
    } catch (const json::exception& e) {
      throw DataError(std::string("tensor bundle: incomplete manifest line: ") + e.what());
    }
  }
  const std::size_t payload = bytes.size() - pos;
  for (const auto& p : pending) {
    if (p.len != shape_size(p.shape) * sizeof(double) || p.offset + p.len > payload)
      throw DataError("tensor bundle: tensor '" + p.name + "' has inconsistent extent");
    std::vector<double> data(shape_size(p.shape));
    const char* base = bytes.data() + pos + p.offset;
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_le(base + 8 * i);
    bundle.entries_.emplace_back(p.name, Tensor(p.shape, std::move(data)));
  }
  return bundle;
}

void TensorBundle::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = serialize();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing '" + path.string() + "'");
}

TensorBundle TensorBundle::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

}  // namespace mea
