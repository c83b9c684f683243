#include "avex/parameters.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "avex/errors.hpp"

namespace avex {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

Parameter& ParameterSet::add(const std::string& name, Matrix init) {
  if (params_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  auto [it, ok] = params_.emplace(name, Parameter::from_matrix(std::move(init), true));
  return it->second;
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<Parameter*> ParameterSet::pointers() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& [name, p] : params_) out.push_back(&p);
  return out;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto it = other.params_.begin();
  for (const auto& [name, p] : params_) {
    if (name != it->first) return false;
    const Matrix& a = p.value();
    const Matrix& b = it->second.value();
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0) {
      return false;
    }
    ++it;
  }
  return true;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const ParameterSet& params) {
  nlohmann::json header;
  header["format"] = "avex-checkpoint";
  header["version"] = kCheckpointVersion;
  header["meta"] = meta;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& [name, p] : params) {
    shapes.push_back({{"name", name}, {"rows", p.value().rows()}, {"cols", p.value().cols()}});
  }
  header["params"] = shapes;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(kCheckpointMagic, 8);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, p] : params) {
    out.write(reinterpret_cast<const char*>(p.value().data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value().size())));
  }
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw IngestionError("'" + path.string() + "' is not a checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw IngestionError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw IngestionError("truncated checkpoint header in '" + path.string() + "'");

  Checkpoint ckpt;
  nlohmann::json header = nlohmann::json::parse(text);
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("params")) {
    Matrix m(entry.at("rows").get<Index>(), entry.at("cols").get<Index>());
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
    if (!in) throw IngestionError("truncated parameter data in '" + path.string() + "'");
    ckpt.params.add(entry.at("name").get<std::string>(), std::move(m));
  }
  return ckpt;
}

}  // namespace avex
