#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "avex/autodiff.hpp"

namespace avex {

using Parameter = Tensor<double>;

/// Named trainable tensors. Iteration order is lexicographic by name, which
/// fixes the optimizer-state layout and the checkpoint byte order.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::vector<Parameter*> pointers();
  std::vector<std::string> names() const;
  void zero_grad();

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Exact value equality across every parameter.
  bool operator==(const ParameterSet& other) const;

 private:
  std::map<std::string, Parameter> params_;
};

inline constexpr char kCheckpointMagic[] = "AVEXCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes `meta` plus every parameter into one file:
///   magic(8) | version u32 | header length u64 | header JSON | float64 data
/// The header lists parameter names and shapes in storage order. Output is
/// byte-stable for identical inputs.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const ParameterSet& params);

struct Checkpoint {
  nlohmann::json meta;
  ParameterSet params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace avex
