#pragma once

#include "lsttm/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace lsttm {

// Short-term graph, fusion + ranking, long-term graph.
enum class ParamGroup : std::uint8_t { kShort, kFusion, kLong };

std::string_view group_name(ParamGroup g);

struct ParamSet {
  std::vector<std::string> names;
  std::vector<ParamGroup> groups;
  std::vector<ad::Array> values;

  std::size_t size() const { return names.size(); }
  int add(std::string name, ParamGroup group, ad::Array value);
  int index(const std::string& name) const;  // throws std::out_of_range
  const ad::Array& at(const std::string& name) const { return values[static_cast<std::size_t>(index(name))]; }
  ad::Array& at(const std::string& name) { return values[static_cast<std::size_t>(index(name))]; }
  std::vector<int> indices(ParamGroup g) const;
  std::size_t scalar_count() const;
  bool operator==(const ParamSet&) const = default;
};

// Leaves for the parameters in `trainable` groups, constants for the rest.
std::vector<ad::Var> make_vars(const ParamSet& params, std::initializer_list<ParamGroup> trainable);
std::vector<ad::Var> make_vars(const ParamSet& params, const std::vector<bool>& trainable);

ad::Array uniform_array(std::mt19937_64& rng, ad::Index rows, ad::Index cols, double limit);

}  // namespace lsttm
