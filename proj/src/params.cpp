#include "lsttm/params.hpp"

#include <algorithm>
#include <stdexcept>

namespace lsttm {

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kShort: return "short";
    case ParamGroup::kFusion: return "fusion";
    case ParamGroup::kLong: return "long";
  }
  return "unknown";
}

int ParamSet::add(std::string name, ParamGroup group, ad::Array value) {
  if (std::find(names.begin(), names.end(), name) != names.end()) {
    throw std::invalid_argument("duplicate parameter " + name);
  }
  names.push_back(std::move(name));
  groups.push_back(group);
  values.push_back(std::move(value));
  return static_cast<int>(names.size()) - 1;
}

int ParamSet::index(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::out_of_range("unknown parameter " + name);
  return static_cast<int>(it - names.begin());
}

std::vector<int> ParamSet::indices(ParamGroup g) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] == g) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<ad::Var> make_vars(const ParamSet& params, std::initializer_list<ParamGroup> trainable) {
  std::vector<bool> mask(params.size(), false);
  for (std::size_t i = 0; i < params.size(); ++i) {
    mask[i] = std::find(trainable.begin(), trainable.end(), params.groups[i]) != trainable.end();
  }
  return make_vars(params, mask);
}

std::vector<ad::Var> make_vars(const ParamSet& params, const std::vector<bool>& trainable) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    vars.push_back(trainable[i] ? ad::leaf(params.values[i]) : ad::constant(params.values[i]));
  }
  return vars;
}

ad::Array uniform_array(std::mt19937_64& rng, ad::Index rows, ad::Index cols, double limit) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  ad::Array a(rows, cols);
  for (ad::Index i = 0; i < a.size(); ++i) a.data()[i] = dist(rng);
  return a;
}

}  // namespace lsttm
