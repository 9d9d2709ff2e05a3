#include "mole/param_store.hpp"

#include <stdexcept>

namespace mole {

Parameter& ParamStore::add(const std::string& id, Tensor value, bool frozen) {
  if (params_.contains(id)) throw std::invalid_argument("duplicate parameter id: " + id);
  Tensor grad(value.shape());
  auto [it, _] = params_.emplace(id, Parameter{std::move(value), std::move(grad), frozen});
  return it->second;
}

bool ParamStore::contains(std::string_view id) const { return params_.find(id) != params_.end(); }

Parameter& ParamStore::get(std::string_view id) {
  auto it = params_.find(id);
  if (it == params_.end()) throw std::out_of_range("unknown parameter id: " + std::string(id));
  return it->second;
}

const Parameter& ParamStore::get(std::string_view id) const {
  auto it = params_.find(id);
  if (it == params_.end()) throw std::out_of_range("unknown parameter id: " + std::string(id));
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0);
}

std::vector<std::string> ParamStore::ids() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [id, _] : params_) out.push_back(id);
  return out;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_)
    if (!p.frozen) n += p.value.size();
  return n;
}

}  // namespace mole
