#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mole/tensor.hpp"

namespace mole {

struct Parameter {
  Tensor value;
  Tensor grad;  // same shape as value
  bool frozen = false;
};

// Named parameters with gradient accumulators. Iteration order is sorted by id
// so checkpoints and optimizer sweeps are deterministic.
class ParamStore {
 public:
  Parameter& add(const std::string& id, Tensor value, bool frozen = false);

  bool contains(std::string_view id) const;
  Parameter& get(std::string_view id);
  const Parameter& get(std::string_view id) const;
  const Tensor& value(std::string_view id) const { return get(id).value; }
  Tensor& value(std::string_view id) { return get(id).value; }
  const Tensor& grad(std::string_view id) const { return get(id).grad; }

  void zero_grad();
  std::vector<std::string> ids() const;
  std::size_t trainable_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter, std::less<>> params_;
};

}  // namespace mole
