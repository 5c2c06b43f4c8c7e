#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vara/numerics.hpp"

namespace vara {

// Named trainable tensors in creation order. Handles returned by add() share
// storage with the store, so modules hold them directly.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  Tensor normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor constant(const std::string& name, Shape shape, double value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t scalar_count() const;
  void zero_grad();
  // Copies values (not graph state) from another store with the same layout.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace vara
