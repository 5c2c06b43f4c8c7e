#include "vara/params.hpp"

#include <algorithm>

#include "vara/errors.hpp"

namespace vara {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (contains(name)) throw InvalidArgument("ParamStore: duplicate parameter " + name);
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return add(name, std::move(shape), std::move(v));
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value) {
  std::vector<double> v(shape_size(shape), value);
  return add(name, std::move(shape), std::move(v));
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("ParamStore: no parameter named " + name);
  return items_[it->second].second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.items_.size() != items_.size()) throw InvalidArgument("ParamStore: layouts differ");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    auto& [name, t] = items_[i];
    const auto& [oname, o] = other.items_[i];
    if (name != oname || t.shape() != o.shape()) throw InvalidArgument("ParamStore: layouts differ at " + name);
    auto src = o.values();
    std::copy(src.begin(), src.end(), t.mutable_values().begin());
  }
}

}  // namespace vara
