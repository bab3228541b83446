// SPDX-License-Identifier: Apache-2.0
#include "qadapt/param_store.hpp"

#include "qadapt/errors.hpp"

namespace qadapt {

std::string_view tag_name(ParamTag tag) { return tag == ParamTag::Backbone ? "backbone" : "adapter"; }

ParamTag tag_from_name(std::string_view name) {
  if (name == "backbone") return ParamTag::Backbone;
  if (name == "adapter") return ParamTag::Adapter;
  throw ContractError("unknown parameter tag '" + std::string(name) + "'");
}

Param& ParamStore::add(std::string name, Tensor value, ParamTag tag) {
  if (index_.contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  if (value.empty()) throw ContractError("parameter '" + name + "' has no shape");
  index_.emplace(name, params_.size());
  params_.push_back(Param{std::move(name), std::move(value), tag, true});
  return params_.back();
}

bool ParamStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Param& ParamStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return params_[it->second];
}

const Param& ParamStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return params_[it->second];
}

void ParamStore::freeze_backbone() {
  for (auto& p : params_) p.trainable = p.tag == ParamTag::Adapter;
}

void ParamStore::unfreeze_all() {
  for (auto& p : params_) p.trainable = true;
}

ParamCount count_params(const ParamStore& store) {
  ParamCount c;
  for (const auto& p : store.params()) {
    c.total += p.value.numel();
    if (p.trainable) c.trainable += p.value.numel();
  }
  return c;
}

std::size_t count_tagged(const ParamStore& store, ParamTag tag) {
  std::size_t n = 0;
  for (const auto& p : store.params()) {
    if (p.tag == tag) n += p.value.numel();
  }
  return n;
}

ad::Var Binder::operator()(std::string_view name) {
  const std::string key(name);
  if (auto it = index_.find(key); it != index_.end()) return bound_[it->second].second;
  const Param& p = store_.get(name);
  const bool grad = mode_ == GradMode::All || (mode_ == GradMode::Trainable && p.trainable);
  ad::Var v = tape_.leaf(p.value, grad);
  index_.emplace(key, bound_.size());
  bound_.emplace_back(key, v);
  return v;
}

std::vector<Binder::Gradient> Binder::gradients() const {
  std::vector<Gradient> out;
  for (const auto& [name, var] : bound_) {
    if (!tape_.requires_grad(var.id)) continue;
    const Tensor* g = tape_.grad(var);
    out.push_back(Gradient{name, g ? *g : Tensor(var.shape())});
  }
  return out;
}

}  // namespace qadapt
