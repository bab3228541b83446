// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qadapt/tape.hpp"
#include "qadapt/tensor.hpp"

namespace qadapt {

/// Backbone tensors (w) come from pretraining; adapter tensors (θ) are added
/// for parameter-efficient tuning.
enum class ParamTag { Backbone, Adapter };

std::string_view tag_name(ParamTag tag);
ParamTag tag_from_name(std::string_view name);

struct Param {
  std::string name;
  Tensor value;
  ParamTag tag = ParamTag::Backbone;
  bool trainable = true;
};

/// Named parameter tensors in insertion order.
class ParamStore {
 public:
  Param& add(std::string name, Tensor value, ParamTag tag);

  bool contains(std::string_view name) const;
  Param& get(std::string_view name);
  const Param& get(std::string_view name) const;
  const Tensor& value(std::string_view name) const { return get(name).value; }
  Tensor& value(std::string_view name) { return get(name).value; }

  std::span<Param> params() { return params_; }
  std::span<const Param> params() const { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  /// Adapter mode: trainable iff tagged adapter.
  void freeze_backbone();
  /// Full fine-tuning: everything trainable.
  void unfreeze_all();
  void set_trainable(std::string_view name, bool trainable) { get(name).trainable = trainable; }

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t total = 0;
  /// trainable / total, or 0 for an empty store.
  double ratio() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total); }
};

/// Element counts by trainable flag.
ParamCount count_params(const ParamStore& store);
/// Element count of tensors carrying `tag`.
std::size_t count_tagged(const ParamStore& store, ParamTag tag);

/// Which bound leaves require gradients.
enum class GradMode {
  Trainable,  ///< leaves of trainable parameters
  All,        ///< every leaf (gradient checks)
  None,       ///< no leaf (inference)
};

/// Binds store entries to tape leaves on first use.
class Binder {
 public:
  Binder(ad::Tape& tape, const ParamStore& store, GradMode mode = GradMode::Trainable)
      : tape_(tape), store_(store), mode_(mode) {}

  ad::Var operator()(std::string_view name);
  ad::Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  struct Gradient {
    std::string name;
    Tensor grad;
  };
  /// Gradients of every bound gradient-requiring leaf after tape.backward(),
  /// in binding order. Leaves the loss did not reach get zero tensors.
  std::vector<Gradient> gradients() const;

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
  GradMode mode_;
  std::vector<std::pair<std::string, ad::Var>> bound_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace qadapt
