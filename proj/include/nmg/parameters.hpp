#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nmg/autodiff.hpp"

namespace nmg {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Named trainable tensors plus AdamW moment state. Copying a ParameterSet
// shares the underlying tensors; use clone() for an independent copy.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Shape shape, std::vector<double> values);
  // Gaussian init with the given standard deviation (0 gives zeros).
  Tensor& add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor& add_constant(const std::string& name, Shape shape, double value);

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Tensor>& tensors() const { return params_; }
  std::size_t parameter_count() const;
  std::uint64_t step() const { return step_; }

  ParameterSet clone() const;
  void zero_grad();
  double grad_norm() const;

  // One decoupled-weight-decay Adam update from the current grads. Grads are
  // left in place for the caller to zero.
  void adamw_step(const AdamWOptions& options);
  // Forgets moments and the step counter.
  void reset_optimizer();

  // FNV-1a over names, shapes and values in sorted-name order.
  std::uint64_t content_hash() const;

  // Writes `<path>` (little-endian float64 values in sorted-name order,
  // followed by the AdamW moments when include_optimizer is set) and
  // `<path>.json` (format version, precision, shapes, step, `metadata`).
  void save(const std::filesystem::path& path, const nlohmann::json& metadata,
            bool include_optimizer = false) const;
  // Returns the metadata object stored by save().
  static std::pair<ParameterSet, nlohmann::json> load(const std::filesystem::path& path);

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, std::vector<double>> first_moment_;
  std::map<std::string, std::vector<double>> second_moment_;
  std::uint64_t step_ = 0;
};

inline constexpr int kParameterFormatVersion = 1;

std::string hash_hex(std::uint64_t hash);

}  // namespace nmg
