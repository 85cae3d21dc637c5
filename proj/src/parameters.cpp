#include "nmg/parameters.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "nmg/error.hpp"

namespace nmg {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

Tensor& ParameterSet::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto [it, _] = params_.emplace(name, Tensor::parameter(std::move(shape), std::move(values)));
  return it->second;
}

Tensor& ParameterSet::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(shape_size(shape), 0.0);
  if (stddev > 0.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : values) v = dist(rng);
  }
  return add(name, std::move(shape), std::move(values));
}

Tensor& ParameterSet::add_constant(const std::string& name, Shape shape, double value) {
  std::vector<double> values(shape_size(shape), value);
  return add(name, std::move(shape), std::move(values));
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& [name, t] : params_) out.params_.emplace(name, t.clone());
  out.first_moment_ = first_moment_;
  out.second_moment_ = second_moment_;
  out.step_ = step_;
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

double ParameterSet::grad_norm() const {
  double total = 0.0;
  for (const auto& [_, t] : params_) {
    for (double g : t.grad()) total += g * g;
  }
  return std::sqrt(total);
}

void ParameterSet::adamw_step(const AdamWOptions& o) {
  if (!(o.lr > 0.0)) throw ConfigError("adamw_step: learning rate must be positive");
  ++step_;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(step_));
  for (auto& [name, t] : params_) {
    auto w = t.mutable_data();
    auto& m = first_moment_[name];
    auto& v = second_moment_[name];
    if (m.empty()) m.assign(w.size(), 0.0);
    if (v.empty()) v.assign(w.size(), 0.0);
    auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= o.lr * (mhat / (std::sqrt(vhat) + o.eps) + o.weight_decay * w[i]);
    }
  }
}

void ParameterSet::reset_optimizer() {
  first_moment_.clear();
  second_moment_.clear();
  step_ = 0;
}

std::uint64_t ParameterSet::content_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : params_) {
    mix(name.data(), name.size());
    for (auto d : t.shape()) {
      const std::uint64_t d64 = d;
      mix(&d64, sizeof d64);
    }
    auto data = t.data();
    mix(data.data(), data.size() * sizeof(double));
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << hash;
  return out.str();
}

void ParameterSet::save(const std::filesystem::path& path, const nlohmann::json& metadata,
                        bool include_optimizer) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    auto write = [&out](std::span<const double> values) {
      out.write(reinterpret_cast<const char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
    };
    for (const auto& [_, t] : params_) write(t.data());
    if (include_optimizer) {
      for (const auto& [name, t] : params_) {
        auto it = first_moment_.find(name);
        write(it == first_moment_.end() ? std::vector<double>(t.size(), 0.0) : it->second);
      }
      for (const auto& [name, t] : params_) {
        auto it = second_moment_.find(name);
        write(it == second_moment_.end() ? std::vector<double>(t.size(), 0.0) : it->second);
      }
    }
    if (!out) throw Error("short write on " + tmp);
  }
  std::filesystem::rename(tmp, path);

  nlohmann::json side;
  side["format_version"] = kParameterFormatVersion;
  side["precision"] = "float64";
  side["byte_order"] = "little";
  side["content_hash"] = hash_hex(content_hash());
  side["optimizer"] = {{"included", include_optimizer}, {"step", step_}};
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& [name, t] : params_) shapes.push_back({{"name", name}, {"shape", t.shape()}});
  side["parameters"] = shapes;
  side["metadata"] = metadata;
  std::ofstream meta(path.string() + ".json", std::ios::trunc);
  if (!meta) throw Error("cannot write " + path.string() + ".json");
  meta << side.dump(2) << '\n';
}

std::pair<ParameterSet, nlohmann::json> ParameterSet::load(const std::filesystem::path& path) {
  std::ifstream meta(path.string() + ".json");
  if (!meta) throw DataError("missing checkpoint metadata: " + path.string() + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint metadata " + path.string() + ".json: " + e.what());
  }
  if (side.value("format_version", 0) != kParameterFormatVersion || side.value("precision", "") != "float64") {
    throw DataError("unsupported checkpoint format in " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint blob: " + path.string());
  auto read = [&in, &path](std::vector<double>& values) {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint blob: " + path.string());
  };

  ParameterSet out;
  for (const auto& entry : side.at("parameters")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values(shape_size(shape));
    read(values);
    out.add(entry.at("name").get<std::string>(), std::move(shape), std::move(values));
  }
  const auto& opt = side.at("optimizer");
  if (opt.value("included", false)) {
    for (const auto& [name, t] : out.params_) {
      std::vector<double> m(t.size());
      read(m);
      out.first_moment_[name] = std::move(m);
    }
    for (const auto& [name, t] : out.params_) {
      std::vector<double> v(t.size());
      read(v);
      out.second_moment_[name] = std::move(v);
    }
    out.step_ = opt.value("step", std::uint64_t{0});
  }
  return {std::move(out), side.value("metadata", nlohmann::json::object())};
}

}  // namespace nmg
