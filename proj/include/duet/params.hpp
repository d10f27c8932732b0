#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "duet/autograd.hpp"

namespace duet {

/// Named trainable tensors. Iteration order is the sorted name order, which
/// fixes initialization, serialization and optimizer traversal.
class ParameterSet {
  public:
    ag::Var& add(const std::string& name, ag::Matrix value);
    /// Registers an existing variable; the set then shares its storage.
    ag::Var& insert(const std::string& name, const ag::Var& var);
    ag::Var& at(const std::string& name);
    const ag::Var& at(const std::string& name) const;
    bool contains(const std::string& name) const { return vars_.count(name) != 0; }
    std::size_t size() const { return vars_.size(); }
    std::size_t scalar_count() const;

    auto begin() { return vars_.begin(); }
    auto end() { return vars_.end(); }
    auto begin() const { return vars_.begin(); }
    auto end() const { return vars_.end(); }

    /// Deep copy with fresh leaves.
    ParameterSet clone() const;
    void zero_grad();
    void set_requires_grad(bool flag);
    bool bitwise_equal(const ParameterSet& other) const;

    /// {"name": [[row]...]} with round-trip double formatting.
    nlohmann::json to_json() const;
    static ParameterSet from_json(const nlohmann::json& j);

  private:
    std::map<std::string, ag::Var> vars_;
};

ag::Matrix json_to_matrix(const nlohmann::json& j);
nlohmann::json matrix_to_json(const ag::Matrix& m);

/// Gaussian init with a stateful engine; deterministic per seed on one standard library.
ag::Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
  public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    /// Applies one update to every parameter in `names` that has a gradient.
    void step(ParameterSet& params, const std::vector<std::string>& names, double lr);
    long steps_taken() const { return t_; }

    std::map<std::string, ag::Matrix>& first_moments() { return m_; }
    std::map<std::string, ag::Matrix>& second_moments() { return v_; }
    const std::map<std::string, ag::Matrix>& first_moments() const { return m_; }
    const std::map<std::string, ag::Matrix>& second_moments() const { return v_; }
    void set_steps_taken(long t) { t_ = t; }
    const AdamWConfig& config() const { return config_; }

  private:
    AdamWConfig config_;
    long t_ = 0;
    std::map<std::string, ag::Matrix> m_;
    std::map<std::string, ag::Matrix> v_;
};

/// Linear warm-up over ceil(warmup_ratio * total) steps, then cosine decay to zero.
double cosine_lr(double base_lr, long step, long total_steps, double warmup_ratio);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t v);
std::string content_hash(std::string_view data);

/// Stateless seed derivation so that randomness at (seed, stream, index) does not depend on history.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace duet
