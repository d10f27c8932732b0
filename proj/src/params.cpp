#include "duet/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "duet/errors.hpp"

namespace duet {

ag::Var& ParameterSet::add(const std::string& name, ag::Matrix value) {
    auto [it, inserted] = vars_.emplace(name, ag::Var(std::move(value), true));
    if (!inserted) throw ValidationError("duplicate parameter " + name);
    return it->second;
}

ag::Var& ParameterSet::insert(const std::string& name, const ag::Var& var) {
    auto [it, inserted] = vars_.emplace(name, var);
    if (!inserted) throw ValidationError("duplicate parameter " + name);
    return it->second;
}

ag::Var& ParameterSet::at(const std::string& name) {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
}

const ag::Var& ParameterSet::at(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : vars_) n += static_cast<std::size_t>(v.value().size());
    return n;
}

ParameterSet ParameterSet::clone() const {
    ParameterSet out;
    for (const auto& [name, v] : vars_) out.vars_.emplace(name, v.clone());
    return out;
}

void ParameterSet::zero_grad() {
    for (auto& [_, v] : vars_) v.zero_grad();
}

void ParameterSet::set_requires_grad(bool flag) {
    for (auto& [_, v] : vars_) v.node()->requires_grad = flag;
}

bool ParameterSet::bitwise_equal(const ParameterSet& other) const {
    if (vars_.size() != other.vars_.size()) return false;
    for (const auto& [name, v] : vars_) {
        auto it = other.vars_.find(name);
        if (it == other.vars_.end()) return false;
        const auto& a = v.value();
        const auto& b = it->second.value();
        if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
        if (std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0) return false;
    }
    return true;
}

nlohmann::json matrix_to_json(const ag::Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

ag::Matrix json_to_matrix(const nlohmann::json& j) {
    if (!j.is_array()) throw ValidationError("matrix must be a nested array");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
    ag::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
            throw ValidationError("matrix rows must have equal length");
        }
        for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

nlohmann::json ParameterSet::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, v] : vars_) j[name] = matrix_to_json(v.value());
    return j;
}

ParameterSet ParameterSet::from_json(const nlohmann::json& j) {
    ParameterSet out;
    for (const auto& [name, value] : j.items()) out.add(name, json_to_matrix(value));
    return out;
}

ag::Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    ag::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

void AdamW::step(ParameterSet& params, const std::vector<std::string>& names, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& name : names) {
        ag::Var& p = params.at(name);
        const ag::Matrix& g = p.grad();
        if (g.size() == 0) continue;
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() == 0) {
            m = ag::Matrix::Zero(g.rows(), g.cols());
            v = ag::Matrix::Zero(g.rows(), g.cols());
        }
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
        ag::Matrix& w = p.mutable_value();
        if (config_.weight_decay != 0.0) w -= (lr * config_.weight_decay) * w;
        w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
    }
}

double cosine_lr(double base_lr, long step, long total_steps, double warmup_ratio) {
    if (total_steps <= 0) return base_lr;
    const long warmup = static_cast<long>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max(1L, total_steps - warmup));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string content_hash(std::string_view data) { return hex64(fnv1a64(data)); }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    // splitmix64 over a mixed key
    std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL ^ (stream + 0x632be59bd9b4e019ULL) * 0xbf58476d1ce4e5b9ULL ^
                      (index + 0x1ce4e5b9ULL) * 0x94d049bb133111ebULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace duet
