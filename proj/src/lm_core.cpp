#include "duet/lm_core.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "duet/errors.hpp"

namespace duet {

using ag::Matrix;
using ag::Var;

namespace {

constexpr double kInitStd = 0.02;
constexpr const char* kLoraPrefix = "lora.";

std::string layer_name(int i, const char* rest) { return "layer" + std::to_string(i) + "." + rest; }

bool has_target(const LoraAdapter* adapter, const std::string& target) {
    return adapter && adapter->weights.contains(target + ".A");
}

/// Inverted dropout mask with keep probability 1 - rate.
Var dropout(const Var& x, double rate, std::uint64_t seed) {
    if (rate <= 0.0) return x;
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution keep(1.0 - rate);
    Matrix mask(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
    return ag::mul(x, ag::constant(std::move(mask)));
}

struct Forward {
    const ModelParams& p;
    const ForwardOptions& opt;

    Var lin(const Var& x, const std::string& target, bool bias = true) const {
        const Var* b = bias ? &p.weights.at(target + ".bias") : nullptr;
        Var y = ag::linear_rowwise(x, p.weights.at(target + ".weight"), b);
        if (has_target(opt.adapter, target)) {
            Var in = x;
            if (opt.training) {
                in = dropout(x, opt.adapter->config.dropout, derive_seed(opt.dropout_seed, fnv1a64(target)));
            }
            Var low = ag::linear_rowwise(in, opt.adapter->weights.at(target + ".A"));
            y = ag::add(y, ag::scale(ag::linear_rowwise(low, opt.adapter->weights.at(target + ".B")), opt.adapter->scale()));
        }
        return y;
    }

    Var embed(std::span<const std::int32_t> ids) const {
        Var h = ag::embedding(p.weights.at("tok_emb"), ids);
        if (has_target(opt.adapter, "tok_emb")) {
            Var low = ag::gather_cols(opt.adapter->weights.at("tok_emb.A"), ids);
            h = ag::add(h, ag::scale(ag::linear_rowwise(low, opt.adapter->weights.at("tok_emb.B")), opt.adapter->scale()));
        }
        std::vector<std::int32_t> pos(ids.size());
        std::iota(pos.begin(), pos.end(), 0);
        return ag::add(h, ag::embedding(p.weights.at("pos_emb"), pos));
    }

    Var block(const Var& h, int i) const {
        const auto ln = [&](const Var& x, const char* which) {
            return ag::layer_norm(x, p.weights.at(layer_name(i, which) + std::string(".gamma")),
                                  p.weights.at(layer_name(i, which) + std::string(".beta")));
        };
        Var a = ln(h, "ln1");
        Var att = ag::causal_attention(lin(a, layer_name(i, "attn.q")), lin(a, layer_name(i, "attn.k")),
                                       lin(a, layer_name(i, "attn.v")), p.config.heads);
        Var x = ag::add(h, lin(att, layer_name(i, "attn.o")));
        Var m = ln(x, "ln2");
        return ag::add(x, lin(ag::gelu(lin(m, layer_name(i, "mlp.fc"))), layer_name(i, "mlp.proj")));
    }

    Var logits_of(const Var& h) const {
        Var x = ag::layer_norm(h, p.weights.at("ln_f.gamma"), p.weights.at("ln_f.beta"));
        return lin(x, "head", false);
    }
};

void check_ids(std::span<const std::int32_t> ids, const ModelConfig& c) {
    if (ids.empty()) throw ValidationError("forward: empty token sequence");
    if (static_cast<int>(ids.size()) > c.context) {
        throw LengthError("sequence of " + std::to_string(ids.size()) + " tokens exceeds context " +
                          std::to_string(c.context));
    }
    for (auto id : ids) {
        if (id < 0 || id >= c.vocab_size) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1 || width < 1 || heads < 1 || context < 2) throw ValidationError("model: sizes must be positive");
    if (width % heads != 0) throw ValidationError("model: width must be divisible by heads");
    if (vocab_size < 2) throw ValidationError("model: vocab_size must be >= 2");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"layers", layers}, {"width", width},           {"heads", heads},
            {"context", context}, {"vocab_size", vocab_size}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.value("layers", c.layers);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.context = j.value("context", c.context);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

ModelParams init_model(const ModelConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    std::mt19937_64 rng(derive_seed(config.seed, 0x1a));
    const int w = config.width;
    const double proj_std = kInitStd / std::sqrt(2.0 * config.layers);
    p.weights.add("tok_emb", random_normal(config.vocab_size, w, kInitStd, rng));
    p.weights.add("pos_emb", random_normal(config.context, w, kInitStd, rng));
    for (int i = 0; i < config.layers; ++i) {
        for (const char* ln : {"ln1", "ln2"}) {
            p.weights.add(layer_name(i, ln) + std::string(".gamma"), Matrix::Ones(1, w));
            p.weights.add(layer_name(i, ln) + std::string(".beta"), Matrix::Zero(1, w));
        }
        for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
            const bool out = std::string(proj) == "attn.o";
            p.weights.add(layer_name(i, proj) + std::string(".weight"), random_normal(w, w, out ? proj_std : kInitStd, rng));
            p.weights.add(layer_name(i, proj) + std::string(".bias"), Matrix::Zero(1, w));
        }
        p.weights.add(layer_name(i, "mlp.fc.weight"), random_normal(4 * w, w, kInitStd, rng));
        p.weights.add(layer_name(i, "mlp.fc.bias"), Matrix::Zero(1, 4 * w));
        p.weights.add(layer_name(i, "mlp.proj.weight"), random_normal(w, 4 * w, proj_std, rng));
        p.weights.add(layer_name(i, "mlp.proj.bias"), Matrix::Zero(1, w));
    }
    p.weights.add("ln_f.gamma", Matrix::Ones(1, w));
    p.weights.add("ln_f.beta", Matrix::Zero(1, w));
    p.weights.add("head.weight", random_normal(config.vocab_size, w, kInitStd, rng));
    return p;
}

void LoraConfig::validate() const {
    if (rank < 1) throw ValidationError("lora: rank must be >= 1");
    if (!(alpha > 0.0)) throw ValidationError("lora: alpha must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("lora: dropout must lie in [0, 1)");
}

nlohmann::json LoraConfig::to_json() const {
    return {{"rank", rank}, {"alpha", alpha}, {"dropout", dropout}, {"targets", targets}, {"seed", seed}};
}

LoraConfig LoraConfig::from_json(const nlohmann::json& j) {
    LoraConfig c;
    c.rank = j.value("rank", c.rank);
    c.alpha = j.value("alpha", c.alpha);
    c.dropout = j.value("dropout", c.dropout);
    c.targets = j.value("targets", c.targets);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

std::vector<std::string> LoraAdapter::targets() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : weights) {
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".A") == 0) out.push_back(name.substr(0, name.size() - 2));
    }
    return out;
}

std::vector<std::string> lora_target_names(const ModelConfig& config) {
    std::vector<std::string> out{"tok_emb", "head"};
    for (int i = 0; i < config.layers; ++i) {
        for (const char* t : {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc", "mlp.proj"}) out.push_back(layer_name(i, t));
    }
    return out;
}

std::string lora_base_weight(const std::string& target) { return target == "tok_emb" ? target : target + ".weight"; }

LoraAdapter init_lora(const ModelParams& params, const LoraConfig& config) {
    config.validate();
    LoraAdapter a;
    a.config = config;
    const auto all = lora_target_names(params.config);
    std::vector<std::string> targets = config.targets.empty() ? all : config.targets;
    std::mt19937_64 rng(derive_seed(config.seed, 0x10a));
    for (const auto& t : targets) {
        if (std::find(all.begin(), all.end(), t) == all.end()) throw ValidationError("lora: unknown target " + t);
        const Matrix& w = params.weights.at(lora_base_weight(t)).value();
        // Embedding rows are ids, so the map is V -> width.
        const Eigen::Index in = t == "tok_emb" ? w.rows() : w.cols();
        const Eigen::Index out = t == "tok_emb" ? w.cols() : w.rows();
        a.weights.add(t + ".A", random_normal(config.rank, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        a.weights.add(t + ".B", Matrix::Zero(out, config.rank));
    }
    return a;
}

ModelParams lora_merge(const ModelParams& params, const LoraAdapter& adapter) {
    ModelParams merged{params.config, params.weights.clone()};
    for (const auto& t : adapter.targets()) {
        const std::string base = lora_base_weight(t);
        if (!merged.weights.contains(base)) throw ValidationError("lora_merge: no base weight for target " + t);
        Matrix& w = merged.weights.at(base).mutable_value();
        const Matrix& a = adapter.weights.at(t + ".A").value();
        const Matrix& b = adapter.weights.at(t + ".B").value();
        if (a.rows() != b.cols()) throw ValidationError("lora_merge: rank mismatch for " + t);
        const Matrix delta = adapter.scale() * (b * a);
        if (t == "tok_emb") {
            if (delta.rows() != w.cols() || delta.cols() != w.rows()) throw ValidationError("lora_merge: shape mismatch for " + t);
            w += delta.transpose();
        } else {
            if (delta.rows() != w.rows() || delta.cols() != w.cols()) throw ValidationError("lora_merge: shape mismatch for " + t);
            w += delta;
        }
    }
    return merged;
}

Var forward_graph(std::span<const std::int32_t> ids, const ModelParams& params, const ForwardOptions& options) {
    check_ids(ids, params.config);
    Forward f{params, options};
    Var h = f.embed(ids);
    for (int i = 0; i < params.config.layers; ++i) h = f.block(h, i);
    return ag::log_softmax(f.logits_of(h));
}

Matrix forward(std::span<const std::int32_t> ids, const ModelParams& params, const LoraAdapter* adapter) {
    ag::NoGradGuard guard;
    ForwardOptions opt;
    opt.adapter = adapter;
    return forward_graph(ids, params, opt).value();
}

Var nll_loss(std::span<const std::int32_t> ids, const ModelParams& params, std::span<const std::uint8_t> loss_mask,
             const ForwardOptions& options) {
    if (loss_mask.size() != ids.size()) throw ValidationError("nll_loss: mask length differs from sequence length");
    if (ids.size() < 2) throw ValidationError("nll_loss: need at least two tokens");
    std::vector<std::uint8_t> mask(loss_mask.begin() + 1, loss_mask.end());
    if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
        throw ValidationError("nll_loss: loss mask selects no target positions");
    }
    std::vector<std::int32_t> targets(ids.begin() + 1, ids.end());
    Var logp = forward_graph(ids.first(ids.size() - 1), params, options);
    return ag::masked_nll(logp, targets, mask);
}

void SamplingConfig::validate() const {
    if (!greedy && !(temperature > 0.0)) throw ValidationError("sampling: temperature must be positive");
    if (top_k < 1) throw ValidationError("sampling: top_k must be >= 1");
    if (max_new_tokens < 0) throw ValidationError("sampling: max_new_tokens must be >= 0");
}

DecoderState::DecoderState(const ModelParams& params)
    : params_(params), keys_(static_cast<std::size_t>(params.config.layers)),
      values_(static_cast<std::size_t>(params.config.layers)) {
    for (int i = 0; i < params.config.layers; ++i) {
        keys_[static_cast<std::size_t>(i)].resize(params.config.context, params.config.width);
        values_[static_cast<std::size_t>(i)].resize(params.config.context, params.config.width);
    }
}

Eigen::RowVectorXd DecoderState::push(std::int32_t id) {
    const ModelConfig& c = params_.config;
    if (position_ >= c.context) throw LengthError("generation exceeds context " + std::to_string(c.context));
    if (id < 0 || id >= c.vocab_size) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
    ag::NoGradGuard guard;
    const ParameterSet& w = params_.weights;
    ForwardOptions none;
    Forward f{params_, none};
    const int t = position_;
    Var h = ag::constant(w.at("tok_emb").value().row(id) + w.at("pos_emb").value().row(t));
    const int hd = c.width / c.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int i = 0; i < c.layers; ++i) {
        auto& kc = keys_[static_cast<std::size_t>(i)];
        auto& vc = values_[static_cast<std::size_t>(i)];
        Var a = ag::layer_norm(h, w.at(layer_name(i, "ln1.gamma")), w.at(layer_name(i, "ln1.beta")));
        const Matrix q = f.lin(a, layer_name(i, "attn.q")).value();
        kc.row(t) = f.lin(a, layer_name(i, "attn.k")).value();
        vc.row(t) = f.lin(a, layer_name(i, "attn.v")).value();
        Matrix att(1, c.width);
        Eigen::VectorXd scores;
        for (int hh = 0; hh < c.heads; ++hh) {
            const auto kh = kc.middleCols(hh * hd, hd).topRows(t + 1);
            const auto vh = vc.middleCols(hh * hd, hd).topRows(t + 1);
            scores.noalias() = kh * q.row(0).segment(hh * hd, hd).transpose();
            scores *= inv_sqrt;
            const double mx = scores.maxCoeff();
            scores = (scores.array() - mx).exp();
            scores /= scores.sum();
            att.row(0).segment(hh * hd, hd).noalias() = scores.transpose() * vh;
        }
        h = ag::add(h, f.lin(ag::constant(att), layer_name(i, "attn.o")));
        Var m = ag::layer_norm(h, w.at(layer_name(i, "ln2.gamma")), w.at(layer_name(i, "ln2.beta")));
        h = ag::add(h, f.lin(ag::gelu(f.lin(m, layer_name(i, "mlp.fc"))), layer_name(i, "mlp.proj")));
    }
    ++position_;
    return f.logits_of(h).value().row(0);
}

std::int32_t sample_token(const Eigen::RowVectorXd& logits, const SamplingConfig& s, std::mt19937_64& rng) {
    if (s.greedy) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < logits.size(); ++i) {
            if (logits(i) > logits(best)) best = i;
        }
        return static_cast<std::int32_t>(best);
    }
    const Eigen::Index n = logits.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const auto k = static_cast<std::size_t>(std::min<Eigen::Index>(s.top_k, n));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](Eigen::Index a, Eigen::Index b) { return logits(a) > logits(b) || (logits(a) == logits(b) && a < b); });
    std::vector<double> probs(k);
    const double mx = logits(order[0]) / s.temperature;
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += probs[i] = std::exp(logits(order[i]) / s.temperature - mx);
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    for (std::size_t i = 0; i < k; ++i) {
        r -= probs[i];
        if (r < 0.0) return static_cast<std::int32_t>(order[i]);
    }
    return static_cast<std::int32_t>(order[k - 1]);
}

TokenIds generate(std::span<const std::int32_t> prefix, const ModelParams& params, const SamplingConfig& sampling,
                  const LoraAdapter* adapter) {
    sampling.validate();
    if (prefix.empty()) throw ValidationError("generate: empty prefix");
    if (static_cast<int>(prefix.size()) > params.config.context) throw LengthError("generate: prefix exceeds context");
    if (adapter) {
        const ModelParams merged = lora_merge(params, *adapter);
        return generate(prefix, merged, sampling, nullptr);
    }
    DecoderState state(params);
    Eigen::RowVectorXd logits;
    for (auto id : prefix) logits = state.push(id);
    std::mt19937_64 rng(derive_seed(sampling.seed, 0x9e4));
    TokenIds out;
    for (int n = 0; n < sampling.max_new_tokens; ++n) {
        const std::int32_t next = sample_token(logits, sampling, rng);
        if (std::find(sampling.stop_ids.begin(), sampling.stop_ids.end(), next) != sampling.stop_ids.end()) break;
        out.push_back(next);
        if (state.position() >= params.config.context) break;
        logits = state.push(next);
    }
    return out;
}

void TrainConfig::validate() const {
    if (stage != 2 && stage != 3) throw ValidationError("train: stage must be 2 or 3");
    if (lr < 0.0 || !std::isfinite(lr)) throw ValidationError("train: lr must be a finite non-negative number");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ValidationError("train: warmup_ratio must lie in [0, 1]");
    if (steps < 0 || batch_size < 1) throw ValidationError("train: steps and batch_size must be positive");
    lora.validate();
}

nlohmann::json TrainConfig::to_json() const {
    return {{"stage", stage},           {"lr", lr},       {"warmup_ratio", warmup_ratio},
            {"weight_decay", weight_decay}, {"steps", steps}, {"batch_size", batch_size},
            {"seed", seed},             {"lora", lora.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.stage = j.value("stage", c.stage);
    c.lr = j.value("lr", c.lr);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("lora")) c.lora = LoraConfig::from_json(j["lora"]);
    c.validate();
    return c;
}

namespace {

/// Trainable tensors for the stage, sharing storage with the state.
ParameterSet trainable_view(TrainState& s) {
    ParameterSet view;
    if (s.stage == 2) {
        view.insert("tok_emb", s.params.weights.at("tok_emb"));
        view.insert("head.weight", s.params.weights.at("head.weight"));
        if (s.adapter) {
            for (auto& [name, v] : s.adapter->weights) view.insert(kLoraPrefix + name, v);
        }
    } else {
        for (auto& [name, v] : s.params.weights) view.insert(name, v);
    }
    return view;
}

std::filesystem::path blob_path(const std::filesystem::path& json_path) {
    std::string name = json_path.filename().string();
    const std::string suffix = ".json";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        name = name.substr(0, name.size() - suffix.size());
    }
    return json_path.parent_path() / (name + ".bin");
}

struct BlobWriter {
    std::vector<char> bytes;
    BlobType dtype;

    nlohmann::json put(const std::string& name, const Matrix& m) {
        const std::size_t offset = bytes.size();
        const std::size_t count = static_cast<std::size_t>(m.size());
        if (dtype == BlobType::float64) {
            bytes.resize(offset + count * sizeof(double));
            std::memcpy(bytes.data() + offset, m.data(), count * sizeof(double));
        } else {
            bytes.resize(offset + count * sizeof(float));
            for (std::size_t i = 0; i < count; ++i) {
                const float f = static_cast<float>(m.data()[i]);
                std::memcpy(bytes.data() + offset + i * sizeof(float), &f, sizeof(float));
            }
        }
        return {{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}};
    }

    nlohmann::json put_all(const ParameterSet& set) {
        nlohmann::json table = nlohmann::json::array();
        for (const auto& [name, v] : set) table.push_back(put(name, v.value()));
        return table;
    }

    nlohmann::json put_all(const std::map<std::string, Matrix>& set) {
        nlohmann::json table = nlohmann::json::array();
        for (const auto& [name, m] : set) table.push_back(put(name, m));
        return table;
    }
};

Matrix read_tensor(const std::vector<char>& blob, const nlohmann::json& entry, BlobType dtype) {
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t width = dtype == BlobType::float64 ? sizeof(double) : sizeof(float);
    const std::size_t count = static_cast<std::size_t>(rows * cols);
    if (offset + count * width > blob.size()) throw ValidationError("checkpoint blob too short for " + entry.at("name").get<std::string>());
    Matrix m(rows, cols);
    if (dtype == BlobType::float64) {
        std::memcpy(m.data(), blob.data() + offset, count * width);
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            float f;
            std::memcpy(&f, blob.data() + offset + i * width, width);
            m.data()[i] = f;
        }
    }
    return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, BlobType dtype) {
    // Little-endian hosts only; the blob is a raw dump.
    static_assert(std::endian::native == std::endian::little);
    BlobWriter w{{}, dtype};
    nlohmann::json j;
    j["format"] = "duet-checkpoint";
    j["version"] = 1;
    j["dtype"] = dtype == BlobType::float64 ? "float64" : "float32";
    j["blob"] = blob_path(path).filename().string();
    j["stage"] = state.stage;
    j["step"] = state.step;
    j["model"] = state.params.config.to_json();
    j["tensors"] = w.put_all(state.params.weights);
    if (state.adapter) {
        j["adapter"] = {{"config", state.adapter->config.to_json()}, {"tensors", w.put_all(state.adapter->weights)}};
    }
    j["optimizer"] = {{"steps", state.optimizer.steps_taken()},
                      {"config",
                       {{"beta1", state.optimizer.config().beta1},
                        {"beta2", state.optimizer.config().beta2},
                        {"eps", state.optimizer.config().eps},
                        {"weight_decay", state.optimizer.config().weight_decay}}},
                      {"m", w.put_all(state.optimizer.first_moments())},
                      {"v", w.put_all(state.optimizer.second_moments())}};
    j["losses"] = state.losses;
    j["learning_rates"] = state.learning_rates;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    {
        std::ofstream blob(blob_path(path), std::ios::binary);
        if (!blob) throw ValidationError("cannot write " + blob_path(path).string());
        blob.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
    }
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    try {
        const nlohmann::json j = nlohmann::json::parse(in);
        if (j.value("format", "") != "duet-checkpoint") throw ValidationError("not a checkpoint file: " + path.string());
        const BlobType dtype = j.at("dtype") == "float32" ? BlobType::float32 : BlobType::float64;
        const auto bpath = path.parent_path() / j.at("blob").get<std::string>();
        std::ifstream bin(bpath, std::ios::binary);
        if (!bin) throw ValidationError("cannot open checkpoint blob " + bpath.string());
        const std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

        TrainState s;
        s.stage = j.at("stage").get<int>();
        s.step = j.at("step").get<long>();
        s.params.config = ModelConfig::from_json(j.at("model"));
        for (const auto& e : j.at("tensors")) s.params.weights.add(e.at("name"), read_tensor(blob, e, dtype));
        const ModelParams ref = init_model(s.params.config);
        for (const auto& [name, v] : ref.weights) {
            if (!s.params.weights.contains(name)) throw ValidationError("checkpoint lacks tensor " + name);
            const Matrix& got = s.params.weights.at(name).value();
            if (got.rows() != v.rows() || got.cols() != v.cols()) throw ValidationError("checkpoint tensor " + name + " has the wrong shape");
        }
        if (j.contains("adapter")) {
            LoraAdapter a;
            a.config = LoraConfig::from_json(j["adapter"].at("config"));
            for (const auto& e : j["adapter"].at("tensors")) a.weights.add(e.at("name"), read_tensor(blob, e, dtype));
            s.adapter = std::move(a);
        }
        const auto& o = j.at("optimizer");
        AdamWConfig oc;
        oc.beta1 = o.at("config").at("beta1");
        oc.beta2 = o.at("config").at("beta2");
        oc.eps = o.at("config").at("eps");
        oc.weight_decay = o.at("config").at("weight_decay");
        s.optimizer = AdamW(oc);
        s.optimizer.set_steps_taken(o.at("steps").get<long>());
        for (const auto& e : o.at("m")) s.optimizer.first_moments()[e.at("name")] = read_tensor(blob, e, dtype);
        for (const auto& e : o.at("v")) s.optimizer.second_moments()[e.at("name")] = read_tensor(blob, e, dtype);
        s.losses = j.value("losses", std::vector<double>{});
        s.learning_rates = j.value("learning_rates", std::vector<double>{});
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed checkpoint " + path.string() + ": " + e.what());
    }
}

TrainState begin_stage(const ModelParams& params, const TrainConfig& config) {
    config.validate();
    TrainState s;
    s.stage = config.stage;
    s.params = ModelParams{params.config, params.weights.clone()};
    AdamWConfig oc;
    oc.weight_decay = config.weight_decay;
    s.optimizer = AdamW(oc);
    if (config.stage == 2) {
        LoraConfig lc = config.lora;
        lc.seed = derive_seed(config.seed, 0x10a, lc.seed);
        s.adapter = init_lora(s.params, lc);
    }
    return s;
}

void train_steps(TrainState& state, std::span<const TrainingExample> corpus, const TrainConfig& config,
                 const std::function<void(long, double, double)>& on_step) {
    config.validate();
    if (corpus.empty()) throw ValidationError("train: corpus is empty");
    if (state.stage != config.stage) throw ValidationError("train: checkpoint stage differs from configured stage");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& ex = corpus[i];
        if (ex.ids.size() != ex.loss_mask.size()) throw ValidationError("train: example " + std::to_string(i) + " mask length mismatch");
        if (std::none_of(ex.loss_mask.begin() + (ex.loss_mask.empty() ? 0 : 1), ex.loss_mask.end(), [](std::uint8_t m) { return m != 0; })) {
            throw ValidationError("train: example " + std::to_string(i) + " has no target positions");
        }
    }
    const std::size_t n = corpus.size();
    const std::size_t bs = std::min<std::size_t>(n, static_cast<std::size_t>(config.batch_size));
    const long epoch_steps = static_cast<long>((n + bs - 1) / bs);
    ParameterSet view = trainable_view(state);
    std::vector<std::string> names;
    for (const auto& [name, _] : view) names.push_back(name);
    std::vector<std::size_t> perm(n);
    std::size_t perm_epoch = static_cast<std::size_t>(-1);

    for (long step = state.step; step < config.steps; ++step) {
        Var total;
        for (std::size_t i = 0; i < bs; ++i) {
            const std::size_t pos = static_cast<std::size_t>(step) * bs + i;
            if (pos / n != perm_epoch) {
                perm_epoch = pos / n;
                std::iota(perm.begin(), perm.end(), 0);
                std::mt19937_64 erng(derive_seed(config.seed, 0xe90c, perm_epoch));
                std::shuffle(perm.begin(), perm.end(), erng);
            }
            const TrainingExample& ex = corpus[perm[pos % n]];
            ForwardOptions opt;
            opt.adapter = state.adapter ? &*state.adapter : nullptr;
            opt.training = true;
            opt.dropout_seed = derive_seed(config.seed, static_cast<std::uint64_t>(step), i);
            Var l = nll_loss(ex.ids, state.params, ex.loss_mask, opt);
            total = total.defined() ? ag::add(total, l) : l;
        }
        Var loss = ag::scale(total, 1.0 / static_cast<double>(bs));
        const double value = loss.item();
        if (!std::isfinite(value)) throw TrainingError(step, "loss is not finite");
        ag::backward(loss);
        const double lr = cosine_lr(config.lr, step, config.steps, config.warmup_ratio);
        state.optimizer.step(view, names, lr);
        view.zero_grad();
        state.step = step + 1;
        state.losses.push_back(value);
        state.learning_rates.push_back(lr);
        if (on_step) on_step(step, value, lr);
        if (!config.checkpoint_dir.empty() && (state.step % epoch_steps == 0 || state.step == config.steps)) {
            char name[64];
            std::snprintf(name, sizeof name, "stage%d-step%06ld.ckpt.json", state.stage, state.step);
            save_checkpoint(config.checkpoint_dir / name, state);
        }
    }
}

ModelParams run_stage2_pretrain(std::span<const TrainingExample> corpus, const ModelParams& params,
                                const TrainConfig& config, std::vector<double>* losses) {
    TrainConfig c = config;
    c.stage = 2;
    TrainState s = begin_stage(params, c);
    train_steps(s, corpus, c);
    if (losses) *losses = s.losses;
    return lora_merge(s.params, *s.adapter);
}

ModelParams run_stage3_instruction_tune(std::span<const TrainingExample> conversations, const ModelParams& params,
                                        const TrainConfig& config, std::vector<double>* losses) {
    TrainConfig c = config;
    c.stage = 3;
    TrainState s = begin_stage(params, c);
    train_steps(s, conversations, c);
    if (losses) *losses = s.losses;
    return s.params;
}

}  // namespace duet
