#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/autograd.hpp"
#include "duet/params.hpp"
#include "duet/token_codec.hpp"

namespace duet {

struct ModelConfig {
    int layers = 4;
    int width = 256;
    int heads = 4;
    int context = 1024;
    int vocab_size = 0;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

/// Decoder-only transformer: learned token and position embeddings, pre-norm
/// blocks (attention, GELU MLP), final norm and an untied output head.
struct ModelParams {
    ModelConfig config;
    ParameterSet weights;
};

ModelParams init_model(const ModelConfig& config);

struct LoraConfig {
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.05;
    /// Empty means every supported target: tok_emb, head and all attention/MLP projections.
    std::vector<std::string> targets;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static LoraConfig from_json(const nlohmann::json& j);
};

/// Low-rank deltas. For a linear target with weight W (out x in), "<target>.A" is
/// r x in and "<target>.B" is out x r; the embedding table is treated as a linear
/// map from one-hot ids, so its A is r x V and B is width x r.
struct LoraAdapter {
    LoraConfig config;
    ParameterSet weights;

    double scale() const { return config.alpha / static_cast<double>(config.rank); }
    std::vector<std::string> targets() const;
};

std::vector<std::string> lora_target_names(const ModelConfig& config);
/// Base weight tensor adapted by `target`.
std::string lora_base_weight(const std::string& target);
LoraAdapter init_lora(const ModelParams& params, const LoraConfig& config);
/// W' = W + (alpha / r) B A for every target.
ModelParams lora_merge(const ModelParams& params, const LoraAdapter& adapter);

struct ForwardOptions {
    const LoraAdapter* adapter = nullptr;
    /// Applies adapter dropout when set.
    bool training = false;
    std::uint64_t dropout_seed = 0;
};

/// Per-position next-token log-probabilities (T x V) as a graph node.
ag::Var forward_graph(std::span<const std::int32_t> ids, const ModelParams& params, const ForwardOptions& options = {});
ag::Matrix forward(std::span<const std::int32_t> ids, const ModelParams& params, const LoraAdapter* adapter = nullptr);

/// Mean of -log p(ids[i] | ids[<i]) over positions i >= 1 with loss_mask[i] set.
ag::Var nll_loss(std::span<const std::int32_t> ids, const ModelParams& params, std::span<const std::uint8_t> loss_mask,
                 const ForwardOptions& options = {});

struct SamplingConfig {
    double temperature = 1.0;
    bool greedy = false;
    int top_k = 50;
    int max_new_tokens = 256;
    std::vector<std::int32_t> stop_ids;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Incremental decoder with a per-layer key/value cache.
class DecoderState {
  public:
    explicit DecoderState(const ModelParams& params);
    /// Appends one token and returns the next-token logits.
    Eigen::RowVectorXd push(std::int32_t id);
    int position() const { return position_; }

  private:
    const ModelParams& params_;
    std::vector<ag::Matrix> keys_;
    std::vector<ag::Matrix> values_;
    int position_ = 0;
};

/// Token picked from `logits` under `sampling` (argmax with ties to the lowest id when greedy).
std::int32_t sample_token(const Eigen::RowVectorXd& logits, const SamplingConfig& sampling, std::mt19937_64& rng);

/// Continuation of `prefix`, excluding the stop id that ended it. With an adapter
/// the merged weights are used (dropout is off at inference).
TokenIds generate(std::span<const std::int32_t> prefix, const ModelParams& params, const SamplingConfig& sampling,
                  const LoraAdapter* adapter = nullptr);

struct TrainingExample {
    TokenIds ids;
    /// loss_mask[i] marks ids[i] as a prediction target.
    std::vector<std::uint8_t> loss_mask;
};

struct TrainConfig {
    int stage = 2;
    double lr = 1e-4;
    double warmup_ratio = 0.01;
    double weight_decay = 0.0;
    long steps = 300;
    int batch_size = 4;
    std::uint64_t seed = 0;
    LoraConfig lora;
    /// When set, a checkpoint is written at the end of every epoch.
    std::filesystem::path checkpoint_dir;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Everything needed to continue a run exactly.
struct TrainState {
    int stage = 2;
    long step = 0;
    ModelParams params;
    std::optional<LoraAdapter> adapter;
    AdamW optimizer;
    std::vector<double> losses;
    std::vector<double> learning_rates;
};

enum class BlobType { float64, float32 };

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, BlobType dtype = BlobType::float64);
TrainState load_checkpoint(const std::filesystem::path& path);

/// Fresh state for a stage: stage 2 attaches a new adapter, stage 3 trains the base weights.
TrainState begin_stage(const ModelParams& params, const TrainConfig& config);
/// Runs from state.step up to config.steps. `on_step` receives (step, loss, lr).
void train_steps(TrainState& state, std::span<const TrainingExample> corpus, const TrainConfig& config,
                 const std::function<void(long, double, double)>& on_step = {});

/// Stage 2: adapter + embedding + head updates, adapter merged into the returned weights.
ModelParams run_stage2_pretrain(std::span<const TrainingExample> corpus, const ModelParams& params,
                                const TrainConfig& config, std::vector<double>* losses = nullptr);
/// Stage 3: full-parameter updates on masked conversation sequences.
ModelParams run_stage3_instruction_tune(std::span<const TrainingExample> conversations, const ModelParams& params,
                                        const TrainConfig& config, std::vector<double>* losses = nullptr);

}  // namespace duet
