#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "duet/autograd.hpp"
#include "duet/motion_repr.hpp"
#include "duet/params.hpp"

namespace duet {

/// Embedding tables for residual quantization: a single K x dim table shared by
/// every depth, or one table per depth.
struct Codebook {
    std::vector<ag::Matrix> tables;
    int depth = 1;

    bool shared() const { return tables.size() == 1; }
    int size() const { return static_cast<int>(tables.front().rows()); }
    int dim() const { return static_cast<int>(tables.front().cols()); }
    const ag::Matrix& table(int d) const { return tables[shared() ? 0 : static_cast<std::size_t>(d)]; }
    /// K >= 2, no duplicated entries within a table, one table or `depth` tables of equal shape.
    void validate() const;
};

/// Greedy residual coding: at each depth pick the entry nearest to the running
/// residual (ties to the lowest index) and subtract it.
std::vector<std::int32_t> residual_quantize(const Eigen::Ref<const Eigen::VectorXd>& z, const Codebook& codebook);
Eigen::VectorXd dequantize(std::span<const std::int32_t> codes, const Codebook& codebook);

/// Code indices of shape (steps, persons, depth), stored row-major.
struct CodeGrid {
    int steps = 0;
    int persons = 2;
    int depth = 1;
    std::vector<std::int32_t> codes;

    CodeGrid() = default;
    CodeGrid(int steps, int persons, int depth);

    std::int32_t& at(int t, int p, int d) { return codes[index(t, p, d)]; }
    std::int32_t at(int t, int p, int d) const { return codes[index(t, p, d)]; }
    /// Every index in [0, K), persons in {1, 2}, code count matches the shape.
    void validate(int codebook_size) const;
    bool operator==(const CodeGrid&) const = default;

  private:
    std::size_t index(int t, int p, int d) const {
        return (static_cast<std::size_t>(t) * static_cast<std::size_t>(persons) + static_cast<std::size_t>(p)) *
                   static_cast<std::size_t>(depth) +
               static_cast<std::size_t>(d);
    }
};

struct LatentSequence {
    ag::Matrix latents;  // L x dim
    int downsample = 4;
    int source_length = 0;

    int steps() const { return static_cast<int>(latents.rows()); }
};

struct LatentPair {
    LatentSequence person_a;
    LatentSequence person_b;
    /// Trailing frames dropped so the encoder input is a multiple of the downsample rate.
    int truncated_frames = 0;
};

enum class CodebookUpdate { gradient, ema };

struct TokenizerConfig {
    int num_joints = 22;
    int codebook_size = 512;
    int dim = 512;
    int depth = 4;
    int downsample = 4;
    int hidden = 128;
    double beta = 0.25;
    double lr = 2e-4;
    int steps = 500;
    int batch_size = 8;
    std::uint64_t seed = 0;
    bool shared_codebook = true;
    CodebookUpdate codebook_update = CodebookUpdate::gradient;
    double ema_decay = 0.99;
    int dead_code_steps = 256;
    int kmeans_iterations = 10;

    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys are reported by name.
    static TokenizerConfig from_json(const nlohmann::json& j, bool require_all = false);
};

struct TokenizerParams {
    TokenizerConfig config;
    SkeletonSpec skeleton;
    ParameterSet weights;
    ag::Matrix feature_mean;  // 1 x feature_width
    ag::Matrix feature_std;   // 1 x feature_width
    long step = 0;

    int input_width() const { return 2 * feature_width(config.num_joints); }
    Codebook codebook() const;
    std::vector<std::string> codebook_names() const;
    std::vector<std::string> network_names() const;
    bool bitwise_equal(const TokenizerParams& other) const;
};

/// Fresh weights and an identity feature normalization.
TokenizerParams init_tokenizer(const TokenizerConfig& config, const SkeletonSpec& skeleton);

LatentPair encode_clip(const InteractiveClip& clip, const TokenizerParams& params);
/// Single-person motion is encoded as two identical copies; person-a latents are returned.
LatentSequence encode_single(const MotionClip& clip, const TokenizerParams& params);
InteractiveClip decode_latents(const LatentSequence& a, const LatentSequence& b, const TokenizerParams& params);

CodeGrid quantize_latents(const LatentPair& latents, const TokenizerParams& params);
CodeGrid tokenize_clip(const InteractiveClip& clip, const TokenizerParams& params);
CodeGrid tokenize_single(const MotionClip& clip, const TokenizerParams& params);
/// One-person grids decode to person a of a duplicated pair.
MotionRecord detokenize(const CodeGrid& grid, const TokenizerParams& params);

/// Losses for one batch. With `freeze` set, codes and stop-gradient values are
/// taken from it so the straight-through surrogate can be checked numerically.
struct QuantizerFreeze {
    std::vector<std::vector<std::int32_t>> codes;
    std::vector<ag::Matrix> latents;
    std::vector<ag::Matrix> quantized;
};

struct TokenizerLoss {
    ag::Var total;
    double recon = 0.0;
    double codebook = 0.0;
    double commitment = 0.0;
};

TokenizerLoss tokenizer_loss(const TokenizerParams& params, std::span<const InteractiveClip> batch,
                             const QuantizerFreeze* freeze = nullptr, QuantizerFreeze* capture = nullptr);

struct TokenizerTrainReport {
    double initial_mpjpe = 0.0;
    double final_mpjpe = 0.0;
    std::vector<double> losses;
    int reseeded_codes = 0;
};

/// Mean per-joint position error of encode -> quantize -> decode over the dataset.
double reconstruction_mpjpe(std::span<const InteractiveClip> dataset, const TokenizerParams& params);

TokenizerParams train_tokenizer(std::span<const InteractiveClip> dataset, const TokenizerConfig& config,
                                TokenizerTrainReport* report = nullptr);

void save_tokenizer(const std::filesystem::path& path, const TokenizerParams& params);
TokenizerParams load_tokenizer(const std::filesystem::path& path);
nlohmann::json tokenizer_to_json(const TokenizerParams& params);
TokenizerParams tokenizer_from_json(const nlohmann::json& j);

}  // namespace duet
