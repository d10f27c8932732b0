#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "duet/clients.hpp"
#include "duet/motion_repr.hpp"

namespace duet {

enum class Modality { motion, text };

/// N feature vectors of a common dimension, one per row.
struct FeatureSet {
    Eigen::MatrixXd vectors;
    Modality modality = Modality::motion;

    FeatureSet() = default;
    explicit FeatureSet(Eigen::MatrixXd rows, Modality m = Modality::motion);
    explicit FeatureSet(const std::vector<Eigen::VectorXd>& rows, Modality m = Modality::motion);

    int size() const { return static_cast<int>(vectors.rows()); }
    int dim() const { return static_cast<int>(vectors.cols()); }
    void validate() const;
};

/// V diag(sqrt(max(lambda, 0))) V^T for symmetric input.
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& sigma);

/// Frechet distance between Gaussians given by their moments.
double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& sigma1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& sigma2);
/// Frechet distance of the fitted Gaussians; sample covariances get + epsilon I.
double fid(const FeatureSet& a, const FeatureSet& b, double epsilon = 1e-6);

/// Mean Euclidean joint distance over frames, persons and joints (meters).
double mpjpe(const MotionRecord& pred, const MotionRecord& gt);
double mpjpe(const InteractiveClip& pred, const InteractiveClip& gt);
double mpjpe(const MotionClip& pred, const MotionClip& gt);

/// R-precision at 1..max_k. Text i is ranked against motion i plus pool - 1
/// other motions drawn by `seed`; a mismatch at equal distance ranks first.
std::vector<double> r_precision(const FeatureSet& motion, const FeatureSet& text, int pool = 32, int max_k = 3,
                                std::uint64_t seed = 0);

/// Index pairs of the seeded equal split used by diversity() (odd N drops the last vector).
std::vector<std::pair<int, int>> diversity_pairs(int n, std::uint64_t seed);
double diversity(const FeatureSet& feats, std::uint64_t seed = 0);
double mmdist(const FeatureSet& motion, const FeatureSet& text);

// ---- LLM judge ----

inline constexpr std::array<const char*, 3> kJudgeCriteria{"Logical Coherence", "Content Alignment", "Naturalness"};

struct JudgeScores {
    /// Logical Coherence, Content Alignment, Naturalness.
    std::array<double, 3> scores{};
    std::array<std::string, 3> justifications;
    /// Some score was outside [0, 10] and got clamped.
    bool clamped = false;
    bool reasked = false;
};

/// Fills the judge template's data slot with "INPUT: ..." and "OUTPUT: ...".
std::string judge_transcript(const std::string& input, const std::string& output);
/// Reference captions of one motion, rendered for the transcript as "[c1, c2, c3]".
std::string caption_list(const std::vector<std::string>& captions);

/// Throws ParseError when the JSON structure is missing or incomplete.
JudgeScores parse_judge_response(const std::string& response);

/// Renders the judge prompt, asks `llm`, re-asks once with a JSON-only suffix,
/// then throws JudgeError. With a cache directory, responses are stored under
/// the prompt's content hash and reused.
JudgeScores judge_motion_reasoning(const std::string& transcript, LlmClient& llm, const ClientSpec& spec,
                                   const std::filesystem::path& cache_dir = {});

// ---- reports ----

struct MetricReport {
    std::optional<double> fid;
    std::optional<double> mpjpe;
    std::array<std::optional<double>, 3> r_precision;
    std::optional<double> diversity;
    std::optional<double> mmdist;
    std::optional<JudgeScores> judge;
    /// Externally computed scores (METEOR, MAUVE, ...).
    std::map<std::string, double> external;

    void validate() const;
    nlohmann::json to_json() const;
    static MetricReport from_json(const nlohmann::json& j);
};

/// Merges {"name": value, ...} from a JSON file into report.external.
void load_external_metrics(MetricReport& report, const std::filesystem::path& path);

/// JSON Schema subset: type, properties, required, additionalProperties,
/// items, enum, minimum, maximum. Returns one message per violation.
std::vector<std::string> schema_errors(const nlohmann::json& instance, const nlohmann::json& schema);
const nlohmann::json& metric_report_schema();

}  // namespace duet
