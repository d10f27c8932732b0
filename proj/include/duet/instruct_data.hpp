#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "duet/clients.hpp"
#include "duet/features.hpp"
#include "duet/lm_core.hpp"
#include "duet/motion_repr.hpp"
#include "duet/token_codec.hpp"

namespace duet {

enum class TaskTag { editing, reasoning, story, t2m, m2t, prediction, reaction };
enum class Split { train, val, test };
enum class Role { user, assistant };

std::string to_string(TaskTag t);
std::string to_string(Split s);
std::string to_string(Role r);
TaskTag parse_task(const std::string& s);
Split parse_split(const std::string& s);
Role parse_role(const std::string& s);

/// A clip by id, optionally narrowed to frames [begin, end) and to one person
/// (0 = a, 1 = b). end < 0 means the clip's last frame.
struct MotionRef {
    std::string clip;
    int begin = 0;
    int end = -1;
    int person = -1;

    bool operator==(const MotionRef&) const = default;
};

struct Segment {
    enum class Kind { text, motion } kind = Kind::text;
    std::string text;
    MotionRef motion;

    static Segment of_text(std::string t);
    static Segment of_motion(MotionRef m);
    /// Exactly one payload: text segments carry no clip, motion segments no text.
    void validate() const;
    bool operator==(const Segment&) const = default;
};

struct Turn {
    Role role = Role::user;
    std::vector<Segment> segments;
    bool operator==(const Turn&) const = default;
};

struct ConversationSample {
    std::string id;
    TaskTag task = TaskTag::t2m;
    Split split = Split::train;
    std::vector<Turn> turns;

    std::vector<MotionRef> motion_refs() const;
    bool operator==(const ConversationSample&) const = default;
};

/// Clips addressed by id. With a directory, clips live in "<dir>/<id>.motion.json"
/// and are loaded on first use. Safe for concurrent use.
class ClipStore {
  public:
    ClipStore() = default;
    explicit ClipStore(std::filesystem::path dir);

    void put(const std::string& id, const MotionRecord& record);
    bool contains(const std::string& id) const;
    MotionRecord get(const std::string& id) const;
    const std::filesystem::path& dir() const { return dir_; }

  private:
    std::filesystem::path dir_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, MotionRecord> cache_;
};

/// The referenced frames and persons of a stored clip.
MotionRecord resolve(const MotionRef& ref, const ClipStore& clips);

/// Roles alternate starting with the user, at least one assistant turn, every
/// segment valid, and (with a store) every motion reference resolves.
void validate_conversation(const ConversationSample& conv, const ClipStore* clips = nullptr);

nlohmann::json conversation_to_json(const ConversationSample& conv);
ConversationSample conversation_from_json(const nlohmann::json& j);
void write_corpus(const std::filesystem::path& path, const std::vector<ConversationSample>& corpus);
std::vector<ConversationSample> read_corpus(const std::filesystem::path& path);

// ---- stage 2 / stage 3 rendering ----

struct Stage2Sample {
    TaskTag task = TaskTag::t2m;
    std::vector<Segment> segments;
    /// segments[label_begin..] form the label.
    std::size_t label_begin = 0;
};

/// Pretraining sample bound to its template by content:
///   m2t        "Generate caption from motion: " [motion] | [caption]
///   t2m        "Generate motion from caption: " [caption] | [motion]
///   reaction   "Generate reaction motion: " [person a] | [person b]
///   prediction "Predict motion: " [frames 0..floor(M/4)) | [rest]
Stage2Sample render_stage2_sample(TaskTag task, const std::string& clip_id, const ClipStore& clips,
                                  const std::string& caption = {});

/// Everything needed to turn segments into ids.
struct RenderContext {
    const VocabManifest* manifest = nullptr;
    const TextTokenizer* text = nullptr;
    const ClipStore* clips = nullptr;
    std::function<CodeGrid(const MotionRecord&)> encode;
};

/// Tokenizer-backed motion encoder (pairs and single persons).
std::function<CodeGrid(const MotionRecord&)> motion_encoder(const TokenizerParams& params);

std::vector<CodecSegment> to_codec_segments(const std::vector<Segment>& segments, const RenderContext& ctx);

/// <bos> prompt label <eos>; the loss covers the label and <eos>.
TrainingExample tokenize_stage2(const Stage2Sample& sample, const RenderContext& ctx);

inline constexpr const char* kUserSentinel = "USER: ";
inline constexpr const char* kAssistantSentinel = "ASSISTANT: ";

/// <bos> then each turn as sentinel + content, turns separated by a space;
/// assistant turns end with <eos>. The loss covers assistant content and its <eos>.
TrainingExample render_stage3_sample(const ConversationSample& conv, const RenderContext& ctx);

/// Ids of everything before the final assistant turn's content (the generation prompt).
TokenIds stage3_prompt(const ConversationSample& conv, const RenderContext& ctx);

// ---- synthesis ----

enum class SynthesisMode { dataset_plus_synth, both_synth };
std::string to_string(SynthesisMode m);
SynthesisMode parse_mode(const std::string& s);

struct SeedSample {
    std::string id;
    std::string clip;
    std::string caption;
    TaskTag task = TaskTag::editing;
};

struct ClientCall {
    std::string template_id;
    std::string request_hash;
    std::string response_hash;
};

struct SynthesisResult {
    ConversationSample conversation;
    /// Caption of every clip the conversation references.
    std::map<std::string, std::string> captions;
    std::vector<ClientCall> calls;
};

struct SynthesisOptions {
    ClientSpec llm;
    ClientSpec t2m;
    std::string action_labels = "hug, handshake, push, pull, wave, dance, fight, pass object";
    int frames = 64;
    std::uint64_t seed = 0;
};

/// Speaker-tagged lines ("User:", "AI:") with bracketed motion spans. Brackets
/// naming [motion_placeholder_N] refer to `known` clips; any other bracket is a
/// caption to synthesize. Throws ParseError unless there are exactly two motions.
struct DialoguePiece {
    /// 0 for text, otherwise the 1-based motion number.
    int motion = 0;
    std::string text;
};

struct DialogueTurn {
    Role role = Role::user;
    std::vector<DialoguePiece> pieces;
};

struct ParsedDialogue {
    std::vector<DialogueTurn> turns;
    /// Captions of motions known_placeholders + 1, + 2, ... in order of appearance.
    std::vector<std::string> new_captions;
};
ParsedDialogue parse_dialogue(const std::string& text, int known_placeholders);

/// Mode 1 keeps the seed clip as motion 1 and synthesizes motion 2; mode 2
/// synthesizes both. New clips are stored as "<job>-m1" / "<job>-m2".
SynthesisResult synthesize_conversation(const std::string& job_id, const SeedSample& seed, SynthesisMode mode,
                                        LlmClient& llm, TextToMotionClient& t2m, ClipStore& clips,
                                        const SynthesisOptions& options);

// ---- quality gate and splits ----

struct GateConfig {
    double threshold = 0.5;
    int top_k = 3;
    int pool = 32;
    int diversity_window = 32;
    int min_frames = 16;
    int max_frames = 600;

    void validate() const;
};

struct GateResult {
    bool accepted = false;
    double retrieval = 0.0;
    bool lengths_ok = true;
    /// Captions whose matched motion ranked within top_k.
    int hits = 0;
    int queries = 0;
};

/// Each (caption, motion) pair of the conversation is ranked against up to
/// pool - 1 distractor captions drawn by `seed`; ties rank the distractor first.
GateResult quality_gate(const ConversationSample& conv, const std::map<std::string, std::string>& captions,
                        const std::vector<std::string>& distractors, const ClipStore& clips,
                        const FeatureExtractor& retrieval, const GateConfig& config, std::uint64_t seed);

struct SplitRatios {
    double train = 0.8;
    double val = 0.05;
    double test = 0.15;
};

/// Largest-remainder counts for n samples.
std::array<int, 3> split_counts(std::size_t n, const SplitRatios& ratios);
/// Seeded permutation; the first counts[0] go to train, then val, then test.
void split_corpus(std::vector<ConversationSample>& samples, const SplitRatios& ratios, std::uint64_t seed);

// ---- pipeline ----

struct PipelineConfig {
    SynthesisMode mode = SynthesisMode::dataset_plus_synth;
    int workers = 1;
    std::uint64_t seed = 0;
    GateConfig gate;
    SplitRatios ratios;
    SynthesisOptions synthesis;
    /// Stop after this many newly completed jobs (0 = no limit); the corpus is
    /// only assembled once every job is done.
    int max_jobs = 0;
};

struct JobFailure {
    std::string job;
    std::string error;
};

struct PipelineReport {
    int jobs = 0;
    int resumed = 0;
    int completed = 0;
    int failed = 0;
    int accepted = 0;
    int rejected = 0;
    bool assembled = false;
    std::array<int, 3> split{0, 0, 0};
    double diversity = 0.0;
    std::vector<JobFailure> failures;

    std::string summary_table() const;
};

using LlmFactory = std::function<std::unique_ptr<LlmClient>()>;
using MotionFactory = std::function<std::unique_ptr<TextToMotionClient>()>;

/// Writes into `out_dir`: clips/, jobs/<job>.json, checkpoint.json, calls.jsonl
/// and corpus.jsonl. Completed jobs listed in the checkpoint are not rerun. A
/// StubRetrieval is bound to every clip caption before gating.
PipelineReport run_pipeline(const std::vector<SeedSample>& seeds, const ClipStore& seed_clips,
                            const std::filesystem::path& out_dir, const LlmFactory& make_llm,
                            const MotionFactory& make_t2m, FeatureExtractor& retrieval, const PipelineConfig& config);

}  // namespace duet
