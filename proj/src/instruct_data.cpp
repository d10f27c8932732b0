#include "duet/instruct_data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "duet/errors.hpp"
#include "duet/eval_suite.hpp"
#include "duet/params.hpp"

namespace duet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class E, std::size_t N>
E parse_enum(const std::string& s, const std::array<const char*, N>& names, const char* what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (s == names[i]) return static_cast<E>(i);
    }
    throw ValidationError(std::string("unknown ") + what + " '" + s + "'");
}

constexpr std::array<const char*, 7> kTaskNames{"editing", "reasoning", "story", "t2m", "m2t", "prediction", "reaction"};
constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};
constexpr std::array<const char*, 2> kRoleNames{"user", "assistant"};
constexpr std::array<const char*, 2> kModeNames{"dataset_plus_synth", "both_synth"};

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ValidationError("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string to_string(TaskTag t) { return kTaskNames[static_cast<std::size_t>(t)]; }
std::string to_string(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }
std::string to_string(Role r) { return kRoleNames[static_cast<std::size_t>(r)]; }
std::string to_string(SynthesisMode m) { return kModeNames[static_cast<std::size_t>(m)]; }
TaskTag parse_task(const std::string& s) { return parse_enum<TaskTag>(s, kTaskNames, "task"); }
Split parse_split(const std::string& s) { return parse_enum<Split>(s, kSplitNames, "split"); }
Role parse_role(const std::string& s) { return parse_enum<Role>(s, kRoleNames, "role"); }
SynthesisMode parse_mode(const std::string& s) { return parse_enum<SynthesisMode>(s, kModeNames, "mode"); }

Segment Segment::of_text(std::string t) {
    Segment s;
    s.text = std::move(t);
    return s;
}

Segment Segment::of_motion(MotionRef m) {
    Segment s;
    s.kind = Kind::motion;
    s.motion = std::move(m);
    return s;
}

void Segment::validate() const {
    if (kind == Kind::text) {
        if (!motion.clip.empty()) throw ValidationError("text segment carries a clip reference");
        if (text.empty()) throw ValidationError("empty text segment");
    } else {
        if (!text.empty()) throw ValidationError("motion segment carries text");
        if (motion.clip.empty()) throw ValidationError("motion segment without a clip id");
        if (motion.person < -1 || motion.person > 1) throw ValidationError("person must be -1, 0 or 1");
    }
}

std::vector<MotionRef> ConversationSample::motion_refs() const {
    std::vector<MotionRef> out;
    for (const Turn& t : turns) {
        for (const Segment& s : t.segments) {
            if (s.kind == Segment::Kind::motion) out.push_back(s.motion);
        }
    }
    return out;
}

// ---- clip store ----

ClipStore::ClipStore(fs::path dir) : dir_(std::move(dir)) {
    if (!dir_.empty()) fs::create_directories(dir_);
}

void ClipStore::put(const std::string& id, const MotionRecord& record) {
    if (id.empty() || id.find('/') != std::string::npos) throw ValidationError("bad clip id '" + id + "'");
    if (!dir_.empty()) write_motion_file(dir_ / (id + ".motion.json"), record);
    std::lock_guard lock(mutex_);
    cache_[id] = record;
}

bool ClipStore::contains(const std::string& id) const {
    {
        std::lock_guard lock(mutex_);
        if (cache_.count(id)) return true;
    }
    return !dir_.empty() && fs::exists(dir_ / (id + ".motion.json"));
}

MotionRecord ClipStore::get(const std::string& id) const {
    {
        std::lock_guard lock(mutex_);
        auto it = cache_.find(id);
        if (it != cache_.end()) return it->second;
    }
    const fs::path path = dir_ / (id + ".motion.json");
    if (dir_.empty() || !fs::exists(path)) throw ValidationError("unresolved motion reference '" + id + "'");
    MotionRecord record = read_motion_file(path);
    std::lock_guard lock(mutex_);
    cache_.emplace(id, record);
    return record;
}

MotionRecord resolve(const MotionRef& ref, const ClipStore& clips) {
    MotionRecord rec = clips.get(ref.clip);
    const int m = rec.persons.front().length();
    const int end = ref.end < 0 ? m : ref.end;
    if (ref.begin < 0 || ref.begin >= end || end > m) {
        throw ValidationError("frame range [" + std::to_string(ref.begin) + ", " + std::to_string(end) +
                              ") outside clip '" + ref.clip + "' of " + std::to_string(m) + " frames");
    }
    if (ref.person >= static_cast<int>(rec.persons.size())) {
        throw ValidationError("clip '" + ref.clip + "' has no person " + std::to_string(ref.person));
    }
    MotionRecord out;
    for (std::size_t p = 0; p < rec.persons.size(); ++p) {
        if (ref.person >= 0 && static_cast<int>(p) != ref.person) continue;
        out.persons.push_back(ref.begin == 0 && end == m ? rec.persons[p] : rec.persons[p].slice(ref.begin, end));
    }
    return out;
}

void validate_conversation(const ConversationSample& conv, const ClipStore* clips) {
    if (conv.id.empty()) throw ValidationError("conversation without id");
    if (conv.turns.empty()) throw ValidationError("conversation '" + conv.id + "' has no turns");
    bool assistant = false;
    for (std::size_t i = 0; i < conv.turns.size(); ++i) {
        const Turn& t = conv.turns[i];
        const Role expect = i % 2 == 0 ? Role::user : Role::assistant;
        if (t.role != expect) {
            throw ValidationError("conversation '" + conv.id + "': turn " + std::to_string(i) + " should be " +
                                  to_string(expect));
        }
        if (t.segments.empty()) throw ValidationError("conversation '" + conv.id + "': empty turn " + std::to_string(i));
        for (const Segment& s : t.segments) {
            s.validate();
            if (clips && s.kind == Segment::Kind::motion) resolve(s.motion, *clips);
        }
        assistant = assistant || t.role == Role::assistant;
    }
    if (!assistant) throw ValidationError("conversation '" + conv.id + "' has no assistant turn");
}

json conversation_to_json(const ConversationSample& conv) {
    json turns = json::array();
    for (const Turn& t : conv.turns) {
        json segs = json::array();
        for (const Segment& s : t.segments) {
            if (s.kind == Segment::Kind::text) {
                segs.push_back({{"kind", "text"}, {"text", s.text}});
                continue;
            }
            json seg = {{"kind", "motion"}, {"clip", s.motion.clip}};
            if (s.motion.begin != 0 || s.motion.end >= 0) seg["frames"] = {s.motion.begin, s.motion.end};
            if (s.motion.person >= 0) seg["person"] = s.motion.person;
            segs.push_back(seg);
        }
        turns.push_back({{"role", to_string(t.role)}, {"segments", segs}});
    }
    return {{"id", conv.id}, {"task", to_string(conv.task)}, {"split", to_string(conv.split)}, {"turns", turns}};
}

ConversationSample conversation_from_json(const json& j) {
    try {
        ConversationSample c;
        c.id = j.at("id").get<std::string>();
        c.task = parse_task(j.at("task").get<std::string>());
        c.split = parse_split(j.at("split").get<std::string>());
        for (const json& t : j.at("turns")) {
            Turn turn;
            turn.role = parse_role(t.at("role").get<std::string>());
            for (const json& s : t.at("segments")) {
                const std::string kind = s.at("kind").get<std::string>();
                if (kind == "text") {
                    if (s.contains("clip")) throw ValidationError("text segment with a clip");
                    turn.segments.push_back(Segment::of_text(s.at("text").get<std::string>()));
                } else if (kind == "motion") {
                    if (s.contains("text")) throw ValidationError("motion segment with text");
                    MotionRef ref;
                    ref.clip = s.at("clip").get<std::string>();
                    if (s.contains("frames")) {
                        ref.begin = s["frames"].at(0).get<int>();
                        ref.end = s["frames"].at(1).get<int>();
                    }
                    ref.person = s.value("person", -1);
                    turn.segments.push_back(Segment::of_motion(ref));
                } else {
                    throw ValidationError("unknown segment kind '" + kind + "'");
                }
            }
            c.turns.push_back(std::move(turn));
        }
        validate_conversation(c);
        return c;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed conversation: ") + e.what());
    }
}

void write_corpus(const fs::path& path, const std::vector<ConversationSample>& corpus) {
    std::string text;
    for (const auto& c : corpus) text += conversation_to_json(c).dump() + "\n";
    write_text_atomic(path, text);
}

std::vector<ConversationSample> read_corpus(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path.string());
    std::vector<ConversationSample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(conversation_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// ---- rendering ----

Stage2Sample render_stage2_sample(TaskTag task, const std::string& clip_id, const ClipStore& clips,
                                  const std::string& caption) {
    Stage2Sample s;
    s.task = task;
    s.label_begin = 2;
    const MotionRef whole{clip_id};
    auto need_caption = [&] {
        if (caption.empty()) throw ValidationError(to_string(task) + " sample needs a caption");
    };
    switch (task) {
        case TaskTag::m2t:
            need_caption();
            s.segments = {Segment::of_text("Generate caption from motion: "), Segment::of_motion(whole),
                          Segment::of_text(caption)};
            break;
        case TaskTag::t2m:
            need_caption();
            s.segments = {Segment::of_text("Generate motion from caption: "), Segment::of_text(caption),
                          Segment::of_motion(whole)};
            break;
        case TaskTag::reaction: {
            if (clips.get(clip_id).persons.size() != 2) throw ValidationError("reaction needs a two-person clip");
            s.segments = {Segment::of_text("Generate reaction motion: "), Segment::of_motion({clip_id, 0, -1, 0}),
                          Segment::of_motion({clip_id, 0, -1, 1})};
            break;
        }
        case TaskTag::prediction: {
            const int m = clips.get(clip_id).persons.front().length();
            if (m < 4) throw ValidationError("prediction needs at least 4 frames, clip has " + std::to_string(m));
            const int cut = m / 4;
            s.segments = {Segment::of_text("Predict motion: "), Segment::of_motion({clip_id, 0, cut}),
                          Segment::of_motion({clip_id, cut, m})};
            break;
        }
        default:
            throw ValidationError("no pretraining template for task " + to_string(task));
    }
    return s;
}

std::function<CodeGrid(const MotionRecord&)> motion_encoder(const TokenizerParams& params) {
    return [&params](const MotionRecord& m) {
        if (m.interactive()) return tokenize_clip(m.as_interactive(), params);
        return tokenize_single(m.persons.front(), params);
    };
}

std::vector<CodecSegment> to_codec_segments(const std::vector<Segment>& segments, const RenderContext& ctx) {
    std::vector<CodecSegment> out;
    for (const Segment& s : segments) {
        if (s.kind == Segment::Kind::text) out.push_back(CodecSegment::of_text(s.text));
        else out.push_back(CodecSegment::of_motion(ctx.encode(resolve(s.motion, *ctx.clips))));
    }
    return out;
}

namespace {

void append(TrainingExample& ex, const TokenIds& ids, bool target) {
    ex.ids.insert(ex.ids.end(), ids.begin(), ids.end());
    ex.loss_mask.insert(ex.loss_mask.end(), ids.size(), target ? 1 : 0);
}

TokenIds splice(const std::vector<Segment>& segs, const RenderContext& ctx) {
    const auto cs = to_codec_segments(segs, ctx);
    return splice_text_and_motion(cs, *ctx.manifest, *ctx.text).ids;
}

void check_context(const RenderContext& ctx) {
    if (!ctx.manifest || !ctx.text || !ctx.clips || !ctx.encode) throw ValidationError("incomplete render context");
}

}  // namespace

TrainingExample tokenize_stage2(const Stage2Sample& sample, const RenderContext& ctx) {
    check_context(ctx);
    if (sample.label_begin == 0 || sample.label_begin >= sample.segments.size()) {
        throw ValidationError("stage-2 sample needs a prompt and a label");
    }
    const std::vector<Segment> prompt(sample.segments.begin(),
                                      sample.segments.begin() + static_cast<std::ptrdiff_t>(sample.label_begin));
    const std::vector<Segment> label(sample.segments.begin() + static_cast<std::ptrdiff_t>(sample.label_begin),
                                     sample.segments.end());
    TrainingExample ex;
    append(ex, {ctx.text->bos_id()}, false);
    append(ex, splice(prompt, ctx), false);
    append(ex, splice(label, ctx), true);
    append(ex, {ctx.text->eos_id()}, true);
    return ex;
}

namespace {

TrainingExample render_turns(const ConversationSample& conv, const RenderContext& ctx, std::size_t turn_count,
                             bool open_last) {
    TrainingExample ex;
    append(ex, {ctx.text->bos_id()}, false);
    for (std::size_t i = 0; i < turn_count; ++i) {
        const Turn& t = conv.turns[i];
        const bool assistant = t.role == Role::assistant;
        if (i > 0) append(ex, ctx.text->encode(" "), false);
        append(ex, ctx.text->encode(assistant ? kAssistantSentinel : kUserSentinel), false);
        if (open_last && i + 1 == turn_count) break;
        append(ex, splice(t.segments, ctx), assistant);
        if (assistant) append(ex, {ctx.text->eos_id()}, true);
    }
    return ex;
}

}  // namespace

TrainingExample render_stage3_sample(const ConversationSample& conv, const RenderContext& ctx) {
    check_context(ctx);
    validate_conversation(conv, ctx.clips);
    return render_turns(conv, ctx, conv.turns.size(), false);
}

TokenIds stage3_prompt(const ConversationSample& conv, const RenderContext& ctx) {
    check_context(ctx);
    validate_conversation(conv, ctx.clips);
    std::size_t last = conv.turns.size();
    while (last > 0 && conv.turns[last - 1].role != Role::assistant) --last;
    return render_turns(conv, ctx, last, true).ids;
}

// ---- synthesis ----

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

ParsedDialogue parse_dialogue(const std::string& text, int known_placeholders) {
    static const std::regex speaker(R"(^\s*(User|AI)\s*:\s*(.*)$)", std::regex::icase);
    static const std::regex placeholder(R"(^\s*motion_placeholder_(\d+)\s*$)");
    std::vector<std::pair<Role, std::string>> raw;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::smatch m;
        if (std::regex_match(line, m, speaker)) {
            const Role role = (m[1].str()[0] == 'U' || m[1].str()[0] == 'u') ? Role::user : Role::assistant;
            if (!raw.empty() && raw.back().first == role) raw.back().second += " " + m[2].str();
            else raw.emplace_back(role, m[2].str());
        } else if (!raw.empty() && !trim(line).empty()) {
            raw.back().second += " " + trim(line);
        }
    }
    if (raw.empty()) throw ParseError("no speaker-tagged lines in client output");
    if (raw.front().first != Role::user) throw ParseError("dialogue must start with the user");

    ParsedDialogue out;
    std::vector<int> uses(static_cast<std::size_t>(known_placeholders) + 1, 0);
    bool assistant = false;
    for (const auto& [role, body] : raw) {
        DialogueTurn turn;
        turn.role = role;
        assistant = assistant || role == Role::assistant;
        std::size_t pos = 0;
        auto add_text = [&](const std::string& s) {
            if (!trim(s).empty()) turn.pieces.push_back({0, s});
        };
        while (pos < body.size()) {
            const std::size_t open = body.find('[', pos);
            if (open == std::string::npos) {
                add_text(body.substr(pos));
                break;
            }
            const std::size_t close = body.find(']', open);
            if (close == std::string::npos) throw ParseError("unterminated [motion caption] bracket");
            add_text(body.substr(pos, open - pos));
            const std::string inner = body.substr(open + 1, close - open - 1);
            std::smatch m;
            if (std::regex_match(inner, m, placeholder)) {
                const int n = std::stoi(m[1].str());
                if (n < 1 || n > known_placeholders) throw ParseError("unknown placeholder " + inner);
                ++uses[static_cast<std::size_t>(n)];
                turn.pieces.push_back({n, {}});
            } else {
                if (trim(inner).empty()) throw ParseError("empty [motion caption] bracket");
                out.new_captions.push_back(trim(inner));
                turn.pieces.push_back({known_placeholders + static_cast<int>(out.new_captions.size()), {}});
            }
            pos = close + 1;
        }
        if (!turn.pieces.empty()) {
            // Trim the outer whitespace of the turn.
            if (turn.pieces.front().motion == 0) turn.pieces.front().text.erase(0, turn.pieces.front().text.find_first_not_of(" \t"));
            if (turn.pieces.back().motion == 0) {
                auto& t = turn.pieces.back().text;
                t.erase(t.find_last_not_of(" \t") + 1);
            }
        }
        if (turn.pieces.empty()) throw ParseError("empty dialogue turn");
        out.turns.push_back(std::move(turn));
    }
    if (!assistant) throw ParseError("dialogue has no AI turn");
    for (int n = 1; n <= known_placeholders; ++n) {
        if (uses[static_cast<std::size_t>(n)] != 1) {
            throw ParseError("placeholder " + std::to_string(n) + " used " + std::to_string(uses[static_cast<std::size_t>(n)]) +
                             " times");
        }
    }
    if (known_placeholders + static_cast<int>(out.new_captions.size()) != 2) {
        throw ParseError("expected exactly two motions, found " +
                         std::to_string(known_placeholders + static_cast<int>(out.new_captions.size())));
    }
    return out;
}

namespace {

struct CallRecorder {
    LlmClient& llm;
    const ClientSpec& spec;
    std::vector<ClientCall>& calls;

    /// Malformed output gets one more request before the ParseError escapes.
    template <class Parse>
    auto ask(const ClientRequest& request, Parse&& parse) -> decltype(parse(std::string())) {
        for (int attempt = 0;; ++attempt) {
            const std::string response = with_retry(spec, [&] { return llm.complete(request); });
            calls.push_back({request.template_id, request.hash(), content_hash(response)});
            try {
                return parse(response);
            } catch (const ParseError&) {
                if (attempt >= 1) throw;
            }
        }
    }
};

std::string parse_edited_caption(const std::string& response) {
    static const std::regex motion2(R"(Motion\s*2\s*:\s*\[([^\]]*)\])");
    std::smatch m;
    if (!std::regex_search(response, m, motion2) || trim(m[1].str()).empty()) {
        throw ParseError("missing 'Motion 2: [...]' in client output");
    }
    return trim(m[1].str());
}

}  // namespace

SynthesisResult synthesize_conversation(const std::string& job_id, const SeedSample& seed, SynthesisMode mode,
                                        LlmClient& llm, TextToMotionClient& t2m, ClipStore& clips,
                                        const SynthesisOptions& options) {
    options.llm.validate();
    options.t2m.validate();
    SynthesisResult result;
    CallRecorder rec{llm, options.llm, result.calls};
    const bool editing = seed.task == TaskTag::editing;
    std::vector<std::string> clip_ids(2);
    std::vector<std::string> captions(2);
    ParsedDialogue dialogue;

    if (mode == SynthesisMode::dataset_plus_synth) {
        if (seed.clip.empty() || seed.caption.empty()) throw ValidationError("seed '" + seed.id + "' lacks clip or caption");
        clip_ids[0] = seed.clip;
        captions[0] = seed.caption;
        if (editing) {
            ClientRequest edit{"editing_caption", {{"motion1_caption", seed.caption}}, job_id, {}};
            captions[1] = rec.ask(edit, parse_edited_caption);
            ClientRequest conv{"editing_conversation",
                               {{"motion1_caption", captions[0]}, {"motion2_caption", captions[1]}},
                               job_id,
                               {}};
            dialogue = rec.ask(conv, [](const std::string& r) { return parse_dialogue(r, 2); });
        } else {
            ClientRequest conv{"reasoning_with_seed",
                               {{"motion1_caption", seed.caption}, {"action_labels", options.action_labels}},
                               job_id,
                               {}};
            dialogue = rec.ask(conv, [](const std::string& r) { return parse_dialogue(r, 1); });
            captions[1] = dialogue.new_captions.at(0);
        }
    } else {
        ClientRequest conv{editing ? "editing_no_base" : "reasoning_no_base",
                           {{"action_labels", options.action_labels}},
                           job_id,
                           {}};
        dialogue = rec.ask(conv, [](const std::string& r) { return parse_dialogue(r, 0); });
        captions[0] = dialogue.new_captions.at(0);
        captions[1] = dialogue.new_captions.at(1);
    }

    const std::uint64_t motion_seed = derive_seed(options.seed, fnv1a64(job_id));
    for (int i = 0; i < 2; ++i) {
        if (!clip_ids[static_cast<std::size_t>(i)].empty()) continue;
        const std::string& cap = captions[static_cast<std::size_t>(i)];
        MotionRecord motion =
            with_retry(options.t2m, [&] { return t2m.generate(cap, options.frames, motion_seed); });
        const std::string id = job_id + "-m" + std::to_string(i + 1);
        clips.put(id, motion);
        result.calls.push_back({"t2m", content_hash(cap), content_hash(motion_to_json_text(motion))});
        clip_ids[static_cast<std::size_t>(i)] = id;
    }

    ConversationSample& conv = result.conversation;
    conv.id = job_id;
    conv.task = seed.task;
    for (const DialogueTurn& dt : dialogue.turns) {
        Turn turn;
        turn.role = dt.role;
        for (const DialoguePiece& p : dt.pieces) {
            if (p.motion == 0) turn.segments.push_back(Segment::of_text(p.text));
            else turn.segments.push_back(Segment::of_motion({clip_ids[static_cast<std::size_t>(p.motion - 1)]}));
        }
        conv.turns.push_back(std::move(turn));
    }
    for (int i = 0; i < 2; ++i) result.captions[clip_ids[static_cast<std::size_t>(i)]] = captions[static_cast<std::size_t>(i)];
    try {
        validate_conversation(conv, &clips);
    } catch (const ValidationError& e) {
        throw ParseError(std::string("client dialogue is not a valid conversation: ") + e.what());
    }
    return result;
}

// ---- gate and splits ----

void GateConfig::validate() const {
    // Thresholds above 1 are allowed and reject everything.
    if (!(threshold >= 0.0) || !std::isfinite(threshold)) throw ValidationError("gate threshold must be >= 0");
    if (top_k < 1) throw ValidationError("gate top_k must be >= 1");
    if (pool < 2) throw ValidationError("gate pool must be >= 2");
    if (diversity_window < 2) throw ValidationError("diversity window must be >= 2");
    if (min_frames < 1 || min_frames > max_frames) throw ValidationError("gate frame bounds are inconsistent");
}

GateResult quality_gate(const ConversationSample& conv, const std::map<std::string, std::string>& captions,
                        const std::vector<std::string>& distractors, const ClipStore& clips,
                        const FeatureExtractor& retrieval, const GateConfig& config, std::uint64_t seed) {
    config.validate();
    GateResult r;
    std::mt19937_64 rng(derive_seed(seed, 0x6a7e, fnv1a64(conv.id)));
    std::set<std::string> seen;
    for (const MotionRef& ref : conv.motion_refs()) {
        const MotionRecord motion = resolve(ref, clips);
        const int length = motion.persons.front().length();
        if (length < config.min_frames || length > config.max_frames) r.lengths_ok = false;
        auto cap = captions.find(ref.clip);
        if (cap == captions.end() || !seen.insert(ref.clip).second) continue;
        ++r.queries;
        std::vector<const std::string*> pool;
        for (const std::string& d : distractors) {
            if (d != cap->second) pool.push_back(&d);
        }
        const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(config.pool - 1));
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        const Eigen::VectorXd mf = retrieval.motion_features(motion);
        const double match = (mf - retrieval.text_features(cap->second)).norm();
        int better = 0;
        for (std::size_t i = 0; i < take; ++i) {
            if ((mf - retrieval.text_features(*pool[i])).norm() <= match) ++better;
        }
        if (better < config.top_k) ++r.hits;
    }
    r.retrieval = r.queries > 0 ? static_cast<double>(r.hits) / static_cast<double>(r.queries) : 0.0;
    r.accepted = r.lengths_ok && r.queries > 0 && r.retrieval >= config.threshold;
    return r;
}

std::array<int, 3> split_counts(std::size_t n, const SplitRatios& ratios) {
    const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
    for (double x : r) {
        if (!(x >= 0.0)) throw ValidationError("split ratios must be non-negative");
    }
    if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
    std::array<int, 3> counts{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = static_cast<double>(n) * r[static_cast<std::size_t>(i)];
        counts[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(exact + 1e-9));
        rem[static_cast<std::size_t>(i)] = exact - counts[static_cast<std::size_t>(i)];
        assigned += counts[static_cast<std::size_t>(i)];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return rem[static_cast<std::size_t>(a)] > rem[static_cast<std::size_t>(b)] + 1e-12; });
    for (int k = 0; assigned < static_cast<int>(n); ++k, ++assigned) ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(k % 3)])];
    return counts;
}

void split_corpus(std::vector<ConversationSample>& samples, const SplitRatios& ratios, std::uint64_t seed) {
    if (samples.empty()) throw ValidationError("cannot split an empty corpus");
    const auto counts = split_counts(samples.size(), ratios);
    std::vector<std::size_t> perm(samples.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, 0x5917));
    for (std::size_t i = perm.size() - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(perm[i], perm[pick(rng)]);
    }
    for (std::size_t k = 0; k < perm.size(); ++k) {
        const Split s = k < static_cast<std::size_t>(counts[0])                ? Split::train
                        : k < static_cast<std::size_t>(counts[0] + counts[1]) ? Split::val
                                                                               : Split::test;
        samples[perm[k]].split = s;
    }
}

// ---- pipeline ----

std::string PipelineReport::summary_table() const {
    std::ostringstream s;
    s << std::left << std::setw(12) << "jobs" << jobs << "\n"
      << std::setw(12) << "resumed" << resumed << "\n"
      << std::setw(12) << "completed" << completed << "\n"
      << std::setw(12) << "failed" << failed << "\n";
    if (assembled) {
        s << std::setw(12) << "accepted" << accepted << "\n"
          << std::setw(12) << "rejected" << rejected << "\n"
          << std::setw(12) << "split" << split[0] << "/" << split[1] << "/" << split[2] << "\n"
          << std::setw(12) << "diversity" << diversity << "\n";
    }
    for (const auto& f : failures) s << "FAILED " << f.job << ": " << f.error << "\n";
    return s.str();
}

namespace {

json result_to_json(const SynthesisResult& r) {
    json calls = json::array();
    for (const auto& c : r.calls) {
        calls.push_back({{"template", c.template_id}, {"request", c.request_hash}, {"response", c.response_hash}});
    }
    return {{"status", "ok"}, {"conversation", conversation_to_json(r.conversation)}, {"captions", r.captions},
            {"calls", calls}};
}

std::string job_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "job-%05zu", i);
    return buf;
}

std::set<std::string> read_checkpoint(const fs::path& path) {
    std::set<std::string> done;
    if (!fs::exists(path)) return done;
    const json j = json::parse(read_text(path));
    for (const auto& id : j.at("done")) done.insert(id.get<std::string>());
    return done;
}

}  // namespace

PipelineReport run_pipeline(const std::vector<SeedSample>& seeds, const ClipStore& seed_clips, const fs::path& out_dir,
                            const LlmFactory& make_llm, const MotionFactory& make_t2m, FeatureExtractor& retrieval,
                            const PipelineConfig& config) {
    config.gate.validate();
    split_counts(1, config.ratios);
    if (config.workers < 1) throw ValidationError("worker count must be >= 1");
    fs::create_directories(out_dir / "jobs");
    ClipStore clips(out_dir / "clips");
    const fs::path checkpoint = out_dir / "checkpoint.json";

    PipelineReport report;
    report.jobs = static_cast<int>(seeds.size());
    std::set<std::string> done = read_checkpoint(checkpoint);
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (done.count(job_name(i))) ++report.resumed;
        else pending.push_back(i);
    }

    std::mutex mutex;
    std::atomic<std::size_t> next{0};
    std::atomic<int> started{0};
    auto worker = [&] {
        std::unique_ptr<LlmClient> llm = make_llm();
        std::unique_ptr<TextToMotionClient> t2m = make_t2m();
        while (true) {
            const std::size_t k = next.fetch_add(1);
            if (k >= pending.size()) return;
            if (config.max_jobs > 0 && started.fetch_add(1) >= config.max_jobs) return;
            const std::size_t i = pending[k];
            const std::string job = job_name(i);
            json record;
            try {
                const SeedSample& seed = seeds[i];
                if (config.mode == SynthesisMode::dataset_plus_synth) clips.put(seed.clip, seed_clips.get(seed.clip));
                SynthesisOptions opt = config.synthesis;
                opt.seed = config.seed;
                record = result_to_json(synthesize_conversation(job, seed, config.mode, *llm, *t2m, clips, opt));
            } catch (const Error& e) {
                record = {{"status", "failed"}, {"error", e.what()}};
            }
            write_text_atomic(out_dir / "jobs" / (job + ".json"), record.dump(1) + "\n");
            std::lock_guard lock(mutex);
            done.insert(job);
            write_text_atomic(checkpoint, json{{"done", done}}.dump(1) + "\n");
        }
    };
    std::vector<std::thread> threads;
    for (int w = 1; w < config.workers; ++w) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();

    // Assembly: single writer, job order.
    std::vector<SynthesisResult> results;
    std::string call_log;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const std::string job = job_name(i);
        const fs::path path = out_dir / "jobs" / (job + ".json");
        if (!done.count(job) || !fs::exists(path)) continue;
        const json j = json::parse(read_text(path));
        if (j.at("status") != "ok") {
            ++report.failed;
            report.failures.push_back({job, j.value("error", "")});
            continue;
        }
        ++report.completed;
        SynthesisResult r;
        r.conversation = conversation_from_json(j.at("conversation"));
        r.captions = j.at("captions").get<std::map<std::string, std::string>>();
        for (const json& c : j.at("calls")) {
            call_log += json{{"job", job}, {"template", c.at("template")}, {"request", c.at("request")},
                             {"response", c.at("response")}}
                            .dump() +
                        "\n";
        }
        results.push_back(std::move(r));
    }
    if (report.completed + report.failed < report.jobs) return report;

    write_text_atomic(out_dir / "calls.jsonl", call_log);
    auto* stub = dynamic_cast<StubRetrieval*>(&retrieval);
    std::set<std::string> all_captions;
    for (const auto& r : results) {
        for (const auto& [clip, cap] : r.captions) {
            all_captions.insert(cap);
            if (stub) stub->bind(clips.get(clip), cap);
        }
    }
    const std::vector<std::string> distractors(all_captions.begin(), all_captions.end());
    std::vector<ConversationSample> accepted;
    std::vector<Eigen::VectorXd> window;
    for (const auto& r : results) {
        const GateResult g =
            quality_gate(r.conversation, r.captions, distractors, clips, retrieval, config.gate, config.seed);
        if (!g.accepted) {
            ++report.rejected;
            continue;
        }
        accepted.push_back(r.conversation);
        for (const MotionRef& ref : r.conversation.motion_refs()) {
            if (static_cast<int>(window.size()) < config.gate.diversity_window) {
                window.push_back(retrieval.motion_features(resolve(ref, clips)));
            }
        }
    }
    report.accepted = static_cast<int>(accepted.size());
    if (window.size() >= 2) report.diversity = diversity(FeatureSet(window), config.seed);
    if (!accepted.empty()) split_corpus(accepted, config.ratios, config.seed);
    for (const auto& c : accepted) ++report.split[static_cast<std::size_t>(c.split)];
    write_corpus(out_dir / "corpus.jsonl", accepted);
    report.assembled = true;
    return report;
}

}  // namespace duet
