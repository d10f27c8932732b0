#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#include "duet/errors.hpp"
#include "duet/instruct_data.hpp"
#include "duet/synthetic.hpp"

// After Eigen: glibc resolv.h defines a _res macro.
#include "httplib.h"

using namespace duet;
namespace fs = std::filesystem;

namespace {

TokenizerParams tiny_tokenizer() {
    TokenizerConfig c;
    c.codebook_size = 16;
    c.dim = 8;
    c.depth = 2;
    c.hidden = 12;
    c.seed = 3;
    return init_tokenizer(c, SkeletonSpec{});
}

struct Fixture {
    TokenizerParams tok = tiny_tokenizer();
    VocabManifest manifest;
    ByteTokenizer bytes;
    ClipStore clips;
    RenderContext ctx;

    Fixture() {
        manifest.codebook_size = tok.config.codebook_size;
        manifest.depth = tok.config.depth;
        clips.put("c100", MotionRecord::pair(sinusoid_pair(1, 100)));
        clips.put("c64", MotionRecord::pair(sinusoid_pair(2, 64)));
        clips.put("c4", MotionRecord::pair(sinusoid_pair(3, 4)));
        clips.put("c3", MotionRecord::pair(sinusoid_pair(4, 3)));
        clips.put("solo", MotionRecord::single(sinusoid_pair(5, 32).person_a));
        ctx = RenderContext{&manifest, &bytes, &clips, motion_encoder(tok)};
    }
};

std::string file_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Text with every motion span shown as "[motion]".
std::string template_view(const TokenIds& ids, const Fixture& f) {
    std::string out;
    for (const auto& s : scan_segments(ids, f.manifest, f.bytes)) {
        out += s.kind == CodecSegment::Kind::text ? s.text : "[motion]";
    }
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> runs(const std::vector<std::uint8_t>& mask) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] && (i == 0 || !mask[i - 1])) out.emplace_back(i, i);
        if (mask[i]) out.back().second = i + 1;
    }
    return out;
}

ConversationSample editing_conversation() {
    ConversationSample c;
    c.id = "conv-1";
    c.task = TaskTag::editing;
    c.turns = {
        {Role::user, {Segment::of_text("Two friends meet in a park, "), Segment::of_motion({"c64"})}},
        {Role::assistant, {Segment::of_text("They shake hands and laugh.")}},
        {Role::user, {Segment::of_text("Make one person shy.")}},
        {Role::assistant, {Segment::of_motion({"c100"})}},
    };
    return c;
}

class FlakyClient : public LlmClient {
  public:
    FlakyClient(int failures, std::string bad = {}, int bad_count = 0)
        : failures_(failures), bad_(std::move(bad)), bad_count_(bad_count) {}
    std::string complete(const ClientRequest& r) override {
        ++calls;
        if (failures_-- > 0) throw ClientError("transient");
        if (bad_count_-- > 0) return bad_;
        return stub_.complete(r);
    }
    int calls = 0;

  private:
    int failures_;
    std::string bad_;
    int bad_count_;
    StubLlmClient stub_;
};

/// Captions and motions on the unit sphere with every motion antipodal to its caption.
class AdversarialRetrieval : public FeatureExtractor {
  public:
    explicit AdversarialRetrieval(const StubRetrieval& s) : stub_(s) {}
    int dim() const override { return stub_.dim(); }
    Eigen::VectorXd motion_features(const MotionRecord& m) const override {
        return -stub_.motion_features(m).normalized();
    }
    Eigen::VectorXd text_features(const std::string& t) const override { return stub_.text_features(t).normalized(); }

  private:
    const StubRetrieval& stub_;
};

std::vector<SeedSample> make_seeds(int n, ClipStore& store) {
    std::vector<SeedSample> seeds;
    for (int i = 0; i < n; ++i) {
        const std::string id = "seed" + std::to_string(i);
        store.put(id, MotionRecord::pair(sinusoid_pair(static_cast<std::uint64_t>(100 + i), 32)));
        seeds.push_back({id, id, "Two people greet each other in variation " + std::to_string(i) + ".",
                         i % 3 == 0 ? TaskTag::editing : (i % 3 == 1 ? TaskTag::reasoning : TaskTag::story)});
    }
    return seeds;
}

PipelineReport build(const std::vector<SeedSample>& seeds, const ClipStore& store, const fs::path& out,
                     PipelineConfig config) {
    StubRetrieval retrieval(32, 7);
    config.synthesis.frames = 32;
    return run_pipeline(
        seeds, store, out, [] { return std::make_unique<StubLlmClient>(); },
        [] { return std::make_unique<StubMotionClient>(); }, retrieval, config);
}

}  // namespace

TEST_CASE("conversation schema and validation") {
    Fixture f;
    ConversationSample c = editing_conversation();
    validate_conversation(c, &f.clips);
    const auto j = conversation_to_json(c);
    CHECK(j.at("turns").at(0).at("segments").at(1) == nlohmann::json({{"kind", "motion"}, {"clip", "c64"}}));
    CHECK(conversation_from_json(j) == c);

    ConversationSample bad = c;
    std::swap(bad.turns[0], bad.turns[1]);
    CHECK_THROWS_AS(validate_conversation(bad), ValidationError);
    bad = c;
    bad.turns.resize(1);
    CHECK_THROWS_AS(validate_conversation(bad), ValidationError);
    bad = c;
    bad.turns[3].segments[0].motion.clip = "missing";
    CHECK_NOTHROW(validate_conversation(bad));
    CHECK_THROWS_AS(validate_conversation(bad, &f.clips), ValidationError);
    Segment both = Segment::of_text("x");
    both.motion.clip = "c64";
    CHECK_THROWS_AS(both.validate(), ValidationError);

    auto path = fs::temp_directory_path() / "duet_corpus.jsonl";
    write_corpus(path, {c, c});
    CHECK(read_corpus(path) == std::vector<ConversationSample>{c, c});
    fs::remove(path);
}

TEST_CASE("stage 2 templates") {
    Fixture f;
    Stage2Sample p = render_stage2_sample(TaskTag::prediction, "c100", f.clips);
    CHECK(p.segments[1].motion == MotionRef{"c100", 0, 25});
    CHECK(p.segments[2].motion == MotionRef{"c100", 25, 100});
    Stage2Sample p4 = render_stage2_sample(TaskTag::prediction, "c4", f.clips);
    CHECK(resolve(p4.segments[1].motion, f.clips).persons[0].length() == 1);
    CHECK(resolve(p4.segments[2].motion, f.clips).persons[0].length() == 3);
    CHECK_THROWS_AS(render_stage2_sample(TaskTag::prediction, "c3", f.clips), ValidationError);
    CHECK_THROWS_AS(render_stage2_sample(TaskTag::m2t, "c64", f.clips), ValidationError);
    CHECK_THROWS_AS(render_stage2_sample(TaskTag::reaction, "solo", f.clips), ValidationError);
    CHECK_THROWS_AS(render_stage2_sample(TaskTag::editing, "c64", f.clips, "x"), ValidationError);

    const std::string caption = "Two people hug.";
    Stage2Sample m2t = render_stage2_sample(TaskTag::m2t, "c64", f.clips, caption);
    TrainingExample ex = tokenize_stage2(m2t, f.ctx);
    const CodeGrid grid = tokenize_clip(f.clips.get("c64").as_interactive(), f.tok);
    std::vector<CodecSegment> expect{CodecSegment::of_text("Generate caption from motion: "), CodecSegment::of_motion(grid),
                                     CodecSegment::of_text(caption)};
    TokenIds body = splice_text_and_motion(expect, f.manifest, f.bytes).ids;
    CHECK(TokenIds(ex.ids.begin() + 1, ex.ids.end() - 1) == body);
    CHECK(ex.ids.front() == ByteTokenizer::kBos);
    CHECK(ex.ids.back() == ByteTokenizer::kEos);
    CHECK(scan_segments(body, f.manifest, f.bytes) == expect);
    // The loss covers exactly the caption and <eos>.
    const auto r = runs(ex.loss_mask);
    REQUIRE(r.size() == 1);
    CHECK(r[0].second == ex.ids.size());
    CHECK(r[0].second - r[0].first == caption.size() + 1);

    struct Case {
        TaskTag task;
        const char* clip;
        const char* pattern;
    };
    const std::vector<Case> cases = {
        {TaskTag::m2t, "c64", R"(^<\|bos\|>Generate caption from motion: \[motion\]Two people hug\.<\|eos\|>$)"},
        {TaskTag::t2m, "c64", R"(^<\|bos\|>Generate motion from caption: Two people hug\.\[motion\]<\|eos\|>$)"},
        {TaskTag::reaction, "c64", R"(^<\|bos\|>Generate reaction motion: \[motion\]\[motion\]<\|eos\|>$)"},
        {TaskTag::prediction, "c100", R"(^<\|bos\|>Predict motion: \[motion\]\[motion\]<\|eos\|>$)"},
    };
    for (const Case& c : cases) {
        TrainingExample e = tokenize_stage2(render_stage2_sample(c.task, c.clip, f.clips, caption), f.ctx);
        CHECK_MESSAGE(std::regex_match(template_view(e.ids, f), std::regex(c.pattern)), to_string(c.task));
    }
    // Reaction label is person b as a single-person span.
    TrainingExample re = tokenize_stage2(render_stage2_sample(TaskTag::reaction, "c64", f.clips), f.ctx);
    auto segs = scan_segments(TokenIds(re.ids.begin() + 1, re.ids.end() - 1), f.manifest, f.bytes);
    CHECK(segs[1].grid.persons == 1);
    CHECK(segs[2].grid == tokenize_single(f.clips.get("c64").persons[1], f.tok));
}

TEST_CASE("stage 3 masks") {
    Fixture f;
    ConversationSample one;
    one.id = "one";
    one.turns = {{Role::user, {Segment::of_text("Hello?")}}, {Role::assistant, {Segment::of_text("Hi there.")}}};
    TrainingExample ex = render_stage3_sample(one, f.ctx);
    CHECK(f.bytes.decode(ex.ids) == "<|bos|>USER: Hello? ASSISTANT: Hi there.<|eos|>");
    auto r = runs(ex.loss_mask);
    REQUIRE(r.size() == 1);
    CHECK(f.bytes.decode(std::span(ex.ids).subspan(r[0].first, r[0].second - r[0].first)) == "Hi there.<|eos|>");

    ConversationSample conv = editing_conversation();
    ex = render_stage3_sample(conv, f.ctx);
    r = runs(ex.loss_mask);
    REQUIRE(r.size() == 2);
    std::vector<std::vector<CodecSegment>> expected;
    for (const Turn& t : conv.turns) {
        if (t.role == Role::assistant) expected.push_back(to_codec_segments(t.segments, f.ctx));
    }
    for (std::size_t k = 0; k < r.size(); ++k) {
        TokenIds span(ex.ids.begin() + static_cast<std::ptrdiff_t>(r[k].first),
                      ex.ids.begin() + static_cast<std::ptrdiff_t>(r[k].second));
        CHECK(span.back() == ByteTokenizer::kEos);
        span.pop_back();
        CHECK(scan_segments(span, f.manifest, f.bytes) == expected[k]);
    }
    // The user's motion span, structure tokens included, is never a target.
    std::size_t user_specials = 0;
    for (std::size_t i = 0; i < r[0].first; ++i) {
        if (f.manifest.classify(ex.ids[i]) != TokenClass::text) {
            CHECK(ex.loss_mask[i] == 0);
            ++user_specials;
        }
    }
    CHECK(user_specials > 0);
    CHECK(ex.ids.size() == ex.loss_mask.size());

    TokenIds prompt = stage3_prompt(conv, f.ctx);
    CHECK(TokenIds(ex.ids.begin(), ex.ids.begin() + static_cast<std::ptrdiff_t>(prompt.size())) == prompt);
    CHECK(prompt.size() == r[1].first);
    CHECK(f.bytes.decode(std::span(prompt).last(11)) == "ASSISTANT: ");

    conv.turns[3].segments[0].motion.clip = "nope";
    CHECK_THROWS_AS(render_stage3_sample(conv, f.ctx), ValidationError);
}

TEST_CASE("prompt assets") {
    const std::vector<std::string> ids = prompt_template_ids();
    CHECK(ids == std::vector<std::string>{"editing_caption", "editing_conversation", "editing_no_base", "judge",
                                          "reasoning_no_base", "reasoning_with_seed"});
    for (const auto& id : ids) {
        const PromptTemplate& t = prompt_template(id);
        CHECK(t.text == file_text(fs::path(DUET_SOURCE_DIR) / "assets" / "prompts" / (id + ".txt")));
        std::map<std::string, std::string> values;
        for (const auto& s : t.slots()) values[s] = "<" + s + " value>";
        const std::string out = t.render(values);
        CHECK(out.find("{{") == std::string::npos);
        for (const auto& s : t.slots()) CHECK(out.find("<" + s + " value>") != std::string::npos);
        if (!t.slots().empty()) CHECK_THROWS_AS(t.render({}), ValidationError);
    }
    const std::string seed_caption = "One person pushes the other, who stumbles back.";
    const std::string editing = prompt_template("editing_caption").render({{"motion1_caption", seed_caption}});
    CHECK(editing.find("Motion1:\n" + seed_caption + "\n") != std::string::npos);
    const std::string conv = prompt_template("editing_conversation")
                                 .render({{"motion1_caption", seed_caption}, {"motion2_caption", "B"}});
    CHECK(conv.find("Motion1:\n" + seed_caption + "\nMotion2:\nB\n") != std::string::npos);
    CHECK(prompt_template("reasoning_with_seed").slots() == std::vector<std::string>{"action_labels", "motion1_caption"});
    CHECK_THROWS_AS(prompt_template("nope"), ValidationError);
}

TEST_CASE("dialogue parsing") {
    auto d = parse_dialogue("Sure, here it is.\nUser: Start from [motion_placeholder_1].\nAI: Nice.\nUser: Next?\n"
                            "AI: [Two people wave.]\n",
                            1);
    REQUIRE(d.turns.size() == 4);
    CHECK(d.new_captions == std::vector<std::string>{"Two people wave."});
    CHECK(d.turns[0].pieces.size() == 3);
    CHECK(d.turns[0].pieces[1].motion == 1);
    CHECK(d.turns[3].pieces[0].motion == 2);
    CHECK_THROWS_AS(parse_dialogue("User: hi\nAI: hello", 0), ParseError);
    CHECK_THROWS_AS(parse_dialogue("AI: [a]\nUser: [b]", 0), ParseError);
    CHECK_THROWS_AS(parse_dialogue("User: [motion_placeholder_1]\nAI: [motion_placeholder_1]", 2), ParseError);
    CHECK_THROWS_AS(parse_dialogue("User: [a] and [b\nAI: ok", 0), ParseError);
}

TEST_CASE("synthesis with stub clients") {
    ClipStore clips;
    clips.put("seed", MotionRecord::pair(sinusoid_pair(9, 32)));
    SeedSample seed{"s", "seed", "Two people shake hands.", TaskTag::editing};
    StubLlmClient llm;
    StubMotionClient t2m;
    SynthesisOptions opt;
    opt.frames = 32;

    for (TaskTag task : {TaskTag::editing, TaskTag::reasoning}) {
        seed.task = task;
        SynthesisResult r = synthesize_conversation("job-a", seed, SynthesisMode::dataset_plus_synth, llm, t2m, clips, opt);
        const auto refs = r.conversation.motion_refs();
        REQUIRE(refs.size() == 2);
        CHECK(refs[0].clip == "seed");
        CHECK(refs[1].clip == "job-a-m2");
        int assistant = 0;
        for (const auto& t : r.conversation.turns) assistant += t.role == Role::assistant;
        CHECK(assistant == 2);
        CHECK(r.captions.at("seed") == seed.caption);
        validate_conversation(r.conversation, &clips);
        for (const auto& c : r.calls) CHECK(c.request_hash.size() == 16);
    }

    SynthesisResult both = synthesize_conversation("job-b", seed, SynthesisMode::both_synth, llm, t2m, clips, opt);
    CHECK(both.conversation.motion_refs()[0].clip == "job-b-m1");
    CHECK(both.conversation.motion_refs()[1].clip == "job-b-m2");
    CHECK(clips.get("job-b-m1").persons[0].length() == 32);

    // Transient failures within the retry budget are absorbed.
    FlakyClient flaky(2);
    opt.llm.retries = 2;
    CHECK_NOTHROW(synthesize_conversation("job-c", seed, SynthesisMode::both_synth, flaky, t2m, clips, opt));
    FlakyClient dead(3);
    CHECK_THROWS_AS(synthesize_conversation("job-d", seed, SynthesisMode::both_synth, dead, t2m, clips, opt),
                    ClientError);
    // Malformed output is retried once.
    FlakyClient once(0, "User: no markers\nAI: none", 1);
    CHECK_NOTHROW(synthesize_conversation("job-e", seed, SynthesisMode::both_synth, once, t2m, clips, opt));
    CHECK(once.calls == 2);
    FlakyClient twice(0, "User: no markers\nAI: none", 2);
    CHECK_THROWS_AS(synthesize_conversation("job-f", seed, SynthesisMode::both_synth, twice, t2m, clips, opt),
                    ParseError);

    ClientSpec negative;
    negative.retries = -1;
    CHECK_THROWS_AS(negative.validate(), ValidationError);
}

TEST_CASE("quality gate") {
    ClipStore clips;
    StubRetrieval stub(32, 1);
    ConversationSample conv;
    conv.id = "g";
    conv.turns = {{Role::user, {Segment::of_text("show "), Segment::of_motion({"m1"})}},
                  {Role::assistant, {Segment::of_motion({"m2"})}}};
    std::map<std::string, std::string> captions{{"m1", "two people hug warmly"}, {"m2", "one person pushes another"}};
    std::vector<std::string> distractors;
    for (int i = 0; i < 40; ++i) distractors.push_back("people dance move number " + std::to_string(i));
    for (const auto& [clip, cap] : captions) {
        MotionRecord m = MotionRecord::pair(sinusoid_pair(fnv1a64(clip), 40));
        clips.put(clip, m);
        stub.bind(m, cap);
    }
    GateConfig cfg;
    GateResult ok = quality_gate(conv, captions, distractors, clips, stub, cfg, 0);
    CHECK(ok.accepted);
    CHECK(ok.retrieval == 1.0);
    CHECK(ok.queries == 2);

    AdversarialRetrieval adv(stub);
    GateResult bad = quality_gate(conv, captions, distractors, clips, adv, cfg, 0);
    CHECK_FALSE(bad.accepted);
    CHECK(bad.retrieval == 0.0);

    GateConfig tight = cfg;
    tight.max_frames = 39;
    CHECK_FALSE(quality_gate(conv, captions, distractors, clips, stub, tight, 0).accepted);

    // Raising the threshold never admits more.
    ReferenceExtractor ref(32, 3);
    for (int trial = 0; trial < 10; ++trial) {
        bool prev = true;
        for (double th : {0.0, 0.25, 0.5, 0.75, 1.0, 1.01}) {
            GateConfig g = cfg;
            g.threshold = th;
            const bool acc = quality_gate(conv, captions, distractors, clips, ref, g, static_cast<std::uint64_t>(trial)).accepted;
            CHECK((prev || !acc));
            prev = acc;
        }
    }
    GateConfig neg = cfg;
    neg.threshold = -0.1;
    CHECK_THROWS_AS(neg.validate(), ValidationError);
}

TEST_CASE("corpus splits") {
    CHECK(split_counts(100, {}) == std::array<int, 3>{80, 5, 15});
    CHECK(split_counts(20, {}) == std::array<int, 3>{16, 1, 3});
    CHECK(split_counts(1, {}) == std::array<int, 3>{1, 0, 0});
    for (std::size_t n = 1; n < 300; ++n) {
        const auto c = split_counts(n, {});
        CHECK(c[0] + c[1] + c[2] == static_cast<int>(n));
        CHECK(std::abs(c[0] - 0.8 * n) <= 1.0);
        CHECK(std::abs(c[1] - 0.05 * n) <= 1.0);
        CHECK(std::abs(c[2] - 0.15 * n) <= 1.0);
    }
    std::vector<ConversationSample> s(20);
    for (int i = 0; i < 20; ++i) s[static_cast<std::size_t>(i)].id = std::to_string(i);
    auto a = s, b = s;
    split_corpus(a, {}, 5);
    split_corpus(b, {}, 5);
    CHECK(a == b);
    std::vector<ConversationSample> none;
    CHECK_THROWS_AS(split_corpus(none, {}, 0), ValidationError);
    CHECK_THROWS_AS(split_counts(3, {0.5, 0.5, 0.5}), ValidationError);
}

TEST_CASE("pipeline determinism and resume") {
    ClipStore store;
    const auto seeds = make_seeds(20, store);
    const fs::path root = fs::temp_directory_path() / "duet_pipeline";
    fs::remove_all(root);
    PipelineConfig cfg;
    cfg.seed = 11;

    PipelineReport a = build(seeds, store, root / "a", cfg);
    CHECK(a.assembled);
    CHECK(a.completed == 20);
    CHECK(a.accepted == 20);
    CHECK(a.split == std::array<int, 3>{16, 1, 3});
    const std::string corpus = file_text(root / "a" / "corpus.jsonl");
    CHECK(std::count(corpus.begin(), corpus.end(), '\n') == 20);

    PipelineConfig parallel = cfg;
    parallel.workers = 3;
    build(seeds, store, root / "b", parallel);
    CHECK(file_text(root / "b" / "corpus.jsonl") == corpus);
    CHECK(file_text(root / "b" / "calls.jsonl") == file_text(root / "a" / "calls.jsonl"));

    ClipStore written(root / "a" / "clips");
    for (const auto& c : read_corpus(root / "a" / "corpus.jsonl")) validate_conversation(c, &written);

    PipelineConfig partial = cfg;
    partial.max_jobs = 7;
    PipelineReport p1 = build(seeds, store, root / "c", partial);
    CHECK_FALSE(p1.assembled);
    CHECK_FALSE(fs::exists(root / "c" / "corpus.jsonl"));
    PipelineReport p2 = build(seeds, store, root / "c", cfg);
    CHECK(p2.resumed == 7);
    CHECK(p2.assembled);
    CHECK(file_text(root / "c" / "corpus.jsonl") == corpus);

    PipelineConfig strict = cfg;
    strict.gate.threshold = 1.01;
    PipelineReport none = build(seeds, store, root / "d", strict);
    CHECK(none.accepted == 0);
    CHECK(none.rejected == 20);
    CHECK(file_text(root / "d" / "corpus.jsonl").empty());

    PipelineConfig other = cfg;
    other.seed = 12;
    build(seeds, store, root / "e", other);
    CHECK(file_text(root / "e" / "corpus.jsonl") != corpus);
    fs::remove_all(root);
}

TEST_CASE("pipeline keeps going past failed jobs") {
    ClipStore store;
    const auto seeds = make_seeds(6, store);
    const fs::path out = fs::temp_directory_path() / "duet_pipeline_fail";
    fs::remove_all(out);
    StubRetrieval retrieval;
    PipelineConfig cfg;
    cfg.synthesis.frames = 32;
    cfg.mode = SynthesisMode::both_synth;
    auto calls = std::make_shared<std::atomic<int>>(0);
    PipelineReport r = run_pipeline(
        seeds, store, out,
        [calls]() -> std::unique_ptr<LlmClient> {
            struct Picky : LlmClient {
                std::string complete(const ClientRequest& req) override {
                    if (req.nonce == "job-00002") throw ClientError("endpoint down");
                    return StubLlmClient().complete(req);
                }
            };
            ++*calls;
            return std::make_unique<Picky>();
        },
        [] { return std::make_unique<StubMotionClient>(); }, retrieval, cfg);
    CHECK(r.failed == 1);
    CHECK(r.completed == 5);
    CHECK(r.assembled);
    REQUIRE(r.failures.size() == 1);
    CHECK(r.failures[0].job == "job-00002");
    CHECK(r.summary_table().find("FAILED job-00002") != std::string::npos);
    fs::remove_all(out);
}

TEST_CASE("http chat client retries on server errors") {
    httplib::Server server;
    std::atomic<int> hits{0};
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        if (hits++ == 0) {
            res.status = 503;
            return;
        }
        auto body = nlohmann::json::parse(req.body);
        const std::string prompt = body["messages"][0]["content"];
        nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "echo:" + prompt.substr(0, 5)}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ClientSpec spec;
    spec.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
    spec.retries = 1;
    spec.timeout_seconds = 5;
    HttpChatClient client(spec, "toy");
    ClientRequest req{"editing_caption", {{"motion1_caption", "x"}}, "n", {}};
    CHECK(with_retry(spec, [&] { return client.complete(req); }) == "echo:First");
    CHECK(hits == 2);
    hits = 0;
    spec.retries = 0;
    HttpChatClient no_retry(spec, "toy");
    CHECK_THROWS_AS(with_retry(spec, [&] { return no_retry.complete(req); }), ClientError);
    server.stop();
    t.join();

    ClientSpec https;
    https.endpoint = "https://example.invalid";
    CHECK_THROWS_AS(HttpChatClient(https, "m"), ValidationError);
}
