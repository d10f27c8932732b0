#include "duet/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "duet/clients.hpp"
#include "duet/errors.hpp"
#include "duet/eval_suite.hpp"
#include "duet/features.hpp"
#include "duet/instruct_data.hpp"
#include "duet/lm_core.hpp"
#include "duet/motion_repr.hpp"
#include "duet/rq_tokenizer.hpp"
#include "duet/session.hpp"
#include "duet/synthetic.hpp"
#include "duet/token_codec.hpp"

namespace duet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMotionSuffix = ".motion.json";

struct Globals {
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string config;
    bool verbose = false;
};

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::vector<json> rows;
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            rows.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return rows;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << text;
}

bool is_motion_file(const fs::path& p) {
    const std::string name = p.filename().string();
    return name.size() > std::string(kMotionSuffix).size() && name.ends_with(kMotionSuffix);
}

std::string clip_stem(const fs::path& p) {
    const std::string name = p.filename().string();
    return name.substr(0, name.size() - std::string(kMotionSuffix).size());
}

/// Motion files of a directory by clip id, in id order.
std::map<std::string, fs::path> motion_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
    std::map<std::string, fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_motion_file(entry.path())) files[clip_stem(entry.path())] = entry.path();
    }
    return files;
}

const json& config_section(const json& config, const char* key) {
    static const json empty = json::object();
    if (!config.is_object()) throw UsageError("config must be a JSON object");
    if (auto it = config.find(key); it != config.end()) return *it;
    return empty;
}

json load_config(const Globals& g, bool required) {
    if (g.config.empty()) {
        if (required) throw UsageError("--config is required");
        return json::object();
    }
    return read_json(g.config);
}

InteractiveClip as_pair(const MotionRecord& m) {
    if (m.interactive()) return m.as_interactive();
    return InteractiveClip{m.persons.front(), m.persons.front()};
}

CodeGrid encode_record(const MotionRecord& m, const TokenizerParams& tok) {
    return m.interactive() ? tokenize_clip(m.as_interactive(), tok) : tokenize_single(m.persons.front(), tok);
}

ModelParams load_model(const fs::path& path) {
    TrainState s = load_checkpoint(path);
    return s.adapter ? lora_merge(s.params, *s.adapter) : std::move(s.params);
}

void write_loss_csv(const fs::path& path, const TrainState& s) {
    std::ostringstream csv;
    csv << "step,loss,lr\n" << std::setprecision(9);
    for (std::size_t i = 0; i < s.losses.size(); ++i) {
        csv << i + 1 << ',' << s.losses[i] << ',' << (i < s.learning_rates.size() ? s.learning_rates[i] : 0.0) << '\n';
    }
    write_text(path, csv.str());
}

// ---- tokenizer-train ----

struct TokenizerTrainArgs {
    std::string data;
    int synthetic = 0;
    int frames = 64;
    std::string out;
};

int cmd_tokenizer_train(const Globals& g, const TokenizerTrainArgs& a, std::ostream& out) {
    const json config = load_config(g, true);
    const json& section = config.contains("tokenizer") ? config.at("tokenizer") : config;
    const TokenizerConfig tc = TokenizerConfig::from_json(section, true);

    SkeletonSpec skeleton;
    skeleton.num_joints = tc.num_joints;
    if (const json& sk = config_section(config, "skeleton"); !sk.empty()) {
        skeleton.contact_joints = sk.value("contact_joints", skeleton.contact_joints);
        skeleton.fps = sk.value("fps", skeleton.fps);
    }
    skeleton.validate();

    std::vector<InteractiveClip> dataset;
    if (!a.data.empty() == (a.synthetic > 0)) throw UsageError("give exactly one of --data or --synthetic");
    if (a.synthetic > 0) {
        dataset = sinusoid_dataset(a.synthetic, a.frames, g.seed, skeleton);
    } else {
        for (const auto& [id, path] : motion_files(a.data)) dataset.push_back(as_pair(read_motion_file(path)));
        if (dataset.empty()) throw ValidationError("no motion files in " + a.data);
    }

    TokenizerTrainReport report;
    const TokenizerParams params = train_tokenizer(dataset, tc, &report);
    save_tokenizer(a.out, params);
    out << "clips " << dataset.size() << "\nsteps " << tc.steps << "\ninitial_mpjpe " << report.initial_mpjpe
        << "\nfinal_mpjpe " << report.final_mpjpe << "\nreseeded_codes " << report.reseeded_codes << "\nwrote "
        << a.out << "\n";
    return kExitOk;
}

// ---- encode / decode ----

struct CodecArgs {
    std::string tokenizer;
    std::string in;
    std::string out;
};

int cmd_encode(const CodecArgs& a, std::ostream& out) {
    const TokenizerParams tok = load_tokenizer(a.tokenizer);
    const ByteTokenizer text;
    const MotionRecord m = read_motion_file(a.in);
    const CodeGrid grid = encode_record(m, tok);
    TokenFile f;
    f.manifest = manifest_for(tok, text);
    f.depth = grid.depth;
    f.length = grid.steps;
    f.persons = grid.persons;
    f.ids = encode_motion(grid, f.manifest).ids;
    write_token_file(a.out, f);
    out << "tokens " << f.ids.size() << " steps " << f.length << " depth " << f.depth << " persons " << f.persons
        << "\n";
    return kExitOk;
}

int cmd_decode(const CodecArgs& a, std::ostream& out) {
    const TokenizerParams tok = load_tokenizer(a.tokenizer);
    const ByteTokenizer text;
    const VocabManifest manifest = manifest_for(tok, text);
    const TokenFile f = read_token_file(a.in);
    if (!(f.manifest == manifest)) throw ValidationError("token file vocabulary does not match the tokenizer");
    if (f.depth != manifest.depth) {
        throw ValidationError("token file depth " + std::to_string(f.depth) + " differs from tokenizer depth " +
                              std::to_string(manifest.depth));
    }
    const MotionSpan span = decode_motion(f.ids, manifest);
    if (span.grid.steps != f.length || span.grid.persons != f.persons) {
        throw ValidationError("token file header (length " + std::to_string(f.length) + ", persons " +
                              std::to_string(f.persons) + ") disagrees with its tokens (length " +
                              std::to_string(span.grid.steps) + ", persons " + std::to_string(span.grid.persons) + ")");
    }
    const MotionRecord m = detokenize(span.grid, tok);
    write_motion_file(a.out, m);
    out << "frames " << m.persons.front().length() << " persons " << m.persons.size() << "\n";
    return kExitOk;
}

// ---- data-build ----

struct DataBuildArgs {
    std::string mode = "dataset_plus_synth";
    std::string seeds;
    std::string clips;
    int synthetic_seeds = 0;
    int frames = 64;
    std::string out;
    int workers = 1;
    double gate_threshold = GateConfig{}.threshold;
    std::string clients;
    int max_jobs = 0;
};

SynthesisMode mode_arg(const std::string& s) {
    if (s == "1") return SynthesisMode::dataset_plus_synth;
    if (s == "2") return SynthesisMode::both_synth;
    return parse_mode(s);
}

const std::vector<std::string>& seed_captions() {
    static const std::vector<std::string> captions{
        "Two people shake hands and step back.",
        "One person waves and the other waves back.",
        "Two people hug briefly.",
        "One person pushes the other, who stumbles backward.",
        "Two people dance facing each other.",
        "One person hands an object to the other.",
        "Two people bow to each other.",
        "One person pulls the other forward by the arm.",
    };
    return captions;
}

std::vector<SeedSample> synthetic_seeds(int count, int frames, std::uint64_t seed, const fs::path& dir) {
    constexpr TaskTag tasks[] = {TaskTag::editing, TaskTag::reasoning, TaskTag::story};
    fs::create_directories(dir);
    std::vector<SeedSample> seeds;
    for (int i = 0; i < count; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "seed-%04d", i);
        write_motion_file(dir / (std::string(id) + kMotionSuffix),
                          MotionRecord::pair(sinusoid_pair(derive_seed(seed, 0x5eed, i), frames)));
        seeds.push_back({id, id, seed_captions()[i % seed_captions().size()], tasks[i % 3]});
    }
    std::string rows;
    for (const SeedSample& s : seeds) {
        rows += json{{"id", s.id}, {"clip", s.clip}, {"caption", s.caption}, {"task", to_string(s.task)}}.dump() + "\n";
    }
    write_text(dir.parent_path() / "seeds.jsonl", rows);
    return seeds;
}

struct ClientsConfig {
    ClientSpec llm;
    ClientSpec t2m;
    std::string model = "gpt-4o";
};

ClientsConfig load_clients(const std::string& path) {
    ClientsConfig c;
    if (path.empty()) return c;
    const json j = read_json(path);
    if (j.contains("llm")) c.llm = ClientSpec::from_json(j.at("llm"));
    if (j.contains("t2m")) c.t2m = ClientSpec::from_json(j.at("t2m"));
    c.model = j.value("model", c.model);
    c.llm.validate();
    c.t2m.validate();
    if (c.t2m.endpoint != "stub") throw ValidationError("only the stub text-to-motion client is available");
    return c;
}

std::unique_ptr<LlmClient> make_llm(const ClientsConfig& c) {
    if (c.llm.endpoint == "stub") return std::make_unique<StubLlmClient>();
    return std::make_unique<HttpChatClient>(c.llm, c.model);
}

int cmd_data_build(const Globals& g, const DataBuildArgs& a, std::ostream& out, std::ostream& err) {
    const ClientsConfig clients = load_clients(a.clients);
    PipelineConfig pc;
    pc.mode = mode_arg(a.mode);
    pc.workers = a.workers;
    pc.seed = g.seed;
    pc.gate.threshold = a.gate_threshold;
    pc.max_jobs = a.max_jobs;
    pc.synthesis.llm = clients.llm;
    pc.synthesis.t2m = clients.t2m;
    pc.synthesis.frames = a.frames;
    pc.synthesis.seed = g.seed;
    pc.gate.validate();

    std::vector<SeedSample> seeds;
    fs::path clip_dir = a.clips;
    if (a.synthetic_seeds > 0) {
        if (!a.seeds.empty()) throw UsageError("give either --seeds or --synthetic-seeds");
        clip_dir = fs::path(a.out) / "seeds";
        seeds = synthetic_seeds(a.synthetic_seeds, a.frames, g.seed, clip_dir);
    } else {
        if (a.seeds.empty()) throw UsageError("--seeds or --synthetic-seeds is required");
        if (a.clips.empty() && pc.mode == SynthesisMode::dataset_plus_synth) throw UsageError("--clips is required");
        for (const json& row : read_jsonl(a.seeds)) {
            SeedSample s;
            s.id = row.at("id").get<std::string>();
            s.clip = row.value("clip", s.id);
            s.caption = row.value("caption", "");
            s.task = parse_task(row.value("task", "editing"));
            seeds.push_back(std::move(s));
        }
    }
    if (seeds.empty()) throw ValidationError("no seed samples");

    const ClipStore seed_clips(clip_dir);
    StubRetrieval retrieval(64, g.seed);
    const PipelineReport report = run_pipeline(
        seeds, seed_clips, a.out, [&] { return make_llm(clients); },
        [] { return std::make_unique<StubMotionClient>(); }, retrieval, pc);
    out << report.summary_table();
    if (!report.assembled) {
        err << "note: " << report.jobs - report.resumed - report.completed - report.failed
            << " job(s) left; rerun to resume\n";
    } else if (report.accepted == 0) {
        err << "warning: corpus is empty (" << report.rejected << " conversation(s) rejected by the gate)\n";
    }
    return kExitOk;
}

// ---- train ----

struct TrainArgs {
    int stage = 0;
    std::string corpus;
    std::string tokenizer;
    std::vector<std::string> clips;
    std::string out;
    std::string resume;
};

/// Clips from several directories, loaded for the ids that are needed.
void gather_clips(const std::vector<std::string>& dirs, const std::set<std::string>& ids, ClipStore& store) {
    for (const std::string& id : ids) {
        bool found = false;
        for (const std::string& d : dirs) {
            const fs::path p = fs::path(d) / (id + kMotionSuffix);
            if (fs::exists(p)) {
                store.put(id, read_motion_file(p));
                found = true;
                break;
            }
        }
        if (!found) throw ValidationError("clip '" + id + "' not found under --clips");
    }
}

int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out, std::ostream& err) {
    if (a.stage != 2 && a.stage != 3) throw UsageError("--stage must be 2 or 3");
    const json config = load_config(g, false);
    json train_json = config_section(config, "train");
    json model_json = config_section(config, "model");
    if (g.seed_given || !train_json.contains("seed")) train_json["seed"] = g.seed;
    if (g.seed_given || !model_json.contains("seed")) model_json["seed"] = g.seed;
    train_json["stage"] = a.stage;
    TrainConfig tc = TrainConfig::from_json(train_json);
    tc.checkpoint_dir = fs::path(a.out) / "checkpoints";

    const TokenizerParams tok = load_tokenizer(a.tokenizer);
    const ByteTokenizer text;
    const VocabManifest manifest = manifest_for(tok, text);

    std::vector<TrainingExample> examples;
    if (a.stage == 2) {
        const std::vector<json> rows = read_jsonl(a.corpus);
        std::set<std::string> ids;
        for (const json& r : rows) ids.insert(r.value("clip", r.value("id", "")));
        ClipStore store;
        gather_clips(a.clips, ids, store);
        const RenderContext ctx{&manifest, &text, &store, motion_encoder(tok)};
        for (const json& r : rows) {
            const std::string clip = r.value("clip", r.value("id", ""));
            const std::string caption = r.value("caption", "");
            std::vector<TaskTag> tasks;
            if (r.contains("task") && r.at("task") != "editing" && r.at("task") != "reasoning" && r.at("task") != "story") {
                tasks.push_back(parse_task(r.at("task").get<std::string>()));
            } else {
                if (!caption.empty()) tasks = {TaskTag::t2m, TaskTag::m2t};
                if (store.get(clip).interactive()) tasks.push_back(TaskTag::reaction);
                tasks.push_back(TaskTag::prediction);
            }
            for (TaskTag t : tasks) examples.push_back(tokenize_stage2(render_stage2_sample(t, clip, store, caption), ctx));
        }
    } else {
        std::vector<ConversationSample> corpus;
        for (ConversationSample& c : read_corpus(a.corpus)) {
            if (c.split == Split::train) corpus.push_back(std::move(c));
        }
        std::set<std::string> ids;
        for (const auto& c : corpus) {
            for (const MotionRef& r : c.motion_refs()) ids.insert(r.clip);
        }
        ClipStore store;
        gather_clips(a.clips, ids, store);
        const RenderContext ctx{&manifest, &text, &store, motion_encoder(tok)};
        for (const auto& c : corpus) examples.push_back(render_stage3_sample(c, ctx));
    }
    if (examples.empty()) throw ValidationError("no training examples in " + a.corpus);
    if (g.verbose) err << "examples " << examples.size() << "\n";

    TrainState state;
    if (!a.resume.empty()) {
        state = load_checkpoint(a.resume);
        if (state.params.config.vocab_size != manifest.size()) {
            throw ValidationError("checkpoint vocabulary does not match the tokenizer");
        }
        if (state.stage == 2 && a.stage == 3) {
            const ModelParams base = state.adapter ? lora_merge(state.params, *state.adapter) : state.params;
            state = begin_stage(base, tc);
        } else if (state.stage != a.stage) {
            throw ValidationError("cannot resume a stage-" + std::to_string(state.stage) + " checkpoint as stage " +
                                  std::to_string(a.stage));
        } else if (a.stage == 2 && !state.adapter) {
            throw ValidationError("stage-2 checkpoint has no adapter to continue (it is a final merged model)");
        }
    } else {
        if (!model_json.contains("vocab_size")) model_json["vocab_size"] = manifest.size();
        const ModelConfig mc = ModelConfig::from_json(model_json);
        if (mc.vocab_size != manifest.size()) throw ValidationError("model vocab_size does not match the tokenizer");
        state = begin_stage(init_model(mc), tc);
    }

    const long start = state.step;
    train_steps(state, examples, tc, [&](long step, double loss, double lr) {
        if (g.verbose) err << "step " << step << " loss " << loss << " lr " << lr << "\n";
    });
    write_loss_csv(fs::path(a.out) / "loss.csv", state);

    const fs::path model_path = fs::path(a.out) / "model.ckpt.json";
    if (a.stage == 2) {
        TrainState merged;
        merged.stage = 2;
        merged.step = state.step;
        merged.params = lora_merge(state.params, *state.adapter);
        merged.losses = state.losses;
        merged.learning_rates = state.learning_rates;
        save_checkpoint(model_path, merged);
    } else {
        save_checkpoint(model_path, state);
    }
    out << "stage " << a.stage << "\nexamples " << examples.size() << "\nsteps " << start << ".." << state.step
        << "\nfinal_loss " << (state.losses.empty() ? 0.0 : state.losses.back()) << "\nwrote " << model_path.string()
        << "\n";
    return kExitOk;
}

// ---- generate / session ----

struct SamplingArgs {
    std::string model;
    std::string tokenizer;
    std::string out = "session";
    bool sample = false;
    double temperature = 1.0;
    int top_k = 50;
    int max_new_tokens = 256;
};

Session open_session(const Globals& g, const SamplingArgs& a) {
    SamplingConfig s;
    s.greedy = !a.sample;
    s.temperature = a.temperature;
    s.top_k = a.top_k;
    s.max_new_tokens = a.max_new_tokens;
    s.seed = g.seed;
    return Session(load_model(a.model), load_tokenizer(a.tokenizer), s, a.out);
}

void print_reply(const Session& session, const Session::Reply& r, std::ostream& out, std::ostream& err) {
    if (r.dropped_turns > 0) {
        err << "warning: context full, dropped the " << r.dropped_turns << " oldest turn(s)\n";
    }
    out << "ASSISTANT: " << r.text << "\n";
    for (const std::string& id : r.clips) out << "clip " << id << " " << session.registry().at(id).string() << "\n";
}

struct GenerateArgs {
    SamplingArgs sampling;
    std::string prompt;
    std::vector<std::string> attach;
};

int cmd_generate(const Globals& g, const GenerateArgs& a, std::ostream& out, std::ostream& err) {
    Session session = open_session(g, a.sampling);
    print_reply(session, session.turn(a.prompt, a.attach), out, err);
    return kExitOk;
}

struct SessionArgs {
    SamplingArgs sampling;
    std::string script;
    std::string transcript;
};

int cmd_session(const Globals& g, const SessionArgs& a, std::ostream& out, std::ostream& err, std::istream& in) {
    Session session = open_session(g, a.sampling);
    int status = kExitOk;
    auto export_transcript = [&] {
        if (!a.transcript.empty()) write_text(a.transcript, session.transcript().dump(1) + "\n");
    };
    if (!a.script.empty()) {
        const json script = read_json(a.script);
        if (!script.is_array()) throw ValidationError("session script must be a JSON array of turns");
        for (std::size_t i = 0; i < script.size(); ++i) {
            const json& t = script[i];
            const std::string line = t.value("text", "");
            const auto attach = t.value("attach", std::vector<std::string>{});
            out << "USER: " << line << "\n";
            try {
                print_reply(session, session.turn(line, attach), out, err);
            } catch (const Error&) {
                export_transcript();
                throw;
            }
        }
    } else {
        // One turn per line; words starting with '@' name attachments.
        std::string line;
        while (out << "> " << std::flush, std::getline(in, line)) {
            if (line == ":quit") break;
            std::istringstream words(line);
            std::string w, text;
            std::vector<std::string> attach;
            while (words >> w) {
                if (w.size() > 1 && w[0] == '@') attach.push_back(w.substr(1));
                else text += (text.empty() ? "" : " ") + w;
            }
            if (text.empty() && attach.empty()) continue;
            try {
                print_reply(session, session.turn(text, attach), out, err);
            } catch (const Error& e) {
                err << "error: " << e.what() << " (turn not committed)\n";
                status = kExitValidation;
            }
        }
    }
    export_transcript();
    return status;
}

// ---- eval ----

struct EvalArgs {
    std::string pred;
    std::string ref;
    std::string metrics = "fid,mpjpe";
    std::string extractor;
    int pool = 32;
    std::string captions;
    std::string judge;
    std::string clients;
    std::string cache;
    std::string external;
    std::string out;
};

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& spec, std::uint64_t seed) {
    // "reference" or "reference:<dim>"
    const auto colon = spec.find(':');
    const std::string kind = spec.substr(0, colon);
    if (kind != "reference") throw UsageError("unknown extractor '" + kind + "' (available: reference)");
    int dim = 64;
    if (colon != std::string::npos) {
        try {
            dim = std::stoi(spec.substr(colon + 1));
        } catch (const std::exception&) {
            throw UsageError("bad extractor dimension in '" + spec + "'");
        }
    }
    return std::make_unique<ReferenceExtractor>(dim, seed);
}

int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out, std::ostream& err) {
    std::set<std::string> metrics;
    {
        std::istringstream s(a.metrics);
        std::string m;
        while (std::getline(s, m, ',')) {
            static const std::set<std::string> known{"fid", "mpjpe", "rprec", "div", "mmdist", "judge"};
            if (!known.contains(m)) throw UsageError("unknown metric '" + m + "'");
            metrics.insert(m);
        }
    }
    const bool text_side = metrics.contains("rprec") || metrics.contains("mmdist");
    if (text_side && a.extractor.empty()) throw UsageError("rprec and mmdist need --extractor");
    if (text_side && a.captions.empty()) throw UsageError("rprec and mmdist need --captions");
    if (metrics.contains("judge") && a.judge.empty()) throw UsageError("judge needs --judge-transcripts");
    const bool motion_side = metrics.contains("fid") || metrics.contains("mpjpe") || metrics.contains("div") || text_side;
    if (motion_side && a.pred.empty()) throw UsageError("--pred is required");
    if ((metrics.contains("fid") || metrics.contains("mpjpe")) && a.ref.empty()) throw UsageError("--ref is required");

    // Motion-only metrics fall back to the reference projection.
    const auto extractor = make_extractor(a.extractor.empty() ? "reference" : a.extractor, g.seed);
    MetricReport report;

    std::map<std::string, MotionRecord> pred;
    if (motion_side) {
        for (const auto& [id, path] : motion_files(a.pred)) pred.emplace(id, read_motion_file(path));
        if (pred.empty()) throw ValidationError("no motion files in " + a.pred);
    }
    auto features = [&](const std::map<std::string, MotionRecord>& clips) {
        std::vector<Eigen::VectorXd> rows;
        for (const auto& [id, m] : clips) rows.push_back(extractor->motion_features(m));
        return FeatureSet(rows, Modality::motion);
    };

    if (metrics.contains("fid") || metrics.contains("mpjpe")) {
        std::map<std::string, MotionRecord> ref;
        for (const auto& [id, path] : motion_files(a.ref)) ref.emplace(id, read_motion_file(path));
        if (metrics.contains("fid")) report.fid = fid(features(pred), features(ref));
        if (metrics.contains("mpjpe")) {
            double sum = 0.0;
            int n = 0;
            for (const auto& [id, m] : pred) {
                auto it = ref.find(id);
                if (it == ref.end()) continue;
                sum += mpjpe(m, it->second);
                ++n;
            }
            if (n == 0) throw ValidationError("mpjpe: no clip id appears in both --pred and --ref");
            report.mpjpe = sum / n;
        }
    }
    if (metrics.contains("div")) report.diversity = diversity(features(pred), g.seed);
    if (text_side) {
        const json caps = read_json(a.captions);
        std::vector<Eigen::VectorXd> mrows, trows;
        for (const auto& [id, m] : pred) {
            if (!caps.contains(id)) throw ValidationError("no caption for clip '" + id + "'");
            mrows.push_back(extractor->motion_features(m));
            trows.push_back(extractor->text_features(caps.at(id).get<std::string>()));
        }
        const FeatureSet mf(mrows, Modality::motion), tf(trows, Modality::text);
        if (metrics.contains("rprec")) {
            const auto r = r_precision(mf, tf, a.pool, 3, g.seed);
            for (int k = 0; k < 3; ++k) report.r_precision[k] = r[k];
        }
        if (metrics.contains("mmdist")) report.mmdist = mmdist(mf, tf);
    }
    if (metrics.contains("judge")) {
        const ClientsConfig clients = load_clients(a.clients);
        auto llm = make_llm(clients);
        ClientSpec spec = clients.llm;
        JudgeScores mean;
        int n = 0;
        for (const json& row : read_jsonl(a.judge)) {
            const JudgeScores s = judge_motion_reasoning(
                judge_transcript(row.at("input").get<std::string>(), row.at("output").get<std::string>()), *llm, spec,
                a.cache);
            for (int k = 0; k < 3; ++k) mean.scores[k] += s.scores[k];
            if (n == 0) mean.justifications = s.justifications;
            mean.clamped = mean.clamped || s.clamped;
            mean.reasked = mean.reasked || s.reasked;
            ++n;
        }
        if (n == 0) throw ValidationError("no transcripts in " + a.judge);
        for (double& s : mean.scores) s /= n;
        report.judge = mean;
    }
    if (!a.external.empty()) load_external_metrics(report, a.external);

    const json j = report.to_json();
    if (const auto errors = schema_errors(j, metric_report_schema()); !errors.empty()) {
        throw ValidationError("metric report violates its schema: " + errors.front());
    }
    if (a.out.empty()) {
        out << j.dump(2) << "\n";
    } else {
        write_text(a.out, j.dump(2) + "\n");
        if (g.verbose) err << "wrote " << a.out << "\n";
    }
    return kExitOk;
}

// ---- export-keypoints ----

int cmd_export_keypoints(const std::string& in_path, const std::string& out_path, std::ostream& out) {
    const MotionRecord m = read_motion_file(in_path);
    std::ostringstream csv;
    csv << "frame,person,joint,x,y,z\n" << std::setprecision(9);
    long rows = 0;
    const int frames = m.persons.front().length();
    for (int f = 0; f < frames; ++f) {
        for (std::size_t p = 0; p < m.persons.size(); ++p) {
            const MotionFrame& fr = m.persons[p].frames[f];
            for (int j = 0; j < fr.num_joints(); ++j) {
                const Vec3& x = fr.positions[j];
                csv << f << ',' << p << ',' << j << ',' << x.x() << ',' << x.y() << ',' << x.z() << '\n';
                ++rows;
            }
        }
    }
    write_text(out_path, csv.str());
    out << "rows " << rows << "\n";
    return kExitOk;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
    if (dynamic_cast<const TrainingError*>(&e)) return kExitTraining;
    if (dynamic_cast<const ClientError*>(&e) || dynamic_cast<const JudgeError*>(&e)) return kExitClient;
    if (dynamic_cast<const Error*>(&e) || dynamic_cast<const nlohmann::json::exception*>(&e)) return kExitValidation;
    return kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, std::istream& in) {
    CLI::App app{"Two-person motion language toolkit", "duet"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed for every random choice")->each([&](const std::string&) { g.seed_given = true; });
    app.add_option("--config", g.config, "JSON configuration file");
    app.add_flag("--verbose", g.verbose, "Progress on stderr");

    TokenizerTrainArgs tt;
    auto* c_tt = app.add_subcommand("tokenizer-train", "Train the motion tokenizer");
    c_tt->add_option("--data", tt.data, "Directory of motion files");
    c_tt->add_option("--synthetic", tt.synthetic, "Train on N generated clips instead");
    c_tt->add_option("--frames", tt.frames, "Frames per generated clip");
    c_tt->add_option("--out", tt.out, "Output tokenizer file (.rqvae.json)")->required();

    CodecArgs enc, dec;
    auto* c_enc = app.add_subcommand("encode", "Motion file to token file");
    c_enc->add_option("--tokenizer", enc.tokenizer)->required();
    c_enc->add_option("--in", enc.in, "Motion file")->required();
    c_enc->add_option("--out", enc.out, "Token file")->required();
    auto* c_dec = app.add_subcommand("decode", "Token file to motion file");
    c_dec->add_option("--tokenizer", dec.tokenizer)->required();
    c_dec->add_option("--in", dec.in, "Token file")->required();
    c_dec->add_option("--out", dec.out, "Motion file")->required();

    DataBuildArgs db;
    auto* c_db = app.add_subcommand("data-build", "Synthesize, gate and split a conversation corpus");
    c_db->add_option("--mode", db.mode, "dataset_plus_synth (1) or both_synth (2)");
    c_db->add_option("--seeds", db.seeds, "Seed samples (JSONL: id, clip, caption, task)");
    c_db->add_option("--clips", db.clips, "Directory of seed clips");
    c_db->add_option("--synthetic-seeds", db.synthetic_seeds, "Generate N seed clips instead");
    c_db->add_option("--frames", db.frames, "Frames per synthesized clip");
    c_db->add_option("--out", db.out, "Output directory")->required();
    c_db->add_option("--workers", db.workers, "Concurrent synthesis jobs")->check(CLI::PositiveNumber);
    c_db->add_option("--gate-threshold", db.gate_threshold, "Minimum retrieval success");
    c_db->add_option("--clients", db.clients, "Client configuration (JSON)");
    c_db->add_option("--max-jobs", db.max_jobs, "Stop after N new jobs");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train", "Stage-2 pretraining or stage-3 instruction tuning");
    c_tr->add_option("--stage", tr.stage)->required();
    c_tr->add_option("--corpus", tr.corpus, "Stage 2: seed JSONL; stage 3: conversation JSONL")->required();
    c_tr->add_option("--tokenizer", tr.tokenizer)->required();
    c_tr->add_option("--clips", tr.clips, "Clip directories (repeatable)")->required();
    c_tr->add_option("--out", tr.out, "Output directory")->required();
    c_tr->add_option("--resume", tr.resume, "Checkpoint to continue from");

    auto add_sampling = [](CLI::App* c, SamplingArgs& s) {
        c->add_option("--model", s.model, "Model checkpoint")->required();
        c->add_option("--tokenizer", s.tokenizer)->required();
        c->add_option("--out", s.out, "Directory for generated clips");
        c->add_flag("--sample", s.sample, "Sample instead of greedy decoding");
        c->add_option("--temperature", s.temperature);
        c->add_option("--top-k", s.top_k);
        c->add_option("--max-new-tokens", s.max_new_tokens);
    };
    GenerateArgs gen;
    auto* c_gen = app.add_subcommand("generate", "One prompt, one reply");
    add_sampling(c_gen, gen.sampling);
    c_gen->add_option("--prompt", gen.prompt)->required();
    c_gen->add_option("--attach", gen.attach, "Motion files to attach after the prompt");

    SessionArgs ses;
    auto* c_ses = app.add_subcommand("session", "Multi-turn conversation");
    add_sampling(c_ses, ses.sampling);
    c_ses->add_option("--script", ses.script, "JSON array of {text, attach} turns");
    c_ses->add_option("--transcript", ses.transcript, "Write the transcript here");

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "Compute a metric report");
    c_ev->add_option("--pred", ev.pred, "Directory of generated clips");
    c_ev->add_option("--ref", ev.ref, "Directory of reference clips");
    c_ev->add_option("--metrics", ev.metrics, "Comma list of fid,mpjpe,rprec,div,mmdist,judge");
    c_ev->add_option("--extractor", ev.extractor, "Feature extractor (reference[:dim])");
    c_ev->add_option("--pool", ev.pool, "Retrieval pool size");
    c_ev->add_option("--captions", ev.captions, "JSON object clip id -> caption");
    c_ev->add_option("--judge-transcripts", ev.judge, "JSONL of {input, output}");
    c_ev->add_option("--clients", ev.clients, "Client configuration (JSON)");
    c_ev->add_option("--judge-cache", ev.cache, "Directory caching judge responses");
    c_ev->add_option("--external", ev.external, "JSON object of externally computed metrics");
    c_ev->add_option("--out", ev.out, "Report file (default stdout)");

    std::string kp_in, kp_out;
    auto* c_kp = app.add_subcommand("export-keypoints", "Joint positions as CSV");
    c_kp->add_option("--in", kp_in, "Motion file")->required();
    c_kp->add_option("--out", kp_out, "CSV file")->required();

    std::vector<const char*> argv{"duet"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (c_tt->parsed()) return cmd_tokenizer_train(g, tt, out);
        if (c_enc->parsed()) return cmd_encode(enc, out);
        if (c_dec->parsed()) return cmd_decode(dec, out);
        if (c_db->parsed()) return cmd_data_build(g, db, out, err);
        if (c_tr->parsed()) return cmd_train(g, tr, out, err);
        if (c_gen->parsed()) return cmd_generate(g, gen, out, err);
        if (c_ses->parsed()) return cmd_session(g, ses, out, err, in);
        if (c_ev->parsed()) return cmd_eval(g, ev, out, err);
        if (c_kp->parsed()) return cmd_export_keypoints(kp_in, kp_out, out);
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        err << (code == kExitUsage ? "usage error: " : "error: ") << e.what() << "\n";
        return code;
    }
    return kExitUsage;
}

}  // namespace duet
