#include "duet/session.hpp"

#include <cstdio>

#include "duet/errors.hpp"
#include "duet/instruct_data.hpp"

namespace duet {

namespace fs = std::filesystem;
using nlohmann::json;

json grid_to_json(const CodeGrid& g) {
    return {{"steps", g.steps}, {"persons", g.persons}, {"depth", g.depth}, {"codes", g.codes}};
}

CodeGrid grid_from_json(const json& j) {
    CodeGrid g(j.at("steps").get<int>(), j.at("persons").get<int>(), j.at("depth").get<int>());
    g.codes = j.at("codes").get<std::vector<std::int32_t>>();
    if (g.codes.size() != static_cast<std::size_t>(g.steps * g.persons * g.depth)) {
        throw ValidationError("grid code count does not match its shape");
    }
    return g;
}

Session::Session(ModelParams model, TokenizerParams tokenizer, SamplingConfig sampling, fs::path out_dir)
    : model_(std::move(model)), tokenizer_(std::move(tokenizer)), sampling_(std::move(sampling)),
      out_dir_(std::move(out_dir)) {
    manifest_ = manifest_for(tokenizer_, text_);
    if (model_.config.vocab_size != manifest_.size()) {
        throw ValidationError("model vocabulary (" + std::to_string(model_.config.vocab_size) +
                              ") does not match the tokenizer manifest (" + std::to_string(manifest_.size()) + ")");
    }
    sampling_.validate();
    if (std::find(sampling_.stop_ids.begin(), sampling_.stop_ids.end(), text_.eos_id()) == sampling_.stop_ids.end()) {
        sampling_.stop_ids.push_back(text_.eos_id());
    }
    if (!out_dir_.empty()) fs::create_directories(out_dir_);
    tokens_ = {text_.bos_id()};
}

Session::Reply Session::turn(const std::string& text, const std::vector<std::string>& attachments) {
    std::vector<CodecSegment> user;
    if (!text.empty()) user.push_back(CodecSegment::of_text(text));
    for (const std::string& a : attachments) {
        fs::path path;
        if (auto it = registry_.find(a); it != registry_.end()) path = it->second;
        else path = a;
        if (!fs::exists(path)) throw ValidationError("attachment '" + a + "' does not exist");
        const MotionRecord m = read_motion_file(path);
        user.push_back(CodecSegment::of_motion(m.interactive() ? tokenize_clip(m.as_interactive(), tokenizer_)
                                                               : tokenize_single(m.persons.front(), tokenizer_)));
    }
    if (user.empty()) throw ValidationError("empty user turn");

    TokenIds exchange;
    const std::size_t sep_len = exchanges_.empty() ? 0 : text_.encode(" ").size();
    if (sep_len > 0) {
        const TokenIds sep = text_.encode(" ");
        exchange.insert(exchange.end(), sep.begin(), sep.end());
    }
    const TokenIds head = text_.encode(kUserSentinel);
    exchange.insert(exchange.end(), head.begin(), head.end());
    const TokenIds body = splice_text_and_motion(user, manifest_, text_).ids;
    exchange.insert(exchange.end(), body.begin(), body.end());
    const TokenIds tail = text_.encode(std::string(" ") + kAssistantSentinel);
    exchange.insert(exchange.end(), tail.begin(), tail.end());

    // Drop whole exchanges, oldest first, until prompt and reply fit.
    Reply reply;
    const std::size_t budget = static_cast<std::size_t>(model_.config.context);
    const std::size_t reserve = static_cast<std::size_t>(sampling_.max_new_tokens);
    std::size_t first = 0;
    // The kept history starts right after <bos>, without a separator.
    auto prompt_size = [&] {
        std::size_t n = 1 + exchange.size();
        for (std::size_t k = first; k < exchanges_.size(); ++k) n += exchanges_[k].end - exchanges_[k].begin;
        return n - (first < exchanges_.size() ? exchanges_[first].separator : sep_len);
    };
    while (prompt_size() + reserve > budget && first < exchanges_.size()) ++first;
    reply.dropped_turns = static_cast<int>(first);
    if (prompt_size() + reserve > budget) {
        throw LengthError("turn of " + std::to_string(exchange.size()) + " tokens does not fit the context");
    }
    TokenIds prompt{text_.bos_id()};
    for (std::size_t k = first; k < exchanges_.size(); ++k) {
        const std::size_t skip = k == first ? exchanges_[k].separator : 0;
        prompt.insert(prompt.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(exchanges_[k].begin + skip),
                      tokens_.begin() + static_cast<std::ptrdiff_t>(exchanges_[k].end));
    }
    const std::size_t skip = first == exchanges_.size() ? sep_len : 0;
    prompt.insert(prompt.end(), exchange.begin() + static_cast<std::ptrdiff_t>(skip), exchange.end());

    SamplingConfig s = sampling_;
    s.seed = derive_seed(sampling_.seed, exchanges_.size());
    TokenIds out = generate(prompt, model_, s);
    const std::vector<CodecSegment> segments = scan_segments(out, manifest_, text_);

    // Everything parsed: decode motions, then commit.
    std::vector<std::pair<std::string, MotionRecord>> clips;
    for (const CodecSegment& seg : segments) {
        if (seg.kind == CodecSegment::Kind::text) {
            reply.text += seg.text;
            continue;
        }
        char name[32];
        std::snprintf(name, sizeof name, "gen-%03d", generated_ + static_cast<int>(clips.size()) + 1);
        clips.emplace_back(name, detokenize(seg.grid, tokenizer_));
        reply.text += std::string("[motion ") + name + "]";
    }
    for (const auto& [id, m] : clips) {
        const fs::path path = out_dir_ / (id + ".motion.json");
        write_motion_file(path, m);
        registry_[id] = path;
        reply.clips.push_back(id);
    }
    generated_ += static_cast<int>(clips.size());
    const std::size_t begin = tokens_.size();
    tokens_.insert(tokens_.end(), exchange.begin(), exchange.end());
    tokens_.insert(tokens_.end(), out.begin(), out.end());
    tokens_.push_back(text_.eos_id());
    exchanges_.push_back({begin, tokens_.size(), sep_len});
    return reply;
}

json Session::transcript() const {
    json segs = json::array();
    for (const CodecSegment& s : scan_segments(tokens_, manifest_, text_)) {
        if (s.kind == CodecSegment::Kind::text) segs.push_back({{"kind", "text"}, {"text", s.text}});
        else segs.push_back({{"kind", "motion"}, {"grid", grid_to_json(s.grid)}});
    }
    return {{"manifest", manifest_.to_json()}, {"segments", segs}};
}

TokenIds Session::retokenize(const json& transcript) {
    const VocabManifest m = VocabManifest::from_json(transcript.at("manifest"));
    auto text = make_text_tokenizer(m);
    std::vector<CodecSegment> segs;
    for (const json& s : transcript.at("segments")) {
        if (s.at("kind") == "text") segs.push_back(CodecSegment::of_text(s.at("text").get<std::string>()));
        else segs.push_back(CodecSegment::of_motion(grid_from_json(s.at("grid"))));
    }
    return splice_text_and_motion(segs, m, *text).ids;
}

}  // namespace duet
