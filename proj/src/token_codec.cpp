#include "duet/token_codec.hpp"

#include <array>
#include <fstream>

#include "duet/errors.hpp"

namespace duet {

namespace {

constexpr std::array<std::string_view, 4> kControlText = {"<|pad|>", "<|bos|>", "<|eos|>", "<|eot|>"};
constexpr std::array<const char*, kSpecialCount> kSpecialNames = {
    "<motion_token_start>",   "<motion_token_end>",   "<motion_token_a_start>",
    "<motion_token_a_end>",   "<motion_token_b_start>", "<motion_token_b_end>"};

void check_grid(const CodeGrid& grid, const VocabManifest& manifest, int persons) {
    grid.validate(manifest.codebook_size);
    if (grid.persons != persons) {
        throw ValidationError("expected a " + std::to_string(persons) + "-person code grid, got " +
                              std::to_string(grid.persons));
    }
    if (grid.depth != manifest.depth) {
        throw ValidationError("code grid depth " + std::to_string(grid.depth) + " does not match vocabulary depth " +
                              std::to_string(manifest.depth));
    }
}

std::string describe(std::int32_t id, const VocabManifest& m) {
    switch (m.classify(id)) {
        case TokenClass::text: return "text id " + std::to_string(id);
        case TokenClass::motion_code: return "motion code " + std::to_string(m.code_of(id));
        case TokenClass::special: return kSpecialNames[static_cast<std::size_t>(id - m.special_base())];
        case TokenClass::invalid: break;
    }
    return "invalid id " + std::to_string(id);
}

}  // namespace

TokenIds ByteTokenizer::encode(std::string_view text) const {
    TokenIds out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        bool control = false;
        if (text[i] == '<') {
            for (std::size_t c = 0; c < kControlText.size(); ++c) {
                if (text.substr(i, kControlText[c].size()) == kControlText[c]) {
                    out.push_back(kPad + static_cast<std::int32_t>(c));
                    i += kControlText[c].size();
                    control = true;
                    break;
                }
            }
        }
        if (!control) out.push_back(static_cast<unsigned char>(text[i++]));
    }
    return out;
}

std::string ByteTokenizer::decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (auto id : ids) {
        if (id >= 0 && id < 256) {
            out.push_back(static_cast<char>(id));
        } else if (id >= kPad && id < kVocabSize) {
            out += kControlText[static_cast<std::size_t>(id - kPad)];
        } else {
            throw ValidationError("byte tokenizer cannot decode id " + std::to_string(id));
        }
    }
    return out;
}

const char* special_name(SpecialToken s) { return kSpecialNames[static_cast<std::size_t>(s)]; }

TokenClass VocabManifest::classify(std::int32_t id) const {
    if (id < 0) return TokenClass::invalid;
    if (id < text_vocab_size) return TokenClass::text;
    if (id < special_base()) return TokenClass::motion_code;
    if (id < size()) return TokenClass::special;
    return TokenClass::invalid;
}

void VocabManifest::validate() const {
    if (text_vocab_size < 1) throw ValidationError("vocabulary: text_vocab_size must be positive");
    if (codebook_size < 2) throw ValidationError("vocabulary: K must be >= 2");
    if (depth < 1) throw ValidationError("vocabulary: depth must be >= 1");
}

nlohmann::json VocabManifest::to_json() const {
    nlohmann::json specials = nlohmann::json::object();
    for (int s = 0; s < kSpecialCount; ++s) specials[kSpecialNames[static_cast<std::size_t>(s)]] = special_base() + s;
    return {{"text_tokenizer", text_tokenizer},
            {"text_vocab_size", text_vocab_size},
            {"motion_code_base", motion_code_base()},
            {"K", codebook_size},
            {"depth", depth},
            {"special_tokens", specials},
            {"size", size()}};
}

VocabManifest VocabManifest::from_json(const nlohmann::json& j) {
    try {
        VocabManifest m;
        m.text_tokenizer = j.value("text_tokenizer", std::string("byte"));
        m.text_vocab_size = j.at("text_vocab_size").get<int>();
        m.codebook_size = j.at("K").get<int>();
        m.depth = j.at("depth").get<int>();
        m.validate();
        if (j.contains("motion_code_base") && j["motion_code_base"].get<int>() != m.motion_code_base()) {
            throw ValidationError("vocabulary: motion_code_base must equal text_vocab_size");
        }
        if (j.contains("special_tokens")) {
            for (int s = 0; s < kSpecialCount; ++s) {
                const auto& ids = j["special_tokens"];
                const char* name = kSpecialNames[static_cast<std::size_t>(s)];
                if (!ids.contains(name) || ids[name].get<int>() != m.special_base() + s) {
                    throw ValidationError(std::string("vocabulary: unexpected id for ") + name);
                }
            }
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed vocabulary manifest: ") + e.what());
    }
}

VocabManifest manifest_for(const TokenizerParams& params, const TextTokenizer& text) {
    VocabManifest m;
    m.text_vocab_size = text.vocab_size();
    m.text_tokenizer = text.name();
    m.codebook_size = params.config.codebook_size;
    m.depth = params.config.depth;
    return m;
}

std::unique_ptr<TextTokenizer> make_text_tokenizer(const VocabManifest& manifest) {
    if (manifest.text_tokenizer != "byte" || manifest.text_vocab_size != ByteTokenizer::kVocabSize) {
        throw ValidationError("no built-in text tokenizer named '" + manifest.text_tokenizer + "' with " +
                              std::to_string(manifest.text_vocab_size) + " ids");
    }
    return std::make_unique<ByteTokenizer>();
}

void save_manifest(const std::filesystem::path& path, const VocabManifest& manifest) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << manifest.to_json().dump(2) << '\n';
}

VocabManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    try {
        return VocabManifest::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("vocabulary file is not valid JSON: " + std::string(e.what()));
    }
}

void TokenSequence::validate(const VocabManifest& manifest) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (manifest.classify(ids[i]) == TokenClass::invalid) {
            throw ValidationError("token " + std::to_string(i) + " has id " + std::to_string(ids[i]) +
                                  " outside the vocabulary");
        }
    }
}

std::size_t encoded_length(int steps, int depth, int persons) {
    const std::size_t block = static_cast<std::size_t>(depth) + 2;
    return static_cast<std::size_t>(steps) * block * static_cast<std::size_t>(persons) + 2;
}

namespace {

TokenSequence encode_grid(const CodeGrid& grid, const VocabManifest& m) {
    TokenSequence seq;
    seq.ids.reserve(encoded_length(grid.steps, grid.depth, grid.persons));
    seq.ids.push_back(m.id(SpecialToken::motion_start));
    for (int t = 0; t < grid.steps; ++t) {
        for (int p = 0; p < grid.persons; ++p) {
            seq.ids.push_back(m.id(p == 0 ? SpecialToken::a_start : SpecialToken::b_start));
            for (int d = 0; d < grid.depth; ++d) seq.ids.push_back(m.code_id(grid.at(t, p, d)));
            seq.ids.push_back(m.id(p == 0 ? SpecialToken::a_end : SpecialToken::b_end));
        }
    }
    seq.ids.push_back(m.id(SpecialToken::motion_end));
    return seq;
}

}  // namespace

TokenSequence encode_interactive(const CodeGrid& grid, const VocabManifest& manifest) {
    check_grid(grid, manifest, 2);
    return encode_grid(grid, manifest);
}

TokenSequence encode_single(const CodeGrid& grid, const VocabManifest& manifest) {
    check_grid(grid, manifest, 1);
    return encode_grid(grid, manifest);
}

TokenSequence encode_motion(const CodeGrid& grid, const VocabManifest& manifest) {
    return grid.persons == 1 ? encode_single(grid, manifest) : encode_interactive(grid, manifest);
}

MotionSpan decode_motion_span(std::span<const std::int32_t> ids, const VocabManifest& m, std::size_t base) {
    const int depth = m.depth;
    std::size_t pos = 0;
    auto fail = [&](std::size_t at, const std::string& what) -> GrammarError { return GrammarError(base + at, what); };
    auto peek = [&]() -> std::int32_t {
        if (pos >= ids.size()) throw fail(pos, "unexpected end of sequence inside motion span");
        return ids[pos];
    };
    auto expect = [&](SpecialToken s) {
        const std::int32_t id = peek();
        if (id != m.id(s)) throw fail(pos, std::string("expected ") + special_name(s) + ", found " + describe(id, m));
        ++pos;
    };
    auto read_codes = [&](std::vector<std::int32_t>& out) {
        const std::size_t start = pos;
        while (pos < ids.size() && m.classify(ids[pos]) == TokenClass::motion_code) {
            out.push_back(m.code_of(ids[pos]));
            ++pos;
        }
        const std::size_t n = pos - start;
        if (n != static_cast<std::size_t>(depth)) {
            if (n < static_cast<std::size_t>(depth) && pos < ids.size() && m.classify(ids[pos]) != TokenClass::special) {
                throw fail(pos, describe(ids[pos], m) + " inside a code block");
            }
            throw fail(start, "code block has " + std::to_string(n) + " codes, expected depth " + std::to_string(depth));
        }
    };

    expect(SpecialToken::motion_start);
    std::vector<std::int32_t> codes_a, codes_b;
    int persons = 0;
    int steps = 0;
    while (true) {
        const std::int32_t id = peek();
        if (id == m.id(SpecialToken::motion_end)) {
            if (steps == 0) throw fail(pos, "motion span has no timesteps");
            ++pos;
            break;
        }
        if (id == m.id(SpecialToken::b_start)) throw fail(pos, "person b block before person a block");
        expect(SpecialToken::a_start);
        read_codes(codes_a);
        expect(SpecialToken::a_end);
        const bool has_b = pos < ids.size() && ids[pos] == m.id(SpecialToken::b_start);
        if (persons == 0) {
            persons = has_b ? 2 : 1;
        } else if ((persons == 2) != has_b) {
            throw fail(pos, has_b ? "person b block in a single-person span" : "missing person b block");
        }
        if (has_b) {
            ++pos;
            read_codes(codes_b);
            expect(SpecialToken::b_end);
        }
        ++steps;
    }

    MotionSpan span;
    span.two_persons = persons == 2;
    span.length = pos;
    span.grid = CodeGrid(steps, persons, depth);
    for (int t = 0; t < steps; ++t) {
        for (int d = 0; d < depth; ++d) {
            span.grid.at(t, 0, d) = codes_a[static_cast<std::size_t>(t * depth + d)];
            if (persons == 2) span.grid.at(t, 1, d) = codes_b[static_cast<std::size_t>(t * depth + d)];
        }
    }
    return span;
}

MotionSpan decode_motion(std::span<const std::int32_t> ids, const VocabManifest& manifest) {
    MotionSpan span = decode_motion_span(ids, manifest);
    if (span.length != ids.size()) {
        throw GrammarError(span.length, describe(ids[span.length], manifest) + " after the end of the motion span");
    }
    return span;
}

CodecSegment CodecSegment::of_text(std::string t) {
    CodecSegment s;
    s.kind = Kind::text;
    s.text = std::move(t);
    return s;
}

CodecSegment CodecSegment::of_motion(CodeGrid g) {
    CodecSegment s;
    s.kind = Kind::motion;
    s.grid = std::move(g);
    return s;
}

TokenSequence splice_text_and_motion(std::span<const CodecSegment> segments, const VocabManifest& manifest,
                                     const TextTokenizer& text) {
    TokenSequence out;
    for (const auto& seg : segments) {
        const TokenIds part =
            seg.kind == CodecSegment::Kind::text ? text.encode(seg.text) : encode_motion(seg.grid, manifest).ids;
        out.ids.insert(out.ids.end(), part.begin(), part.end());
    }
    return out;
}

std::vector<CodecSegment> scan_segments(std::span<const std::int32_t> ids, const VocabManifest& manifest,
                                        const TextTokenizer& text) {
    std::vector<CodecSegment> out;
    std::size_t i = 0;
    while (i < ids.size()) {
        const TokenClass c = manifest.classify(ids[i]);
        if (c == TokenClass::text) {
            std::size_t j = i;
            while (j < ids.size() && manifest.classify(ids[j]) == TokenClass::text) ++j;
            out.push_back(CodecSegment::of_text(text.decode(ids.subspan(i, j - i))));
            i = j;
        } else if (ids[i] == manifest.id(SpecialToken::motion_start)) {
            MotionSpan span = decode_motion_span(ids.subspan(i), manifest, i);
            out.push_back(CodecSegment::of_motion(std::move(span.grid)));
            i += span.length;
        } else {
            throw GrammarError(i, describe(ids[i], manifest) + " outside a motion span");
        }
    }
    return out;
}

void write_token_file(const std::filesystem::path& path, const TokenFile& file) {
    nlohmann::json j = {{"vocab", file.manifest.to_json()},
                        {"depth", file.depth},
                        {"length", file.length},
                        {"persons", file.persons},
                        {"ids", file.ids}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << j.dump() << '\n';
}

TokenFile read_token_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    try {
        const nlohmann::json j = nlohmann::json::parse(in);
        TokenFile f;
        f.manifest = VocabManifest::from_json(j.at("vocab"));
        f.depth = j.at("depth").get<int>();
        f.length = j.at("length").get<int>();
        f.persons = j.value("persons", 2);
        f.ids = j.at("ids").get<TokenIds>();
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed token file " + path.string() + ": " + e.what());
    }
}

}  // namespace duet
