#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "duet/rq_tokenizer.hpp"

namespace duet {

using TokenIds = std::vector<std::int32_t>;

/// Text side of the vocabulary. Implementations own ids [0, vocab_size()).
class TextTokenizer {
  public:
    virtual ~TextTokenizer() = default;
    virtual std::string name() const = 0;
    virtual int vocab_size() const = 0;
    virtual TokenIds encode(std::string_view text) const = 0;
    virtual std::string decode(std::span<const std::int32_t> ids) const = 0;
    virtual std::int32_t pad_id() const = 0;
    virtual std::int32_t bos_id() const = 0;
    virtual std::int32_t eos_id() const = 0;
};

/// Bytes map to ids 0..255; four control ids follow. Control tokens are written
/// in text as "<|pad|>", "<|bos|>", "<|eos|>", "<|eot|>" and parsed back on encode.
class ByteTokenizer final : public TextTokenizer {
  public:
    static constexpr std::int32_t kPad = 256;
    static constexpr std::int32_t kBos = 257;
    static constexpr std::int32_t kEos = 258;
    static constexpr std::int32_t kEot = 259;
    static constexpr int kVocabSize = 260;

    std::string name() const override { return "byte"; }
    int vocab_size() const override { return kVocabSize; }
    TokenIds encode(std::string_view text) const override;
    std::string decode(std::span<const std::int32_t> ids) const override;
    std::int32_t pad_id() const override { return kPad; }
    std::int32_t bos_id() const override { return kBos; }
    std::int32_t eos_id() const override { return kEos; }
};

enum class SpecialToken : int { motion_start = 0, motion_end, a_start, a_end, b_start, b_end };
inline constexpr int kSpecialCount = 6;
const char* special_name(SpecialToken s);

enum class TokenClass { text, motion_code, special, invalid };

/// Id layout: text [0, T_v), motion codes [T_v, T_v + K), six structure tokens after that.
struct VocabManifest {
    int text_vocab_size = ByteTokenizer::kVocabSize;
    int codebook_size = 512;
    int depth = 4;
    std::string text_tokenizer = "byte";

    std::int32_t motion_code_base() const { return text_vocab_size; }
    std::int32_t special_base() const { return text_vocab_size + codebook_size; }
    int size() const { return text_vocab_size + codebook_size + kSpecialCount; }
    std::int32_t code_id(std::int32_t code) const { return motion_code_base() + code; }
    std::int32_t code_of(std::int32_t id) const { return id - motion_code_base(); }
    std::int32_t id(SpecialToken s) const { return special_base() + static_cast<int>(s); }
    TokenClass classify(std::int32_t id) const;
    bool is_special(std::int32_t id, SpecialToken s) const { return id == this->id(s); }

    void validate() const;
    nlohmann::json to_json() const;
    static VocabManifest from_json(const nlohmann::json& j);
    bool operator==(const VocabManifest&) const = default;
};

VocabManifest manifest_for(const TokenizerParams& params, const TextTokenizer& text);
std::unique_ptr<TextTokenizer> make_text_tokenizer(const VocabManifest& manifest);

void save_manifest(const std::filesystem::path& path, const VocabManifest& manifest);
VocabManifest load_manifest(const std::filesystem::path& path);

struct TokenSequence {
    TokenIds ids;

    /// Every id inside the manifest's range.
    void validate(const VocabManifest& manifest) const;
};

TokenSequence encode_interactive(const CodeGrid& grid, const VocabManifest& manifest);
TokenSequence encode_single(const CodeGrid& grid, const VocabManifest& manifest);
/// Dispatches on grid.persons.
TokenSequence encode_motion(const CodeGrid& grid, const VocabManifest& manifest);

std::size_t encoded_length(int steps, int depth, int persons);

struct MotionSpan {
    CodeGrid grid;
    bool two_persons = true;
    /// Tokens consumed, including both delimiters.
    std::size_t length = 0;
};

/// Strict parse of one motion span starting at ids[0]. Offsets in errors are
/// reported relative to `base_offset`.
MotionSpan decode_motion_span(std::span<const std::int32_t> ids, const VocabManifest& manifest,
                              std::size_t base_offset = 0);

/// As decode_motion_span, but the span must cover all of `ids`.
MotionSpan decode_motion(std::span<const std::int32_t> ids, const VocabManifest& manifest);

struct CodecSegment {
    enum class Kind { text, motion } kind = Kind::text;
    std::string text;
    CodeGrid grid;

    static CodecSegment of_text(std::string t);
    static CodecSegment of_motion(CodeGrid g);
    bool operator==(const CodecSegment&) const = default;
};

TokenSequence splice_text_and_motion(std::span<const CodecSegment> segments, const VocabManifest& manifest,
                                     const TextTokenizer& text);
/// Inverse of splice: adjacent text ids merge into one text segment.
std::vector<CodecSegment> scan_segments(std::span<const std::int32_t> ids, const VocabManifest& manifest,
                                        const TextTokenizer& text);

/// Contents of a ".tokens.json" file.
struct TokenFile {
    VocabManifest manifest;
    int depth = 0;
    int length = 0;
    int persons = 2;
    TokenIds ids;
};

void write_token_file(const std::filesystem::path& path, const TokenFile& file);
TokenFile read_token_file(const std::filesystem::path& path);

}  // namespace duet
