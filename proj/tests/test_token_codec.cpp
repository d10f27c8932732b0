#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <random>

#include "duet/errors.hpp"
#include "duet/token_codec.hpp"

using namespace duet;

namespace {

CodeGrid random_grid(int steps, int persons, int depth, int k, std::mt19937_64& rng) {
    CodeGrid g(steps, persons, depth);
    std::uniform_int_distribution<int> dist(0, k - 1);
    for (auto& c : g.codes) c = dist(rng);
    return g;
}

VocabManifest manifest(int k = 512, int depth = 4) {
    VocabManifest m;
    m.codebook_size = k;
    m.depth = depth;
    return m;
}

}  // namespace

TEST_CASE("id ranges") {
    VocabManifest m = manifest();
    CHECK(m.motion_code_base() == 260);
    CHECK(m.size() == 260 + 512 + 6);
    CHECK(m.classify(0) == TokenClass::text);
    CHECK(m.classify(259) == TokenClass::text);
    CHECK(m.classify(260) == TokenClass::motion_code);
    CHECK(m.classify(771) == TokenClass::motion_code);
    CHECK(m.classify(772) == TokenClass::special);
    CHECK(m.classify(777) == TokenClass::special);
    CHECK(m.classify(778) == TokenClass::invalid);
    CHECK(m.classify(-1) == TokenClass::invalid);
    CHECK(m.id(SpecialToken::motion_start) == 772);
    CHECK(m.id(SpecialToken::b_end) == 777);
    int counts[4] = {0, 0, 0, 0};
    for (int id = -5; id < m.size() + 5; ++id) ++counts[static_cast<int>(m.classify(id))];
    CHECK(counts[0] == 260);
    CHECK(counts[1] == 512);
    CHECK(counts[2] == 6);
    CHECK(VocabManifest::from_json(m.to_json()) == m);
}

TEST_CASE("length laws and examples") {
    std::mt19937_64 rng(1);
    VocabManifest m4 = manifest(512, 4);
    CHECK(encode_interactive(random_grid(2, 2, 4, 512, rng), m4).ids.size() == 26);
    CHECK(encode_single(random_grid(2, 1, 4, 512, rng), m4).ids.size() == 14);
    VocabManifest m1 = manifest(512, 1);
    CHECK(encode_interactive(random_grid(1, 2, 1, 512, rng), m1).ids.size() == 8);
    CHECK(encode_single(random_grid(1, 1, 1, 512, rng), m1).ids.size() == 5);
    for (int d = 1; d <= 6; ++d) {
        VocabManifest m = manifest(16, d);
        for (int l = 1; l <= 12; ++l) {
            CHECK(encode_interactive(random_grid(l, 2, d, 16, rng), m).ids.size() ==
                  static_cast<std::size_t>(l * (2 * d + 4) + 2));
            CHECK(encode_single(random_grid(l, 1, d, 16, rng), m).ids.size() == static_cast<std::size_t>(l * (d + 2) + 2));
        }
    }
}

TEST_CASE("layout follows the listing") {
    VocabManifest m = manifest(8, 2);
    CodeGrid g(1, 2, 2);
    g.codes = {1, 2, 3, 4};
    TokenIds ids = encode_interactive(g, m).ids;
    TokenIds expected = {m.id(SpecialToken::motion_start), m.id(SpecialToken::a_start), m.code_id(1), m.code_id(2),
                         m.id(SpecialToken::a_end),        m.id(SpecialToken::b_start), m.code_id(3), m.code_id(4),
                         m.id(SpecialToken::b_end),        m.id(SpecialToken::motion_end)};
    CHECK(ids == expected);
    CHECK_THROWS_AS(encode_single(g, m), ValidationError);
    CHECK_THROWS_AS(encode_interactive(CodeGrid(1, 2, 3), m), ValidationError);
}

TEST_CASE("round trip") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 500; ++i) {
        const int d = 1 + i % 4, l = 1 + i % 7, persons = 1 + i % 2;
        VocabManifest m = manifest(32, d);
        CodeGrid g = random_grid(l, persons, d, 32, rng);
        TokenIds ids = encode_motion(g, m).ids;
        MotionSpan span = decode_motion_span(ids, m);
        CHECK(span.grid == g);
        CHECK(span.two_persons == (persons == 2));
        CHECK(span.length == ids.size());
    }
}

TEST_CASE("grammar errors carry offsets") {
    VocabManifest m = manifest(8, 4);
    std::mt19937_64 rng(3);
    TokenIds ids = encode_interactive(random_grid(2, 2, 4, 8, rng), m).ids;

    TokenIds missing_a_end = ids;
    missing_a_end.erase(missing_a_end.begin() + 6);
    try {
        decode_motion_span(missing_a_end, m);
        FAIL("expected GrammarError");
    } catch (const GrammarError& e) {
        CHECK(e.offset() == 6);
    }

    TokenIds short_depth = ids;
    short_depth.erase(short_depth.begin() + 5);
    try {
        decode_motion_span(short_depth, m);
        FAIL("expected GrammarError");
    } catch (const GrammarError& e) {
        CHECK(e.offset() == 2);
        CHECK(std::string(e.what()).find("depth") != std::string::npos);
    }

    TokenIds unterminated(ids.begin(), ids.end() - 1);
    CHECK_THROWS_AS(decode_motion_span(unterminated, m), GrammarError);

    TokenIds text_inside = ids;
    text_inside[3] = 65;
    try {
        decode_motion_span(text_inside, m);
        FAIL("expected GrammarError");
    } catch (const GrammarError& e) {
        CHECK(e.offset() == 3);
    }

    // b block before a block.
    TokenIds swapped = ids;
    std::swap(swapped[1], swapped[7]);
    std::swap(swapped[6], swapped[12]);
    CHECK_THROWS_AS(decode_motion_span(swapped, m), GrammarError);

    // Mixed single and pair timesteps.
    CodeGrid a = random_grid(1, 2, 4, 8, rng), b = random_grid(1, 1, 4, 8, rng);
    TokenIds pa = encode_interactive(a, m).ids, pb = encode_single(b, m).ids;
    TokenIds mixed(pa.begin(), pa.end() - 1);
    mixed.insert(mixed.end(), pb.begin() + 1, pb.end());
    try {
        decode_motion_span(mixed, m);
        FAIL("expected GrammarError");
    } catch (const GrammarError& e) {
        CHECK(std::string(e.what()).find("missing person b") != std::string::npos);
    }

    TokenIds empty = {m.id(SpecialToken::motion_start), m.id(SpecialToken::motion_end)};
    CHECK_THROWS_AS(decode_motion_span(empty, m), GrammarError);
}

TEST_CASE("single-token mutations never corrupt structure silently") {
    std::mt19937_64 rng(4);
    VocabManifest m = manifest(16, 3);
    std::uniform_int_distribution<int> any_id(0, m.size() - 1);
    int parsed = 0, rejected = 0;
    for (int i = 0; i < 2000; ++i) {
        CodeGrid g = random_grid(1 + i % 5, 1 + i % 2, 3, 16, rng);
        TokenIds ids = encode_motion(g, m).ids;
        std::uniform_int_distribution<std::size_t> where(0, ids.size() - 1);
        const std::size_t pos = where(rng);
        std::int32_t next = any_id(rng);
        while (next == ids[pos]) next = any_id(rng);
        const std::int32_t old = ids[pos];
        ids[pos] = next;
        try {
            MotionSpan span = decode_motion(ids, m);
            CHECK(m.classify(old) == TokenClass::motion_code);
            CHECK(m.classify(next) == TokenClass::motion_code);
            CHECK(span.grid.steps == g.steps);
            ++parsed;
        } catch (const GrammarError&) {
            ++rejected;
        }
    }
    CHECK(parsed > 0);
    CHECK(rejected > 0);
}

TEST_CASE("byte tokenizer") {
    ByteTokenizer t;
    TokenIds ids = t.encode("hi<|eos|>\xc3\xa9");
    CHECK(ids == TokenIds{'h', 'i', ByteTokenizer::kEos, 0xc3, 0xa9});
    CHECK(t.decode(ids) == "hi<|eos|>\xc3\xa9");
    CHECK(t.encode("<|nope|>").size() == 8);
}

TEST_CASE("splice and scan") {
    std::mt19937_64 rng(5);
    VocabManifest m = manifest(16, 2);
    ByteTokenizer t;
    std::vector<CodecSegment> text_only = {CodecSegment::of_text("hello")};
    CHECK(splice_text_and_motion(text_only, m, t).ids == t.encode("hello"));
    CodeGrid g = random_grid(3, 2, 2, 16, rng);
    std::vector<CodecSegment> motion_only = {CodecSegment::of_motion(g)};
    CHECK(splice_text_and_motion(motion_only, m, t).ids == encode_interactive(g, m).ids);
    std::vector<CodecSegment> mixed = {CodecSegment::of_text("a"), CodecSegment::of_motion(g),
                                       CodecSegment::of_text("b"), CodecSegment::of_motion(random_grid(2, 1, 2, 16, rng))};
    TokenSequence seq = splice_text_and_motion(mixed, m, t);
    CHECK(scan_segments(seq.ids, m, t) == mixed);

    TokenIds stray = t.encode("x");
    stray.push_back(m.id(SpecialToken::a_end));
    try {
        scan_segments(stray, m, t);
        FAIL("expected GrammarError");
    } catch (const GrammarError& e) {
        CHECK(e.offset() == 1);
    }
}

TEST_CASE("token file round trip") {
    std::mt19937_64 rng(6);
    TokenFile f;
    f.manifest = manifest(16, 2);
    CodeGrid g = random_grid(4, 2, 2, 16, rng);
    f.ids = encode_interactive(g, f.manifest).ids;
    f.depth = 2;
    f.length = 4;
    auto path = std::filesystem::temp_directory_path() / "duet_codec_test.tokens.json";
    write_token_file(path, f);
    TokenFile back = read_token_file(path);
    CHECK(back.ids == f.ids);
    CHECK(back.manifest == f.manifest);
    CHECK(back.length == 4);
    std::filesystem::remove(path);
}
