#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "duet/errors.hpp"
#include "duet/rq_tokenizer.hpp"
#include "duet/synthetic.hpp"
#include "gradcheck.hpp"

using namespace duet;
using ag::Matrix;

namespace {

std::vector<std::int32_t> oracle_codes(const Eigen::VectorXd& z, const Codebook& cb) {
    std::vector<std::int32_t> out;
    Eigen::VectorXd r = z;
    for (int d = 0; d < cb.depth; ++d) {
        const Matrix& t = cb.table(d);
        int best = 0;
        double best_d = 0;
        for (int k = 0; k < t.rows(); ++k) {
            double dist = 0;
            for (int j = 0; j < t.cols(); ++j) dist += (r(j) - t(k, j)) * (r(j) - t(k, j));
            if (k == 0 || dist < best_d) {
                best = k;
                best_d = dist;
            }
        }
        out.push_back(best);
        for (int j = 0; j < t.cols(); ++j) r(j) -= t(best, j);
    }
    return out;
}

TokenizerConfig tiny_config() {
    TokenizerConfig c;
    c.num_joints = 4;
    c.codebook_size = 16;
    c.dim = 8;
    c.depth = 2;
    c.hidden = 12;
    c.steps = 30;
    c.batch_size = 4;
    c.lr = 1e-3;
    c.seed = 3;
    c.dead_code_steps = 10;
    return c;
}

SkeletonSpec tiny_skeleton() {
    SkeletonSpec sk;
    sk.num_joints = 4;
    sk.contact_joints = {0, 1, 2, 3};
    return sk;
}

}  // namespace

TEST_CASE("residual_quantize exact hit then zero") {
    std::mt19937_64 rng(1);
    Codebook cb;
    cb.depth = 2;
    cb.tables.push_back(random_normal(8, 4, 1.0, rng));
    cb.tables[0].row(0).setZero();
    Eigen::VectorXd z = cb.tables[0].row(5).transpose();
    auto codes = residual_quantize(z, cb);
    CHECK(codes == std::vector<std::int32_t>{5, 0});
    CHECK((z - dequantize(codes, cb)).norm() == 0.0);
    CHECK_THROWS_AS(residual_quantize(Eigen::VectorXd::Zero(3), cb), ValidationError);
}

TEST_CASE("residual_quantize matches brute-force oracle") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> kdist(8, 64), ddist(1, 4);
    int mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        Codebook cb;
        cb.depth = ddist(rng);
        const int k = kdist(rng);
        cb.tables.push_back(random_normal(k, 4, 1.0, rng));
        Eigen::VectorXd z = random_normal(4, 1, 1.5, rng);
        if (residual_quantize(z, cb) != oracle_codes(z, cb)) ++mismatches;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("per-depth tables") {
    std::mt19937_64 rng(3);
    Codebook cb;
    cb.depth = 3;
    for (int d = 0; d < 3; ++d) cb.tables.push_back(random_normal(10, 5, 1.0 / (d + 1), rng));
    cb.validate();
    for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd z = random_normal(5, 1, 1.0, rng);
        CHECK(residual_quantize(z, cb) == oracle_codes(z, cb));
    }
}

TEST_CASE("dequantize") {
    std::mt19937_64 rng(4);
    Codebook cb;
    cb.depth = 1;
    cb.tables.push_back(random_normal(6, 3, 1.0, rng));
    std::vector<std::int32_t> one{4};
    CHECK(dequantize(one, cb) == cb.tables[0].row(4).transpose());
    cb.depth = 3;
    std::vector<std::int32_t> three{1, 5, 1};
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(3);
    for (int c : three) sum += cb.tables[0].row(c).transpose();
    CHECK((dequantize(three, cb) - sum).norm() <= 1e-12);
    std::vector<std::int32_t> bad{1, 6, 0};
    CHECK_THROWS_AS(dequantize(bad, cb), ValidationError);
}

TEST_CASE("residual norm is non-increasing in depth with a zero entry") {
    std::mt19937_64 rng(5);
    Codebook cb;
    cb.tables.push_back(random_normal(32, 6, 0.7, rng));
    cb.tables[0].row(7).setZero();
    for (int i = 0; i < 1000; ++i) {
        Eigen::VectorXd z = random_normal(6, 1, 1.0, rng);
        double prev = z.norm();
        for (int d = 1; d <= 5; ++d) {
            cb.depth = d;
            const double n = (z - dequantize(residual_quantize(z, cb), cb)).norm();
            CHECK(n <= prev + 1e-12);
            prev = n;
        }
        cb.depth = 3;
        const Eigen::VectorXd e = cb.tables[0].row(i % 32).transpose();
        CHECK(dequantize(residual_quantize(e, cb), cb) == e);
    }
}

TEST_CASE("codebook validation") {
    Codebook cb;
    cb.depth = 2;
    cb.tables.push_back(Matrix::Zero(4, 3));
    CHECK_THROWS_AS(cb.validate(), ValidationError);
    cb.tables[0] = Matrix::Identity(4, 3);
    cb.validate();
    cb.tables[0] = Matrix::Zero(1, 3);
    CHECK_THROWS_AS(cb.validate(), ValidationError);
}

TEST_CASE("encode/decode shapes at the default configuration") {
    TokenizerConfig c;
    TokenizerParams p = init_tokenizer(c, SkeletonSpec{});
    auto clip = sinusoid_pair(1, 40);
    LatentPair z = encode_clip(clip, p);
    CHECK(z.person_a.steps() == 10);
    CHECK(z.person_a.latents.cols() == 512);
    CodeGrid g = quantize_latents(z, p);
    CHECK(g.steps == 10);
    CHECK(g.persons == 2);
    CHECK(g.depth == 4);
    g.validate(512);
    InteractiveClip back = decode_latents(z.person_a, z.person_b, p);
    CHECK(back.length() == 40);

    auto odd = sinusoid_pair(2, 43);
    LatentPair zo = encode_clip(odd, p);
    CHECK(zo.person_a.steps() == 10);
    CHECK(zo.truncated_frames == 3);
    CHECK_THROWS_AS(encode_clip(sinusoid_pair(3, 3), p), LengthError);
}

TEST_CASE("single-person encoding duplicates the person") {
    TokenizerParams p = init_tokenizer(tiny_config(), tiny_skeleton());
    auto clip = sinusoid_pair(4, 16, tiny_skeleton());
    LatentSequence single = encode_single(clip.person_a, p);
    LatentPair dup = encode_clip(InteractiveClip{clip.person_a, clip.person_a}, p);
    CHECK(single.latents == dup.person_a.latents);
    CodeGrid g = tokenize_single(clip.person_a, p);
    CHECK(g.persons == 1);
    MotionRecord rec = detokenize(g, p);
    CHECK(rec.persons.size() == 1);
    CHECK(rec.persons[0].length() == 16);
}

TEST_CASE("zero weights give bias-only latents") {
    TokenizerParams p = init_tokenizer(tiny_config(), tiny_skeleton());
    for (auto& [name, v] : p.weights) {
        if (name.rfind("encoder.", 0) == 0) v.mutable_value().setZero();
    }
    p.weights.at("encoder.conv_out.bias").mutable_value().setConstant(0.25);
    auto z = encode_clip(sinusoid_pair(5, 16, tiny_skeleton()), p);
    CHECK((z.person_a.latents.array() == 0.25).all());
    CHECK((z.person_b.latents.array() == 0.25).all());
}

TEST_CASE("decode of exactly quantized latents equals decode of raw latents") {
    TokenizerParams p = init_tokenizer(tiny_config(), tiny_skeleton());
    auto clip = sinusoid_pair(6, 16, tiny_skeleton());
    LatentPair z = encode_clip(clip, p);
    Matrix table = Matrix::Zero(16, 8);
    table.middleRows(1, 4) = z.person_a.latents;
    table.middleRows(5, 4) = z.person_b.latents;
    for (int k = 9; k < 16; ++k) table.row(k).setConstant(100.0 + k);
    p.weights.at("codebook").mutable_value() = table;
    CodeGrid g = quantize_latents(z, p);
    CHECK(g.at(2, 1, 0) == 7);
    CHECK(g.at(2, 1, 1) == 0);
    MotionRecord rec = detokenize(g, p);
    InteractiveClip direct = decode_latents(z.person_a, z.person_b, p);
    CHECK(rec.persons[0].feature_matrix() == direct.person_a.feature_matrix());
    CHECK(rec.persons[1].feature_matrix() == direct.person_b.feature_matrix());
}

TEST_CASE("encoder determinism") {
    TokenizerParams p = init_tokenizer(tiny_config(), tiny_skeleton());
    auto clip = sinusoid_pair(7, 16, tiny_skeleton());
    CHECK(encode_clip(clip, p).person_a.latents == encode_clip(clip, p).person_a.latents);
    CHECK(tokenize_clip(clip, p) == tokenize_clip(clip, p));
}

TEST_CASE("loss terms") {
    TokenizerConfig c = tiny_config();
    c.beta = 0.0;
    TokenizerParams p = init_tokenizer(c, tiny_skeleton());
    auto data = sinusoid_dataset(2, 16, 1, tiny_skeleton());
    TokenizerLoss l = tokenizer_loss(p, data);
    CHECK(l.commitment == 0.0);
    CHECK(l.total.item() == doctest::Approx(l.recon + l.codebook));
    p.config.beta = 0.25;
    TokenizerLoss l2 = tokenizer_loss(p, data);
    CHECK(l2.commitment == doctest::Approx(0.25 * l2.codebook));
}

TEST_CASE("straight-through surrogate gradient matches finite differences") {
    TokenizerParams p = init_tokenizer(tiny_config(), tiny_skeleton());
    auto data = sinusoid_dataset(2, 16, 2, tiny_skeleton());
    QuantizerFreeze freeze;
    tokenizer_loss(p, data, nullptr, &freeze);
    std::vector<ag::Var> leaves;
    for (const char* name : {"encoder.conv_in.weight", "encoder.down0.weight", "decoder.up1.weight",
                             "decoder.conv_out.bias", "codebook"}) {
        leaves.push_back(p.weights.at(name));
    }
    // Frozen codes make the surrogate a smooth function of the weights.
    const double err = max_grad_error(leaves, [&] { return tokenizer_loss(p, data, &freeze).total; }, 4);
    CHECK(err < 1e-3);
}

TEST_CASE("training is deterministic and reduces error") {
    auto data = sinusoid_dataset(8, 16, 3, tiny_skeleton());
    TokenizerConfig c = tiny_config();
    c.steps = 60;
    TokenizerTrainReport r1, r2;
    TokenizerParams a = train_tokenizer(data, c, &r1);
    TokenizerParams b = train_tokenizer(data, c, &r2);
    CHECK(a.bitwise_equal(b));
    CHECK(r1.losses == r2.losses);
    CHECK(r1.final_mpjpe < r1.initial_mpjpe);
    a.codebook().validate();

    c.codebook_update = CodebookUpdate::ema;
    c.shared_codebook = false;
    TokenizerParams e = train_tokenizer(data, c, nullptr);
    CHECK(e.codebook_names().size() == 2);
    e.codebook().validate();
}

TEST_CASE("non-finite data raises a training error") {
    auto data = sinusoid_dataset(2, 16, 4, tiny_skeleton());
    data[0].person_a.frames[3].positions[1].x() = std::nan("");
    try {
        train_tokenizer(data, tiny_config(), nullptr);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(e.step() == 0);
    } catch (const ValidationError&) {
        // Rejected before training starts is also acceptable.
    }
}

TEST_CASE("save and load") {
    auto data = sinusoid_dataset(4, 16, 5, tiny_skeleton());
    TokenizerConfig c = tiny_config();
    c.steps = 5;
    TokenizerParams p = train_tokenizer(data, c, nullptr);
    auto path = std::filesystem::temp_directory_path() / "duet_test_tok.rqvae.json";
    save_tokenizer(path, p);
    TokenizerParams q = load_tokenizer(path);
    CHECK(p.bitwise_equal(q));
    auto j = tokenizer_to_json(p);
    CHECK(j.at("K") == 16);
    CHECK(j.at("encoder").contains("conv_in"));
    j["encoder"].erase("conv_in");
    CHECK_THROWS_AS(tokenizer_from_json(j), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("config parsing") {
    nlohmann::json j = {{"K", 8}, {"dim", 4}};
    CHECK_THROWS_AS(TokenizerConfig::from_json(j, true), UsageError);
    try {
        TokenizerConfig::from_json(j, true);
    } catch (const UsageError& e) {
        CHECK(std::string(e.what()).find("downsample") != std::string::npos);
    }
    TokenizerConfig c = TokenizerConfig::from_json(tiny_config().to_json(), true);
    CHECK(c.to_json() == tiny_config().to_json());
    j = tiny_config().to_json();
    j["downsample"] = 3;
    CHECK_THROWS_AS(TokenizerConfig::from_json(j), ValidationError);
}
