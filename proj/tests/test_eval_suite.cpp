#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "duet/errors.hpp"
#include "duet/eval_suite.hpp"
#include "duet/features.hpp"
#include "duet/params.hpp"
#include "duet/synthetic.hpp"

using namespace duet;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd gaussian(int n, int d, std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    MatrixXd m(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = g(rng);
    return m;
}

MotionRecord shifted(const MotionRecord& r, const Vec3& by) {
    MotionRecord out = r;
    for (auto& p : out.persons)
        for (auto& f : p.frames)
            for (auto& x : f.positions) x += by;
    return out;
}

class ScriptedClient : public LlmClient {
  public:
    explicit ScriptedClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}
    std::string complete(const ClientRequest& r) override {
        prompts.push_back(r.prompt());
        return replies_.at(std::min(prompts.size() - 1, replies_.size() - 1));
    }
    std::vector<std::string> prompts;

  private:
    std::vector<std::string> replies_;
};

std::string sheet(double a, double b, double c) {
    return R"({"scores": {"Logical Coherence": {"Justification": "x", "Score": )" + std::to_string(a) +
           R"(}, "Content Alignment": {"Justification": "y", "Score": )" + std::to_string(b) +
           R"(}, "Naturalness": {"Justification": "z", "Score": )" + std::to_string(c) + "}}}";
}

}  // namespace

TEST_CASE("fid closed forms") {
    std::mt19937_64 rng(1);
    FeatureSet a(gaussian(50, 6, rng));
    CHECK(std::abs(fid(a, a)) < 1e-8);
    for (int i = 0; i < 50; ++i) {
        FeatureSet r(gaussian(20 + i, 8, rng));
        CHECK(fid(r, r) >= 0.0);
    }

    VectorXd v(6);
    v << 0.5, -1.0, 2.0, 0.0, 0.25, 3.0;
    FeatureSet b(MatrixXd(a.vectors.rowwise() + v.transpose()));
    CHECK(fid(a, b) == doctest::Approx(v.squaredNorm()).epsilon(1e-10));
    CHECK(std::abs(fid(a, b) - v.squaredNorm()) < 1e-8);

    // Population moments injected directly.
    VectorXd mu1(1), mu2(1);
    mu1 << 0.0;
    mu2 << 1.0;
    MatrixXd s1(1, 1), s2(1, 1);
    s1 << 1.0;
    s2 << 4.0;
    CHECK(frechet_distance(mu1, s1, mu2, s2) == 2.0);

    FeatureSet c(gaussian(40, 6, rng) * 2.0);
    CHECK(std::abs(fid(a, c) - fid(c, a)) < 1e-8);
    CHECK(fid(a, c) > 0.0);

    // Common orthogonal transform.
    Eigen::HouseholderQR<MatrixXd> qr(gaussian(6, 6, rng));
    const MatrixXd q = qr.householderQ();
    FeatureSet aq(MatrixXd(a.vectors * q)), cq(MatrixXd(c.vectors * q));
    CHECK(std::abs(fid(aq, cq) - fid(a, c)) < 1e-6);

    FeatureSet wrong(gaussian(10, 5, rng));
    CHECK_THROWS_AS(fid(a, wrong), ValidationError);
    FeatureSet one(gaussian(1, 6, rng));
    CHECK_THROWS_AS(fid(one, a), ValidationError);
}

TEST_CASE("matrix square root of random PSD matrices") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const MatrixXd g = gaussian(8, 8, rng);
        const MatrixXd sigma = g * g.transpose();
        const MatrixXd r = sqrtm_psd(sigma);
        CHECK((r * r - sigma).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("mpjpe") {
    MotionRecord gt = MotionRecord::pair(sinusoid_pair(3, 20));
    CHECK(mpjpe(gt, gt) == 0.0);
    CHECK(mpjpe(shifted(gt, Vec3(0.3, 0, 0)), gt) == doctest::Approx(0.3).epsilon(1e-12));

    MotionRecord pred = MotionRecord::pair(sinusoid_pair(4, 20));
    double sum = 0.0;
    int n = 0;
    for (std::size_t p = 0; p < 2; ++p)
        for (std::size_t t = 0; t < 20; ++t)
            for (std::size_t j = 0; j < 22; ++j) {
                sum += (pred.persons[p].frames[t].positions[j] - gt.persons[p].frames[t].positions[j]).norm();
                ++n;
            }
    CHECK(std::abs(mpjpe(pred, gt) - sum / n) < 1e-12);
    CHECK(mpjpe(pred.as_interactive(), gt.as_interactive()) == doctest::Approx(mpjpe(pred, gt)).epsilon(1e-14));

    // Metric properties over random triples.
    for (int trial = 0; trial < 100; ++trial) {
        MotionRecord x = MotionRecord::pair(sinusoid_pair(100 + trial, 8));
        MotionRecord y = MotionRecord::pair(sinusoid_pair(300 + trial, 8));
        MotionRecord z = MotionRecord::pair(sinusoid_pair(500 + trial, 8));
        CHECK(mpjpe(x, y) > 0.0);
        CHECK(mpjpe(x, y) == mpjpe(y, x));
        CHECK(mpjpe(x, z) <= mpjpe(x, y) + mpjpe(y, z) + 1e-12);
    }

    MotionRecord shorter = MotionRecord::pair(sinusoid_pair(3, 19));
    CHECK_THROWS_AS(mpjpe(shorter, gt), ValidationError);
    CHECK_THROWS_AS(mpjpe(MotionRecord::single(gt.persons[0]), gt), ValidationError);
}

TEST_CASE("r_precision") {
    const int n = 40;
    // Oracle: text i sits on motion i, every other motion is at least 1 away.
    MatrixXd m = MatrixXd::Identity(n, n) * 10.0;
    FeatureSet motion(m), text(m);
    auto oracle = r_precision(motion, text, 32, 3, 1);
    CHECK(oracle[0] == 1.0);

    // Adversarial: the match is strictly the farthest candidate.
    MatrixXd t = MatrixXd::Zero(n, n);
    MatrixXd mm = MatrixXd::Identity(n, n);
    for (int i = 0; i < n; ++i) t(i, i) = -5.0;
    auto adv = r_precision(FeatureSet(mm), FeatureSet(t), 32, 3, 1);
    CHECK(adv[2] == 0.0);

    // Ties go to the mismatch.
    auto tied = r_precision(FeatureSet(MatrixXd::Zero(n, 3)), FeatureSet(MatrixXd::Zero(n, 3)), 32, 3, 0);
    CHECK(tied[2] == 0.0);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        FeatureSet a(gaussian(n, 4, rng)), b(gaussian(n, 4, rng));
        auto r = r_precision(a, b, 32, 3, static_cast<std::uint64_t>(trial));
        CHECK(r[0] <= r[1]);
        CHECK(r[1] <= r[2]);
        CHECK(r == r_precision(a, b, 32, 3, static_cast<std::uint64_t>(trial)));
    }
    FeatureSet small(gaussian(31, 4, rng));
    CHECK_THROWS_AS(r_precision(small, small, 32, 3, 0), ValidationError);
}

TEST_CASE("diversity and mmdist") {
    FeatureSet same(MatrixXd::Ones(10, 4));
    CHECK(diversity(same, 3) == 0.0);
    std::mt19937_64 rng(6);
    FeatureSet f(gaussian(6, 3, rng));
    FeatureSet f2(MatrixXd(f.vectors * 2.0));
    CHECK(diversity(f2, 9) == doctest::Approx(2.0 * diversity(f, 9)).epsilon(1e-14));

    // Hand pairing oracle: the pairs form a perfect matching of the six rows.
    const auto pairs = diversity_pairs(6, 9);
    REQUIRE(pairs.size() == 3);
    std::vector<int> used(6, 0);
    double manual = 0.0;
    for (auto [a, b] : pairs) {
        ++used[static_cast<std::size_t>(a)];
        ++used[static_cast<std::size_t>(b)];
        double sq = 0.0;
        for (int c = 0; c < 3; ++c) sq += (f.vectors(a, c) - f.vectors(b, c)) * (f.vectors(a, c) - f.vectors(b, c));
        manual += std::sqrt(sq);
    }
    CHECK(used == std::vector<int>(6, 1));
    CHECK(std::abs(diversity(f, 9) - manual / 3.0) < 1e-15);
    CHECK(diversity_pairs(7, 9).size() == 3);
    CHECK_THROWS_AS(diversity(FeatureSet(gaussian(1, 3, rng)), 0), ValidationError);

    FeatureSet a(gaussian(12, 5, rng));
    CHECK(mmdist(a, a) == 0.0);
    MatrixXd off = a.vectors;
    off.col(2).array() += 1.0;
    CHECK(mmdist(a, FeatureSet(off)) == doctest::Approx(1.0).epsilon(1e-14));
    FeatureSet b(gaussian(12, 5, rng));
    double loop = 0.0;
    for (int i = 0; i < 12; ++i) {
        double sq = 0.0;
        for (int c = 0; c < 5; ++c) sq += std::pow(a.vectors(i, c) - b.vectors(i, c), 2);
        loop += std::sqrt(sq);
    }
    CHECK(std::abs(mmdist(a, b) - loop / 12.0) < 1e-12);
    CHECK_THROWS_AS(mmdist(a, FeatureSet(gaussian(11, 5, rng))), ValidationError);
}

TEST_CASE("reference extractor") {
    ReferenceExtractor ex(32, 1);
    MotionRecord r = MotionRecord::pair(sinusoid_pair(8, 30));
    CHECK(ex.motion_features(r) == ex.motion_features(r));
    CHECK(ex.motion_features(r).size() == 32);
    CHECK(ex.text_features("Two people hug.") == ex.text_features("two PEOPLE hug"));
    CHECK(ex.text_features("two people hug") != ex.text_features("two people push"));
    CHECK(ReferenceExtractor(32, 2).text_features("hug") != ex.text_features("hug"));
}

TEST_CASE("judge prompt and parsing") {
    const std::string transcript =
        judge_transcript("What happens next? " + caption_list({"a waves", "one waves", "someone waves"}),
                         "They walk away.");
    StubLlmClient stub;
    ClientSpec spec;
    JudgeScores s = judge_motion_reasoning(transcript, stub, spec);
    CHECK(s.scores == std::array<double, 3>{7, 6, 8});
    CHECK_FALSE(s.clamped);

    ScriptedClient capture({sheet(11, 5, -2)});
    JudgeScores c = judge_motion_reasoning(transcript, capture, spec);
    CHECK(c.scores == std::array<double, 3>{10, 5, 0});
    CHECK(c.clamped);
    const std::string& prompt = capture.prompts.front();
    for (const char* h : {"1. Logical Coherence:", "2. Content Alignment", "3. Naturalness:"}) {
        CHECK(prompt.find(h) != std::string::npos);
    }
    CHECK(prompt.find("[a waves, one waves, someone waves]") != std::string::npos);
    CHECK(prompt.find("{{") == std::string::npos);
    CHECK(prompt.find("INPUT: What happens next?") != std::string::npos);

    ScriptedClient reask({"I think it is fine.", sheet(3, 4, 5)});
    JudgeScores r = judge_motion_reasoning(transcript, reask, spec);
    CHECK(r.reasked);
    CHECK(reask.prompts.size() == 2);
    CHECK(reask.prompts[1].find("Return only the JSON") != std::string::npos);

    ScriptedClient bad({"nope", "still nope"});
    CHECK_THROWS_AS(judge_motion_reasoning(transcript, bad, spec), JudgeError);

    auto dir = std::filesystem::temp_directory_path() / "duet_judge_cache";
    std::filesystem::remove_all(dir);
    ScriptedClient first({sheet(1, 2, 3)});
    judge_motion_reasoning(transcript, first, spec, dir);
    ScriptedClient second({sheet(9, 9, 9)});
    JudgeScores cached = judge_motion_reasoning(transcript, second, spec, dir);
    CHECK(second.prompts.empty());
    CHECK(cached.scores == std::array<double, 3>{1, 2, 3});
    std::filesystem::remove_all(dir);
}

TEST_CASE("metric report schema") {
    MetricReport r;
    r.fid = 0.5;
    r.mpjpe = 0.1;
    r.r_precision = {0.2, 0.4, 0.6};
    r.diversity = 3.0;
    r.mmdist = 2.0;
    r.judge = JudgeScores{{7, 6, 8}, {"a", "b", "c"}, false, false};
    r.external["meteor"] = 0.31;
    r.validate();
    const auto j = r.to_json();
    CHECK(schema_errors(j, metric_report_schema()).empty());
    MetricReport back = MetricReport::from_json(j);
    CHECK(back.to_json() == j);

    auto broken = j;
    broken["r_precision"]["top1"] = 1.5;
    CHECK_FALSE(schema_errors(broken, metric_report_schema()).empty());
    broken = j;
    broken["extra"] = 1;
    CHECK_FALSE(schema_errors(broken, metric_report_schema()).empty());
    broken = j;
    broken["fid"] = "zero";
    CHECK_THROWS_AS(MetricReport::from_json(broken), ValidationError);

    MetricReport partial;
    partial.fid = 0.0;
    CHECK(schema_errors(partial.to_json(), metric_report_schema()).empty());

    auto path = std::filesystem::temp_directory_path() / "duet_external.json";
    std::ofstream(path) << R"({"meteor": 0.25, "mauve": 0.8})";
    load_external_metrics(partial, path);
    CHECK(partial.external.at("mauve") == 0.8);
    std::ofstream(path) << R"({"meteor": "high"})";
    CHECK_THROWS_AS(load_external_metrics(partial, path), ValidationError);
    std::filesystem::remove(path);
}
