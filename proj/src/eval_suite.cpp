#include "duet/eval_suite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "duet/errors.hpp"
#include "duet/params.hpp"

namespace duet {

namespace detail {
const std::vector<std::pair<std::string, std::string>>& embedded_assets();
}

using nlohmann::json;

FeatureSet::FeatureSet(Eigen::MatrixXd rows, Modality m) : vectors(std::move(rows)), modality(m) {}

FeatureSet::FeatureSet(const std::vector<Eigen::VectorXd>& rows, Modality m) : modality(m) {
    if (rows.empty()) throw ValidationError("feature set needs at least one vector");
    vectors.resize(static_cast<Eigen::Index>(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.front().size()) throw ValidationError("feature vectors differ in dimension");
        vectors.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    }
}

void FeatureSet::validate() const {
    if (vectors.rows() < 1 || vectors.cols() < 1) throw ValidationError("empty feature set");
    if (!vectors.allFinite()) throw ValidationError("non-finite features");
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& sigma) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma);
    const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& sigma1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& sigma2) {
    const Eigen::Index d = mu1.size();
    if (mu2.size() != d || sigma1.rows() != d || sigma1.cols() != d || sigma2.rows() != d || sigma2.cols() != d) {
        throw ValidationError("Frechet distance: dimension mismatch");
    }
    const Eigen::MatrixXd s1 = sqrtm_psd(sigma1);
    Eigen::MatrixXd inner = s1 * sigma2 * s1;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner, Eigen::EigenvaluesOnly);
    const double cross = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d2 = (mu1 - mu2).squaredNorm() + sigma1.trace() + sigma2.trace() - 2.0 * cross;
    return std::max(d2, 0.0);
}

namespace {

void moments(const FeatureSet& f, double epsilon, Eigen::VectorXd& mu, Eigen::MatrixXd& sigma) {
    f.validate();
    if (f.size() < 2) throw ValidationError("fid needs at least 2 vectors per set");
    mu = f.vectors.colwise().mean().transpose();
    const Eigen::MatrixXd centered = f.vectors.rowwise() - mu.transpose();
    sigma = centered.transpose() * centered / static_cast<double>(f.size() - 1);
    sigma.diagonal().array() += epsilon;
}

}  // namespace

double fid(const FeatureSet& a, const FeatureSet& b, double epsilon) {
    if (a.dim() != b.dim()) throw ValidationError("fid: dimension mismatch");
    Eigen::VectorXd mu1, mu2;
    Eigen::MatrixXd s1, s2;
    moments(a, epsilon, mu1, s1);
    moments(b, epsilon, mu2, s2);
    return frechet_distance(mu1, s1, mu2, s2);
}

double mpjpe(const MotionClip& pred, const MotionClip& gt) {
    if (pred.length() != gt.length() || pred.length() == 0) throw ValidationError("mpjpe: frame count mismatch");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < pred.frames.size(); ++t) {
        const auto& a = pred.frames[t].positions;
        const auto& b = gt.frames[t].positions;
        if (a.size() != b.size()) throw ValidationError("mpjpe: joint count mismatch");
        for (std::size_t j = 0; j < a.size(); ++j) sum += (a[j] - b[j]).norm();
        count += a.size();
    }
    return sum / static_cast<double>(count);
}

double mpjpe(const MotionRecord& pred, const MotionRecord& gt) {
    if (pred.persons.size() != gt.persons.size() || pred.persons.empty()) throw ValidationError("mpjpe: person count mismatch");
    double sum = 0.0;
    for (std::size_t p = 0; p < pred.persons.size(); ++p) sum += mpjpe(pred.persons[p], gt.persons[p]);
    return sum / static_cast<double>(pred.persons.size());
}

double mpjpe(const InteractiveClip& pred, const InteractiveClip& gt) {
    return 0.5 * (mpjpe(pred.person_a, gt.person_a) + mpjpe(pred.person_b, gt.person_b));
}

std::vector<double> r_precision(const FeatureSet& motion, const FeatureSet& text, int pool, int max_k,
                                std::uint64_t seed) {
    motion.validate();
    text.validate();
    if (motion.size() != text.size() || motion.dim() != text.dim()) throw ValidationError("r_precision: unaligned feature sets");
    if (pool < 2) throw ValidationError("r_precision: pool must be >= 2");
    if (motion.size() < pool) {
        throw ValidationError("r_precision: " + std::to_string(motion.size()) + " pairs is fewer than the pool of " +
                              std::to_string(pool));
    }
    if (max_k < 1) throw ValidationError("r_precision: k must be >= 1");
    const int n = motion.size();
    std::vector<int> hits(static_cast<std::size_t>(max_k), 0);
    std::mt19937_64 rng(derive_seed(seed, 0x7b3c));
    std::vector<int> others(static_cast<std::size_t>(n - 1));
    for (int i = 0; i < n; ++i) {
        for (int j = 0, o = 0; j < n; ++j) {
            if (j != i) others[static_cast<std::size_t>(o++)] = j;
        }
        for (int s = 0; s < pool - 1; ++s) {
            std::uniform_int_distribution<int> pick(s, n - 2);
            std::swap(others[static_cast<std::size_t>(s)], others[static_cast<std::size_t>(pick(rng))]);
        }
        const auto q = text.vectors.row(i);
        const double match = (motion.vectors.row(i) - q).norm();
        int rank = 0;
        for (int s = 0; s < pool - 1; ++s) {
            if ((motion.vectors.row(others[static_cast<std::size_t>(s)]) - q).norm() <= match) ++rank;
        }
        for (int k = rank; k < max_k; ++k) ++hits[static_cast<std::size_t>(k)];
    }
    std::vector<double> out;
    for (int h : hits) out.push_back(static_cast<double>(h) / static_cast<double>(n));
    return out;
}

std::vector<std::pair<int, int>> diversity_pairs(int n, std::uint64_t seed) {
    if (n < 2) throw ValidationError("diversity needs at least 2 vectors");
    const int m = n - n % 2;
    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, 0xd175));
    for (int i = m - 1; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < m / 2; ++i) out.emplace_back(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(i + m / 2)]);
    return out;
}

double diversity(const FeatureSet& feats, std::uint64_t seed) {
    feats.validate();
    const auto pairs = diversity_pairs(feats.size(), seed);
    double sum = 0.0;
    for (const auto& [a, b] : pairs) sum += (feats.vectors.row(a) - feats.vectors.row(b)).norm();
    return sum / static_cast<double>(pairs.size());
}

double mmdist(const FeatureSet& motion, const FeatureSet& text) {
    motion.validate();
    text.validate();
    if (motion.size() != text.size() || motion.dim() != text.dim()) throw ValidationError("mmdist: unaligned feature sets");
    return (motion.vectors - text.vectors).rowwise().norm().mean();
}

// ---- judge ----

std::string judge_transcript(const std::string& input, const std::string& output) {
    return "INPUT: " + input + "\nOUTPUT: " + output + "\n";
}

std::string caption_list(const std::vector<std::string>& captions) {
    std::string out = "[";
    for (std::size_t i = 0; i < captions.size(); ++i) out += (i ? ", " : "") + captions[i];
    return out + "]";
}

JudgeScores parse_judge_response(const std::string& response) {
    const auto open = response.find('{');
    const auto close = response.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open) {
        throw ParseError("judge response contains no JSON object");
    }
    json j;
    try {
        j = json::parse(response.substr(open, close - open + 1));
    } catch (const json::exception& e) {
        throw ParseError(std::string("judge response is not JSON: ") + e.what());
    }
    JudgeScores s;
    try {
        const json& scores = j.at("scores");
        for (std::size_t i = 0; i < kJudgeCriteria.size(); ++i) {
            const json& c = scores.at(kJudgeCriteria[i]);
            const json& v = c.at("Score");
            double x = v.is_string() ? std::stod(v.get<std::string>()) : v.get<double>();
            if (!std::isfinite(x)) throw ParseError("non-finite judge score");
            if (x < 0.0 || x > 10.0) {
                x = std::clamp(x, 0.0, 10.0);
                s.clamped = true;
            }
            s.scores[i] = x;
            s.justifications[i] = c.value("Justification", "");
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("judge response misses a field: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw ParseError("judge score is not a number");
    }
    return s;
}

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

JudgeScores judge_motion_reasoning(const std::string& transcript, LlmClient& llm, const ClientSpec& spec,
                                   const std::filesystem::path& cache_dir) {
    spec.validate();
    ClientRequest request{"judge", {{"transcript", transcript}}, {}, {}};
    for (int attempt = 0; attempt < 2; ++attempt) {
        if (attempt == 1) request.suffix = "\nReturn only the JSON object described above, with no other text.";
        const std::string key = content_hash(request.prompt());
        const std::filesystem::path cached = cache_dir.empty() ? std::filesystem::path() : cache_dir / (key + ".txt");
        std::string response;
        if (!cached.empty() && std::filesystem::exists(cached)) {
            response = read_file(cached);
        } else {
            response = with_retry(spec, [&] { return llm.complete(request); });
        }
        try {
            JudgeScores s = parse_judge_response(response);
            s.reasked = attempt == 1;
            if (!cached.empty() && !std::filesystem::exists(cached)) {
                std::filesystem::create_directories(cache_dir);
                std::ofstream(cached, std::ios::binary) << response;
            }
            return s;
        } catch (const ParseError& e) {
            if (attempt == 1) throw JudgeError(std::string("unparseable judge output after re-ask: ") + e.what());
        }
    }
    throw JudgeError("unreachable");
}

// ---- reports ----

void MetricReport::validate() const {
    auto finite = [](const std::optional<double>& v, const char* name) {
        if (v && !std::isfinite(*v)) throw ValidationError(std::string(name) + " is not finite");
    };
    finite(fid, "fid");
    finite(mpjpe, "mpjpe");
    finite(diversity, "diversity");
    finite(mmdist, "mmdist");
    for (const auto& r : r_precision) {
        finite(r, "r_precision");
        if (r && (*r < 0.0 || *r > 1.0)) throw ValidationError("r_precision outside [0, 1]");
    }
    if (judge) {
        for (double s : judge->scores) {
            if (!(s >= 0.0 && s <= 10.0)) throw ValidationError("judge score outside [0, 10]");
        }
    }
    for (const auto& [k, v] : external) {
        if (!std::isfinite(v)) throw ValidationError("external metric " + k + " is not finite");
    }
}

json MetricReport::to_json() const {
    json j = json::object();
    if (fid) j["fid"] = *fid;
    if (mpjpe) j["mpjpe"] = *mpjpe;
    json rp = json::object();
    for (std::size_t k = 0; k < r_precision.size(); ++k) {
        if (r_precision[k]) rp["top" + std::to_string(k + 1)] = *r_precision[k];
    }
    if (!rp.empty()) j["r_precision"] = rp;
    if (diversity) j["diversity"] = *diversity;
    if (mmdist) j["mmdist"] = *mmdist;
    if (judge) {
        j["judge"] = {{"coherence", judge->scores[0]},
                      {"alignment", judge->scores[1]},
                      {"naturalness", judge->scores[2]},
                      {"justifications", judge->justifications},
                      {"clamped", judge->clamped}};
    }
    if (!external.empty()) j["external"] = external;
    return j;
}

MetricReport MetricReport::from_json(const json& j) {
    const auto errors = schema_errors(j, metric_report_schema());
    if (!errors.empty()) throw ValidationError("metric report: " + errors.front());
    MetricReport r;
    auto opt = [&](const char* key, std::optional<double>& out) {
        if (j.contains(key)) out = j[key].get<double>();
    };
    opt("fid", r.fid);
    opt("mpjpe", r.mpjpe);
    opt("diversity", r.diversity);
    opt("mmdist", r.mmdist);
    if (j.contains("r_precision")) {
        for (std::size_t k = 0; k < 3; ++k) {
            const std::string key = "top" + std::to_string(k + 1);
            if (j["r_precision"].contains(key)) r.r_precision[k] = j["r_precision"][key].get<double>();
        }
    }
    if (j.contains("judge")) {
        JudgeScores s;
        s.scores = {j["judge"]["coherence"].get<double>(), j["judge"]["alignment"].get<double>(),
                    j["judge"]["naturalness"].get<double>()};
        if (j["judge"].contains("justifications")) {
            const auto v = j["judge"]["justifications"].get<std::vector<std::string>>();
            for (std::size_t i = 0; i < std::min<std::size_t>(3, v.size()); ++i) s.justifications[i] = v[i];
        }
        s.clamped = j["judge"].value("clamped", false);
        r.judge = s;
    }
    if (j.contains("external")) r.external = j["external"].get<std::map<std::string, double>>();
    return r;
}

void load_external_metrics(MetricReport& report, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("external metrics: " + std::string(e.what()));
    }
    if (!j.is_object()) throw ValidationError("external metrics must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (!v.is_number()) throw ValidationError("external metric '" + k + "' is not a number");
        report.external[k] = v.get<double>();
    }
}

namespace {

bool type_matches(const json& v, const std::string& type) {
    if (type == "object") return v.is_object();
    if (type == "array") return v.is_array();
    if (type == "string") return v.is_string();
    if (type == "number") return v.is_number();
    if (type == "integer") return v.is_number_integer() || v.is_number_unsigned();
    if (type == "boolean") return v.is_boolean();
    if (type == "null") return v.is_null();
    return false;
}

void check(const json& v, const json& schema, const std::string& at, std::vector<std::string>& errors) {
    if (schema.is_boolean()) {
        if (!schema.get<bool>()) errors.push_back(at + ": not allowed");
        return;
    }
    if (schema.contains("type")) {
        const json& t = schema["type"];
        bool ok = false;
        if (t.is_array()) {
            for (const auto& x : t) ok = ok || type_matches(v, x.get<std::string>());
        } else {
            ok = type_matches(v, t.get<std::string>());
        }
        if (!ok) {
            errors.push_back(at + ": expected " + t.dump());
            return;
        }
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& e : schema["enum"]) found = found || e == v;
        if (!found) errors.push_back(at + ": value not in enum");
    }
    if (v.is_number()) {
        const double x = v.get<double>();
        if (schema.contains("minimum") && x < schema["minimum"].get<double>()) errors.push_back(at + ": below minimum");
        if (schema.contains("maximum") && x > schema["maximum"].get<double>()) errors.push_back(at + ": above maximum");
    }
    if (v.is_object()) {
        if (schema.contains("required")) {
            for (const auto& r : schema["required"]) {
                if (!v.contains(r.get<std::string>())) errors.push_back(at + ": missing '" + r.get<std::string>() + "'");
            }
        }
        const json props = schema.value("properties", json::object());
        for (const auto& [k, x] : v.items()) {
            if (props.contains(k)) check(x, props[k], at + "/" + k, errors);
            else if (schema.contains("additionalProperties")) check(x, schema["additionalProperties"], at + "/" + k, errors);
        }
    }
    if (v.is_array() && schema.contains("items")) {
        for (std::size_t i = 0; i < v.size(); ++i) check(v[i], schema["items"], at + "/" + std::to_string(i), errors);
    }
}

}  // namespace

std::vector<std::string> schema_errors(const json& instance, const json& schema) {
    std::vector<std::string> errors;
    check(instance, schema, "$", errors);
    return errors;
}

const json& metric_report_schema() {
    static const json schema = [] {
        for (const auto& [name, text] : detail::embedded_assets()) {
            if (name == "schemas/metric_report.schema.json") return json::parse(text);
        }
        throw ValidationError("metric report schema is not embedded");
    }();
    return schema;
}

}  // namespace duet
