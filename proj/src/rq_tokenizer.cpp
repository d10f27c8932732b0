#include "duet/rq_tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "duet/errors.hpp"

namespace duet {

using ag::Matrix;
using ag::Var;

namespace {

int log2_exact(int v) {
    int n = 0;
    while ((1 << n) < v) ++n;
    if ((1 << n) != v) throw ValidationError("downsample rate must be a power of two");
    return n;
}

std::string codebook_name(const TokenizerConfig& c, int d) {
    return c.shared_codebook ? std::string("codebook") : "codebook." + std::to_string(d);
}

/// Nearest table row for every row of `rows`. Candidates are screened with a GEMM
/// expansion, then rescored with the direct distance so the result equals nearest_entry.
std::vector<std::int32_t> nearest_entries(const Matrix& table, const Matrix& rows) {
    const Eigen::VectorXd norms = table.rowwise().squaredNorm();
    const Matrix cross = rows * table.transpose();
    const double table_scale = norms.maxCoeff();
    std::vector<std::int32_t> out(static_cast<std::size_t>(rows.rows()));
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        const double row_norm = rows.row(i).squaredNorm();
        Eigen::RowVectorXd approx = norms.transpose() - 2.0 * cross.row(i);
        const double lo = approx.minCoeff();
        const double margin = 1e-9 * (row_norm + table_scale + 1.0);
        std::int32_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (Eigen::Index k = 0; k < table.rows(); ++k) {
            if (approx(k) > lo + margin) continue;
            const double dist = (table.row(k) - rows.row(i)).squaredNorm();
            if (dist < best_dist) {
                best_dist = dist;
                best = static_cast<std::int32_t>(k);
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

/// Greedy residual codes for every row of `z`, row-major n x depth.
std::vector<std::int32_t> quantize_rows(const Matrix& z, const Codebook& cb) {
    std::vector<std::int32_t> codes(static_cast<std::size_t>(z.rows()) * static_cast<std::size_t>(cb.depth));
    Matrix r = z;
    for (int d = 0; d < cb.depth; ++d) {
        const Matrix& table = cb.table(d);
        const auto picks = nearest_entries(table, r);
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const std::int32_t k = picks[static_cast<std::size_t>(i)];
            codes[static_cast<std::size_t>(i * cb.depth + d)] = k;
            r.row(i) -= table.row(k);
        }
    }
    return codes;
}

Var conv1d(const Var& x, const ParameterSet& w, const std::string& name, int kernel, int stride, int pad) {
    return ag::linear(ag::im2col(x, kernel, stride, pad), w.at(name + ".weight"), &w.at(name + ".bias"));
}

Var run_encoder(const Var& x, const TokenizerParams& p) {
    const int downs = log2_exact(p.config.downsample);
    Var h = ag::relu(conv1d(x, p.weights, "encoder.conv_in", 3, 1, 1));
    for (int i = 0; i < downs; ++i) h = ag::relu(conv1d(h, p.weights, "encoder.down" + std::to_string(i), 4, 2, 1));
    return conv1d(h, p.weights, "encoder.conv_out", 3, 1, 1);
}

Var run_decoder(const Var& z, const TokenizerParams& p) {
    const int ups = log2_exact(p.config.downsample);
    Var h = ag::relu(conv1d(z, p.weights, "decoder.conv_in", 3, 1, 1));
    for (int i = 0; i < ups; ++i) {
        h = ag::relu(conv1d(ag::upsample_rows(h, 2), p.weights, "decoder.up" + std::to_string(i), 3, 1, 1));
    }
    return conv1d(h, p.weights, "decoder.conv_out", 3, 1, 1);
}

/// Normalized [person a | person b] features, truncated to a multiple of the downsample rate.
Matrix stacked_input(const InteractiveClip& clip, const TokenizerParams& p, int* truncated = nullptr) {
    const int l = p.config.downsample;
    const int m = clip.length();
    if (m < l) {
        throw LengthError("clip has " + std::to_string(m) + " frames, fewer than the downsample rate " +
                          std::to_string(l));
    }
    if (clip.person_a.skeleton.num_joints != p.config.num_joints ||
        clip.person_b.skeleton.num_joints != p.config.num_joints) {
        throw ValidationError("clip joint count does not match tokenizer configuration");
    }
    if (clip.person_b.length() != m) throw ValidationError("persons differ in frame count");
    const int used = (m / l) * l;
    if (truncated) *truncated = m - used;
    const int f = feature_width(p.config.num_joints);
    Matrix x(used, 2 * f);
    const FeatureMatrix fa = clip.person_a.feature_matrix();
    const FeatureMatrix fb = clip.person_b.feature_matrix();
    for (int t = 0; t < used; ++t) {
        x.row(t).head(f) = (fa.row(t).array() - p.feature_mean.row(0).array()) / p.feature_std.row(0).array();
        x.row(t).tail(f) = (fb.row(t).array() - p.feature_mean.row(0).array()) / p.feature_std.row(0).array();
    }
    return x;
}

/// L x 2dim latents reinterpreted as 2L x dim rows ordered (t, person).
Matrix person_rows(const Matrix& latents, int dim) {
    return Eigen::Map<const Matrix>(latents.data(), latents.rows() * 2, dim);
}

void check_finite(double v, long step, const char* what) {
    if (!std::isfinite(v)) throw TrainingError(step, std::string(what) + " is not finite");
}

Matrix kmeans(const Matrix& pool, int k, int iterations, std::mt19937_64& rng) {
    const Eigen::Index n = pool.rows();
    Matrix centers(k, pool.cols());
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double spread = std::sqrt(std::max(1e-12, (pool.rowwise() - pool.colwise().mean()).squaredNorm() /
                                                  static_cast<double>(std::max<Eigen::Index>(1, n))));
    std::normal_distribution<double> jitter(0.0, 1e-2 * spread / std::sqrt(static_cast<double>(pool.cols())));
    for (int c = 0; c < k; ++c) {
        centers.row(c) = pool.row(order[static_cast<std::size_t>(c) % static_cast<std::size_t>(n)]);
        if (c >= n) {
            for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(c, j) += jitter(rng);
        }
    }
    std::vector<int> assign(static_cast<std::size_t>(n));
    for (int it = 0; it < iterations; ++it) {
        const auto picks = nearest_entries(centers, pool);
        for (Eigen::Index i = 0; i < n; ++i) assign[static_cast<std::size_t>(i)] = picks[static_cast<std::size_t>(i)];
        Matrix sums = Matrix::Zero(k, pool.cols());
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += pool.row(i);
            ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
        }
    }
    return centers;
}

/// Perturbs rows until no two are identical.
void make_rows_distinct(Matrix& table, std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, 1e-6);
    for (int attempt = 0; attempt < 8; ++attempt) {
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(table.rows()));
        std::iota(idx.begin(), idx.end(), 0);
        auto less = [&](Eigen::Index a, Eigen::Index b) {
            for (Eigen::Index j = 0; j < table.cols(); ++j) {
                if (table(a, j) != table(b, j)) return table(a, j) < table(b, j);
            }
            return false;
        };
        std::sort(idx.begin(), idx.end(), less);
        bool clean = true;
        for (std::size_t i = 1; i < idx.size(); ++i) {
            if (table.row(idx[i]) == table.row(idx[i - 1])) {
                clean = false;
                for (Eigen::Index j = 0; j < table.cols(); ++j) table(idx[i], j) += noise(rng);
            }
        }
        if (clean) return;
    }
}

}  // namespace

void Codebook::validate() const {
    if (tables.empty()) throw ValidationError("codebook has no tables");
    if (depth < 1) throw ValidationError("codebook depth must be >= 1");
    if (tables.size() != 1 && static_cast<int>(tables.size()) != depth) {
        throw ValidationError("codebook must have one shared table or one table per depth");
    }
    for (const auto& t : tables) {
        if (t.rows() < 2) throw ValidationError("codebook needs at least two entries");
        if (t.rows() != tables.front().rows() || t.cols() != tables.front().cols()) {
            throw ValidationError("codebook tables differ in shape");
        }
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(t.rows()));
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                if (t(a, j) != t(b, j)) return t(a, j) < t(b, j);
            }
            return false;
        });
        for (std::size_t i = 1; i < idx.size(); ++i) {
            if (t.row(idx[i]) == t.row(idx[i - 1])) throw ValidationError("codebook has duplicated entries");
        }
    }
}

std::vector<std::int32_t> residual_quantize(const Eigen::Ref<const Eigen::VectorXd>& z, const Codebook& codebook) {
    if (z.size() != codebook.dim()) {
        throw ValidationError("latent dimension " + std::to_string(z.size()) + " does not match codebook dimension " +
                              std::to_string(codebook.dim()));
    }
    Matrix row = z.transpose();
    return quantize_rows(row, codebook);
}

Eigen::VectorXd dequantize(std::span<const std::int32_t> codes, const Codebook& codebook) {
    if (static_cast<int>(codes.size()) != codebook.depth) throw ValidationError("code count does not match depth");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(codebook.dim());
    for (int d = 0; d < codebook.depth; ++d) {
        const std::int32_t c = codes[static_cast<std::size_t>(d)];
        if (c < 0 || c >= codebook.size()) throw ValidationError("code index " + std::to_string(c) + " out of range");
        out += codebook.table(d).row(c).transpose();
    }
    return out;
}

CodeGrid::CodeGrid(int steps_, int persons_, int depth_)
    : steps(steps_), persons(persons_), depth(depth_),
      codes(static_cast<std::size_t>(std::max(0, steps_ * persons_ * depth_)), 0) {}

void CodeGrid::validate(int codebook_size) const {
    if (steps < 1) throw ValidationError("code grid needs at least one step");
    if (persons != 1 && persons != 2) throw ValidationError("code grid persons must be 1 or 2");
    if (depth < 1) throw ValidationError("code grid depth must be >= 1");
    if (codes.size() != static_cast<std::size_t>(steps) * persons * depth) {
        throw ValidationError("code grid size does not match its shape");
    }
    for (auto c : codes) {
        if (c < 0 || c >= codebook_size) throw ValidationError("code " + std::to_string(c) + " out of range");
    }
}

void TokenizerConfig::validate() const {
    if (num_joints < 1) throw ValidationError("num_joints must be positive");
    if (codebook_size < 2) throw ValidationError("codebook_size must be >= 2");
    if (dim < 1 || depth < 1 || hidden < 1) throw ValidationError("dim, depth and hidden must be positive");
    log2_exact(downsample);
    if (beta < 0.0) throw ValidationError("beta must be non-negative");
    if (lr < 0.0 || steps < 0 || batch_size < 1) throw ValidationError("invalid optimization settings");
    if (ema_decay <= 0.0 || ema_decay >= 1.0) throw ValidationError("ema_decay must lie in (0, 1)");
}

nlohmann::json TokenizerConfig::to_json() const {
    return {{"num_joints", num_joints},
            {"K", codebook_size},
            {"dim", dim},
            {"depth", depth},
            {"downsample", downsample},
            {"hidden", hidden},
            {"beta", beta},
            {"lr", lr},
            {"steps", steps},
            {"batch_size", batch_size},
            {"seed", seed},
            {"shared_codebook", shared_codebook},
            {"codebook_update", codebook_update == CodebookUpdate::ema ? "ema" : "gradient"},
            {"ema_decay", ema_decay},
            {"dead_code_steps", dead_code_steps},
            {"kmeans_iterations", kmeans_iterations}};
}

TokenizerConfig TokenizerConfig::from_json(const nlohmann::json& j, bool require_all) {
    if (!j.is_object()) throw UsageError("tokenizer config must be a JSON object");
    static const char* required[] = {"K", "dim", "depth", "downsample", "beta", "lr", "steps", "seed"};
    if (require_all) {
        std::vector<std::string> missing;
        for (const char* k : required) {
            if (!j.contains(k)) missing.emplace_back(k);
        }
        if (!missing.empty()) {
            std::string msg = "missing config key(s):";
            for (const auto& k : missing) msg += " " + k;
            throw UsageError(msg);
        }
    }
    TokenizerConfig c;
    c.num_joints = j.value("num_joints", c.num_joints);
    c.codebook_size = j.value("K", c.codebook_size);
    c.dim = j.value("dim", c.dim);
    c.depth = j.value("depth", c.depth);
    c.downsample = j.value("downsample", c.downsample);
    c.hidden = j.value("hidden", c.hidden);
    c.beta = j.value("beta", c.beta);
    c.lr = j.value("lr", c.lr);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.shared_codebook = j.value("shared_codebook", c.shared_codebook);
    const std::string update = j.value("codebook_update", std::string("gradient"));
    if (update != "gradient" && update != "ema") throw UsageError("codebook_update must be gradient or ema");
    c.codebook_update = update == "ema" ? CodebookUpdate::ema : CodebookUpdate::gradient;
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.dead_code_steps = j.value("dead_code_steps", c.dead_code_steps);
    c.kmeans_iterations = j.value("kmeans_iterations", c.kmeans_iterations);
    c.validate();
    return c;
}

Codebook TokenizerParams::codebook() const {
    Codebook cb;
    cb.depth = config.depth;
    for (const auto& name : codebook_names()) cb.tables.push_back(weights.at(name).value());
    return cb;
}

std::vector<std::string> TokenizerParams::codebook_names() const {
    std::vector<std::string> names;
    const int n = config.shared_codebook ? 1 : config.depth;
    for (int d = 0; d < n; ++d) names.push_back(codebook_name(config, d));
    return names;
}

std::vector<std::string> TokenizerParams::network_names() const {
    std::vector<std::string> names;
    for (const auto& [name, _] : weights) {
        if (name.rfind("codebook", 0) != 0) names.push_back(name);
    }
    return names;
}

bool TokenizerParams::bitwise_equal(const TokenizerParams& other) const {
    return weights.bitwise_equal(other.weights) && feature_mean == other.feature_mean &&
           feature_std == other.feature_std && step == other.step;
}

TokenizerParams init_tokenizer(const TokenizerConfig& config, const SkeletonSpec& skeleton) {
    config.validate();
    if (skeleton.num_joints != config.num_joints) throw ValidationError("skeleton joint count differs from config");
    TokenizerParams p;
    p.config = config;
    p.skeleton = skeleton;
    const int in = p.input_width();
    const int h = config.hidden;
    const int out = 2 * config.dim;
    const int downs = log2_exact(config.downsample);
    std::mt19937_64 rng(derive_seed(config.seed, 0x70c));
    auto conv = [&](const std::string& name, int c_in, int c_out, int kernel, bool relu_after) {
        const double fan_in = static_cast<double>(c_in * kernel);
        const double stddev = std::sqrt((relu_after ? 2.0 : 1.0) / fan_in);
        p.weights.add(name + ".weight", random_normal(c_out, c_in * kernel, stddev, rng));
        p.weights.add(name + ".bias", Matrix::Zero(1, c_out));
    };
    conv("encoder.conv_in", in, h, 3, true);
    for (int i = 0; i < downs; ++i) conv("encoder.down" + std::to_string(i), h, h, 4, true);
    conv("encoder.conv_out", h, out, 3, false);
    conv("decoder.conv_in", out, h, 3, true);
    for (int i = 0; i < downs; ++i) conv("decoder.up" + std::to_string(i), h, h, 3, true);
    conv("decoder.conv_out", h, in, 3, false);
    const int books = config.shared_codebook ? 1 : config.depth;
    for (int d = 0; d < books; ++d) {
        p.weights.add(codebook_name(config, d), random_normal(config.codebook_size, config.dim, 1.0, rng));
    }
    const int f = feature_width(config.num_joints);
    p.feature_mean = Matrix::Zero(1, f);
    p.feature_std = Matrix::Ones(1, f);
    return p;
}

LatentPair encode_clip(const InteractiveClip& clip, const TokenizerParams& params) {
    ag::NoGradGuard guard;
    LatentPair out;
    const Matrix x = stacked_input(clip, params, &out.truncated_frames);
    const Matrix z = run_encoder(ag::constant(x), params).value();
    const int dim = params.config.dim;
    out.person_a = {z.leftCols(dim), params.config.downsample, clip.length()};
    out.person_b = {z.rightCols(dim), params.config.downsample, clip.length()};
    return out;
}

LatentSequence encode_single(const MotionClip& clip, const TokenizerParams& params) {
    return encode_clip(InteractiveClip{clip, clip}, params).person_a;
}

InteractiveClip decode_latents(const LatentSequence& a, const LatentSequence& b, const TokenizerParams& params) {
    const int dim = params.config.dim;
    if (a.steps() < 1 || a.steps() != b.steps()) throw ValidationError("latent sequences must be non-empty and equal");
    if (a.latents.cols() != dim || b.latents.cols() != dim) throw ValidationError("latent dimension mismatch");
    ag::NoGradGuard guard;
    Matrix z(a.steps(), 2 * dim);
    z.leftCols(dim) = a.latents;
    z.rightCols(dim) = b.latents;
    Matrix x = run_decoder(ag::constant(z), params).value();
    const int f = feature_width(params.config.num_joints);
    FeatureMatrix fa(x.rows(), f), fb(x.rows(), f);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        fa.row(t) = x.row(t).head(f).array() * params.feature_std.row(0).array() + params.feature_mean.row(0).array();
        fb.row(t) = x.row(t).tail(f).array() * params.feature_std.row(0).array() + params.feature_mean.row(0).array();
    }
    return InteractiveClip{MotionClip::from_feature_matrix(fa, params.skeleton),
                           MotionClip::from_feature_matrix(fb, params.skeleton)};
}

CodeGrid quantize_latents(const LatentPair& latents, const TokenizerParams& params) {
    const Codebook cb = params.codebook();
    const int steps = latents.person_a.steps();
    CodeGrid grid(steps, 2, cb.depth);
    const auto ca = quantize_rows(latents.person_a.latents, cb);
    const auto cbb = quantize_rows(latents.person_b.latents, cb);
    for (int t = 0; t < steps; ++t) {
        for (int d = 0; d < cb.depth; ++d) {
            grid.at(t, 0, d) = ca[static_cast<std::size_t>(t * cb.depth + d)];
            grid.at(t, 1, d) = cbb[static_cast<std::size_t>(t * cb.depth + d)];
        }
    }
    return grid;
}

CodeGrid tokenize_clip(const InteractiveClip& clip, const TokenizerParams& params) {
    return quantize_latents(encode_clip(clip, params), params);
}

CodeGrid tokenize_single(const MotionClip& clip, const TokenizerParams& params) {
    const Codebook cb = params.codebook();
    const LatentSequence a = encode_single(clip, params);
    CodeGrid grid(a.steps(), 1, cb.depth);
    grid.codes = quantize_rows(a.latents, cb);
    return grid;
}

MotionRecord detokenize(const CodeGrid& grid, const TokenizerParams& params) {
    const Codebook cb = params.codebook();
    grid.validate(cb.size());
    if (grid.depth != cb.depth) throw ValidationError("code grid depth does not match tokenizer depth");
    LatentSequence a{Matrix(grid.steps, cb.dim()), params.config.downsample, grid.steps * params.config.downsample};
    LatentSequence b = a;
    for (int t = 0; t < grid.steps; ++t) {
        std::vector<std::int32_t> codes(static_cast<std::size_t>(cb.depth));
        for (int d = 0; d < cb.depth; ++d) codes[static_cast<std::size_t>(d)] = grid.at(t, 0, d);
        a.latents.row(t) = dequantize(codes, cb).transpose();
        if (grid.persons == 2) {
            for (int d = 0; d < cb.depth; ++d) codes[static_cast<std::size_t>(d)] = grid.at(t, 1, d);
        }
        b.latents.row(t) = dequantize(codes, cb).transpose();
    }
    InteractiveClip clip = decode_latents(a, b, params);
    if (grid.persons == 1) return MotionRecord::single(std::move(clip.person_a));
    return MotionRecord::pair(std::move(clip));
}

TokenizerLoss tokenizer_loss(const TokenizerParams& params, std::span<const InteractiveClip> batch,
                             const QuantizerFreeze* freeze, QuantizerFreeze* capture) {
    if (batch.empty()) throw ValidationError("tokenizer_loss: empty batch");
    const int dim = params.config.dim;
    const int depth = params.config.depth;
    const bool ema = params.config.codebook_update == CodebookUpdate::ema;
    std::vector<Var> books;
    for (const auto& name : params.codebook_names()) books.push_back(params.weights.at(name));
    const Codebook cb = params.codebook();

    TokenizerLoss out;
    Var total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Matrix x = stacked_input(batch[i], params);
        Var xin = ag::constant(x);
        Var z2 = run_encoder(xin, params);  // L x 2dim
        const Eigen::Index steps = z2.rows();
        Var z = ag::reshape(z2, steps * 2, dim);

        std::vector<std::int32_t> codes = freeze ? freeze->codes.at(i) : quantize_rows(z.value(), cb);
        Var zhat = ag::gather_sum(books, codes, depth);
        const Matrix z_ref = freeze ? freeze->latents.at(i) : z.value();
        const Matrix zhat_ref = freeze ? freeze->quantized.at(i) : zhat.value();
        if (capture) {
            capture->codes.push_back(codes);
            capture->latents.push_back(z.value());
            capture->quantized.push_back(zhat.value());
        }

        // Straight-through: forward value is zhat, gradient flows to z unchanged.
        Var zq = ag::add(z, ag::constant(zhat_ref - z_ref));
        Var recon_x = run_decoder(ag::reshape(zq, steps, 2 * dim), params);
        Var recon = ag::mse(recon_x, xin);
        Var commit = ag::scale(ag::mse(z, ag::constant(zhat_ref)), params.config.beta);
        Var clip_loss = ag::add(recon, commit);
        out.recon += recon.item();
        out.commitment += commit.item();
        if (!ema) {
            Var cbl = ag::mse(ag::constant(z_ref), zhat);
            out.codebook += cbl.item();
            clip_loss = ag::add(clip_loss, cbl);
        }
        total = total.defined() ? ag::add(total, clip_loss) : clip_loss;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.total = ag::scale(total, inv);
    out.recon *= inv;
    out.codebook *= inv;
    out.commitment *= inv;
    return out;
}

double reconstruction_mpjpe(std::span<const InteractiveClip> dataset, const TokenizerParams& params) {
    double total = 0.0;
    long count = 0;
    const int n = params.config.num_joints;
    for (const auto& clip : dataset) {
        const MotionRecord rec = detokenize(tokenize_clip(clip, params), params);
        const int m = rec.persons[0].length();
        const MotionClip* gt[2] = {&clip.person_a, &clip.person_b};
        for (int p = 0; p < 2; ++p) {
            for (int t = 0; t < m; ++t) {
                for (int j = 0; j < n; ++j) {
                    total += (rec.persons[static_cast<std::size_t>(p)].frames[static_cast<std::size_t>(t)].positions[j] -
                              gt[p]->frames[static_cast<std::size_t>(t)].positions[j])
                                 .norm();
                    ++count;
                }
            }
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

namespace {

void compute_normalization(std::span<const InteractiveClip> dataset, TokenizerParams& p) {
    const int f = feature_width(p.config.num_joints);
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(f), sq = Eigen::RowVectorXd::Zero(f);
    double count = 0.0;
    for (const auto& clip : dataset) {
        for (const MotionClip* person : {&clip.person_a, &clip.person_b}) {
            const FeatureMatrix fm = person->feature_matrix();
            sum += fm.colwise().sum();
            sq += fm.array().square().matrix().colwise().sum();
            count += static_cast<double>(fm.rows());
        }
    }
    const Eigen::RowVectorXd mean = sum / count;
    Eigen::RowVectorXd var = sq / count - mean.array().square().matrix();
    p.feature_mean = mean;
    p.feature_std = Matrix(1, f);
    for (int i = 0; i < f; ++i) {
        const double s = std::sqrt(std::max(0.0, var(i)));
        p.feature_std(0, i) = s > 1e-6 ? s : 1.0;
    }
}

/// Depth-by-depth k-means over the first batch so every depth's residual scale is represented.
void init_codebook(TokenizerParams& p, std::span<const InteractiveClip> first_batch, std::mt19937_64& rng) {
    ag::NoGradGuard guard;
    const int dim = p.config.dim;
    const int depth = p.config.depth;
    const int k = p.config.codebook_size;
    std::vector<Eigen::RowVectorXd> rows;
    for (const auto& clip : first_batch) {
        const Matrix z = person_rows(run_encoder(ag::constant(stacked_input(clip, p)), p).value(), dim);
        for (Eigen::Index i = 0; i < z.rows(); ++i) rows.emplace_back(z.row(i));
    }
    Matrix residual(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) residual.row(static_cast<Eigen::Index>(i)) = rows[i];

    const auto names = p.codebook_names();
    if (p.config.shared_codebook) {
        Matrix table(k, dim);
        int filled = 0;
        for (int d = 0; d < depth; ++d) {
            const int share = (k - filled) / (depth - d);
            Matrix centers = kmeans(residual, share, p.config.kmeans_iterations, rng);
            table.middleRows(filled, share) = centers;
            filled += share;
            const auto picks = nearest_entries(centers, residual);
            for (Eigen::Index i = 0; i < residual.rows(); ++i) residual.row(i) -= centers.row(picks[static_cast<std::size_t>(i)]);
        }
        make_rows_distinct(table, rng);
        p.weights.at(names[0]).mutable_value() = table;
    } else {
        for (int d = 0; d < depth; ++d) {
            Matrix centers = kmeans(residual, k, p.config.kmeans_iterations, rng);
            make_rows_distinct(centers, rng);
            const auto picks = nearest_entries(centers, residual);
            for (Eigen::Index i = 0; i < residual.rows(); ++i) residual.row(i) -= centers.row(picks[static_cast<std::size_t>(i)]);
            p.weights.at(names[static_cast<std::size_t>(d)]).mutable_value() = centers;
        }
    }
}

struct EmaState {
    std::vector<Eigen::VectorXd> counts;
    std::vector<Matrix> sums;
};

void ema_update(TokenizerParams& p, const QuantizerFreeze& cap, EmaState& state) {
    const auto names = p.codebook_names();
    const int depth = p.config.depth;
    const double decay = p.config.ema_decay;
    const std::size_t books = names.size();
    if (state.counts.empty()) {
        for (std::size_t b = 0; b < books; ++b) {
            const Matrix& t = p.weights.at(names[b]).value();
            state.counts.emplace_back(Eigen::VectorXd::Ones(t.rows()));
            state.sums.push_back(t);
        }
    }
    std::vector<Eigen::VectorXd> n(books);
    std::vector<Matrix> s(books);
    for (std::size_t b = 0; b < books; ++b) {
        n[b] = Eigen::VectorXd::Zero(state.counts[b].size());
        s[b] = Matrix::Zero(state.sums[b].rows(), state.sums[b].cols());
    }
    for (std::size_t c = 0; c < cap.codes.size(); ++c) {
        const Matrix& z = cap.latents[c];
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            Eigen::RowVectorXd r = z.row(i);
            for (int d = 0; d < depth; ++d) {
                const std::size_t b = books == 1 ? 0 : static_cast<std::size_t>(d);
                const std::int32_t k = cap.codes[c][static_cast<std::size_t>(i * depth + d)];
                n[b](k) += 1.0;
                s[b].row(k) += r;
                r -= p.weights.at(names[b]).value().row(k);
            }
        }
    }
    for (std::size_t b = 0; b < books; ++b) {
        state.counts[b] = decay * state.counts[b] + (1.0 - decay) * n[b];
        state.sums[b] = decay * state.sums[b] + (1.0 - decay) * s[b];
        Matrix& table = p.weights.at(names[b]).mutable_value();
        for (Eigen::Index k = 0; k < table.rows(); ++k) {
            if (state.counts[b](k) > 1e-8) table.row(k) = state.sums[b].row(k) / state.counts[b](k);
        }
    }
}

}  // namespace

TokenizerParams train_tokenizer(std::span<const InteractiveClip> dataset, const TokenizerConfig& config,
                                TokenizerTrainReport* report) {
    config.validate();
    if (dataset.empty()) throw ValidationError("train_tokenizer: dataset is empty");
    for (const auto& clip : dataset) {
        clip.validate();
        if (clip.person_a.skeleton.num_joints != config.num_joints) {
            throw ValidationError("train_tokenizer: clip joint count does not match config");
        }
    }
    TokenizerParams p = init_tokenizer(config, dataset.front().person_a.skeleton);
    compute_normalization(dataset, p);

    const std::size_t n = dataset.size();
    const std::size_t bs = std::min<std::size_t>(n, static_cast<std::size_t>(config.batch_size));
    // Batch at step s is the s-th window of an endless, per-epoch reshuffled index stream.
    auto batch_at = [&](long step) {
        std::vector<InteractiveClip> batch;
        batch.reserve(bs);
        for (std::size_t i = 0; i < bs; ++i) {
            const std::size_t pos = static_cast<std::size_t>(step) * bs + i;
            const std::size_t epoch = pos / n;
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), 0);
            std::mt19937_64 erng(derive_seed(config.seed, 0xe90c, epoch));
            std::shuffle(perm.begin(), perm.end(), erng);
            batch.push_back(dataset[perm[pos % n]]);
        }
        return batch;
    };

    std::mt19937_64 rng(derive_seed(config.seed, 0xc0de));
    init_codebook(p, batch_at(0), rng);

    TokenizerTrainReport local;
    TokenizerTrainReport& rep = report ? *report : local;
    rep = TokenizerTrainReport{};
    rep.initial_mpjpe = reconstruction_mpjpe(dataset, p);

    const bool ema = config.codebook_update == CodebookUpdate::ema;
    std::vector<std::string> trainable = p.network_names();
    if (!ema) {
        for (const auto& name : p.codebook_names()) trainable.push_back(name);
    }
    AdamW opt;
    EmaState ema_state;
    const auto books = p.codebook_names();
    std::vector<std::vector<long>> last_used(books.size(), std::vector<long>(config.codebook_size, 0));

    for (long step = 0; step < config.steps; ++step) {
        const auto batch = batch_at(step);
        QuantizerFreeze cap;
        TokenizerLoss loss = tokenizer_loss(p, batch, nullptr, &cap);
        check_finite(loss.total.item(), step, "tokenizer loss");
        rep.losses.push_back(loss.total.item());
        ag::backward(loss.total);
        opt.step(p.weights, trainable, config.lr);
        p.weights.zero_grad();
        if (ema) ema_update(p, cap, ema_state);

        for (const auto& codes : cap.codes) {
            for (std::size_t i = 0; i < codes.size(); ++i) {
                const std::size_t b = books.size() == 1 ? 0 : i % static_cast<std::size_t>(config.depth);
                last_used[b][static_cast<std::size_t>(codes[i])] = step + 1;
            }
        }
        // Reseed codes idle for dead_code_steps to random encoder outputs of this batch.
        if (config.dead_code_steps > 0) {
            std::vector<Eigen::RowVectorXd> candidates;
            for (const auto& z : cap.latents) {
                for (Eigen::Index i = 0; i < z.rows(); ++i) candidates.emplace_back(z.row(i));
            }
            std::shuffle(candidates.begin(), candidates.end(), rng);
            std::size_t next = 0;
            std::normal_distribution<double> noise(0.0, 1e-4);
            for (std::size_t b = 0; b < books.size(); ++b) {
                Matrix& table = p.weights.at(books[b]).mutable_value();
                for (int k = 0; k < config.codebook_size; ++k) {
                    if (step + 1 - last_used[b][static_cast<std::size_t>(k)] < config.dead_code_steps) continue;
                    table.row(k) = candidates[next % candidates.size()];
                    if (next >= candidates.size()) {
                        for (Eigen::Index j = 0; j < table.cols(); ++j) table(k, j) += noise(rng);
                    }
                    ++next;
                    last_used[b][static_cast<std::size_t>(k)] = step + 1;
                    ++rep.reseeded_codes;
                }
            }
        }
        for (const auto& name : books) {
            for (Eigen::Index i = 0; i < p.weights.at(name).value().size(); ++i) {
                check_finite(p.weights.at(name).value().data()[i], step, "codebook entry");
            }
        }
        p.step = step + 1;
    }
    rep.final_mpjpe = reconstruction_mpjpe(dataset, p);
    return p;
}

nlohmann::json tokenizer_to_json(const TokenizerParams& p) {
    nlohmann::json j;
    j["K"] = p.config.codebook_size;
    j["dim"] = p.config.dim;
    j["depth"] = p.config.depth;
    j["downsample"] = p.config.downsample;
    j["seed"] = p.config.seed;
    j["step"] = p.step;
    j["config"] = p.config.to_json();
    j["skeleton"] = {{"num_joints", p.skeleton.num_joints},
                     {"fps", p.skeleton.fps},
                     {"contact_joints", p.skeleton.contact_joints}};
    j["normalization"] = {{"mean", matrix_to_json(p.feature_mean)}, {"std", matrix_to_json(p.feature_std)}};
    const auto books = p.codebook_names();
    if (p.config.shared_codebook) {
        j["codebook"] = matrix_to_json(p.weights.at(books[0]).value());
    } else {
        nlohmann::json tables = nlohmann::json::array();
        for (const auto& name : books) tables.push_back(matrix_to_json(p.weights.at(name).value()));
        j["codebook"] = tables;
    }
    for (const char* part : {"encoder", "decoder"}) {
        nlohmann::json layers = nlohmann::json::object();
        const std::string prefix = std::string(part) + ".";
        for (const auto& [name, v] : p.weights) {
            if (name.rfind(prefix, 0) != 0) continue;
            const std::string rest = name.substr(prefix.size());
            const auto dot = rest.rfind('.');
            layers[rest.substr(0, dot)][rest.substr(dot + 1)] = matrix_to_json(v.value());
        }
        j[part] = layers;
    }
    return j;
}

TokenizerParams tokenizer_from_json(const nlohmann::json& j) {
    try {
        TokenizerParams p;
        p.config = TokenizerConfig::from_json(j.at("config"));
        if (j.at("K").get<int>() != p.config.codebook_size || j.at("dim").get<int>() != p.config.dim ||
            j.at("depth").get<int>() != p.config.depth || j.at("downsample").get<int>() != p.config.downsample) {
            throw ValidationError("tokenizer header disagrees with its config block");
        }
        p.step = j.value("step", 0L);
        const auto& sk = j.at("skeleton");
        p.skeleton.num_joints = sk.at("num_joints").get<int>();
        p.skeleton.fps = sk.at("fps").get<double>();
        p.skeleton.contact_joints = sk.at("contact_joints").get<std::array<int, 4>>();
        p.skeleton.validate();
        p.feature_mean = json_to_matrix(j.at("normalization").at("mean"));
        p.feature_std = json_to_matrix(j.at("normalization").at("std"));
        if (p.config.shared_codebook) {
            p.weights.add("codebook", json_to_matrix(j.at("codebook")));
        } else {
            const auto& tables = j.at("codebook");
            for (std::size_t d = 0; d < tables.size(); ++d) {
                p.weights.add("codebook." + std::to_string(d), json_to_matrix(tables[d]));
            }
        }
        for (const char* part : {"encoder", "decoder"}) {
            for (const auto& [layer, tensors] : j.at(part).items()) {
                for (const auto& [kind, value] : tensors.items()) {
                    p.weights.add(std::string(part) + "." + layer + "." + kind, json_to_matrix(value));
                }
            }
        }
        // Shapes must match a freshly initialized network of the same config.
        const TokenizerParams ref = init_tokenizer(p.config, p.skeleton);
        for (const auto& [name, v] : ref.weights) {
            if (!p.weights.contains(name)) throw ValidationError("tokenizer file lacks tensor " + name);
            const auto& got = p.weights.at(name).value();
            if (got.rows() != v.rows() || got.cols() != v.cols()) {
                throw ValidationError("tokenizer tensor " + name + " has the wrong shape");
            }
        }
        if (p.weights.size() != ref.weights.size()) throw ValidationError("tokenizer file has unexpected tensors");
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed tokenizer file: ") + e.what());
    }
}

void save_tokenizer(const std::filesystem::path& path, const TokenizerParams& params) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << tokenizer_to_json(params).dump() << '\n';
}

TokenizerParams load_tokenizer(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("tokenizer file is not valid JSON: " + std::string(e.what()));
    }
    return tokenizer_from_json(j);
}

}  // namespace duet
