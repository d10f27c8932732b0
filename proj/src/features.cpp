#include "duet/features.hpp"

#include <cctype>
#include <random>

#include "duet/errors.hpp"
#include "duet/params.hpp"

namespace duet {

ReferenceExtractor::ReferenceExtractor(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw ValidationError("feature dimension must be positive");
}

Eigen::VectorXd ReferenceExtractor::clip_statistics(const MotionRecord& motion) {
    if (motion.persons.empty() || motion.persons.front().length() == 0) throw ValidationError("empty motion");
    const int joints = motion.persons.front().skeleton.num_joints;
    Eigen::VectorXd stats(2 * 9 * joints);
    for (int p = 0; p < 2; ++p) {
        const MotionClip& clip = motion.persons[motion.persons.size() == 2 ? static_cast<std::size_t>(p) : 0];
        const double m = static_cast<double>(clip.length());
        for (int j = 0; j < joints; ++j) {
            Vec3 sum = Vec3::Zero(), sq = Vec3::Zero(), speed = Vec3::Zero();
            for (const MotionFrame& f : clip.frames) {
                const Vec3& x = f.positions[static_cast<std::size_t>(j)];
                sum += x;
                sq += x.cwiseProduct(x);
                speed += f.velocities[static_cast<std::size_t>(j)].cwiseAbs();
            }
            const Vec3 mean = sum / m;
            const Vec3 var = (sq / m - mean.cwiseProduct(mean)).cwiseMax(0.0);
            const Eigen::Index o = static_cast<Eigen::Index>(p * 9 * joints + 9 * j);
            stats.segment<3>(o) = mean;
            stats.segment<3>(o + 3) = var.cwiseSqrt();
            stats.segment<3>(o + 6) = speed / m;
        }
    }
    return stats;
}

Eigen::VectorXd ReferenceExtractor::motion_features(const MotionRecord& motion) const {
    const Eigen::VectorXd stats = clip_statistics(motion);
    std::mt19937_64 rng(derive_seed(seed_, 0xfea7, static_cast<std::uint64_t>(stats.size())));
    const ag::Matrix proj = random_normal(dim_, stats.size(), 1.0 / std::sqrt(static_cast<double>(stats.size())), rng);
    return proj * stats;
}

Eigen::VectorXd ReferenceExtractor::text_features(const std::string& text) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(dim_);
    std::string word;
    int words = 0;
    auto flush = [&] {
        if (word.empty()) return;
        std::mt19937_64 rng(derive_seed(seed_, 0x7e47, fnv1a64(word)));
        out += random_normal(dim_, 1, 1.0, rng).col(0);
        ++words;
        word.clear();
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else flush();
    }
    flush();
    if (words > 0) out /= static_cast<double>(words);
    return out;
}

void StubRetrieval::bind(const MotionRecord& motion, const std::string& caption) {
    const std::string key = content_hash(motion_to_json_text(motion));
    std::lock_guard lock(mutex_);
    captions_[key] = caption;
}

Eigen::VectorXd StubRetrieval::motion_features(const MotionRecord& motion) const {
    const std::string key = content_hash(motion_to_json_text(motion));
    std::string caption;
    {
        std::lock_guard lock(mutex_);
        auto it = captions_.find(key);
        if (it == captions_.end()) return base_.motion_features(motion);
        caption = it->second;
    }
    return base_.text_features(caption);
}

}  // namespace duet
