#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>

#include <Eigen/Dense>

#include "duet/motion_repr.hpp"

namespace duet {

/// Joint embedding space for motions and captions (the role a trained retrieval
/// model plays). Implementations must be safe to call from several threads.
class FeatureExtractor {
  public:
    virtual ~FeatureExtractor() = default;
    virtual int dim() const = 0;
    virtual Eigen::VectorXd motion_features(const MotionRecord& motion) const = 0;
    virtual Eigen::VectorXd text_features(const std::string& text) const = 0;
};

/// Fixed random projection of clip statistics (per-joint position mean, spread
/// and mean speed for each person) and of hashed lower-cased words.
class ReferenceExtractor : public FeatureExtractor {
  public:
    explicit ReferenceExtractor(int dim = 64, std::uint64_t seed = 0);
    int dim() const override { return dim_; }
    Eigen::VectorXd motion_features(const MotionRecord& motion) const override;
    Eigen::VectorXd text_features(const std::string& text) const override;

    static Eigen::VectorXd clip_statistics(const MotionRecord& motion);

  private:
    int dim_;
    std::uint64_t seed_;
};

/// Motions registered with bind() embed exactly onto their caption's text
/// features; anything else falls back to the reference projection. Stands in
/// for a trained retrieval model in offline pipelines.
class StubRetrieval : public FeatureExtractor {
  public:
    explicit StubRetrieval(int dim = 64, std::uint64_t seed = 0) : base_(dim, seed) {}
    int dim() const override { return base_.dim(); }
    void bind(const MotionRecord& motion, const std::string& caption);
    Eigen::VectorXd motion_features(const MotionRecord& motion) const override;
    Eigen::VectorXd text_features(const std::string& text) const override { return base_.text_features(text); }

  private:
    ReferenceExtractor base_;
    mutable std::mutex mutex_;
    std::map<std::string, std::string> captions_;
};

}  // namespace duet
