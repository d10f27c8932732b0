#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

namespace duet {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
/// Row-major feature matrix: one row per frame.
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Frames x joints.
using JointTrack = std::vector<std::vector<Vec3>>;
using RotationTrack = std::vector<std::vector<Mat3>>;
using ContactFlags = std::array<std::uint8_t, 4>;

struct SkeletonSpec {
    int num_joints = 22;
    /// Left heel, left toe, right heel, right toe.
    std::array<int, 4> contact_joints{7, 10, 8, 11};
    double fps = 30.0;

    void validate() const;
    bool operator==(const SkeletonSpec&) const = default;
};

struct ContactThresholds {
    double max_speed = 0.05;   // m/s
    double max_height = 0.08;  // m
    int up_axis = 1;           // y-up
};

/// Number of features per frame for `num_joints` joints: positions, velocities, 6D rotations, contacts.
constexpr int feature_width(int num_joints) { return 12 * num_joints + 4; }

struct MotionFrame {
    std::vector<Vec3> positions;
    std::vector<Vec3> velocities;
    std::vector<Vec6> rotations6d;
    ContactFlags contacts{};

    int num_joints() const { return static_cast<int>(positions.size()); }
    /// positions | velocities | rotations6d | contacts
    Eigen::VectorXd features() const;
    static MotionFrame from_features(const Eigen::Ref<const Eigen::VectorXd>& features, int num_joints);
};

struct MotionClip {
    SkeletonSpec skeleton;
    std::vector<MotionFrame> frames;

    int length() const { return static_cast<int>(frames.size()); }
    void validate() const;

    FeatureMatrix feature_matrix() const;
    static MotionClip from_feature_matrix(const FeatureMatrix& features, const SkeletonSpec& skeleton);

    JointTrack positions() const;
    /// Frames [begin, end).
    MotionClip slice(int begin, int end) const;
};

struct InteractiveClip {
    MotionClip person_a;
    MotionClip person_b;

    int length() const { return person_a.length(); }
    void validate() const;
};

Vec6 rotation_to_6d(const Mat3& rotation);
Mat3 sixd_to_rotation(const Vec6& v);

/// Forward differences scaled by fps; last frame copies its predecessor; a single frame gets zeros.
JointTrack compute_velocities(const JointTrack& positions, double fps);

std::vector<ContactFlags> detect_contacts(const JointTrack& positions, const SkeletonSpec& skeleton,
                                          const ContactThresholds& thresholds = {});

MotionClip assemble_clip(const JointTrack& positions, const RotationTrack& rotations, const SkeletonSpec& skeleton,
                         const ContactThresholds& thresholds = {});

/// Contents of a ".motion.json" file: one or two persons sharing fps and joint count.
struct MotionRecord {
    std::vector<MotionClip> persons;

    bool interactive() const { return persons.size() == 2; }
    InteractiveClip as_interactive() const;
    static MotionRecord single(MotionClip clip);
    static MotionRecord pair(InteractiveClip clip);
};

MotionRecord read_motion_file(const std::filesystem::path& path);
void write_motion_file(const std::filesystem::path& path, const MotionRecord& record);
std::string motion_to_json_text(const MotionRecord& record);
MotionRecord motion_from_json_text(const std::string& text);

}  // namespace duet
