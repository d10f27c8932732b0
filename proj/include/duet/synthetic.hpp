#pragma once

#include <cstdint>
#include <vector>

#include "duet/motion_repr.hpp"

namespace duet {

/// Knobs of the procedural two-person generator used for offline data.
struct SinusoidSpec {
    double frequency = 0.5;  // Hz
    double phase = 0.0;
    double amplitude = 0.2;  // m
    double heading = 0.0;    // rad about the up axis
    Vec3 root_offset = Vec3::Zero();
};

/// Rest pose of a generic standing skeleton; joint 0 is the pelvis.
std::vector<Vec3> rest_pose(int num_joints);

MotionClip sinusoid_person(const SinusoidSpec& spec, int frames, const SkeletonSpec& skeleton);
/// Two facing persons driven by specs derived from `seed`.
InteractiveClip sinusoid_pair(std::uint64_t seed, int frames, const SkeletonSpec& skeleton = {});
std::vector<InteractiveClip> sinusoid_dataset(int count, int frames, std::uint64_t seed,
                                              const SkeletonSpec& skeleton = {});

}  // namespace duet
