#include "duet/synthetic.hpp"

#include <cmath>
#include <random>

#include <Eigen/Geometry>

#include "duet/params.hpp"

namespace duet {

std::vector<Vec3> rest_pose(int num_joints) {
    std::vector<Vec3> pose(static_cast<std::size_t>(num_joints));
    for (int j = 0; j < num_joints; ++j) {
        // Spread joints over a 0.4 m x 1.7 m column; feet sit on the ground.
        const double side = (j % 2 == 0 ? -1.0 : 1.0) * 0.1 * static_cast<double>(1 + j % 3);
        const double height = 0.9 + 0.8 * std::sin(0.37 * j);
        pose[static_cast<std::size_t>(j)] = Vec3(side, std::max(0.0, height), 0.05 * static_cast<double>(j % 4));
    }
    return pose;
}

MotionClip sinusoid_person(const SinusoidSpec& spec, int frames, const SkeletonSpec& skeleton) {
    const int n = skeleton.num_joints;
    auto pose = rest_pose(n);
    for (int c : skeleton.contact_joints) pose[static_cast<std::size_t>(c)].y() = 0.02;
    const Mat3 heading = Eigen::AngleAxisd(spec.heading, Vec3::UnitY()).toRotationMatrix();
    JointTrack positions(static_cast<std::size_t>(frames), std::vector<Vec3>(static_cast<std::size_t>(n)));
    RotationTrack rotations(static_cast<std::size_t>(frames), std::vector<Mat3>(static_cast<std::size_t>(n)));
    for (int t = 0; t < frames; ++t) {
        const double time = static_cast<double>(t) / skeleton.fps;
        const double w = 2.0 * M_PI * spec.frequency * time + spec.phase;
        const Vec3 root = spec.root_offset + heading * Vec3(0.3 * spec.amplitude * std::sin(0.5 * w), 0.0, 0.0);
        for (int j = 0; j < n; ++j) {
            const double swing = spec.amplitude * std::sin(w + 0.4 * j);
            Vec3 local = pose[static_cast<std::size_t>(j)];
            const bool foot = std::find(skeleton.contact_joints.begin(), skeleton.contact_joints.end(), j) !=
                              skeleton.contact_joints.end();
            if (foot) {
                local.z() += 0.5 * swing;
                local.y() += std::max(0.0, 0.5 * swing);
            } else {
                local += Vec3(0.3 * swing, 0.2 * spec.amplitude * std::cos(w + 0.2 * j), swing);
            }
            positions[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] = root + heading * local;
            rotations[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] =
                heading * Eigen::AngleAxisd(0.6 * std::sin(w + 0.3 * j), Vec3::UnitX()).toRotationMatrix();
        }
    }
    return assemble_clip(positions, rotations, skeleton);
}

InteractiveClip sinusoid_pair(std::uint64_t seed, int frames, const SkeletonSpec& skeleton) {
    std::mt19937_64 rng(derive_seed(seed, 0x5105));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SinusoidSpec a;
    a.frequency = 0.3 + 0.9 * u(rng);
    a.phase = 2.0 * M_PI * u(rng);
    a.amplitude = 0.1 + 0.3 * u(rng);
    a.heading = 0.0;
    a.root_offset = Vec3(-0.6, 0.0, 0.0);
    SinusoidSpec b = a;
    b.frequency = a.frequency * (0.8 + 0.4 * u(rng));
    b.phase = a.phase + M_PI * u(rng);
    b.amplitude = 0.1 + 0.3 * u(rng);
    b.heading = M_PI;
    b.root_offset = Vec3(0.6, 0.0, 0.0);
    return InteractiveClip{sinusoid_person(a, frames, skeleton), sinusoid_person(b, frames, skeleton)};
}

std::vector<InteractiveClip> sinusoid_dataset(int count, int frames, std::uint64_t seed, const SkeletonSpec& skeleton) {
    std::vector<InteractiveClip> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(sinusoid_pair(derive_seed(seed, 0xda7a, static_cast<std::uint64_t>(i)), frames, skeleton));
    return out;
}

}  // namespace duet
