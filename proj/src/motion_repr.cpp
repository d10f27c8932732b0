#include "duet/motion_repr.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <Eigen/Geometry>
#include "json.hpp"

#include "duet/errors.hpp"

namespace duet {

namespace {

constexpr double kRotationTolerance = 1e-6;
constexpr double kDegenerateNorm = 1e-8;

void check_track_shape(const JointTrack& positions, int num_joints, const char* what) {
    for (std::size_t t = 0; t < positions.size(); ++t) {
        if (static_cast<int>(positions[t].size()) != num_joints) {
            throw ValidationError(std::string(what) + ": frame " + std::to_string(t) + " has " +
                                  std::to_string(positions[t].size()) + " joints, expected " +
                                  std::to_string(num_joints));
        }
    }
}

}  // namespace

void SkeletonSpec::validate() const {
    if (num_joints <= 0) throw ValidationError("skeleton: num_joints must be positive");
    if (!(fps > 0.0) || !std::isfinite(fps)) throw ValidationError("skeleton: fps must be positive");
    std::set<int> seen;
    for (int j : contact_joints) {
        if (j < 0 || j >= num_joints) throw ValidationError("skeleton: contact joint index out of range");
        if (!seen.insert(j).second) throw ValidationError("skeleton: contact joint indices must be distinct");
    }
}

Eigen::VectorXd MotionFrame::features() const {
    const int n = num_joints();
    Eigen::VectorXd out(feature_width(n));
    for (int j = 0; j < n; ++j) {
        out.segment<3>(3 * j) = positions[j];
        out.segment<3>(3 * n + 3 * j) = velocities[j];
        out.segment<6>(6 * n + 6 * j) = rotations6d[j];
    }
    for (int c = 0; c < 4; ++c) out(12 * n + c) = contacts[c];
    return out;
}

MotionFrame MotionFrame::from_features(const Eigen::Ref<const Eigen::VectorXd>& features, int num_joints) {
    if (features.size() != feature_width(num_joints)) {
        throw ValidationError("frame has " + std::to_string(features.size()) + " features, expected " +
                              std::to_string(feature_width(num_joints)));
    }
    const int n = num_joints;
    MotionFrame frame;
    frame.positions.resize(n);
    frame.velocities.resize(n);
    frame.rotations6d.resize(n);
    for (int j = 0; j < n; ++j) {
        frame.positions[j] = features.segment<3>(3 * j);
        frame.velocities[j] = features.segment<3>(3 * n + 3 * j);
        frame.rotations6d[j] = features.segment<6>(6 * n + 6 * j);
    }
    // Decoded contacts are continuous; threshold back to flags.
    for (int c = 0; c < 4; ++c) frame.contacts[c] = features(12 * n + c) >= 0.5 ? 1 : 0;
    return frame;
}

void MotionClip::validate() const {
    skeleton.validate();
    if (frames.empty()) throw ValidationError("motion clip must have at least one frame");
    const auto n = static_cast<std::size_t>(skeleton.num_joints);
    for (std::size_t t = 0; t < frames.size(); ++t) {
        const auto& f = frames[t];
        if (f.positions.size() != n || f.velocities.size() != n || f.rotations6d.size() != n) {
            throw ValidationError("frame " + std::to_string(t) + " does not match skeleton joint count");
        }
        for (auto c : f.contacts) {
            if (c > 1) throw ValidationError("contact flags must be 0 or 1");
        }
    }
}

FeatureMatrix MotionClip::feature_matrix() const {
    FeatureMatrix out(length(), feature_width(skeleton.num_joints));
    for (int t = 0; t < length(); ++t) out.row(t) = frames[t].features().transpose();
    return out;
}

MotionClip MotionClip::from_feature_matrix(const FeatureMatrix& features, const SkeletonSpec& skeleton) {
    MotionClip clip;
    clip.skeleton = skeleton;
    clip.frames.reserve(features.rows());
    for (Eigen::Index t = 0; t < features.rows(); ++t) {
        Eigen::VectorXd row = features.row(t).transpose();
        clip.frames.push_back(MotionFrame::from_features(row, skeleton.num_joints));
    }
    return clip;
}

JointTrack MotionClip::positions() const {
    JointTrack out;
    out.reserve(frames.size());
    for (const auto& f : frames) out.push_back(f.positions);
    return out;
}

MotionClip MotionClip::slice(int begin, int end) const {
    if (begin < 0 || end > length() || begin >= end) throw ValidationError("invalid frame range for slice");
    MotionClip out;
    out.skeleton = skeleton;
    out.frames.assign(frames.begin() + begin, frames.begin() + end);
    return out;
}

void InteractiveClip::validate() const {
    person_a.validate();
    person_b.validate();
    if (person_a.length() != person_b.length()) throw ValidationError("persons differ in frame count");
    if (person_a.skeleton.num_joints != person_b.skeleton.num_joints) {
        throw ValidationError("persons differ in joint count");
    }
    if (person_a.skeleton.fps != person_b.skeleton.fps) throw ValidationError("persons differ in fps");
}

Vec6 rotation_to_6d(const Mat3& rotation) {
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    const double det = rotation.determinant();
    if (!(ortho <= kRotationTolerance) || !(std::abs(det - 1.0) <= kRotationTolerance)) {
        throw ValidationError("rotation_to_6d: input is not a proper rotation");
    }
    Vec6 v;
    v.head<3>() = rotation.col(0);
    v.tail<3>() = rotation.col(1);
    return v;
}

Mat3 sixd_to_rotation(const Vec6& v) {
    const Vec3 a1 = v.head<3>();
    const Vec3 a2 = v.tail<3>();
    const double n1 = a1.norm();
    if (!(n1 > kDegenerateNorm)) throw DegeneracyError("sixd_to_rotation: first column is zero");
    const Vec3 b1 = a1 / n1;
    const Vec3 u = a2 - b1.dot(a2) * b1;
    const double nu = u.norm();
    if (!(a2.norm() > kDegenerateNorm) || !(nu > kDegenerateNorm * std::max(1.0, a2.norm()))) {
        throw DegeneracyError("sixd_to_rotation: columns are zero or parallel");
    }
    const Vec3 b2 = u / nu;
    Mat3 r;
    r.col(0) = b1;
    r.col(1) = b2;
    r.col(2) = b1.cross(b2);
    return r;
}

JointTrack compute_velocities(const JointTrack& positions, double fps) {
    const std::size_t m = positions.size();
    JointTrack out(m);
    if (m == 0) return out;
    const std::size_t n = positions[0].size();
    check_track_shape(positions, static_cast<int>(n), "compute_velocities");
    if (m == 1) {
        out[0].assign(n, Vec3::Zero());
        return out;
    }
    for (std::size_t t = 0; t + 1 < m; ++t) {
        out[t].resize(n);
        for (std::size_t j = 0; j < n; ++j) out[t][j] = (positions[t + 1][j] - positions[t][j]) * fps;
    }
    out[m - 1] = out[m - 2];
    return out;
}

std::vector<ContactFlags> detect_contacts(const JointTrack& positions, const SkeletonSpec& skeleton,
                                          const ContactThresholds& thresholds) {
    skeleton.validate();
    check_track_shape(positions, skeleton.num_joints, "detect_contacts");
    const JointTrack velocities = compute_velocities(positions, skeleton.fps);
    std::vector<ContactFlags> out(positions.size());
    for (std::size_t t = 0; t < positions.size(); ++t) {
        for (int c = 0; c < 4; ++c) {
            const int j = skeleton.contact_joints[c];
            const bool slow = velocities[t][j].norm() < thresholds.max_speed;
            const bool low = positions[t][j](thresholds.up_axis) < thresholds.max_height;
            out[t][c] = (slow && low) ? 1 : 0;
        }
    }
    return out;
}

MotionClip assemble_clip(const JointTrack& positions, const RotationTrack& rotations, const SkeletonSpec& skeleton,
                         const ContactThresholds& thresholds) {
    skeleton.validate();
    if (positions.empty()) throw ValidationError("assemble_clip: no frames");
    if (rotations.size() != positions.size()) {
        throw ValidationError("assemble_clip: positions and rotations differ in frame count");
    }
    check_track_shape(positions, skeleton.num_joints, "assemble_clip positions");
    for (std::size_t t = 0; t < rotations.size(); ++t) {
        if (static_cast<int>(rotations[t].size()) != skeleton.num_joints) {
            throw ValidationError("assemble_clip rotations: frame " + std::to_string(t) + " joint count mismatch");
        }
    }
    const JointTrack velocities = compute_velocities(positions, skeleton.fps);
    const auto contacts = detect_contacts(positions, skeleton, thresholds);

    MotionClip clip;
    clip.skeleton = skeleton;
    clip.frames.resize(positions.size());
    for (std::size_t t = 0; t < positions.size(); ++t) {
        auto& f = clip.frames[t];
        f.positions = positions[t];
        f.velocities = velocities[t];
        f.rotations6d.resize(skeleton.num_joints);
        for (int j = 0; j < skeleton.num_joints; ++j) f.rotations6d[j] = rotation_to_6d(rotations[t][j]);
        f.contacts = contacts[t];
    }
    return clip;
}

InteractiveClip MotionRecord::as_interactive() const {
    if (persons.size() == 2) return InteractiveClip{persons[0], persons[1]};
    if (persons.size() == 1) return InteractiveClip{persons[0], persons[0]};
    throw ValidationError("motion record has no persons");
}

MotionRecord MotionRecord::single(MotionClip clip) {
    MotionRecord r;
    r.persons.push_back(std::move(clip));
    return r;
}

MotionRecord MotionRecord::pair(InteractiveClip clip) {
    MotionRecord r;
    r.persons.push_back(std::move(clip.person_a));
    r.persons.push_back(std::move(clip.person_b));
    return r;
}

std::string motion_to_json_text(const MotionRecord& record) {
    if (record.persons.empty() || record.persons.size() > 2) {
        throw ValidationError("motion record must hold one or two persons");
    }
    const auto& sk = record.persons.front().skeleton;
    for (const auto& p : record.persons) {
        p.validate();
        if (p.skeleton.num_joints != sk.num_joints || p.skeleton.fps != sk.fps ||
            p.length() != record.persons.front().length()) {
            throw ValidationError("persons in a motion record must share fps, joint count and length");
        }
    }
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", sk.fps);
    os << "{\"fps\": " << buf << ", \"num_joints\": " << sk.num_joints << ", \"contact_joints\": ["
       << sk.contact_joints[0] << ", " << sk.contact_joints[1] << ", " << sk.contact_joints[2] << ", "
       << sk.contact_joints[3] << "], \"persons\": [";
    for (std::size_t p = 0; p < record.persons.size(); ++p) {
        if (p) os << ", ";
        os << "{\"frames\": [";
        const auto& frames = record.persons[p].frames;
        for (std::size_t t = 0; t < frames.size(); ++t) {
            if (t) os << ", ";
            os << '[';
            const Eigen::VectorXd f = frames[t].features();
            for (Eigen::Index i = 0; i < f.size(); ++i) {
                if (i) os << ',';
                std::snprintf(buf, sizeof buf, "%.9g", f(i));
                os << buf;
            }
            os << ']';
        }
        os << "]}";
    }
    os << "]}\n";
    return os.str();
}

MotionRecord motion_from_json_text(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("motion file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("fps") || !doc.contains("num_joints") || !doc.contains("persons")) {
        throw ValidationError("motion file requires fps, num_joints and persons");
    }
    SkeletonSpec sk;
    sk.fps = doc.at("fps").get<double>();
    sk.num_joints = doc.at("num_joints").get<int>();
    if (doc.contains("contact_joints")) sk.contact_joints = doc.at("contact_joints").get<std::array<int, 4>>();
    sk.validate();
    const auto& persons = doc.at("persons");
    if (!persons.is_array() || persons.empty() || persons.size() > 2) {
        throw ValidationError("motion file must list one or two persons");
    }
    const int width = feature_width(sk.num_joints);
    MotionRecord record;
    for (const auto& p : persons) {
        const auto& frames = p.at("frames");
        FeatureMatrix m(static_cast<Eigen::Index>(frames.size()), width);
        for (std::size_t t = 0; t < frames.size(); ++t) {
            const auto& row = frames[t];
            if (!row.is_array() || static_cast<int>(row.size()) != width) {
                throw ValidationError("motion frame " + std::to_string(t) + " has wrong feature width");
            }
            for (int i = 0; i < width; ++i) m(static_cast<Eigen::Index>(t), i) = row[i].get<double>();
        }
        MotionClip clip = MotionClip::from_feature_matrix(m, sk);
        clip.validate();
        record.persons.push_back(std::move(clip));
    }
    if (record.persons.size() == 2 && record.persons[0].length() != record.persons[1].length()) {
        throw ValidationError("persons in a motion file must have equal length");
    }
    return record;
}

MotionRecord read_motion_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open motion file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return motion_from_json_text(ss.str());
}

void write_motion_file(const std::filesystem::path& path, const MotionRecord& record) {
    const std::string text = motion_to_json_text(record);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write motion file " + path.string());
    out << text;
}

}  // namespace duet
