#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ogflow/errors.hpp"
#include "ogflow/geometry.hpp"
#include "ogflow/random.hpp"
#include "ogflow/tensor.hpp"

// Synthetic-occlusion pair construction, procedural scene generation with
// exact ground truth, and the OGF1 on-disk pair format.

namespace ogflow {

/// A source/target cloud pair. Ground truth, when present, is aligned with
/// the source (gt_occlusion: 1 = non-occluded).
template <typename T>
struct ScenePair {
    PointCloud<T> source;
    PointCloud<T> target;
    std::optional<FlowField<T>> gt_flow;      // [N,3]
    std::optional<OcclusionMask<T>> gt_occlusion; // [N]

    template <typename U>
    ScenePair<U> cast() const {
        ScenePair<U> out;
        out.source = source.template cast<U>();
        out.target = target.template cast<U>();
        if (gt_flow) out.gt_flow = gt_flow->template cast<U>();
        if (gt_occlusion) out.gt_occlusion = gt_occlusion->template cast<U>();
        return out;
    }
};

/// Parameters for building a synthetic target from a source: one rigid
/// translation of fixed magnitude, then k-NN removal around random centers.
struct SyntheticPairSpec {
    double translation_magnitude = 2.0;
    int num_centers = 4;
    double removal_fraction = 0.025; // per center, fraction of N
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(translation_magnitude > 0.0))
            throw ConfigError("synthetic pair: translation magnitude must be > 0");
        if (num_centers < 0) throw ConfigError("synthetic pair: num_centers must be >= 0");
        if (removal_fraction < 0.0 || static_cast<double>(num_centers) * removal_fraction >= 1.0)
            throw ConfigError("synthetic pair: total removal must stay below 1.0");
    }
};

/// Translates the whole source by a random fixed-magnitude direction, then
/// removes the k-NN regions around num_centers random points of the
/// translated cloud. Returns (S, T~) with exact flow and occlusion labels.
template <typename T>
ScenePair<T> make_synthetic_pair(const PointCloud<T>& source, const SyntheticPairSpec& spec) {
    spec.validate();
    const std::size_t n = source.size();
    Rng rng(spec.rng_seed);

    const auto dir = rng.unit_sphere();
    std::array<T, 3> u{static_cast<T>(dir[0] * spec.translation_magnitude),
                       static_cast<T>(dir[1] * spec.translation_magnitude),
                       static_cast<T>(dir[2] * spec.translation_magnitude)};

    Tensor<T> translated = source.positions;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < 3; ++d) translated.v[i * 3 + d] += u[d];

    std::vector<bool> removed(n, false);
    const std::size_t per_center =
        static_cast<std::size_t>(std::ceil(spec.removal_fraction * static_cast<double>(n)));
    if (spec.num_centers > 0 && per_center > 0) {
        const auto centers =
            rng.sample_without_replacement(n, std::min<std::size_t>(spec.num_centers, n));
        const IndexMatrix<T> nn =
            knn_search(translated, translated, std::min(per_center, n));
        for (std::size_t c : centers)
            for (std::size_t j = 0; j < nn.cols; ++j) removed[nn.index(c, j)] = true;
    }

    std::size_t kept = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (!removed[i]) ++kept;
    if (kept == 0) throw ConfigError("make_synthetic_pair: removal left no target points");

    const std::size_t fd = source.feature_dim();
    ScenePair<T> pair;
    pair.source = source;
    pair.target.positions = Tensor<T>(Shape{kept, 3});
    pair.target.features = Tensor<T>(Shape{kept, fd});
    std::size_t w = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (removed[i]) continue;
        for (std::size_t d = 0; d < 3; ++d)
            pair.target.positions.v[w * 3 + d] = translated.v[i * 3 + d];
        for (std::size_t d = 0; d < fd; ++d)
            pair.target.features.v[w * fd + d] = source.features.v[i * fd + d];
        ++w;
    }

    FlowField<T> flow(Shape{n, 3});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < 3; ++d) flow.v[i * 3 + d] = u[d];
    OcclusionMask<T> occ(Shape{n});
    for (std::size_t i = 0; i < n; ++i) occ.v[i] = removed[i] ? T(0) : T(1);
    pair.gt_flow = std::move(flow);
    pair.gt_occlusion = std::move(occ);
    return pair;
}

/// Procedural desk-scale scene: 1..max rigid primitives sampled as point
/// sets, each given a rigid translation; target points leaving the viewing
/// box are cropped and the corresponding source points labeled occluded.
struct SceneSpec {
    std::size_t num_points = 256;
    double box_half_extent = 1.5;  // viewing box [-e, e]^3
    double motion_scale = 0.4;     // max translation magnitude per primitive
    int min_primitives = 1;
    int max_primitives = 4;
    double min_occlusion_fraction = 0.0; // 0 disables the retry loop
    double max_occlusion_fraction = 1.0;
    int max_retries = 64;

    void validate() const {
        if (num_points < 1) throw ConfigError("scene spec: num_points must be >= 1");
        if (!(box_half_extent > 0.0)) throw ConfigError("scene spec: box extent must be > 0");
        if (motion_scale < 0.0) throw ConfigError("scene spec: motion scale must be >= 0");
        if (min_primitives < 1 || max_primitives < min_primitives)
            throw ConfigError("scene spec: invalid primitive count range");
        if (min_occlusion_fraction < 0.0 || min_occlusion_fraction >= 1.0 ||
            max_occlusion_fraction <= min_occlusion_fraction)
            throw ConfigError("scene spec: occlusion fraction window must satisfy 0 <= min < max");
    }
};

namespace detail {

/// Samples one primitive fully inside the viewing box. Half of the
/// primitives hug a random wall so that outward motion actually crops
/// points.
template <typename T>
void sample_primitive(Rng& rng, double box, std::size_t count, Tensor<T>& pos, std::size_t offset) {
    const bool sphere = rng.uniform() < 0.5;
    const double extent = rng.uniform(0.15, 0.4) * box;
    std::array<double, 3> center;
    for (auto& c : center) c = rng.uniform(-(box - extent), box - extent);
    if (rng.uniform() < 0.5) {
        const int axis = static_cast<int>(rng.uniform_index(3));
        center[axis] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (box - extent);
    }
    for (std::size_t i = 0; i < count; ++i) {
        std::array<double, 3> p;
        if (sphere) {
            const auto d = rng.unit_sphere();
            const double r = extent * std::cbrt(rng.uniform()); // uniform in the ball
            for (int a = 0; a < 3; ++a) p[a] = center[a] + r * d[a];
        } else {
            for (int a = 0; a < 3; ++a) p[a] = center[a] + rng.uniform(-extent, extent);
        }
        for (int a = 0; a < 3; ++a) pos.v[(offset + i) * 3 + a] = static_cast<T>(p[a]);
    }
}

} // namespace detail

template <typename T>
ScenePair<T> gen_scene(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t n = spec.num_points;
    const double box = spec.box_half_extent;

    for (int attempt = 0;; ++attempt) {
        Rng rng(derive_seed(seed, 0x5CE11E, static_cast<std::uint64_t>(attempt)));
        const int prims =
            spec.min_primitives +
            static_cast<int>(rng.uniform_index(spec.max_primitives - spec.min_primitives + 1));

        Tensor<T> src(Shape{n, 3});
        std::vector<std::array<T, 3>> motion(n);
        std::size_t offset = 0;
        for (int p = 0; p < prims; ++p) {
            const std::size_t count = (p == prims - 1) ? (n - offset) : n / prims;
            detail::sample_primitive(rng, box, count, src, offset);
            const auto dir = rng.unit_sphere();
            const double mag = rng.uniform(0.5 * spec.motion_scale, spec.motion_scale);
            const std::array<T, 3> u{static_cast<T>(dir[0] * mag), static_cast<T>(dir[1] * mag),
                                     static_cast<T>(dir[2] * mag)};
            for (std::size_t i = offset; i < offset + count; ++i) motion[i] = u;
            offset += count;
        }

        FlowField<T> flow(Shape{n, 3});
        OcclusionMask<T> occ(Shape{n});
        std::vector<T> tgt;
        tgt.reserve(n * 3);
        std::size_t occluded = 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::array<T, 3> moved;
            bool inside = true;
            for (int a = 0; a < 3; ++a) {
                flow.v[i * 3 + a] = motion[i][a];
                moved[a] = src.v[i * 3 + a] + motion[i][a];
                inside = inside && std::abs(static_cast<double>(moved[a])) <= box;
            }
            occ.v[i] = inside ? T(1) : T(0);
            if (inside) {
                tgt.insert(tgt.end(), moved.begin(), moved.end());
            } else {
                ++occluded;
            }
        }

        const double frac = static_cast<double>(occluded) / static_cast<double>(n);
        const bool in_window = frac >= spec.min_occlusion_fraction &&
                               frac <= spec.max_occlusion_fraction && occluded < n;
        const bool window_active =
            spec.min_occlusion_fraction > 0.0 || spec.max_occlusion_fraction < 1.0;
        if (!in_window && window_active && attempt + 1 < spec.max_retries) continue;
        if (occluded == n) {
            if (attempt + 1 < spec.max_retries) continue;
            throw ConfigError("gen_scene: every point left the viewing box");
        }

        const std::size_t m = n - occluded;
        Tensor<T> tgt_pos(Shape{m, 3}, std::vector<T>(tgt.begin(), tgt.end()));

        ScenePair<T> pair;
        pair.source = PointCloud<T>(std::move(src));
        pair.target = PointCloud<T>(std::move(tgt_pos));
        pair.gt_flow = std::move(flow);
        pair.gt_occlusion = std::move(occ);
        return pair;
    }
}

// ---------------------------------------------------------------------------
// OGF1 pair format (little-endian):
//   magic "OGF1" | u32 version=1 | u32 n1 | u32 n2 | u8 flags
//   f32 source[n1*3] | f32 target[n2*3]
//   (flags bit0) f32 flow[n1*3] | (flags bit1) f32 occlusion[n1]

namespace detail {

inline void put_u32(std::string& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, const std::vector<float>& xs) {
    static_assert(sizeof(float) == 4);
    const std::size_t base = out.size();
    out.resize(base + xs.size() * 4);
    std::memcpy(out.data() + base, xs.data(), xs.size() * 4);
}

class ByteReader {
public:
    ByteReader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}
    std::uint32_t u32() {
        need(4, "header");
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i)
            x |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return x;
    }
    std::uint8_t u8() {
        need(1, "header");
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::vector<float> f32(std::size_t count, const char* what) {
        need(count * 4, what);
        std::vector<float> out(count);
        std::memcpy(out.data(), buf_.data() + pos_, count * 4);
        pos_ += count * 4;
        return out;
    }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t bytes, const char* what) {
        if (buf_.size() - pos_ < bytes)
            throw TruncatedFileError(path_ + ": truncated " + what + " block (need " +
                                     std::to_string(bytes) + " bytes, have " +
                                     std::to_string(buf_.size() - pos_) + ")");
    }
    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline constexpr char kPairMagic[4] = {'O', 'G', 'F', '1'};
inline constexpr std::uint32_t kPairVersion = 1;

inline void write_pair(const ScenePair<float>& pair, const std::string& path) {
    const std::size_t n1 = pair.source.size();
    const std::size_t n2 = pair.target.size();
    if (!pair.source.positions.all_finite() || !pair.target.positions.all_finite())
        throw NumericError("write_pair: non-finite positions");
    std::string buf;
    buf.append(kPairMagic, 4);
    detail::put_u32(buf, kPairVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(n1));
    detail::put_u32(buf, static_cast<std::uint32_t>(n2));
    std::uint8_t flags = 0;
    if (pair.gt_flow) flags |= 1;
    if (pair.gt_occlusion) flags |= 2;
    buf.push_back(static_cast<char>(flags));
    detail::put_f32(buf, pair.source.positions.v);
    detail::put_f32(buf, pair.target.positions.v);
    if (pair.gt_flow) {
        if (pair.gt_flow->shape != Shape{n1, 3})
            throw InconsistentFileError("write_pair: flow shape does not match source");
        detail::put_f32(buf, pair.gt_flow->v);
    }
    if (pair.gt_occlusion) {
        if (pair.gt_occlusion->shape != Shape{n1})
            throw InconsistentFileError("write_pair: occlusion shape does not match source");
        detail::put_f32(buf, pair.gt_occlusion->v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_pair: cannot open " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write_pair: write failed for " + path);
}

inline ScenePair<float> read_pair(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_pair: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 || std::memcmp(buf.data(), kPairMagic, 4) != 0)
        throw BadMagicError(path + ": not an OGF1 pair file");
    detail::ByteReader r(buf, path);
    r.u32(); // magic, already checked
    const std::uint32_t version = r.u32();
    if (version != kPairVersion)
        throw InconsistentFileError(path + ": unsupported OGF1 version " + std::to_string(version));
    const std::uint32_t n1 = r.u32();
    const std::uint32_t n2 = r.u32();
    const std::uint8_t flags = r.u8();
    if (n1 == 0 || n2 == 0)
        throw InconsistentFileError(path + ": empty point cloud (n1=" + std::to_string(n1) +
                                    ", n2=" + std::to_string(n2) + ")");
    if (flags & ~0x3u)
        throw InconsistentFileError(path + ": unknown flag bits set");
    ScenePair<float> pair;
    pair.source = PointCloud<float>(Tensor<float>(Shape{n1, 3}, r.f32(n1 * 3, "source")));
    pair.target = PointCloud<float>(Tensor<float>(Shape{n2, 3}, r.f32(n2 * 3, "target")));
    if (flags & 1) pair.gt_flow = Tensor<float>(Shape{n1, 3}, r.f32(n1 * 3, "flow"));
    if (flags & 2) pair.gt_occlusion = Tensor<float>(Shape{n1}, r.f32(n1, "occlusion"));
    if (r.remaining() != 0)
        throw InconsistentFileError(path + ": " + std::to_string(r.remaining()) +
                                    " trailing bytes");
    return pair;
}

} // namespace ogflow
