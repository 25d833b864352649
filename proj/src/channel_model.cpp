// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/channel_model.hpp"

#include <cmath>

namespace thzce {

namespace {

int exact_sqrt(int n) {
    const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    return (r * r == n) ? r : -1;
}

// e^{-j 2 pi x} with the argument reduced before the trig calls; x can be of
// order f_c * tau ~ 3e4 where the raw product would waste precision.
std::complex<double> cis_neg_twopi(double x) {
    const double frac = x - std::floor(x);
    const double a = -2.0 * M_PI * frac;
    return {std::cos(a), std::sin(a)};
}

} // namespace

void ArrayGeometry::validate() const {
    if (num_subarrays < 1 || exact_sqrt(num_subarrays) < 0)
        throw std::invalid_argument("ArrayGeometry: S must be a perfect square >= 1");
    if (aes_per_subarray < 1 || exact_sqrt(aes_per_subarray) < 0)
        throw std::invalid_argument("ArrayGeometry: S_bar must be a perfect square >= 1");
    if (ae_spacing <= 0 || sa_spacing <= 0)
        throw std::invalid_argument("ArrayGeometry: spacings must be positive");
    if (carrier_freq <= 0)
        throw std::invalid_argument("ArrayGeometry: carrier frequency must be positive");
}

int ArrayGeometry::sa_side() const { return exact_sqrt(num_subarrays); }
int ArrayGeometry::ae_side() const { return exact_sqrt(aes_per_subarray); }

void MaterialModel::validate() const {
    if (absorption < 0) throw std::invalid_argument("MaterialModel: k_abs must be >= 0");
    if (roughness < 0) throw std::invalid_argument("MaterialModel: roughness must be >= 0");
    if (refractive_index.real() <= 0)
        throw std::invalid_argument("MaterialModel: Re(n_t) must be positive");
}

void SamplingConfig::validate() const {
    if (num_paths < 1) throw std::invalid_argument("SamplingConfig: L must be >= 1");
    if (los_distance <= 0) throw std::invalid_argument("SamplingConfig: r_1 must be positive");
    if (nlos_distance[0] <= 0 || nlos_distance[1] < nlos_distance[0])
        throw std::invalid_argument("SamplingConfig: bad NLoS distance range");
}

Eigen::Vector3d ae_coordinate(const ArrayGeometry& geom, int s, int s_bar) {
    geom.validate();
    const int sa = geom.sa_side();
    const int ae = geom.ae_side();
    if (s < 1 || s > geom.num_subarrays)
        throw std::invalid_argument("ae_coordinate: SA index out of range");
    if (s_bar < 1 || s_bar > geom.aes_per_subarray)
        throw std::invalid_argument("ae_coordinate: AE index out of range");
    const int m = (s - 1) / sa;      // zero-based row of the SA
    const int n = (s - 1) % sa;      // zero-based column
    const int mb = (s_bar - 1) / ae; // zero-based row of the AE
    const int nb = (s_bar - 1) % ae;
    const double pitch = (ae - 1) * geom.ae_spacing + geom.sa_spacing;
    return {m * pitch + mb * geom.ae_spacing, n * pitch + nb * geom.ae_spacing, 0.0};
}

double rayleigh_distance(const ArrayGeometry& geom) {
    geom.validate();
    // Largest pairwise AE distance = diagonal between the origin AE and the
    // opposite corner AE.
    const Eigen::Vector3d corner =
        ae_coordinate(geom, geom.num_subarrays, geom.aes_per_subarray);
    const double diag = std::hypot(corner.x(), corner.y());
    return 2.0 * diag * diag / geom.wavelength();
}

double path_loss(const MaterialModel& material, double carrier_freq, double r_1,
                 std::complex<double> reflection) {
    if (r_1 <= 0) throw std::invalid_argument("path_loss: r_1 must be positive");
    const double spread = kSpeedOfLight / (4.0 * M_PI * carrier_freq * r_1);
    const double absorb = std::exp(-0.5 * material.absorption * r_1);
    return std::abs(reflection) * spread * absorb;
}

std::complex<double> reflection_coefficient(const MaterialModel& material,
                                            double carrier_freq, double incidence) {
    const std::complex<double> nt = material.refractive_index;
    const double cos_in = std::cos(incidence);
    const std::complex<double> sin_ref = std::sin(incidence) / nt;
    const std::complex<double> cos_ref = std::sqrt(1.0 - sin_ref * sin_ref);
    const std::complex<double> fresnel =
        (cos_in - nt * cos_ref) / (cos_in + nt * cos_ref);
    const double f2 = carrier_freq * carrier_freq;
    const double rough = std::exp(-8.0 * M_PI * M_PI * f2 * material.roughness *
                                  material.roughness * cos_in * cos_in /
                                  (kSpeedOfLight * kSpeedOfLight));
    return fresnel * rough;
}

namespace {

Eigen::Vector3d aoa_direction(double azimuth, double elevation) {
    return {std::sin(elevation) * std::cos(azimuth),
            std::sin(elevation) * std::sin(azimuth), std::cos(elevation)};
}

} // namespace

CVec array_response_far(const ArrayGeometry& geom, double azimuth, double elevation) {
    geom.validate();
    const double k = geom.carrier_freq / kSpeedOfLight; // cycles per meter
    const Eigen::Vector3d t = aoa_direction(azimuth, elevation);
    CVec a(geom.num_antennas());
    for (int s = 1; s <= geom.num_subarrays; ++s)
        for (int sb = 1; sb <= geom.aes_per_subarray; ++sb) {
            // Planar wavefront: relative advance p.t toward the source.
            const Eigen::Vector3d p = ae_coordinate(geom, s, sb);
            a[(s - 1) * geom.aes_per_subarray + (sb - 1)] = cis_neg_twopi(-p.dot(t) * k);
        }
    return a;
}

CVec array_response_near(const ArrayGeometry& geom, double azimuth, double elevation,
                         double distance) {
    geom.validate();
    if (distance <= 0) throw std::invalid_argument("array_response: distance must be positive");
    const double k = geom.carrier_freq / kSpeedOfLight;
    const Eigen::Vector3d t = aoa_direction(azimuth, elevation);
    CVec a(geom.num_antennas());
    for (int s = 1; s <= geom.num_subarrays; ++s)
        for (int sb = 1; sb <= geom.aes_per_subarray; ++sb) {
            // Spherical wavefront: exact distance to the source at r*t.
            const Eigen::Vector3d p = ae_coordinate(geom, s, sb);
            a[(s - 1) * geom.aes_per_subarray + (sb - 1)] =
                cis_neg_twopi((p - distance * t).norm() * k);
        }
    return a;
}

CVec array_response(const ArrayGeometry& geom, double azimuth, double elevation,
                    double distance) {
    if (distance <= 0) throw std::invalid_argument("array_response: distance must be positive");
    return distance > rayleigh_distance(geom)
               ? array_response_far(geom, azimuth, elevation)
               : array_response_near(geom, azimuth, elevation, distance);
}

AngularTransform::AngularTransform(const ArrayGeometry& geom)
    : AngularTransform(geom.num_subarrays, geom.aes_per_subarray) {}

AngularTransform::AngularTransform(int num_subarrays, int aes_per_subarray) {
    num_subarrays_ = num_subarrays;
    block_ = aes_per_subarray;
    const int side = exact_sqrt(aes_per_subarray);
    if (num_subarrays < 1 || side < 0)
        throw std::invalid_argument("AngularTransform: S_bar must be a perfect square");
    CMat dft(side, side);
    const double scale = 1.0 / std::sqrt(static_cast<double>(side));
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
            dft(r, c) = scale * cis_neg_twopi(static_cast<double>(r) * c / side);
    // 2-D transform of each sqrt(S_bar) x sqrt(S_bar) plane: kron(D, D).
    u_.resize(block_, block_);
    for (int r1 = 0; r1 < side; ++r1)
        for (int c1 = 0; c1 < side; ++c1)
            for (int r2 = 0; r2 < side; ++r2)
                for (int c2 = 0; c2 < side; ++c2)
                    u_(r1 * side + r2, c1 * side + c2) = dft(r1, c1) * dft(r2, c2);
}

CVec AngularTransform::apply(const CVec& spatial) const {
    if (spatial.size() != static_cast<Eigen::Index>(num_subarrays_) * block_)
        throw std::invalid_argument("AngularTransform::apply: length mismatch");
    CVec out(spatial.size());
    for (int s = 0; s < num_subarrays_; ++s)
        out.segment(s * block_, block_).noalias() = u_ * spatial.segment(s * block_, block_);
    return out;
}

CVec AngularTransform::inverse(const CVec& angular) const {
    if (angular.size() != static_cast<Eigen::Index>(num_subarrays_) * block_)
        throw std::invalid_argument("AngularTransform::inverse: length mismatch");
    CVec out(angular.size());
    for (int s = 0; s < num_subarrays_; ++s)
        out.segment(s * block_, block_).noalias() =
            u_.adjoint() * angular.segment(s * block_, block_);
    return out;
}

ChannelRealization synthesize_channel(const ArrayGeometry& geom,
                                      const MaterialModel& material,
                                      const SamplingConfig& sampling,
                                      std::uint64_t seed) {
    geom.validate();
    material.validate();
    sampling.validate();
    Rng rng(seed);

    ChannelRealization out;
    out.paths.reserve(sampling.num_paths);

    for (int l = 0; l < sampling.num_paths; ++l) {
        PathParams p;
        p.is_los = (l == 0);
        if (p.is_los) {
            p.reflection = {1.0, 0.0};
            p.distance = sampling.los_distance;
            p.delay = sampling.los_delay;
            p.azimuth = rng.uniform(sampling.azimuth[0], sampling.azimuth[1]);
            p.elevation = rng.uniform(sampling.elevation[0], sampling.elevation[1]);
        } else {
            p.azimuth = rng.uniform(sampling.azimuth[0], sampling.azimuth[1]);
            p.elevation = rng.uniform(sampling.elevation[0], sampling.elevation[1]);
            p.distance = rng.uniform(sampling.nlos_distance[0], sampling.nlos_distance[1]);
            p.delay = rng.uniform(sampling.nlos_delay[0], sampling.nlos_delay[1]);
            const double inc = rng.uniform(sampling.incidence[0], sampling.incidence[1]);
            p.reflection = reflection_coefficient(material, geom.carrier_freq, inc);
        }
        p.gain = path_loss(material, geom.carrier_freq, sampling.los_distance, p.reflection);
        out.paths.push_back(p);
    }

    const int n = geom.num_antennas();
    CVec h = CVec::Zero(n);
    for (const PathParams& p : out.paths) {
        const std::complex<double> rot = cis_neg_twopi(geom.carrier_freq * p.delay);
        h += (p.gain * rot) * array_response(geom, p.azimuth, p.elevation, p.distance);
    }

    const double norm = h.norm();
    if (norm == 0.0) throw numerical_error("synthesize_channel: zero channel");
    out.norm_factor = std::sqrt(static_cast<double>(n)) / norm;
    out.spatial = out.norm_factor * h;
    out.angular = AngularTransform(geom).apply(out.spatial);
    return out;
}

} // namespace thzce
