// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Hybrid far/near-field THz channel synthesis for a planar array-of-subarrays
// (AoSA): geometry, path loss, reflection, far/near array responses and the
// per-subarray angular-domain transform.

#pragma once

#include "thzce/common.hpp"

#include <array>
#include <complex>
#include <cstdint>
#include <vector>

namespace thzce {

// Planar AoSA: sqrt(S) x sqrt(S) subarrays, each a sqrt(S_bar) x sqrt(S_bar)
// uniform planar array of antenna elements. The first AE of the first SA sits
// at the origin; the panel lies in the x-y plane.
struct ArrayGeometry {
    int num_subarrays = 4;        // S, perfect square
    int aes_per_subarray = 256;   // S_bar, perfect square
    double ae_spacing = 5.0e-4;   // d_a [m]
    double sa_spacing = 5.6e-2;   // d_sub [m]
    double carrier_freq = 3.0e11; // f_c [Hz]

    void validate() const;

    int num_antennas() const { return num_subarrays * aes_per_subarray; }
    int sa_side() const;  // sqrt(S)
    int ae_side() const;  // sqrt(S_bar)
    double wavelength() const { return kSpeedOfLight / carrier_freq; }
};

// Reflecting material for NLoS paths.
struct MaterialModel {
    double absorption = 0.0033;                       // k_abs [1/m]
    std::complex<double> refractive_index = {2.24, -0.025}; // n_t
    double roughness = 8.8e-5;                        // sigma_rough [m]

    void validate() const;
};

struct PathParams {
    double gain = 0.0;        // alpha_l
    double azimuth = 0.0;     // phi_l [rad]
    double elevation = 0.0;   // theta_l [rad]
    double distance = 0.0;    // r_l [m]
    double delay = 0.0;       // tau_l [s]
    std::complex<double> reflection = {1.0, 0.0}; // Gamma_l
    bool is_los = false;
};

struct ChannelRealization {
    std::vector<PathParams> paths;
    CVec spatial;      // h_tilde, length S*S_bar, ||h||^2 = S*S_bar
    CVec angular;      // h_bar = F^H h_tilde
    double norm_factor = 0.0; // gamma
};

// Distributions for synthesize_channel; defaults reproduce the reference
// simulation setup.
struct SamplingConfig {
    int num_paths = 5;             // L, first path is LoS
    double los_distance = 30.0;    // r_1 [m]
    double los_delay = 100e-9;     // tau_1 [s]
    std::array<double, 2> nlos_distance = {10.0, 25.0};   // r_l ~ U [m]
    std::array<double, 2> nlos_delay = {100e-9, 110e-9};  // tau_l ~ U [s]
    std::array<double, 2> elevation = {-M_PI / 2, M_PI / 2}; // theta_l ~ U
    std::array<double, 2> azimuth = {-M_PI, M_PI};            // phi_l ~ U
    std::array<double, 2> incidence = {0.0, M_PI / 2};        // phi_in,l ~ U

    void validate() const;
};

// Per-subarray 2-D angular transform. apply() computes h_bar = F^H h_tilde
// where F^H = blkdiag(U, ..., U) and U is the Kronecker product of two
// normalized DFT matrices of size sqrt(S_bar).
class AngularTransform {
  public:
    explicit AngularTransform(const ArrayGeometry& geom);
    AngularTransform(int num_subarrays, int aes_per_subarray);

    CVec apply(const CVec& spatial) const;   // h_bar = F^H h_tilde
    CVec inverse(const CVec& angular) const; // h_tilde = F h_bar

    const CMat& subarray_matrix() const { return u_; }

  private:
    int num_subarrays_;
    int block_;
    CMat u_; // S_bar x S_bar unitary
};

// Coordinate of AE s_bar in SA s (1-based indices), Cartesian meters.
Eigen::Vector3d ae_coordinate(const ArrayGeometry& geom, int s, int s_bar);

// 2 D^2 / lambda_c with D the largest AE-to-AE distance (panel diagonal).
double rayleigh_distance(const ArrayGeometry& geom);

// Spread + molecular absorption loss; the LoS length r_1 enters both factors
// for every path.
double path_loss(const MaterialModel& material, double carrier_freq, double r_1,
                 std::complex<double> reflection);

// Fresnel reflection with Rayleigh roughness attenuation; the refraction
// angle is evaluated in complex arithmetic (principal branch).
std::complex<double> reflection_coefficient(const MaterialModel& material,
                                            double carrier_freq, double incidence);

// Far-field (planar wavefront) response beyond the Rayleigh distance,
// near-field (spherical wavefront) response inside it. Every element has
// unit modulus. Indexing follows ae_coordinate: entry (s-1)*S_bar + (s_bar-1).
CVec array_response(const ArrayGeometry& geom, double azimuth, double elevation,
                    double distance);

// The two wavefront forms individually (array_response selects by distance).
// After global-phase alignment the spherical form approaches the planar one
// as the distance grows.
CVec array_response_far(const ArrayGeometry& geom, double azimuth, double elevation);
CVec array_response_near(const ArrayGeometry& geom, double azimuth, double elevation,
                         double distance);

// Superposition of one LoS path and L-1 stochastic NLoS paths, normalized so
// that ||h_tilde||^2 = S*S_bar. Identical seeds yield identical realizations.
ChannelRealization synthesize_channel(const ArrayGeometry& geom,
                                      const MaterialModel& material,
                                      const SamplingConfig& sampling,
                                      std::uint64_t seed);

} // namespace thzce
