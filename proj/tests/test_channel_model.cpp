// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/channel_model.hpp"

#include <doctest.h>

#include <cmath>

using namespace thzce;

namespace {

ArrayGeometry table1_geometry() {
    return ArrayGeometry{4, 256, 5.0e-4, 5.6e-2, 3.0e11};
}

MaterialModel table1_material() {
    return MaterialModel{0.0033, {2.24, -0.025}, 8.8e-5};
}

} // namespace

TEST_CASE("ae_coordinate: origin, subarray pitch and AE pitch") {
    const ArrayGeometry g = table1_geometry();

    const Eigen::Vector3d origin = ae_coordinate(g, 1, 1);
    CHECK(origin.norm() == 0.0);

    // SA index 2 is the (row 1, col 2) subarray: offset along y by the pitch
    // (sqrt(S_bar)-1)*d_a + d_sub = 15*5e-4 + 5.6e-2 = 0.0635.
    const Eigen::Vector3d sa2 = ae_coordinate(g, 2, 1);
    CHECK(sa2.x() == 0.0);
    CHECK(sa2.y() == doctest::Approx(0.0635).epsilon(1e-12));
    CHECK(sa2.z() == 0.0);

    // AE index 2 within a subarray: one AE spacing along y.
    const Eigen::Vector3d ae2 = ae_coordinate(g, 1, 2);
    CHECK(ae2.x() == 0.0);
    CHECK(ae2.y() == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(ae2.z() == 0.0);

    CHECK_THROWS_AS(ae_coordinate(g, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(ae_coordinate(g, 1, 257), std::invalid_argument);
}

TEST_CASE("rayleigh distance: reference geometry gives about 20 m") {
    const double d = rayleigh_distance(table1_geometry());
    CHECK(d == doctest::Approx(20.0).epsilon(0.02));
}

TEST_CASE("rayleigh distance: single AE has zero aperture") {
    ArrayGeometry g{1, 1, 5e-4, 5.6e-2, 3e11};
    CHECK(rayleigh_distance(g) == 0.0);
}

TEST_CASE("rayleigh distance: doubling the aperture quadruples it") {
    ArrayGeometry g = table1_geometry();
    ArrayGeometry g2 = g;
    g2.ae_spacing *= 2;
    g2.sa_spacing *= 2;
    CHECK(rayleigh_distance(g2) == doctest::Approx(4.0 * rayleigh_distance(g)).epsilon(1e-12));
}

TEST_CASE("path loss: direct evaluation, absorbing reflector, zero absorption") {
    const MaterialModel m = table1_material();
    const double fc = 3e11, r1 = 30.0;

    // independent scalar oracle
    const double expect = (kSpeedOfLight / (4.0 * M_PI * fc * r1)) * std::exp(-0.5 * 0.0033 * r1);
    CHECK(path_loss(m, fc, r1, {1.0, 0.0}) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(path_loss(m, fc, r1, {1.0, 0.0}) == doctest::Approx(2.5245e-6).epsilon(0.002));

    CHECK(path_loss(m, fc, r1, {0.0, 0.0}) == 0.0);

    MaterialModel clear = m;
    clear.absorption = 0.0;
    CHECK(path_loss(clear, fc, r1, {1.0, 0.0}) ==
          doctest::Approx(kSpeedOfLight / (4.0 * M_PI * fc * r1)).epsilon(1e-12));

    CHECK_THROWS_AS(path_loss(m, fc, -1.0, {1.0, 0.0}), std::invalid_argument);
}

TEST_CASE("reflection coefficient: normal incidence magnitude and smooth limit") {
    const MaterialModel m = table1_material();
    const double fc = 3e11;

    // complex-arithmetic oracle at normal incidence
    const std::complex<double> nt = m.refractive_index;
    const std::complex<double> fresnel = (1.0 - nt) / (1.0 + nt);
    const double rough =
        std::exp(-8.0 * M_PI * M_PI * fc * fc * m.roughness * m.roughness /
                 (kSpeedOfLight * kSpeedOfLight));
    const std::complex<double> got = reflection_coefficient(m, fc, 0.0);
    CHECK(std::abs(got - fresnel * rough) <= 1e-12);
    CHECK(std::abs(got) == doctest::Approx(0.208).epsilon(0.01));

    MaterialModel smooth = m;
    smooth.roughness = 0.0;
    CHECK(std::abs(reflection_coefficient(smooth, fc, 0.0) - fresnel) <= 1e-12);
}

TEST_CASE("reflection coefficient magnitude never exceeds one") {
    const MaterialModel m = table1_material();
    for (int k = 0; k < 64; ++k) {
        const double phi = (M_PI / 2) * k / 64.0;
        CHECK(std::abs(reflection_coefficient(m, 3e11, phi)) <= 1.0 + 1e-12);
    }
}

TEST_CASE("array response: boresight gives the all-ones vector") {
    const ArrayGeometry g = table1_geometry();
    const CVec a = array_response(g, 1.234, 0.0, 100.0); // far field, theta = 0
    for (Eigen::Index i = 0; i < a.size(); ++i)
        CHECK(std::abs(a[i] - std::complex<double>(1.0, 0.0)) <= 1e-12);
}

TEST_CASE("array response: half-wavelength offset flips the sign") {
    // theta = pi/2, phi = 0: AE one ae-spacing along x sits half a wavelength
    // away, so its element is -1 (up to the c vs 3e8 rounding in the spacing).
    const ArrayGeometry g = table1_geometry();
    const CVec a = array_response(g, 0.0, M_PI / 2, 100.0);
    const int idx = g.ae_side(); // AE at row 2, col 1 of SA 1: x = d_a
    CHECK(std::abs(a[idx] - std::complex<double>(-1.0, 0.0)) < 1e-2);
}

TEST_CASE("array response elements are unit modulus in both field regions") {
    const ArrayGeometry g{4, 16, 5e-4, 5.6e-2, 3e11};
    Rng rng(3);
    for (int k = 0; k < 10; ++k) {
        const CVec a = array_response(g, rng.uniform(-M_PI, M_PI),
                                      rng.uniform(-M_PI / 2, M_PI / 2),
                                      rng.uniform(0.5, 40.0));
        for (Eigen::Index i = 0; i < a.size(); ++i)
            CHECK(std::abs(std::abs(a[i]) - 1.0) <= 1e-12);
    }
    CHECK_THROWS_AS(array_response(g, 0, 0, 0.0), std::invalid_argument);
}

TEST_CASE("near-field response converges to the far-field response") {
    const ArrayGeometry g = table1_geometry();
    const double dray = rayleigh_distance(g);
    const CVec far = array_response_far(g, 0.7, 1.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double mult : {2.0, 10.0, 100.0}) {
        CVec near = array_response_near(g, 0.7, 1.0, mult * dray);
        near /= near[0]; // align global phase at the origin AE
        double worst = 0.0;
        for (Eigen::Index i = 0; i < near.size(); ++i)
            worst = std::max(worst, std::abs(std::arg(near[i] * std::conj(far[i]))));
        CHECK(worst < prev);
        prev = worst;
    }
    CHECK(prev < 1e-2); // at 100x Rayleigh the forms agree closely
}

TEST_CASE("synthesize_channel: single boresight far path is a scaled ones vector") {
    const ArrayGeometry g{4, 16, 5e-4, 5.6e-2, 3e11};
    SamplingConfig s;
    s.num_paths = 1;
    s.elevation = {0.0, 0.0}; // theta = 0 exactly
    const ChannelRealization ch = synthesize_channel(g, table1_material(), s, 77);

    CHECK(ch.paths.size() == 1);
    CHECK(ch.paths[0].is_los);
    CHECK(ch.spatial.squaredNorm() ==
          doctest::Approx(double(g.num_antennas())).epsilon(1e-9));
    for (Eigen::Index i = 1; i < ch.spatial.size(); ++i)
        CHECK(std::abs(ch.spatial[i] - ch.spatial[0]) <= 1e-12);
}

TEST_CASE("synthesize_channel: NLoS distances straddle the 20 m boundary as drawn") {
    // The scatterer-distance law U(10, 25) puts 2/3 of its mass below 20 m.
    // Geometry does not affect the draw, so a small array keeps this cheap.
    const ArrayGeometry g{1, 4, 5e-4, 5.6e-2, 3e11};
    SamplingConfig s; // reference defaults, L = 5
    int near = 0, total = 0;
    for (int k = 0; k < 10000; ++k) {
        const ChannelRealization ch = synthesize_channel(g, table1_material(), s, 5000 + k);
        for (const PathParams& p : ch.paths)
            if (!p.is_los) {
                ++total;
                if (p.distance < 20.0) ++near;
            }
    }
    CHECK(total == 4 * 10000);
    CHECK(static_cast<double>(near) / total == doctest::Approx(2.0 / 3.0).epsilon(0.03));
}

TEST_CASE("synthesize_channel: identical seeds give identical realizations") {
    const ArrayGeometry g{4, 16, 5e-4, 5.6e-2, 3e11};
    const SamplingConfig s;
    const ChannelRealization a = synthesize_channel(g, table1_material(), s, 99);
    const ChannelRealization b = synthesize_channel(g, table1_material(), s, 99);
    CHECK(a.spatial == b.spatial);
    CHECK(a.angular == b.angular);
    CHECK(a.norm_factor == b.norm_factor);
    const ChannelRealization c = synthesize_channel(g, table1_material(), s, 100);
    CHECK(a.spatial != c.spatial);
}

TEST_CASE("synthesize_channel rejects L < 1") {
    SamplingConfig s;
    s.num_paths = 0;
    CHECK_THROWS_AS(synthesize_channel(ArrayGeometry{1, 4, 5e-4, 5.6e-2, 3e11},
                                       table1_material(), s, 1),
                    std::invalid_argument);
}

TEST_CASE("angular transform: zero, unitarity and round trip") {
    const ArrayGeometry g{4, 16, 5e-4, 5.6e-2, 3e11};
    const AngularTransform t(g);

    CHECK(t.apply(CVec::Zero(g.num_antennas())).norm() == 0.0);

    Rng rng(13);
    for (int k = 0; k < 5; ++k) {
        CVec v(g.num_antennas());
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.cnormal(1.0);
        const CVec w = t.apply(v);
        CHECK(std::abs(w.norm() - v.norm()) <= 1e-10 * v.norm());
        CHECK((t.inverse(w) - v).norm() <= 1e-10 * v.norm());
    }
    CHECK_THROWS_AS(t.apply(CVec::Zero(3)), std::invalid_argument);

    // channel realizations carry h_bar = F^H h_tilde
    const ChannelRealization ch = synthesize_channel(g, table1_material(), {}, 21);
    CHECK((ch.angular - t.apply(ch.spatial)).norm() <= 1e-10 * ch.angular.norm());
}

TEST_CASE("geometry validation rejects non-square and non-positive parameters") {
    CHECK_THROWS_AS((ArrayGeometry{3, 16, 5e-4, 5.6e-2, 3e11}).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS((ArrayGeometry{4, 15, 5e-4, 5.6e-2, 3e11}).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS((ArrayGeometry{4, 16, 0.0, 5.6e-2, 3e11}).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS((ArrayGeometry{4, 16, 5e-4, 5.6e-2, -1.0}).validate(),
                    std::invalid_argument);
}
