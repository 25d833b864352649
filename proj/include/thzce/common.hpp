// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#pragma once

#include <Eigen/Dense>
#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace thzce {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;

inline constexpr double kSpeedOfLight = 299792458.0; // m/s

// Error taxonomy. The CLI maps these onto exit codes (1/2/3).
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic random numbers.
//
// All stochastic code draws through Rng so that results are reproducible
// bit-for-bit across runs. Distribution transforms are hand-rolled (53-bit
// uniform, Box-Muller normal) because the std:: distributions are not pinned
// by the standard.

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Seed-splitting contract: stream i of a master seed.
inline std::uint64_t split_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(master + 0x9E3779B97F4A7C15ull * (index + 1));
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller pair; second value cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * uniform();
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::complex<double> cnormal(double variance) {
        const double s = std::sqrt(variance / 2.0);
        return {s * normal(), s * normal()};
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = eng_();
        while (x >= lim) x = eng_();
        return x % n;
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Fisher-Yates with a pinned algorithm (std::shuffle is not reproducible
// across standard libraries).
template <typename T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

// ---------------------------------------------------------------------------
// Real embedding of complex vectors: z -> [Re(z); Im(z)].

inline Vec real_embed(const CVec& z) {
    Vec out(2 * z.size());
    out.head(z.size()) = z.real();
    out.tail(z.size()) = z.imag();
    return out;
}

inline CVec real_unembed(const Vec& x) {
    if (x.size() % 2 != 0) throw std::invalid_argument("real_unembed: odd length");
    const Eigen::Index n = x.size() / 2;
    CVec z(n);
    z.real() = x.head(n);
    z.imag() = x.tail(n);
    return z;
}

// Real embedding of a complex matrix: [[Re, -Im], [Im, Re]].
inline Mat real_embed(const CMat& a) {
    Mat out(2 * a.rows(), 2 * a.cols());
    out.topLeftCorner(a.rows(), a.cols()) = a.real();
    out.topRightCorner(a.rows(), a.cols()) = -a.imag();
    out.bottomLeftCorner(a.rows(), a.cols()) = a.imag();
    out.bottomRightCorner(a.rows(), a.cols()) = a.real();
    return out;
}

inline double to_db(double x) { return 10.0 * std::log10(x); }

// ---------------------------------------------------------------------------
// Binary container: 8-byte magic, u64 little-endian JSON length, JSON text,
// then a raw little-endian f32 blob. Shared by ensembles, dataset shards and
// weight files.

inline constexpr char kContainerMagic[8] = {'T', 'H', 'Z', 'C', 'E', 'B', 'I', 'N'};

void write_container(const std::string& path, const std::string& json_text,
                     const std::vector<float>& blob);

// Returns the JSON text and the blob.
std::pair<std::string, std::vector<float>> read_container(const std::string& path);

// FNV-1a 64-bit digest, hex-encoded. Used to fingerprint configs in outputs.
inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace thzce
