#include "p3d/rng.hpp"

#include <cmath>
#include <sstream>

namespace p3d {

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw std::runtime_error("uniform_int: empty range");
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling to avoid modulo bias.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Rng Rng::fork() {
    const uint64_t a = engine_();
    const uint64_t b = engine_();
    return Rng(a ^ (b * 0x9E3779B97F4A7C15ull));
}

std::string Rng::serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (is.fail()) throw std::runtime_error("Rng::deserialize: bad state string");
}

}  // namespace p3d
