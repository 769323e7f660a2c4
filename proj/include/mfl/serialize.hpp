#pragma once

// Ensemble persistence: a columnar CSV (header w_0..w_{d_w-1},
// theta_0..theta_{d_theta-1}) and a compact binary format with a 16-byte
// header (magic u32, version u32, m u32, d_w u16, d_theta u16) followed by
// m * (d_w + d_theta) little-endian float64 payload, particle-major.

#include "mfl/ensemble.hpp"

#include <iosfwd>
#include <string>

namespace mfl {

inline constexpr std::uint32_t kEnsembleMagic = 0x454e534dU;  // "ENSM"
inline constexpr std::uint32_t kEnsembleVersion = 1;

void write_ensemble_csv(const Ensemble& ens, std::ostream& out);
void write_ensemble_csv(const Ensemble& ens, const std::string& path);
Ensemble read_ensemble_csv(std::istream& in);
Ensemble read_ensemble_csv(const std::string& path);

void write_ensemble_binary(const Ensemble& ens, std::ostream& out);
void write_ensemble_binary(const Ensemble& ens, const std::string& path);
Ensemble read_ensemble_binary(std::istream& in);
Ensemble read_ensemble_binary(const std::string& path);

}  // namespace mfl
