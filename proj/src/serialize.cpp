#include "mfl/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace mfl {

namespace {

std::ofstream open_out(const std::string& path, std::ios::openmode mode) {
    std::ofstream f(path, mode);
    if (!f) throw ValidationError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode) {
    std::ifstream f(path, mode);
    if (!f) throw ValidationError("cannot open for reading: " + path);
    return f;
}

static_assert(std::endian::native == std::endian::little,
              "binary ensemble format assumes a little-endian host");

template <typename T>
void put_raw(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ValidationError("truncated ensemble binary stream");
    return v;
}

}  // namespace

void write_ensemble_csv(const Ensemble& ens, std::ostream& out) {
    ens.validate();
    for (int j = 0; j < ens.d_w; ++j) out << (j ? "," : "") << "w_" << j;
    for (int j = 0; j < ens.d_theta; ++j) out << ",theta_" << j;
    out << "\n";
    for (const Particle& p : ens.particles) {
        for (int j = 0; j < ens.d_w; ++j) out << (j ? "," : "") << format_double(p.w[j]);
        for (int j = 0; j < ens.d_theta; ++j) out << "," << format_double(p.theta[j]);
        out << "\n";
    }
}

void write_ensemble_csv(const Ensemble& ens, const std::string& path) {
    auto f = open_out(path, std::ios::out);
    write_ensemble_csv(ens, f);
}

Ensemble read_ensemble_csv(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw ValidationError("empty ensemble CSV");
    int d_w = 0, d_theta = 0;
    {
        std::stringstream hs(header);
        std::string col;
        while (std::getline(hs, col, ',')) {
            if (col.rfind("w_", 0) == 0)
                ++d_w;
            else if (col.rfind("theta_", 0) == 0)
                ++d_theta;
            else
                throw ValidationError("unexpected ensemble CSV column: " + col);
        }
    }
    if (d_w == 0 || d_theta == 0) throw ValidationError("ensemble CSV header lacks w_/theta_ columns");

    Ensemble ens;
    ens.d_w = d_w;
    ens.d_theta = d_theta;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string cell;
        Particle p{Vec(d_w), Vec(d_theta)};
        for (int j = 0; j < d_w + d_theta; ++j) {
            if (!std::getline(ls, cell, ',')) throw ValidationError("short row in ensemble CSV");
            double v = std::stod(cell);
            if (j < d_w)
                p.w[j] = v;
            else
                p.theta[j - d_w] = v;
        }
        ens.particles.push_back(std::move(p));
    }
    ens.validate();
    return ens;
}

Ensemble read_ensemble_csv(const std::string& path) {
    auto f = open_in(path, std::ios::in);
    return read_ensemble_csv(f);
}

void write_ensemble_binary(const Ensemble& ens, std::ostream& out) {
    ens.validate();
    if (ens.d_w > 0xffff || ens.d_theta > 0xffff)
        throw ValidationError("dimensions exceed the binary format's u16 header fields");
    put_raw<std::uint32_t>(out, kEnsembleMagic);
    put_raw<std::uint32_t>(out, kEnsembleVersion);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ens.m()));
    put_raw<std::uint16_t>(out, static_cast<std::uint16_t>(ens.d_w));
    put_raw<std::uint16_t>(out, static_cast<std::uint16_t>(ens.d_theta));
    for (const Particle& p : ens.particles) {
        out.write(reinterpret_cast<const char*>(p.w.data()), sizeof(double) * ens.d_w);
        out.write(reinterpret_cast<const char*>(p.theta.data()), sizeof(double) * ens.d_theta);
    }
}

void write_ensemble_binary(const Ensemble& ens, const std::string& path) {
    auto f = open_out(path, std::ios::out | std::ios::binary);
    write_ensemble_binary(ens, f);
}

Ensemble read_ensemble_binary(std::istream& in) {
    if (get_raw<std::uint32_t>(in) != kEnsembleMagic)
        throw ValidationError("bad magic in ensemble binary stream");
    if (get_raw<std::uint32_t>(in) != kEnsembleVersion)
        throw ValidationError("unsupported ensemble binary version");
    const auto m = get_raw<std::uint32_t>(in);
    const int d_w = get_raw<std::uint16_t>(in);
    const int d_theta = get_raw<std::uint16_t>(in);
    Ensemble ens;
    ens.d_w = d_w;
    ens.d_theta = d_theta;
    ens.particles.resize(m);
    for (auto& p : ens.particles) {
        p.w = Vec(d_w);
        p.theta = Vec(d_theta);
        in.read(reinterpret_cast<char*>(p.w.data()), sizeof(double) * d_w);
        in.read(reinterpret_cast<char*>(p.theta.data()), sizeof(double) * d_theta);
        if (!in) throw ValidationError("truncated ensemble binary payload");
    }
    ens.validate();
    return ens;
}

Ensemble read_ensemble_binary(const std::string& path) {
    auto f = open_in(path, std::ios::in | std::ios::binary);
    return read_ensemble_binary(f);
}

}  // namespace mfl
