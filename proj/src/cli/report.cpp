#include "report.hpp"

#include "config.hpp"
#include "mfl/common.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <vector>

namespace mflab {
namespace {

using mfl::ValidationError;
namespace fs = std::filesystem;

// Eight-level block sparkline; min and max of the series span the range.
std::string sparkline(const std::vector<double>& v) {
    static const char* kLevels[] = {"▁", "▂", "▃", "▄",
                                    "▅", "▆", "▇", "█"};
    if (v.empty()) return "";
    double lo = v.front(), hi = v.front();
    for (double x : v) {
        if (std::isfinite(x)) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    }
    std::string out;
    for (double x : v) {
        if (!std::isfinite(x)) {
            out += "?";
            continue;
        }
        int level = hi > lo ? static_cast<int>(std::floor((x - lo) / (hi - lo) * 7.999)) : 4;
        level = std::clamp(level, 0, 7);
        out += kLevels[level];
    }
    return out;
}

// Down-samples a long series to at most `width` points (stride sampling,
// always keeping the final point).
std::vector<double> thin(const std::vector<double>& v, std::size_t width = 60) {
    if (v.size() <= width) return v;
    std::vector<double> out;
    const double stride = static_cast<double>(v.size() - 1) / static_cast<double>(width - 1);
    for (std::size_t i = 0; i < width; ++i)
        out.push_back(v[static_cast<std::size_t>(std::lround(i * stride))]);
    return out;
}

std::vector<double> log10_positive(const std::vector<double>& v) {
    std::vector<double> out;
    out.reserve(v.size());
    for (double x : v) out.push_back(x > 0.0 ? std::log10(x) : -320.0);
    return out;
}

// Minimal CSV-with-header reader: all cells numeric.
std::map<std::string, std::vector<double>> read_csv_columns(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty csv: " + path.string());
    std::vector<std::string> headers;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) headers.push_back(cell);
    }
    std::map<std::string, std::vector<double>> cols;
    for (const auto& h : headers) cols[h] = {};
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t j = 0;
        while (std::getline(ss, cell, ',') && j < headers.size())
            cols[headers[j++]].push_back(std::strtod(cell.c_str(), nullptr));
    }
    return cols;
}

Json load_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ValidationError("corrupt JSON in " + path.string() + ": " + e.what());
    }
}

void print_kv(const std::string& key, const Json& val) {
    std::cout << "  " << key << ": " << val.dump() << "\n";
}

}  // namespace

int report_run(const std::string& dir) {
    const fs::path root(dir);
    if (!fs::exists(root / "manifest.json"))
        throw ValidationError("no manifest.json in " + dir);
    const Json manifest = load_json(root / "manifest.json");
    if (!manifest.is_object() || !manifest.contains("experiment") || !manifest.contains("outputs"))
        throw ValidationError("manifest.json in " + dir + " is not a run manifest");

    const std::string kind = manifest["experiment"].get<std::string>();
    std::cout << "run: " << dir << "\n";
    std::cout << "experiment: " << kind << "\n";
    if (manifest.contains("verdict")) std::cout << "verdict: " << manifest["verdict"].get<std::string>() << "\n";
    if (manifest.contains("timestamp")) std::cout << "timestamp: " << manifest["timestamp"].get<std::string>() << "\n";
    if (manifest.contains("config") && manifest["config"].contains("seed"))
        std::cout << "seed: " << manifest["config"]["seed"].dump() << "\n";

    if (fs::exists(root / "scalars.csv")) {
        auto cols = read_csv_columns(root / "scalars.csv");
        const auto& energy = cols["energy"];
        if (!energy.empty()) {
            int increases = 0;
            for (std::size_t i = 1; i < energy.size(); ++i)
                if (energy[i] > energy[i - 1] + 1e-9 * std::max(1.0, std::abs(energy[i - 1])))
                    ++increases;
            std::cout << "energy (log scale): " << sparkline(thin(log10_positive(energy)))
                      << "\n  " << energy.front() << " -> " << energy.back() << "  ("
                      << (increases == 0 ? "monotone non-increasing"
                                         : std::to_string(increases) + " increases")
                      << ")\n";
        }
        if (cols.count("grad_norm") && !cols["grad_norm"].empty())
            std::cout << "gradient norm:      " << sparkline(thin(log10_positive(cols["grad_norm"])))
                      << "\n  " << cols["grad_norm"].front() << " -> " << cols["grad_norm"].back()
                      << "\n";
    }

    if (fs::exists(root / "stability.csv")) {
        auto cols = read_csv_columns(root / "stability.csv");
        const auto& w2 = cols["w2"];
        if (!w2.empty())
            std::cout << "W2 trace:           " << sparkline(thin(w2)) << "\n  " << w2.front()
                      << " -> " << w2.back() << "\n";
        if (cols.count("log_w2") && cols.count("envelope_bound")) {
            double worst = -1e300;
            const auto& lw = cols["log_w2"];
            const auto& bd = cols["envelope_bound"];
            for (std::size_t i = 0; i < std::min(lw.size(), bd.size()); ++i)
                worst = std::max(worst, lw[i] - bd[i]);
            std::cout << "  envelope check: max(log W2 - bound) = " << worst
                      << (worst <= 1e-9 ? " (holds at every recorded t)" : " (VIOLATED)") << "\n";
        }
        if (manifest.contains("summary")) {
            const auto& s = manifest["summary"];
            if (s.contains("fitted_rate"))
                std::cout << "  growth-rate estimate: " << s["fitted_rate"].dump()
                          << " (least squares), " << s["envelope_rate"].dump() << " (envelope)\n";
        }
    }

    if (fs::exists(root / "ledger.json")) {
        const Json ledger = load_json(root / "ledger.json");
        std::cout << "constant ledger:\n";
        for (auto it = ledger.begin(); it != ledger.end(); ++it) print_kv(it.key(), it.value());
    }

    if (manifest.contains("summary") && manifest["summary"].is_object()) {
        const auto& s = manifest["summary"];
        std::cout << "summary:\n";
        for (auto it = s.begin(); it != s.end(); ++it) {
            if (it.value().is_array() && it.key() == "reports") {
                std::cout << "  reports:\n";
                for (const auto& r : it.value()) std::cout << "    " << r.dump() << "\n";
            } else {
                print_kv(it.key(), it.value());
            }
        }
    }

    std::cout << "files:\n";
    for (const auto& f : manifest["outputs"]) {
        const fs::path p = root / f.get<std::string>();
        if (fs::exists(p))
            std::cout << "  " << f.get<std::string>() << "  (" << fs::file_size(p) << " bytes)\n";
        else
            std::cout << "  " << f.get<std::string>() << "  (MISSING)\n";
    }
    return 0;
}

}  // namespace mflab
