#include "fedtrl/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace fedtrl::checkpoint {

namespace {

constexpr char kMagic[8] = {'F', 'T', 'R', 'L', 'C', 'K', 'P', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void save_tensors(const TensorMap& tensors, const std::string& path, const nlohmann::json& metadata) {
    nlohmann::json manifest;
    manifest["version"] = kFormatVersion;
    manifest["metadata"] = metadata;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : tensors) {
        manifest["tensors"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    }
    std::string js = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kMagic, 8);
    write_u64(out, js.size());
    out.write(js.data(), static_cast<std::streamsize>(js.size()));
    for (const auto& [name, t] : tensors) {
        static_assert(sizeof(double) == 8);
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                double v = t(i, j);
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                write_u64(out, bits);
            }
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Loaded load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    std::uint64_t jlen = read_u64(in);
    std::string js(jlen, '\0');
    in.read(js.data(), static_cast<std::streamsize>(jlen));
    nlohmann::json manifest = nlohmann::json::parse(js);
    if (manifest.at("version").get<int>() != kFormatVersion) {
        throw std::runtime_error("checkpoint: unsupported version in " + path);
    }
    Loaded loaded;
    loaded.metadata = manifest.value("metadata", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
        Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
        Matrix t(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index j = 0; j < cols; ++j) {
                std::uint64_t bits = read_u64(in);
                double v;
                std::memcpy(&v, &bits, 8);
                t(i, j) = v;
            }
        }
        loaded.tensors[name] = std::move(t);
    }
    if (!in) throw std::runtime_error("checkpoint: truncated payload in " + path);
    return loaded;
}

std::string rng_to_string(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
    std::mt19937_64 rng;
    std::istringstream is(s);
    is >> rng;
    if (is.fail()) throw std::runtime_error("invalid rng state string");
    return rng;
}

}  // namespace fedtrl::checkpoint
