#include "uniperc/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace uniperc {

namespace {

constexpr char kMagic[8] = {'U', 'N', 'T', 'A', '0', '0', '1', '\n'};

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void TensorArchive::save(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kMagic, 8);
    std::string header = meta.dump();
    write_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_u64(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u64(os, t.shape.size());
        for (int d : t.shape) write_u64(os, static_cast<std::uint64_t>(d));
        static_assert(sizeof(double) == 8);
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * 8));
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("not a tensor archive: " + path.string());
    TensorArchive arc;
    std::uint64_t hlen = read_u64(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    arc.meta = nlohmann::json::parse(header);
    std::uint64_t count = read_u64(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint64_t nlen = read_u64(is);
        std::string name(nlen, '\0');
        is.read(name.data(), static_cast<std::streamsize>(nlen));
        std::uint64_t rank = read_u64(is);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_u64(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * 8));
        arc.tensors.emplace(std::move(name), std::move(t));
    }
    if (!is) throw std::runtime_error("truncated archive: " + path.string());
    return arc;
}

}  // namespace uniperc
