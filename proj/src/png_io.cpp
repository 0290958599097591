#include "uniperc/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace uniperc::png {

namespace {

std::uint32_t crc_table_entry(std::uint32_t n) {
    std::uint32_t c = n;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    return c;
}

std::uint32_t crc32_of(const unsigned char* buf, std::size_t len, std::uint32_t crc = 0) {
    static std::uint32_t table[256];
    static bool init = [] {
        for (std::uint32_t n = 0; n < 256; ++n) table[n] = crc_table_entry(n);
        return true;
    }();
    (void)init;
    std::uint32_t c = crc ^ 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ buf[i]) & 0xff] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

void put_u32(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

void write_chunk(std::ofstream& os, const char type[4], const std::vector<unsigned char>& data) {
    std::vector<unsigned char> head;
    put_u32(head, static_cast<std::uint32_t>(data.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    std::vector<unsigned char> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    os.write(reinterpret_cast<const char*>(body.data()),
             static_cast<std::streamsize>(body.size()));
    std::vector<unsigned char> crc;
    put_u32(crc, crc32_of(body.data(), body.size()));
    os.write(reinterpret_cast<const char*>(crc.data()), 4);
}

}  // namespace

void write_gray(const std::filesystem::path& path, const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 1)
        throw std::invalid_argument("write_gray: need {1,H,W}");
    int H = img.dim(1), W = img.dim(2);

    // filter byte 0 per scanline
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(H) * (W + 1));
    for (int y = 0; y < H; ++y) {
        raw.push_back(0);
        for (int x = 0; x < W; ++x) {
            double v = std::clamp(img.at(0, y, x), 0.0, 1.0);
            raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
        }
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png deflate failed");
    comp.resize(comp_len);

    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);
    std::vector<unsigned char> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(W));
    put_u32(ihdr, static_cast<std::uint32_t>(H));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(os, "IHDR", ihdr);
    write_chunk(os, "IDAT", comp);
    write_chunk(os, "IEND", {});
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

Tensor read_gray(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        throw std::runtime_error("not a png: " + path.string());

    auto u32 = [&](std::size_t off) {
        return (static_cast<std::uint32_t>(bytes[off]) << 24) |
               (static_cast<std::uint32_t>(bytes[off + 1]) << 16) |
               (static_cast<std::uint32_t>(bytes[off + 2]) << 8) |
               static_cast<std::uint32_t>(bytes[off + 3]);
    };

    int W = 0, H = 0;
    std::vector<unsigned char> idat;
    std::size_t off = 8;
    while (off + 8 <= bytes.size()) {
        std::uint32_t len = u32(off);
        std::string type(reinterpret_cast<const char*>(&bytes[off + 4]), 4);
        std::size_t data_off = off + 8;
        if (type == "IHDR") {
            W = static_cast<int>(u32(data_off));
            H = static_cast<int>(u32(data_off + 4));
            if (bytes[data_off + 8] != 8 || bytes[data_off + 9] != 0)
                throw std::runtime_error("read_gray: only 8-bit grayscale supported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), bytes.begin() + static_cast<std::ptrdiff_t>(data_off),
                        bytes.begin() + static_cast<std::ptrdiff_t>(data_off + len));
        } else if (type == "IEND") {
            break;
        }
        off = data_off + len + 4;
    }
    if (W <= 0 || H <= 0) throw std::runtime_error("png missing IHDR");

    std::vector<unsigned char> raw(static_cast<std::size_t>(H) * (W + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw std::runtime_error("png inflate failed");

    Tensor img({1, H, W});
    std::vector<unsigned char> prev(static_cast<std::size_t>(W), 0);
    for (int y = 0; y < H; ++y) {
        unsigned char filter = raw[static_cast<std::size_t>(y) * (W + 1)];
        const unsigned char* line = &raw[static_cast<std::size_t>(y) * (W + 1) + 1];
        std::vector<unsigned char> cur(static_cast<std::size_t>(W));
        for (int x = 0; x < W; ++x) {
            int a = x > 0 ? cur[x - 1] : 0;
            int b = prev[x];
            int c = x > 0 ? prev[x - 1] : 0;
            int v = line[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    int p = a + b - c;
                    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw std::runtime_error("png: unknown filter");
            }
            cur[x] = static_cast<unsigned char>(v & 0xff);
            img.at(0, y, x) = cur[x] / 255.0;
        }
        prev = cur;
    }
    return img;
}

}  // namespace uniperc::png
