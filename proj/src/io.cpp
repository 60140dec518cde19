#include "stx/io.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "stx/common.hpp"

namespace stx {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), ErrorKind::Io, "short write to " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
        crc = ::crc32(crc, bytes.data() + offset, n);
        offset += n;
    }
    return static_cast<std::uint32_t>(crc);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 15]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_bytes(path)); }

namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        require(pos + n <= bytes.size(), ErrorKind::Integrity, "truncated zip container");
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

void write_zip(const std::filesystem::path& path, const std::map<std::string, std::vector<std::uint8_t>>& entries) {
    std::vector<std::uint8_t> out;
    std::vector<std::uint8_t> central;
    for (const auto& [name, data] : entries) {
        require(data.size() < std::numeric_limits<std::uint32_t>::max(), ErrorKind::Argument,
                "zip entry too large: " + name);
        const auto offset = static_cast<std::uint32_t>(out.size());
        const auto crc = crc32(data);
        const auto size = static_cast<std::uint32_t>(data.size());
        const auto name_len = static_cast<std::uint16_t>(name.size());

        put32(out, kLocalSig);
        put16(out, 20);
        put16(out, 0);
        put16(out, 0);  // stored
        put16(out, 0);
        put16(out, kDosDate);
        put32(out, crc);
        put32(out, size);
        put32(out, size);
        put16(out, name_len);
        put16(out, 0);
        out.insert(out.end(), name.begin(), name.end());
        out.insert(out.end(), data.begin(), data.end());

        put32(central, kCentralSig);
        put16(central, 20);
        put16(central, 20);
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put16(central, kDosDate);
        put32(central, crc);
        put32(central, size);
        put32(central, size);
        put16(central, name_len);
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put32(central, 0);
        put32(central, offset);
        central.insert(central.end(), name.begin(), name.end());
    }
    const auto cd_offset = static_cast<std::uint32_t>(out.size());
    out.insert(out.end(), central.begin(), central.end());
    put32(out, kEndSig);
    put16(out, 0);
    put16(out, 0);
    put16(out, static_cast<std::uint16_t>(entries.size()));
    put16(out, static_cast<std::uint16_t>(entries.size()));
    put32(out, static_cast<std::uint32_t>(central.size()));
    put32(out, cd_offset);
    put16(out, 0);
    write_bytes(path, out);
}

std::map<std::string, std::vector<std::uint8_t>> read_zip(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    require(bytes.size() >= 22, ErrorKind::Integrity, "not a zip container: " + path.string());
    Reader end{bytes, bytes.size() - 22};
    require(end.u32() == kEndSig, ErrorKind::Integrity, "missing end-of-directory record in " + path.string());
    end.u16();
    end.u16();
    end.u16();
    const auto count = end.u16();
    const auto cd_size = end.u32();
    const auto cd_offset = end.u32();
    require(static_cast<std::size_t>(cd_offset) + cd_size <= bytes.size() - 22, ErrorKind::Integrity,
            "central directory out of range");

    std::map<std::string, std::vector<std::uint8_t>> entries;
    Reader cd{bytes, cd_offset};
    for (std::uint16_t i = 0; i < count; ++i) {
        require(cd.u32() == kCentralSig, ErrorKind::Integrity, "bad central directory entry");
        cd.u16();
        cd.u16();
        cd.u16();
        const auto method = cd.u16();
        cd.u16();
        cd.u16();
        const auto crc = cd.u32();
        const auto csize = cd.u32();
        const auto usize = cd.u32();
        const auto name_len = cd.u16();
        const auto extra_len = cd.u16();
        const auto comment_len = cd.u16();
        cd.u16();
        cd.u16();
        cd.u32();
        const auto offset = cd.u32();
        const auto name = cd.str(name_len);
        cd.pos += extra_len + comment_len;
        require(method == 0 && csize == usize, ErrorKind::Integrity, "unsupported compression for " + name);

        Reader local{bytes, offset};
        require(local.u32() == kLocalSig, ErrorKind::Integrity, "bad local header for " + name);
        local.pos += 22;
        const auto lname_len = local.u16();
        const auto lextra_len = local.u16();
        local.pos += lname_len + lextra_len;
        local.need(usize);
        std::vector<std::uint8_t> data(bytes.begin() + static_cast<std::ptrdiff_t>(local.pos),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(local.pos + usize));
        require(crc32(data) == crc, ErrorKind::Integrity, "checksum mismatch in entry " + name);
        entries.emplace(name, std::move(data));
    }
    return entries;
}

}  // namespace stx
