#include "phd/core/archive.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace phd {

namespace {

constexpr std::array<char, 8> kMagic{'P', 'H', 'D', 'A', 'R', 'C', 'H', '1'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::filesystem::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("truncated archive: " + path.string());
    return v;
}

}  // namespace

void write_archive(const std::filesystem::path& path, const nlohmann::json& meta, const ParamStore& params) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open for writing: " + tmp.string());
        os.write(kMagic.data(), kMagic.size());
        const std::string text = meta.dump();
        put<std::uint64_t>(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(params.entries().size()));
        for (const auto& [name, v] : params.entries()) {
            put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            const Tensor& t = v->value;
            put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
            for (int d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
            for (std::size_t i = 0; i < t.size(); ++i) put<float>(os, static_cast<float>(t[i]));
        }
        if (!os) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open archive: " + path.string());
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw std::runtime_error("not a checkpoint archive: " + path.string());
    Archive ar;
    const auto meta_len = take<std::uint64_t>(is, path);
    std::string text(meta_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(meta_len))) throw std::runtime_error("truncated archive: " + path.string());
    ar.meta = nlohmann::json::parse(text);
    const auto count = take<std::uint32_t>(is, path);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = take<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("truncated archive: " + path.string());
        const auto rank = take<std::uint32_t>(is, path);
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(take<std::uint32_t>(is, path)));
        Tensor t(shape);
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<Real>(take<float>(is, path));
        ar.params.insert(name, std::move(t));
    }
    return ar;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

}  // namespace phd
