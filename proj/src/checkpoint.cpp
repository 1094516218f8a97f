#include "smb/checkpoint.hpp"

#include "smb/error.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace smb::nn {

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'M', 'B', 'C', 'K', 'P', 'T', '\0'};

template <class T>
void put_le(std::string& out, T value) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
    }
}

class Reader {
public:
    Reader(const std::string& bytes, const std::filesystem::path& path) : bytes_(bytes), path_(path) {}

    template <class T>
    T get() {
        using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        need(sizeof(U));
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return std::bit_cast<T>(bits);
    }

    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n) {
            throw DataError("checkpoint " + path_.string() + ": truncated at byte " + std::to_string(pos_));
        }
    }

    const std::string& bytes_;
    std::filesystem::path path_;
    std::size_t pos_ = 0;
};

} // namespace

void write_container(const std::filesystem::path& path, const std::vector<TensorRecord>& records) {
    std::string out(kMagic.begin(), kMagic.end());
    put_le<std::uint32_t>(out, kContainerVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (numel(r.shape) != r.values.size()) {
            throw std::invalid_argument("write_container: '" + r.name + "' payload does not match shape " +
                                        shape_str(r.shape));
        }
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out += r.name;
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
        for (std::size_t d : r.shape) {
            put_le<std::uint64_t>(out, d);
        }
        for (float v : r.values) {
            put_le<float>(out, v);
        }
    }
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw DataError("cannot open " + tmp.string() + " for writing");
        }
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) {
            throw DataError("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

std::vector<TensorRecord> read_container(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader in(bytes, path);
    const std::string magic = in.get_bytes(kMagic.size());
    if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) {
        throw DataError("checkpoint " + path.string() + ": bad magic");
    }
    const auto version = in.get<std::uint32_t>();
    if (version != kContainerVersion) {
        throw DataError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
    }
    const auto count = in.get<std::uint32_t>();
    std::vector<TensorRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord r;
        r.name = in.get_bytes(in.get<std::uint32_t>());
        const auto rank = in.get<std::uint32_t>();
        for (std::uint32_t k = 0; k < rank; ++k) {
            r.shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>()));
        }
        const std::size_t n = numel(r.shape);
        if (n > bytes.size()) {
            throw DataError("checkpoint " + path.string() + ": implausible shape for '" + r.name + "'");
        }
        r.values.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            r.values[k] = in.get<float>();
        }
        records.push_back(std::move(r));
    }
    if (!in.at_end()) {
        throw DataError("checkpoint " + path.string() + ": trailing bytes after " + std::to_string(count) +
                        " tensors");
    }
    return records;
}

} // namespace smb::nn
