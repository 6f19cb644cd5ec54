#include "personalize/archive.hpp"

#include <cstring>
#include <fstream>

namespace personalize {

namespace {

constexpr char kMagic[4] = {'P', 'Z', 'A', 'R'};

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::is_unsigned_v<T>);
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

    template <typename T>
    T read_le() {
        need(sizeof(T));
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<uint8_t>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }
    std::string read_bytes(size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void read_doubles(double* dst, size_t n) {
        need(n * 8);
        std::memcpy(dst, bytes_.data() + pos_, n * 8);
        pos_ += n * 8;
    }

private:
    void need(size_t n) {
        if (pos_ + n > bytes_.size()) throw FormatError("archive truncated");
    }
    std::string bytes_;
    size_t pos_ = 0;
};

}  // namespace

void Archive::put(const std::string& name, Tensor t) {
    for (auto& [n, v] : arrays_)
        if (n == name) {
            v = std::move(t);
            return;
        }
    arrays_.emplace_back(name, std::move(t));
}

const Tensor* Archive::find(const std::string& name) const {
    for (const auto& [n, v] : arrays_)
        if (n == name) return &v;
    return nullptr;
}

const Tensor& Archive::get(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw FormatError("archive missing array: " + name);
    return *t;
}

void Archive::save(const std::filesystem::path& path) const {
    std::string out;
    out.append(kMagic, 4);
    put_le<uint32_t>(out, kFormatVersion);

    nlohmann::ordered_json m = meta;
    m["format_version"] = kFormatVersion;
    std::string meta_str = m.dump();
    put_le<uint64_t>(out, meta_str.size());
    out += meta_str;

    put_le<uint64_t>(out, arrays_.size());
    for (const auto& [name, t] : arrays_) {
        put_le<uint64_t>(out, name.size());
        out += name;
        put_le<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) put_le<uint32_t>(out, static_cast<uint32_t>(d));
        size_t payload = t.data.size() * 8;
        size_t off = out.size();
        out.resize(off + payload);
        std::memcpy(out.data() + off, t.data.data(), payload);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write failed: " + path.string());
}

Archive Archive::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingFileError("cannot open archive: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(std::move(bytes));

    std::string magic = r.read_bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw FormatError("not an archive file: " + path.string());
    uint32_t version = r.read_le<uint32_t>();
    if (version != kFormatVersion)
        throw VersionError("unsupported archive version " + std::to_string(version) + " in " +
                           path.string());

    Archive a;
    uint64_t meta_len = r.read_le<uint64_t>();
    std::string meta_str = r.read_bytes(meta_len);
    try {
        a.meta = nlohmann::ordered_json::parse(meta_str);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("archive metadata is not valid JSON: " + std::string(e.what()));
    }

    uint64_t n_arrays = r.read_le<uint64_t>();
    for (uint64_t i = 0; i < n_arrays; ++i) {
        uint64_t name_len = r.read_le<uint64_t>();
        std::string name = r.read_bytes(name_len);
        uint32_t ndim = r.read_le<uint32_t>();
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(r.read_le<uint32_t>());
        Tensor t = Tensor::zeros(shape);
        r.read_doubles(t.data.data(), t.data.size());
        a.arrays_.emplace_back(std::move(name), std::move(t));
    }
    return a;
}

}  // namespace personalize
