#include "mdepth/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mdepth/errors.hpp"

namespace mdepth {

namespace {

constexpr char kMagic[5] = {'W', 'T', 'N', 'S', '1'};

static_assert(std::endian::native == std::endian::little,
              "WTNS1 writer assumes a little-endian host");

template <class T>
void write_payload(std::ofstream& out, const Tensor<T>& t) {
    std::uint8_t dtype_code = dtype_of<T>() == Dtype::f32 ? 0 : 1;
    out.write(kMagic, 5);
    out.write(reinterpret_cast<const char*>(&dtype_code), 1);
    const auto rank = static_cast<std::uint32_t>(t.rank());
    out.write(reinterpret_cast<const char*>(&rank), 4);
    for (auto e : t.shape()) {
        const auto ext = static_cast<std::uint64_t>(e);
        out.write(reinterpret_cast<const char*>(&ext), 8);
    }
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(t.numel())));
}

template <class T>
void save_impl(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_payload(out, t);
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void save_wtns(const std::filesystem::path& path, const Tensor<float>& t) { save_impl(path, t); }
void save_wtns(const std::filesystem::path& path, const Tensor<double>& t) { save_impl(path, t); }

AnyTensor load_wtns(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());

    char magic[5];
    if (!in.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0) {
        throw FormatError("bad magic in " + path.string() + " (expected WTNS1)");
    }
    std::uint8_t dtype_code = 0;
    if (!in.read(reinterpret_cast<char*>(&dtype_code), 1) || dtype_code > 1) {
        throw FormatError("bad dtype code in " + path.string());
    }
    std::uint32_t rank = 0;
    if (!in.read(reinterpret_cast<char*>(&rank), 4) || rank > 8) {
        throw FormatError("bad rank in " + path.string());
    }
    AnyTensor t;
    t.dtype = dtype_code == 0 ? Dtype::f32 : Dtype::f64;
    t.shape.resize(rank);
    std::int64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint64_t ext = 0;
        if (!in.read(reinterpret_cast<char*>(&ext), 8) || ext == 0 || ext > (1ULL << 32)) {
            throw FormatError("bad extent in " + path.string());
        }
        t.shape[i] = static_cast<std::int64_t>(ext);
        n *= t.shape[i];
    }
    const std::size_t count = static_cast<std::size_t>(n);
    if (t.dtype == Dtype::f32) {
        t.f32.resize(count);
        if (!in.read(reinterpret_cast<char*>(t.f32.data()),
                     static_cast<std::streamsize>(count * sizeof(float)))) {
            throw FormatError("truncated payload in " + path.string());
        }
    } else {
        t.f64.resize(count);
        if (!in.read(reinterpret_cast<char*>(t.f64.data()),
                     static_cast<std::streamsize>(count * sizeof(double)))) {
            throw FormatError("truncated payload in " + path.string());
        }
    }
    return t;
}

namespace {

template <class T>
std::uint64_t digest_impl(const Tensor<T>& t, std::uint64_t h) {
    const std::uint8_t dtype_code = dtype_of<T>() == Dtype::f32 ? 0 : 1;
    h = fnv1a64(&dtype_code, 1, h);
    for (auto e : t.shape()) {
        const auto ext = static_cast<std::uint64_t>(e);
        h = fnv1a64(&ext, 8, h);
    }
    return fnv1a64(t.data(), sizeof(T) * static_cast<std::size_t>(t.numel()), h);
}

}  // namespace

std::uint64_t wtns_digest(const Tensor<float>& t, std::uint64_t h) { return digest_impl(t, h); }
std::uint64_t wtns_digest(const Tensor<double>& t, std::uint64_t h) { return digest_impl(t, h); }

}  // namespace mdepth
