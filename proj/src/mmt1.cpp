#include "mmseq/mmt1.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mmseq/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "mmt1 i/o assumes a little-endian host");

namespace mmseq::mmt1 {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'T', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw IoError("mmt1: truncated header");
    return v;
}

}  // namespace

void write(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) {
        write_u32(os, static_cast<std::uint32_t>(e));
    }
    auto d = t.data();
    os.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * sizeof(double)));
    if (!os) throw IoError("mmt1: write failed");
}

Tensor read(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("mmt1: bad magic bytes");
    }
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw IoError("mmt1: implausible rank");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = read_u32(is);
        if (shape[i] == 0) throw IoError("mmt1: zero extent");
    }
    std::vector<double> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw IoError("mmt1: truncated data");
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("mmt1: cannot open for writing: " + path.string());
    write(os, t);
}

Tensor load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("mmt1: cannot open for reading: " + path.string());
    return read(is);
}

}  // namespace mmseq::mmt1
