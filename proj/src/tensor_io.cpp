#include "rledit/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "rledit/errors.hpp"

namespace rledit {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_i32(std::string& out, std::int32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

void put_f64(std::string& out, double v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

class Reader {
public:
    Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

    bool done() const { return pos_ == data_.size(); }

    std::int32_t i32() {
        need(4);
        std::int32_t v;
        std::memcpy(&v, data_.data() + pos_, 4);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        double v;
        std::memcpy(&v, data_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(path_, 0, what + " at byte " + std::to_string(pos_));
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) fail("truncated container");
    }

    std::string data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_container(const std::filesystem::path& path, const TensorContainer& c) {
    std::string out;
    out.append(c.magic.data(), 4);
    put_i32(out, static_cast<std::int32_t>(c.fields.size()));
    for (auto f : c.fields) put_i32(out, f);
    for (const auto& [name, t] : c.tensors) {
        put_i32(out, static_cast<std::int32_t>(name.size()));
        out.append(name);
        put_i32(out, static_cast<std::int32_t>(t.rows()));
        put_i32(out, static_cast<std::int32_t>(t.cols()));
        for (double v : t.values()) put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw MissingFileError(path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

TensorContainer read_container(const std::filesystem::path& path, const std::array<char, 4>& expected_magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingFileError(path.string());
    Reader r(std::string(std::istreambuf_iterator<char>(f), {}), path.string());

    TensorContainer c;
    const std::string magic = r.bytes(4);
    if (std::memcmp(magic.data(), expected_magic.data(), 4) != 0) {
        r.fail("bad magic, expected " + std::string(expected_magic.data(), 4));
    }
    c.magic = expected_magic;
    const std::int32_t n_fields = r.i32();
    if (n_fields < 0) r.fail("negative field count");
    for (std::int32_t i = 0; i < n_fields; ++i) c.fields.push_back(r.i32());
    while (!r.done()) {
        const std::int32_t len = r.i32();
        if (len <= 0) r.fail("bad tensor name length");
        std::string name = r.bytes(static_cast<std::size_t>(len));
        const std::int32_t rows = r.i32();
        const std::int32_t cols = r.i32();
        if (rows <= 0 || cols <= 0) r.fail("bad tensor shape for " + name);
        std::vector<double> values(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
        for (auto& v : values) v = r.f64();
        c.tensors.emplace_back(std::move(name), ad::Tensor::from_values(static_cast<std::size_t>(rows),
                                                                         static_cast<std::size_t>(cols),
                                                                         std::move(values)));
    }
    return c;
}

}  // namespace rledit
