#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "rqat/packing.hpp"

using namespace rqat;
using namespace rqat::packing;

namespace {
quant::QuantParams range_params(std::int64_t lo, std::int64_t hi) {
    quant::QuantParams p;
    p.q_min = lo;
    p.q_max = hi;
    return p;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};
}  // namespace

TEST_CASE("pack: 2-bit [0,1,2,3] packs to 0xE4") {
    auto p = range_params(0, 3);
    std::vector<std::int64_t> codes{0, 1, 2, 3};
    PackedBuffer buf = pack(codes, p, 2);
    REQUIRE(buf.words.size() == 1);
    CHECK((buf.words[0] & 0xff) == 0xE4);
    CHECK(unpack(buf, p) == codes);
}

TEST_CASE("pack: all-q_min codes give zero words") {
    auto p = range_params(-4, 3);
    std::vector<std::int64_t> codes(37, -4);
    PackedBuffer buf = pack(codes, p, 3);
    for (auto w : buf.words) CHECK(w == 0);
}

TEST_CASE("pack: 11 three-bit codes occupy 2 words, tail zero") {
    auto p = range_params(0, 7);
    std::vector<std::int64_t> codes(11, 7);
    PackedBuffer buf = pack(codes, p, 3);
    REQUIRE(buf.words.size() == 2);
    CHECK((buf.words[1] >> 1) == 0);  // bits 33..63 unused
}

TEST_CASE("pack rejects out-of-range codes; unpack rejects truncation") {
    auto p = range_params(0, 3);
    std::vector<std::int64_t> bad{0, 4};
    CHECK_THROWS_AS(pack(bad, p, 2), IntegrityError);

    std::vector<std::int64_t> codes(40, 3);
    PackedBuffer buf = pack(codes, p, 2);
    buf.words.pop_back();
    CHECK_THROWS_AS(unpack(buf, p), IntegrityError);
}

TEST_CASE("pack: empty input") {
    auto p = range_params(0, 3);
    PackedBuffer buf = pack(std::span<const std::int64_t>{}, p, 2);
    CHECK(buf.count == 0);
    CHECK(unpack(buf, p).empty());
}

TEST_CASE("property: pack/unpack bijection for bits in {2,3,4,8}") {
    std::mt19937_64 rng(9);
    for (int bits : {2, 3, 4, 8}) {
        std::int64_t lo = -(std::int64_t{1} << (bits - 1));
        std::int64_t hi = (std::int64_t{1} << (bits - 1)) - 1;
        auto p = range_params(lo, hi);
        std::uniform_int_distribution<std::int64_t> d(lo, hi);
        std::vector<std::int64_t> codes(5000);
        for (auto& c : codes) c = d(rng);
        PackedBuffer buf = pack(codes, p, bits);
        CHECK(unpack(buf, p) == codes);
    }
}

TEST_CASE("checkpoint: dense + quantized roundtrip, deterministic bytes") {
    TempFile f("rqat_test_ckpt.bin");
    TensorMap t;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    DenseTensor dense;
    dense.shape = {3, 5};
    dense.data.resize(15);
    for (auto& x : dense.data) x = nd(rng);
    t["w/dense"] = dense;

    std::vector<double> w(128 * 256);
    for (auto& x : w) x = nd(rng);
    quant::QuantSpec spec;
    spec.bits = 3;
    spec.group_size = 128;
    t["w/q"] = quant::quantize_grouped(w, 128, 256, spec);

    save_checkpoint(f.path, t, R"({"note":"test"})");
    std::string meta;
    TensorMap back = load_checkpoint(f.path, &meta);
    CHECK(meta.find("note") != std::string::npos);

    const auto& d2 = std::get<DenseTensor>(back.at("w/dense"));
    CHECK(d2.shape == dense.shape);
    CHECK(d2.data == dense.data);  // bitwise

    const auto& q1 = std::get<quant::QuantizedTensor>(t.at("w/q"));
    const auto& q2 = std::get<quant::QuantizedTensor>(back.at("w/q"));
    CHECK(q2.codes == q1.codes);
    CHECK(q2.spec.bits == 3);
    CHECK(q2.spec.group_size == 128);
    REQUIRE(q2.params.size() == q1.params.size());
    for (std::size_t i = 0; i < q1.params.size(); ++i) {
        CHECK(q2.params[i].scale == q1.params[i].scale);
        CHECK(q2.params[i].zero == q1.params[i].zero);
    }

    std::uint64_t digest1 = file_digest(f.path);
    save_checkpoint(f.path, t, R"({"note":"test"})");
    CHECK(file_digest(f.path) == digest1);

    std::string desc = describe_checkpoint(f.path);
    CHECK(desc.find("w/q") != std::string::npos);
    CHECK(desc.find("\"bits\":3") != std::string::npos);
}

TEST_CASE("checkpoint: bad magic reported") {
    TempFile f("rqat_test_badmagic.bin");
    {
        std::ofstream out(f.path, std::ios::binary);
        out << "XXXXjunkjunkjunk";
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("bad magic"), FormatError);
}
