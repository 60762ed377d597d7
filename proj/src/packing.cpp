#include "rqat/packing.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace rqat::packing {

using nlohmann::json;

PackedBuffer pack(std::span<const std::int64_t> codes, const quant::QuantParams& params, int bits) {
    if (bits < 1 || bits > 16) throw ConfigError("pack: unsupported bit width");
    PackedBuffer buf;
    buf.bits = bits;
    buf.count = codes.size();
    buf.words.assign((codes.size() * static_cast<std::size_t>(bits) + 31) / 32, 0u);
    const std::uint64_t limit = std::uint64_t{1} << bits;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] < params.q_min || codes[i] > params.q_max)
            throw IntegrityError("pack: code out of range");
        std::uint64_t offset = static_cast<std::uint64_t>(codes[i] - params.q_min);
        if (offset >= limit) throw IntegrityError("pack: offset exceeds bit width");
        std::size_t bit = i * static_cast<std::size_t>(bits);
        std::size_t word = bit / 32, shift = bit % 32;
        buf.words[word] |= static_cast<std::uint32_t>(offset << shift);
        if (shift + static_cast<std::size_t>(bits) > 32)
            buf.words[word + 1] |= static_cast<std::uint32_t>(offset >> (32 - shift));
    }
    return buf;
}

std::vector<std::int64_t> unpack(const PackedBuffer& buf, const quant::QuantParams& params) {
    const std::size_t need = (buf.count * static_cast<std::size_t>(buf.bits) + 31) / 32;
    if (buf.words.size() < need) throw IntegrityError("unpack: truncated buffer");
    std::vector<std::int64_t> codes(buf.count);
    const std::uint32_t mask = static_cast<std::uint32_t>((std::uint64_t{1} << buf.bits) - 1);
    for (std::size_t i = 0; i < buf.count; ++i) {
        std::size_t bit = i * static_cast<std::size_t>(buf.bits);
        std::size_t word = bit / 32, shift = bit % 32;
        std::uint64_t v = buf.words[word] >> shift;
        if (shift + static_cast<std::size_t>(buf.bits) > 32)
            v |= static_cast<std::uint64_t>(buf.words[word + 1]) << (32 - shift);
        codes[i] = static_cast<std::int64_t>(v & mask) + params.q_min;
        if (codes[i] > params.q_max) throw IntegrityError("unpack: decoded code out of range");
    }
    return codes;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}
void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw FormatError("checkpoint: truncated payload");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

const char* scheme_name(quant::Scheme s) {
    return s == quant::Scheme::Symmetric ? "symmetric" : "asymmetric";
}
quant::Scheme scheme_from(const std::string& s) {
    if (s == "symmetric") return quant::Scheme::Symmetric;
    if (s == "asymmetric") return quant::Scheme::Asymmetric;
    throw FormatError("checkpoint: unknown scheme '" + s + "'");
}
const char* gran_name(quant::Granularity g) {
    switch (g) {
        case quant::Granularity::PerGroupWeight: return "per-group-weight";
        case quant::Granularity::PerChannelWeight: return "per-channel-weight";
        default: return "per-token-activation";
    }
}
quant::Granularity gran_from(const std::string& s) {
    if (s == "per-group-weight") return quant::Granularity::PerGroupWeight;
    if (s == "per-channel-weight") return quant::Granularity::PerChannelWeight;
    if (s == "per-token-activation") return quant::Granularity::PerTokenActivation;
    throw FormatError("checkpoint: unknown granularity '" + s + "'");
}

std::string encode_tensor(const TensorValue& value, json& entry) {
    std::string payload;
    if (const auto* dense = std::get_if<DenseTensor>(&value)) {
        entry["kind"] = "dense-f64";
        entry["shape"] = dense->shape;
        for (double v : dense->data) put_f64(payload, v);
    } else {
        const auto& qt = std::get<quant::QuantizedTensor>(value);
        qt.validate();
        entry["kind"] = "quantized";
        entry["shape"] = qt.shape;
        entry["spec"] = {{"bits", qt.spec.bits},
                         {"group_size", qt.spec.group_size},
                         {"scheme", scheme_name(qt.spec.scheme)},
                         {"granularity", gran_name(qt.spec.granularity)}};
        put_u64(payload, qt.params.size());
        for (const auto& p : qt.params) {
            put_f32(payload, static_cast<float>(p.scale));
            put_u32(payload, static_cast<std::uint32_t>(static_cast<std::int32_t>(p.zero)));
        }
        // Codes share one q_min for the whole tensor (range depends only on spec).
        auto [q_min, q_max] = quant::code_range(qt.spec.bits, qt.spec.scheme);
        quant::QuantParams range;
        range.q_min = q_min;
        range.q_max = q_max;
        PackedBuffer buf = pack(qt.codes, range, qt.spec.bits);
        put_u64(payload, buf.count);
        for (std::uint32_t w : buf.words) put_u32(payload, w);
    }
    return payload;
}

TensorValue decode_tensor(const json& entry, const std::string& payload) {
    Reader rd{payload};
    const std::string kind = entry.at("kind").get<std::string>();
    std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (kind == "dense-f64") {
        DenseTensor t;
        t.shape = shape;
        t.data.resize(shape_numel(shape));
        for (double& v : t.data) v = rd.f64();
        return t;
    }
    if (kind != "quantized") throw FormatError("checkpoint: unknown tensor kind '" + kind + "'");
    quant::QuantizedTensor qt;
    qt.shape = shape;
    const json& spec = entry.at("spec");
    qt.spec.bits = spec.at("bits").get<int>();
    qt.spec.group_size = spec.at("group_size").get<std::size_t>();
    qt.spec.scheme = scheme_from(spec.at("scheme").get<std::string>());
    qt.spec.granularity = gran_from(spec.at("granularity").get<std::string>());
    auto [q_min, q_max] = quant::code_range(qt.spec.bits, qt.spec.scheme);
    std::uint64_t n_params = rd.u64();
    qt.params.resize(n_params);
    for (auto& p : qt.params) {
        p.scale = static_cast<double>(rd.f32());
        p.zero = static_cast<std::int32_t>(rd.u32());
        p.q_min = q_min;
        p.q_max = q_max;
    }
    PackedBuffer buf;
    buf.bits = qt.spec.bits;
    buf.count = rd.u64();
    if (buf.count != shape_numel(shape)) throw FormatError("checkpoint: code count mismatch");
    buf.words.resize((buf.count * static_cast<std::size_t>(buf.bits) + 31) / 32);
    for (auto& w : buf.words) w = rd.u32();
    quant::QuantParams range;
    range.q_min = q_min;
    range.q_max = q_max;
    qt.codes = unpack(buf, range);
    qt.validate();
    return qt;
}

json read_manifest(std::ifstream& in, const std::string& path) {
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError(path + ": truncated header");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": bad magic");
    std::uint32_t version = 0;
    char vb[4];
    if (!in.read(vb, 4)) throw FormatError(path + ": truncated header");
    for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(static_cast<unsigned char>(vb[i])) << (8 * i);
    if (version != kVersion) throw FormatError(path + ": unsupported version " + std::to_string(version));
    std::uint64_t mlen = 0;
    char mb[8];
    if (!in.read(mb, 8)) throw FormatError(path + ": truncated header");
    for (int i = 0; i < 8; ++i) mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(mb[i])) << (8 * i);
    std::string mtext(mlen, '\0');
    if (!in.read(mtext.data(), static_cast<std::streamsize>(mlen)))
        throw FormatError(path + ": truncated manifest");
    json manifest = json::parse(mtext, nullptr, false);
    if (manifest.is_discarded()) throw FormatError(path + ": manifest is not valid JSON");
    return manifest;
}

}  // namespace

void save_checkpoint(const std::string& path, const TensorMap& tensors, const std::string& meta_json) {
    json manifest;
    manifest["meta"] = json::parse(meta_json);
    manifest["tensors"] = json::array();
    std::string payload;
    for (const auto& [name, value] : tensors) {
        json entry;
        entry["name"] = name;
        std::string bytes = encode_tensor(value, entry);
        entry["offset"] = payload.size();
        entry["length"] = bytes.size();
        payload += bytes;
        manifest["tensors"].push_back(std::move(entry));
    }
    std::string mtext = manifest.dump();

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, mtext.size());
    out += mtext;
    out += payload;

    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw ConfigError("save_checkpoint: cannot open " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw ConfigError("save_checkpoint: write failed for " + tmp);
    }
    std::remove(path.c_str());
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw ConfigError("save_checkpoint: rename failed for " + path);
}

TensorMap load_checkpoint(const std::string& path, std::string* meta_json) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("load_checkpoint: cannot open " + path);
    json manifest = read_manifest(in, path);
    if (meta_json) *meta_json = manifest.at("meta").dump();

    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    TensorMap out;
    for (const auto& entry : manifest.at("tensors")) {
        std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        std::uint64_t length = entry.at("length").get<std::uint64_t>();
        if (offset + length > payload.size())
            throw FormatError(path + ": tensor '" + entry.at("name").get<std::string>() +
                              "' extends past end of file");
        std::string bytes = payload.substr(offset, length);
        out[entry.at("name").get<std::string>()] = decode_tensor(entry, bytes);
    }
    return out;
}

std::string describe_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("inspect: cannot open " + path);
    json manifest = read_manifest(in, path);
    std::ostringstream os;
    os << "checkpoint " << path << " (version " << kVersion << ")\n";
    os << "meta: " << manifest.at("meta").dump() << "\n";
    for (const auto& entry : manifest.at("tensors")) {
        os << "  " << entry.at("name").get<std::string>() << "  kind=" << entry.at("kind").get<std::string>()
           << "  shape=" << entry.at("shape").dump();
        if (entry.contains("spec")) os << "  spec=" << entry.at("spec").dump();
        os << "  bytes=" << entry.at("length").get<std::uint64_t>() << "\n";
    }
    return os.str();
}

std::uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("file_digest: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace rqat::packing
