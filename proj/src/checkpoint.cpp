#include "eeguq/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace eeguq {

namespace {

constexpr char kMagic[4] = {'U', 'N', 'C', 'M'};
constexpr std::uint8_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const char* ctx) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error(std::string("UNCM: truncated file (") + ctx + ")");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const char* ctx) {
    std::uint32_t len = read_u32(is, ctx);
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error(std::string("UNCM: truncated file (") + ctx + ")");
    return s;
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("UNCM: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    write_string(os, ckpt.section);
    write_string(os, ckpt.config_text);
    write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        write_string(os, name);
        write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape) write_u32(os, static_cast<std::uint32_t>(e));
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("UNCM: write to '" + path + "' failed");
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("UNCM: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("UNCM: bad magic in '" + path + "'");
    }
    int version = is.get();
    if (version == std::char_traits<char>::eof()) {
        throw std::runtime_error("UNCM: truncated file (version)");
    }
    if (version != kVersion) {
        throw std::runtime_error("UNCM: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.section = read_string(is, "section");
    ckpt.config_text = read_string(is, "config");
    std::uint32_t count = read_u32(is, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = read_string(is, "tensor name");
        std::uint32_t rank = read_u32(is, "tensor rank");
        std::vector<std::int64_t> shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(read_u32(is, "tensor shape"));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("UNCM: truncated file (tensor data)");
        ckpt.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

void save_decoder(DecoderModel& model, const std::string& path) {
    Checkpoint ckpt;
    ckpt.section = "decoder";
    ckpt.config_text = model.config.serialize();
    for (auto& [name, tensor] : model.named_tensors()) {
        ckpt.tensors.emplace_back(name, *tensor);
    }
    write_checkpoint(ckpt, path);
}

DecoderModel load_decoder(const std::string& path) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.section != "decoder") {
        throw std::runtime_error("UNCM: expected decoder section, found '" + ckpt.section + "'");
    }
    DecoderModel model;
    model.config = DecoderConfig::deserialize(ckpt.config_text);
    DecoderModel fresh = build_decoder(model.config, RngStream(0));
    model = std::move(fresh);
    auto named = model.named_tensors();
    if (named.size() != ckpt.tensors.size()) {
        throw std::runtime_error("UNCM: tensor count mismatch in '" + path + "'");
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto& [want_name, dst] = named[i];
        auto& [got_name, src] = ckpt.tensors[i];
        if (want_name != got_name) {
            throw std::runtime_error("UNCM: tensor '" + got_name + "' where '" + want_name +
                                     "' was expected");
        }
        if (src.shape != dst->shape) {
            throw std::runtime_error("UNCM: tensor '" + got_name + "' has shape " +
                                     shape_to_string(src.shape) + ", expected " +
                                     shape_to_string(dst->shape));
        }
        *dst = std::move(src);
    }
    model.train_mode = false;
    return model;
}

}  // namespace eeguq
