// Checkpoint container, see docs/checkpoint_format.md.
#include "capfeed/captioner.hpp"

#include "capfeed/errors.hpp"
#include "capfeed/image_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace capfeed {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void append_pod(std::vector<std::uint8_t>& out, const T& value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T read_pod(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    if (bytes.size() - pos < sizeof(T)) throw ParseError("checkpoint: truncated");
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

}  // namespace

std::vector<std::uint8_t> Captioner::to_bytes() const {
    json header = {{"format", "capfeed-checkpoint"},
                   {"version", kVersion},
                   {"config", config_.to_json()},
                   {"vocab", vocab_.tokens()},
                   {"step", step_},
                   {"content_hash", content_hash()},
                   {"params", json::array()}};
    std::size_t offset = 0;
    for (const auto& p : params_) {
        header["params"].push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"offset", offset}});
        offset += static_cast<std::size_t>(p.value.size());
    }
    const std::string h = header.dump();
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    append_pod(out, kVersion);
    append_pod(out, static_cast<std::uint64_t>(h.size()));
    out.insert(out.end(), h.begin(), h.end());
    for (const auto& p : params_) {
        const auto* data = reinterpret_cast<const std::uint8_t*>(p.value.data());
        out.insert(out.end(), data, data + p.value.size() * sizeof(double));
    }
    return out;
}

Captioner Captioner::from_bytes(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw ParseError("checkpoint: bad magic");
    std::size_t pos = sizeof(kMagic);
    const auto version = read_pod<std::uint32_t>(bytes, pos);
    if (version != kVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    const auto header_len = read_pod<std::uint64_t>(bytes, pos);
    if (bytes.size() - pos < header_len) throw ParseError("checkpoint: truncated header");
    json header;
    try {
        header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                             bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what());
    }
    pos += header_len;
    const std::size_t payload = pos;

    try {
        Captioner model(CaptionerConfig::from_json(header.at("config")),
                        Vocabulary(header.at("vocab").get<std::vector<std::string>>()), 0);
        const auto& entries = header.at("params");
        if (entries.size() != model.params_.size()) throw ParseError("checkpoint: parameter count mismatch");
        for (std::size_t k = 0; k < entries.size(); ++k) {
            auto& p = model.params_[k];
            const auto& e = entries[k];
            if (e.at("name").get<std::string>() != p.name || e.at("rows").get<Eigen::Index>() != p.value.rows() ||
                e.at("cols").get<Eigen::Index>() != p.value.cols())
                throw ParseError("checkpoint: parameter '" + p.name + "' does not match config");
            const std::size_t start = payload + e.at("offset").get<std::size_t>() * sizeof(double);
            const std::size_t len = static_cast<std::size_t>(p.value.size()) * sizeof(double);
            if (start + len > bytes.size()) throw ParseError("checkpoint: truncated parameter data");
            std::memcpy(p.value.data(), bytes.data() + start, len);
        }
        model.step_ = header.at("step").get<std::uint64_t>();
        if (model.content_hash() != header.at("content_hash").get<std::string>())
            throw ParseError("checkpoint: content hash mismatch");
        return model;
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what());
    }
}

void Captioner::save(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Captioner Captioner::load(const std::filesystem::path& path) { return from_bytes(read_file_bytes(path)); }

}  // namespace capfeed
