#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "moelab/checksum.hpp"
#include "moelab/config.hpp"
#include "moelab/errors.hpp"

namespace moelab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', 'C', 'K'};

template <class T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_text(std::string& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out += s;
}

class Reader {
public:
    Reader(const std::string& bytes, std::size_t end, std::string origin)
        : bytes_(bytes), end_(end), origin_(std::move(origin)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::string text(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void doubles(std::span<double> dst) {
        need(dst.size_bytes());
        std::memcpy(dst.data(), bytes_.data() + pos_, dst.size_bytes());
        pos_ += dst.size_bytes();
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) {
        if (n > end_ - pos_) throw IoError(origin_ + ": truncated checkpoint");
    }
    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string origin_;
};

}  // namespace

std::string serialize_checkpoint(const LanguageModel& model, const std::string& metadata) {
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put_text(out, model_config_text(model.config()));
    put_text(out, metadata);
    const auto params = model.parameters();
    put<std::uint64_t>(out, params.size());
    for (const auto& p : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.shape().size()));
        for (std::size_t e : p.tensor.shape()) put<std::uint64_t>(out, e);
        const auto data = p.tensor.data();
        out.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
    }
    Fnv1a h;
    h.update(out.data(), out.size());
    put<std::uint64_t>(out, h.digest());
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
        std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError(origin + ": not a moelab checkpoint");
    }
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, sizeof stored);
    Fnv1a h;
    h.update(bytes.data(), body);
    if (h.digest() != stored) throw IoError(origin + ": checksum mismatch (file corrupted)");

    Reader r(bytes, body, origin);
    r.text(sizeof kMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw IoError(origin + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::string config_text = r.text(r.get<std::uint64_t>());
    Checkpoint ck;
    ck.metadata = r.text(r.get<std::uint64_t>());
    ck.model = LanguageModel(parse_model_config(config_text), 0);
    auto params = ck.model.parameters();
    const auto count = r.get<std::uint64_t>();
    if (count != params.size()) throw IoError(origin + ": parameter count differs from the stored architecture");
    for (auto& p : params) {
        const std::string name = r.text(r.get<std::uint32_t>());
        if (name != p.name) throw IoError(origin + ": expected parameter '" + p.name + "', found '" + name + "'");
        const auto ndim = r.get<std::uint32_t>();
        Shape shape(ndim);
        for (auto& e : shape) e = r.get<std::uint64_t>();
        if (shape != p.tensor.shape()) throw IoError(origin + ": shape mismatch for '" + name + "'");
        r.doubles(p.tensor.mutable_data());
    }
    if (r.pos() != body) throw IoError(origin + ": trailing bytes after parameters");
    return ck;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path + "': " + ec.message());
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void save_checkpoint(const std::string& path, const LanguageModel& model, const std::string& metadata) {
    write_file_atomic(path, serialize_checkpoint(model, metadata));
}

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path), path); }

}  // namespace moelab
