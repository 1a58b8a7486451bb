#include "dpq/container.hpp"

#include "dpq/errors.hpp"
#include "dpq/numerics.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

static_assert(std::endian::native == std::endian::little,
              "container blobs are little-endian");

namespace dpq {

using nlohmann::json;

std::string to_string(Dtype dtype) {
    switch (dtype) {
    case Dtype::f32: return "f32";
    case Dtype::bf16: return "bf16";
    case Dtype::u4packed: return "u4packed";
    case Dtype::u8: return "u8";
    }
    return "f32";
}

Dtype dtype_from_string(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "bf16") return Dtype::bf16;
    if (s == "u4packed") return Dtype::u4packed;
    if (s == "u8") return Dtype::u8;
    throw ValidationError("unknown dtype: " + s);
}

std::size_t dtype_byte_size(Dtype dtype) {
    switch (dtype) {
    case Dtype::f32: return 4;
    case Dtype::bf16: return 2;
    case Dtype::u8: return 1;
    case Dtype::u4packed:
        throw ValidationError("u4packed has no per-element byte size");
    }
    return 1;
}

std::size_t TensorInfo::expected_bytes() const {
    if (dtype == Dtype::u4packed) {
        if (shape.size() != 2)
            throw ValidationError("tensor '" + name + "': u4packed must be 2-D");
        return shape[0] * ((shape[1] + 1) / 2);
    }
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n * dtype_byte_size(dtype);
}

namespace {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading file: " + path.string());
    return bytes;
}

std::string sanitize_file_name(const std::string& name) {
    std::string out;
    out.reserve(name.size());
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '-' || c == '_';
        out.push_back(ok ? c : '_');
    }
    return out;
}

} // namespace

void atomic_write_file(const std::filesystem::path& path, const void* data,
                       std::size_t size) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(static_cast<const char*>(data), std::streamsize(size));
        if (!out) throw IoError("failed writing: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("failed renaming " + tmp.string() + ": " + ec.message());
}

void atomic_write_file(const std::filesystem::path& path, const std::string& text) {
    atomic_write_file(path, text.data(), text.size());
}

std::vector<std::uint8_t> f32_bytes_from(const std::vector<double>& values) {
    std::vector<std::uint8_t> out(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(values[i]);
        std::memcpy(out.data() + 4 * i, &f, 4);
    }
    return out;
}

std::vector<std::uint8_t> bf16_bytes_from(const std::vector<double>& values) {
    std::vector<std::uint8_t> out(values.size() * 2);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(round_to_bf16(values[i]));
        std::uint32_t bits = 0;
        std::memcpy(&bits, &f, 4);
        const std::uint16_t half = static_cast<std::uint16_t>(bits >> 16);
        std::memcpy(out.data() + 2 * i, &half, 2);
    }
    return out;
}

TensorContainer TensorContainer::open(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open container manifest: " + manifest_path.string());

    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ValidationError("malformed container manifest " +
                              manifest_path.string() + ": " + e.what());
    }

    TensorContainer c;
    c.dir_ = dir;
    if (!doc.contains("tensors") || !doc["tensors"].is_array())
        throw ValidationError("container manifest missing 'tensors' array");

    std::set<std::string> seen;
    for (const auto& t : doc["tensors"]) {
        TensorInfo info;
        try {
            info.name = t.at("name").get<std::string>();
            info.dtype = dtype_from_string(t.at("dtype").get<std::string>());
            info.shape = t.at("shape").get<std::vector<std::size_t>>();
            info.file = t.at("file").get<std::string>();
            if (t.contains("byte_order") &&
                t["byte_order"].get<std::string>() != "little-endian")
                throw ValidationError("tensor '" + info.name +
                                      "': unsupported byte order");
        } catch (const json::exception& e) {
            throw ValidationError(std::string("malformed tensor entry: ") + e.what());
        }
        if (!seen.insert(info.name).second)
            throw ValidationError("duplicate tensor name: " + info.name);
        c.tensors_.push_back(std::move(info));
    }
    return c;
}

bool TensorContainer::has(const std::string& name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return true;
    return false;
}

const TensorInfo& TensorContainer::info(const std::string& name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return t;
    throw ValidationError("tensor not found in container: " + name);
}

std::vector<std::uint8_t> TensorContainer::read_bytes(const std::string& name) const {
    const TensorInfo& t = info(name);
    auto bytes = read_file_bytes(dir_ / t.file);
    if (bytes.size() != t.expected_bytes())
        throw ValidationError("tensor '" + name + "': blob has " +
                              std::to_string(bytes.size()) + " bytes, expected " +
                              std::to_string(t.expected_bytes()));
    return bytes;
}

Matrix TensorContainer::read_matrix(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.dtype != Dtype::f32 && t.dtype != Dtype::bf16)
        throw ValidationError("tensor '" + name + "' is not a float matrix");
    std::size_t rows = 1, cols = 0;
    if (t.shape.size() == 1) {
        cols = t.shape[0];
    } else if (t.shape.size() == 2) {
        rows = t.shape[0];
        cols = t.shape[1];
    } else {
        throw ValidationError("tensor '" + name + "' is not 1-D or 2-D");
    }

    const auto bytes = read_bytes(name);
    Matrix m(rows, cols);
    if (t.dtype == Dtype::f32) {
        for (std::size_t i = 0; i < m.size(); ++i) {
            float f = 0.0F;
            std::memcpy(&f, bytes.data() + 4 * i, 4);
            m.data[i] = double(f);
        }
    } else {
        for (std::size_t i = 0; i < m.size(); ++i) {
            std::uint16_t half = 0;
            std::memcpy(&half, bytes.data() + 2 * i, 2);
            const std::uint32_t bits = std::uint32_t(half) << 16;
            float f = 0.0F;
            std::memcpy(&f, &bits, 4);
            m.data[i] = double(f);
        }
    }
    return m;
}

TensorContainer::Writer::Writer(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
}

void TensorContainer::Writer::add_blob(TensorInfo info,
                                       const std::vector<std::uint8_t>& bytes) {
    if (finished_) throw ValidationError("container writer already finished");
    for (const auto& t : tensors_)
        if (t.name == info.name)
            throw ValidationError("duplicate tensor name: " + info.name);
    if (bytes.size() != info.expected_bytes())
        throw ValidationError("tensor '" + info.name + "': blob size mismatch");
    info.file = sanitize_file_name(info.name) + ".bin";
    atomic_write_file(dir_ / info.file, bytes.data(), bytes.size());
    tensors_.push_back(std::move(info));
}

void TensorContainer::Writer::add_matrix(const std::string& name, const Matrix& m,
                                         Dtype dtype) {
    TensorInfo info;
    info.name = name;
    info.dtype = dtype;
    info.shape = {m.rows, m.cols};
    if (dtype == Dtype::f32)
        add_blob(std::move(info), f32_bytes_from(m.data));
    else if (dtype == Dtype::bf16)
        add_blob(std::move(info), bf16_bytes_from(m.data));
    else
        throw ValidationError("add_matrix: dtype must be f32 or bf16");
}

void TensorContainer::Writer::add_vector(const std::string& name,
                                         const std::vector<double>& v, Dtype dtype) {
    TensorInfo info;
    info.name = name;
    info.dtype = dtype;
    info.shape = {v.size()};
    if (dtype == Dtype::f32)
        add_blob(std::move(info), f32_bytes_from(v));
    else if (dtype == Dtype::bf16)
        add_blob(std::move(info), bf16_bytes_from(v));
    else
        throw ValidationError("add_vector: dtype must be f32 or bf16");
}

void TensorContainer::Writer::add_u4packed(const std::string& name, std::size_t rows,
                                           std::size_t cols,
                                           const std::vector<std::uint8_t>& bytes) {
    TensorInfo info;
    info.name = name;
    info.dtype = Dtype::u4packed;
    info.shape = {rows, cols};
    add_blob(std::move(info), bytes);
}

void TensorContainer::Writer::add_u8(const std::string& name,
                                     const std::vector<std::size_t>& shape,
                                     const std::vector<std::uint8_t>& bytes) {
    TensorInfo info;
    info.name = name;
    info.dtype = Dtype::u8;
    info.shape = shape;
    add_blob(std::move(info), bytes);
}

void TensorContainer::Writer::finish() {
    if (finished_) return;
    json doc;
    doc["tensors"] = json::array();
    for (const auto& t : tensors_) {
        doc["tensors"].push_back({{"name", t.name},
                                  {"dtype", to_string(t.dtype)},
                                  {"shape", t.shape},
                                  {"file", t.file},
                                  {"byte_order", "little-endian"}});
    }
    atomic_write_file(dir_ / "manifest.json", doc.dump(2) + "\n");
    finished_ = true;
}

} // namespace dpq
