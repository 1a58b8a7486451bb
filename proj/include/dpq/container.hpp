#pragma once

#include "dpq/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dpq {

enum class Dtype { f32, bf16, u4packed, u8 };

std::string to_string(Dtype dtype);
Dtype dtype_from_string(const std::string& s);
std::size_t dtype_byte_size(Dtype dtype); // per element; u4packed handled by shape

struct TensorInfo {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<std::size_t> shape;
    std::string file;

    std::size_t expected_bytes() const;
};

/// Directory of raw little-endian row-major blobs described by a
/// manifest.json. Weight/activation matrices are f32 or bf16; packed INT4
/// payloads are u4packed with shape [rows, cols]; zero-points are u8.
class TensorContainer {
public:
    static TensorContainer open(const std::filesystem::path& dir);

    const std::filesystem::path& dir() const { return dir_; }
    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    bool has(const std::string& name) const;
    const TensorInfo& info(const std::string& name) const;

    /// f32/bf16 2-D (or 1-D, returned as a single row) tensor as doubles.
    Matrix read_matrix(const std::string& name) const;
    std::vector<std::uint8_t> read_bytes(const std::string& name) const;

    class Writer {
    public:
        explicit Writer(std::filesystem::path dir);
        void add_matrix(const std::string& name, const Matrix& m, Dtype dtype = Dtype::f32);
        void add_vector(const std::string& name, const std::vector<double>& v,
                        Dtype dtype = Dtype::f32);
        void add_u4packed(const std::string& name, std::size_t rows, std::size_t cols,
                          const std::vector<std::uint8_t>& bytes);
        void add_u8(const std::string& name, const std::vector<std::size_t>& shape,
                    const std::vector<std::uint8_t>& bytes);
        /// Writes manifest.json; blobs are written as they are added, each
        /// through a temp file and an atomic rename.
        void finish();

    private:
        void add_blob(TensorInfo info, const std::vector<std::uint8_t>& bytes);
        std::filesystem::path dir_;
        std::vector<TensorInfo> tensors_;
        bool finished_ = false;
    };

private:
    std::filesystem::path dir_;
    std::vector<TensorInfo> tensors_;
};

/// Write bytes to `path` via a temp file in the same directory plus rename.
void atomic_write_file(const std::filesystem::path& path,
                       const void* data, std::size_t size);
void atomic_write_file(const std::filesystem::path& path, const std::string& text);

std::vector<std::uint8_t> f32_bytes_from(const std::vector<double>& values);
std::vector<std::uint8_t> bf16_bytes_from(const std::vector<double>& values);

} // namespace dpq
