#pragma once

#include "mdreg/engine.hpp"
#include "mdreg/evalsynth.hpp"
#include "mdreg/field.hpp"
#include "mdreg/regnet.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mdreg::io {

namespace fs = std::filesystem;

/// Unreadable, missing or inconsistent files.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A file parsed but failed a format check at `offset` bytes into it.
class FormatError : public IoError {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : IoError(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset)
    {
    }
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

class BadMagic : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

class LengthMismatch : public FormatError {
public:
    LengthMismatch(const std::string& file, std::uint64_t expected, std::uint64_t actual);
    std::uint64_t expected() const { return expected_; }
    std::uint64_t actual() const { return actual_; }

private:
    std::uint64_t expected_;
    std::uint64_t actual_;
};

inline constexpr const char* kMagic = "MDRN";
inline constexpr int kFormatVersion = 1;

enum class Kind { scalar, vector, labels };
enum class DType { f32, u16 };

struct Provenance {
    std::optional<std::uint64_t> seed;
    std::string config_hash;
};

/// Sidecar JSON header; the payload sits next to it in `data_file`.
struct VolumeHeader {
    Kind kind = Kind::scalar;
    std::vector<int> dims;
    int channels = 1;
    DType dtype = DType::f32;
    std::string data_file;
    Provenance provenance;

    std::uint64_t payload_bytes() const;
};

using AnyVolume = std::variant<Volume, VectorField, LabelVolume>;

/// Writes `<path>` (the JSON sidecar) and `<path stem>.raw`. 64-bit values are
/// rounded to 32-bit floats on the way out.
void write_volume(const fs::path& path, const Volume& v, const Provenance& prov = {});
void write_vector(const fs::path& path, const VectorField& v, const Provenance& prov = {});
void write_labels(const fs::path& path, const LabelVolume& v, const Provenance& prov = {});

VolumeHeader read_header(const fs::path& path);
AnyVolume read_any(const fs::path& path);
Volume read_volume(const fs::path& path);
VectorField read_vector(const fs::path& path);
LabelVolume read_labels(const fs::path& path);

/// Rounds every value to the nearest 32-bit float, i.e. what a write/read cycle keeps.
Field quantize_f32(const Field& f);

/// Writes through a temporary file in the same directory and renames it into place.
void write_file_atomic(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

/// Hash of everything that fixes the parameter layout.
std::string spec_hash(const ModelParams& p);

/// Binary checkpoint: magic "MDRNCKPT", u32 version, u64 manifest length, JSON
/// manifest, then every tensor as little-endian f32 in manifest order.
void write_checkpoint(const fs::path& path, const ModelParams& p, const RegistrationConfig& cfg);
ModelParams read_checkpoint(const fs::path& path, RegistrationConfig* cfg = nullptr);

/// Config JSON: every key optional, defaults from RegistrationConfig.
RegistrationConfig parse_config(const std::string& json_text);
std::string config_json(const RegistrationConfig& cfg);
std::string config_hash(const RegistrationConfig& cfg);

/// Shortest round-trip decimal, independent of the global locale.
std::string format_number(double x);

/// Slice plots. `axis` indexes the field's own axes.
void write_grid_plot(const fs::path& path, const DeformationField& d, int axis, int index,
                     int spacing = 4, int zoom = 4);
void write_jacobian_plot(const fs::path& path, const Volume& det, int axis, int index,
                         int zoom = 4);

} // namespace mdreg::io
