#include "mdreg/io.hpp"

#include "mdreg/field_ops.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace mdreg::io {

using json = nlohmann::json;

LengthMismatch::LengthMismatch(const std::string& file, std::uint64_t expected,
                               std::uint64_t actual)
    : FormatError(file + ": payload length mismatch, expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(actual),
                  std::min(expected, actual)),
      expected_(expected), actual_(actual)
{
}

namespace {

const char* kind_name(Kind k)
{
    switch (k) {
    case Kind::scalar:
        return "scalar";
    case Kind::vector:
        return "vector";
    case Kind::labels:
        return "labels";
    }
    return "?";
}

std::size_t dtype_size(DType t)
{
    return t == DType::f32 ? 4 : 2;
}

template <typename T>
void put_le(std::string& out, T value)
{
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(T));
    }
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const char* p)
{
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(T));
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

// Byte offset of a key in a JSON text, for error reports.
std::uint64_t key_offset(const std::string& text, const char* key)
{
    const auto pos = text.find('"' + std::string(key) + '"');
    return pos == std::string::npos ? 0 : pos;
}

fs::path payload_path(const fs::path& sidecar)
{
    fs::path p = sidecar;
    return p.replace_extension(".raw");
}

void write_payload(const fs::path& sidecar, Kind kind, const std::vector<int>& dims, int channels,
                   DType dtype, const std::string& payload, const Provenance& prov)
{
    const fs::path data = payload_path(sidecar);
    json h;
    h["magic"] = kMagic;
    h["format_version"] = kFormatVersion;
    h["kind"] = kind_name(kind);
    h["dims"] = dims;
    h["channels"] = channels;
    h["dtype"] = dtype == DType::f32 ? "f32" : "u16";
    h["byte_order"] = "little";
    h["data_file"] = data.filename().string();
    if (prov.seed || !prov.config_hash.empty()) {
        json p = json::object();
        if (prov.seed) {
            p["seed"] = *prov.seed;
        }
        if (!prov.config_hash.empty()) {
            p["config_hash"] = prov.config_hash;
        }
        h["provenance"] = p;
    }
    write_file_atomic(data, payload);
    write_file_atomic(sidecar, h.dump(2) + "\n");
}

std::string f32_payload(const Field& f)
{
    std::string out;
    out.reserve(f.size() * 4);
    for (double x : f.raw()) {
        put_le(out, static_cast<float>(x));
    }
    return out;
}

struct Loaded {
    VolumeHeader header;
    std::string payload;
};

Loaded load(const fs::path& path)
{
    Loaded l;
    l.header = read_header(path);
    const fs::path data = path.parent_path() / l.header.data_file;
    l.payload = read_file(data);
    const std::uint64_t expected = l.header.payload_bytes();
    if (l.payload.size() != expected) {
        throw LengthMismatch(data.string(), expected, l.payload.size());
    }
    return l;
}

Field decode_f32(const Loaded& l)
{
    Field f(Shape(l.header.dims), l.header.channels);
    const char* p = l.payload.data();
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] = get_le<float>(p + 4 * i);
    }
    return f;
}

} // namespace

std::uint64_t VolumeHeader::payload_bytes() const
{
    std::uint64_t n = static_cast<std::uint64_t>(channels) * dtype_size(dtype);
    for (int d : dims) {
        n *= static_cast<std::uint64_t>(d);
    }
    return n;
}

void write_file_atomic(const fs::path& path, const std::string& bytes)
{
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::random_device rd;
    const fs::path tmp = dir / ("." + path.filename().string() + ".tmp" + std::to_string(rd()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            fs::remove(tmp);
            throw IoError("write failed for " + path.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_volume(const fs::path& path, const Volume& v, const Provenance& prov)
{
    write_payload(path, Kind::scalar, v.shape().dims(), 1, DType::f32, f32_payload(v), prov);
}

void write_vector(const fs::path& path, const VectorField& v, const Provenance& prov)
{
    write_payload(path, Kind::vector, v.shape().dims(), v.channels(), DType::f32, f32_payload(v),
                  prov);
}

void write_labels(const fs::path& path, const LabelVolume& v, const Provenance& prov)
{
    std::string out;
    out.reserve(v.voxels() * 2);
    for (std::uint16_t x : v.raw()) {
        put_le(out, x);
    }
    write_payload(path, Kind::labels, v.shape().dims(), 1, DType::u16, out, prov);
}

VolumeHeader read_header(const fs::path& path)
{
    const std::string text = read_file(path);
    json h;
    try {
        h = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": header is not valid JSON", e.byte);
    }
    if (!h.is_object() || !h.contains("magic") || h["magic"] != kMagic) {
        throw BadMagic(path.string() + ": bad magic, expected \"MDRN\"", key_offset(text, "magic"));
    }
    if (!h.contains("format_version") || h["format_version"] != kFormatVersion) {
        throw VersionMismatch(path.string() + ": unsupported format_version (reader supports " +
                                  std::to_string(kFormatVersion) + ")",
                              key_offset(text, "format_version"));
    }
    auto field_error = [&](const char* key, const std::string& why) {
        return FormatError(path.string() + ": " + key + " " + why, key_offset(text, key));
    };
    VolumeHeader hdr;
    try {
        const std::string kind = h.at("kind");
        if (kind == "scalar") {
            hdr.kind = Kind::scalar;
        } else if (kind == "vector") {
            hdr.kind = Kind::vector;
        } else if (kind == "labels") {
            hdr.kind = Kind::labels;
        } else {
            throw field_error("kind", "must be scalar, vector or labels");
        }
        hdr.dims = h.at("dims").get<std::vector<int>>();
        hdr.channels = h.at("channels");
        const std::string dtype = h.at("dtype");
        if (dtype != "f32" && dtype != "u16") {
            throw field_error("dtype", "must be f32 or u16");
        }
        hdr.dtype = dtype == "f32" ? DType::f32 : DType::u16;
        if (h.at("byte_order") != "little") {
            throw field_error("byte_order", "must be \"little\"");
        }
        hdr.data_file = h.at("data_file");
        if (h.contains("provenance")) {
            const auto& p = h["provenance"];
            if (p.contains("seed")) {
                hdr.provenance.seed = p["seed"].get<std::uint64_t>();
            }
            if (p.contains("config_hash")) {
                hdr.provenance.config_hash = p["config_hash"];
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed header: " + e.what(), 0);
    }
    if (hdr.dims.empty() || hdr.dims.size() > 3 ||
        std::any_of(hdr.dims.begin(), hdr.dims.end(), [](int d) { return d < 1; })) {
        throw field_error("dims", "must list 1 to 3 positive sizes");
    }
    const int rank = static_cast<int>(hdr.dims.size());
    const bool consistent =
        (hdr.kind == Kind::scalar && hdr.channels == 1 && hdr.dtype == DType::f32) ||
        (hdr.kind == Kind::vector && hdr.channels == rank && hdr.dtype == DType::f32) ||
        (hdr.kind == Kind::labels && hdr.channels == 1 && hdr.dtype == DType::u16);
    if (!consistent) {
        throw field_error("channels", "inconsistent with kind and dtype");
    }
    return hdr;
}

AnyVolume read_any(const fs::path& path)
{
    const Loaded l = load(path);
    switch (l.header.kind) {
    case Kind::scalar:
        return Volume(decode_f32(l));
    case Kind::vector:
        return VectorField(decode_f32(l));
    case Kind::labels: {
        LabelVolume lv{Shape(l.header.dims)};
        for (std::size_t i = 0; i < lv.voxels(); ++i) {
            lv[i] = get_le<std::uint16_t>(l.payload.data() + 2 * i);
        }
        return lv;
    }
    }
    throw IoError("unreachable");
}

namespace {

template <typename T>
T read_kind(const fs::path& path, const char* expected)
{
    AnyVolume any = read_any(path);
    if (auto* v = std::get_if<T>(&any)) {
        if constexpr (!std::is_same_v<T, LabelVolume>) {
            if (!v->all_finite()) {
                throw IoError(path.string() + ": contains non-finite values");
            }
        }
        return std::move(*v);
    }
    throw IoError(path.string() + ": expected a " + expected + " file");
}

} // namespace

Volume read_volume(const fs::path& path)
{
    return read_kind<Volume>(path, "scalar");
}

VectorField read_vector(const fs::path& path)
{
    return read_kind<VectorField>(path, "vector");
}

LabelVolume read_labels(const fs::path& path)
{
    return read_kind<LabelVolume>(path, "labels");
}

Field quantize_f32(const Field& f)
{
    Field out = f;
    for (double& x : out.raw()) {
        x = static_cast<float>(x);
    }
    return out;
}

std::string format_number(double x)
{
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, r.ptr);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'D', 'R', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string fnv1a(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<std::pair<std::string, ad::Parameter*>> named_parameters(ModelParams& p)
{
    std::vector<std::pair<std::string, ad::Parameter*>> out;
    auto layer = [&](const std::string& name, ConvLayer& c) {
        out.emplace_back(name + ".weight", &c.weight);
        out.emplace_back(name + ".bias", &c.bias);
    };
    for (std::size_t l = 0; l < p.subnets.size(); ++l) {
        auto& s = p.subnets[l];
        const std::string base = "subnet" + std::to_string(l);
        for (std::size_t k = 0; k < s.encoder.size(); ++k) {
            layer(base + ".encoder" + std::to_string(k), s.encoder[k]);
        }
        for (std::size_t k = 0; k < s.decoder.size(); ++k) {
            layer(base + ".decoder" + std::to_string(k), s.decoder[k]);
        }
        for (std::size_t k = 0; k < s.head.size(); ++k) {
            layer(base + ".head" + std::to_string(k), s.head[k]);
        }
        layer(base + ".output", s.output);
    }
    for (std::size_t l = 0; l < p.velocities.size(); ++l) {
        out.emplace_back("velocity" + std::to_string(l), &p.velocities[l]);
    }
    return out;
}

json spec_json(const SubnetSpec& s)
{
    return {{"encoder", s.encoder},
            {"decoder_filters", s.decoder_filters},
            {"head", s.head},
            {"leaky_slope", s.leaky_slope},
            {"width", s.width}};
}

} // namespace

std::string spec_hash(const ModelParams& p)
{
    std::ostringstream os;
    os << p.spec.signature() << ";mode:" << to_string(p.mode) << ";levels:" << p.levels
       << ";dims:" << p.image_shape.str();
    return fnv1a(os.str());
}

void write_checkpoint(const fs::path& path, const ModelParams& params,
                      const RegistrationConfig& cfg)
{
    ModelParams p = params;
    json m;
    m["spec_hash"] = spec_hash(p);
    m["mode"] = to_string(p.mode);
    m["levels"] = p.levels;
    m["dims"] = p.image_shape.dims();
    m["seed"] = p.seed;
    m["spec"] = spec_json(p.spec);
    m["config"] = json::parse(config_json(cfg));
    json tensors = json::array();
    std::string data;
    for (auto& [name, param] : named_parameters(p)) {
        const Field& f = param->value;
        tensors.push_back({{"name", name},
                           {"dims", f.shape().dims()},
                           {"channels", f.channels()},
                           {"count", f.size()}});
        data += f32_payload(f);
    }
    m["tensors"] = tensors;
    const std::string manifest = m.dump();

    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, manifest.size());
    out += manifest;
    out += data;
    write_file_atomic(path, out);
}

ModelParams read_checkpoint(const fs::path& path, RegistrationConfig* cfg)
{
    const std::string bytes = read_file(path);
    const std::string name = path.string();
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw BadMagic(name + ": not a checkpoint (bad magic)", 0);
    }
    if (bytes.size() < 20) {
        throw LengthMismatch(name, 20, bytes.size());
    }
    const auto version = get_le<std::uint32_t>(bytes.data() + 8);
    if (version != kCheckpointVersion) {
        throw VersionMismatch(name + ": checkpoint version " + std::to_string(version) +
                                  ", reader supports " + std::to_string(kCheckpointVersion),
                              8);
    }
    const auto manifest_len = get_le<std::uint64_t>(bytes.data() + 12);
    if (20 + manifest_len > bytes.size()) {
        throw LengthMismatch(name, 20 + manifest_len, bytes.size());
    }
    json m;
    try {
        m = json::parse(bytes.substr(20, manifest_len));
    } catch (const json::parse_error& e) {
        throw FormatError(name + ": manifest is not valid JSON", 20 + e.byte);
    }

    ModelParams p;
    try {
        SubnetSpec spec;
        const auto& s = m.at("spec");
        spec.encoder = s.at("encoder").get<std::vector<int>>();
        spec.decoder_filters = s.at("decoder_filters");
        spec.head = s.at("head").get<std::vector<int>>();
        spec.leaky_slope = s.at("leaky_slope");
        spec.width = s.at("width");
        p = init_params(spec, mode_from_string(m.at("mode")),
                        Shape(m.at("dims").get<std::vector<int>>()), m.at("levels"),
                        m.at("seed").get<std::uint64_t>());
        if (spec_hash(p) != m.at("spec_hash").get<std::string>()) {
            throw FormatError(name + ": spec hash does not match the manifest", 20);
        }
        if (cfg) {
            *cfg = parse_config(m.at("config").dump());
        }
    } catch (const json::exception& e) {
        throw FormatError(name + ": malformed manifest: " + e.what(), 20);
    }

    std::uint64_t offset = 20 + manifest_len;
    const auto& tensors = m.at("tensors");
    auto named = named_parameters(p);
    if (tensors.size() != named.size()) {
        throw FormatError(name + ": tensor count does not match the model layout", 20);
    }
    std::uint64_t total = offset;
    for (const auto& t : tensors) {
        total += 4 * t.at("count").get<std::uint64_t>();
    }
    if (total != bytes.size()) {
        throw LengthMismatch(name, total, bytes.size());
    }
    for (std::size_t k = 0; k < named.size(); ++k) {
        Field& f = named[k].second->value;
        if (tensors[k].at("name") != named[k].first || tensors[k].at("count") != f.size()) {
            throw FormatError(name + ": tensor " + named[k].first + " does not match the layout",
                              20);
        }
        for (std::size_t i = 0; i < f.size(); ++i, offset += 4) {
            f[i] = get_le<float>(bytes.data() + offset);
        }
        named[k].second->zero_grad();
    }
    return p;
}

// ---------------------------------------------------------------- config

RegistrationConfig parse_config(const std::string& json_text)
{
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError("config is not valid JSON", e.byte);
    }
    if (!j.is_object()) {
        throw FormatError("config must be a JSON object", 0);
    }
    RegistrationConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "levels") c.levels = value;
            else if (key == "lambda") c.lambda = value;
            else if (key == "steps") c.steps = value;
            else if (key == "sigma") c.sigma = value;
            else if (key == "ksize") c.ksize = value;
            else if (key == "smoothing") c.smoothing = value;
            else if (key == "lr") c.lr = value;
            else if (key == "batch") c.batch = value;
            else if (key == "iterations") c.iterations = value;
            else if (key == "width") c.width = value;
            else if (key == "leaky_slope") c.leaky_slope = value;
            else if (key == "direct_lr") c.direct_lr = value;
            else if (key == "direct_iterations") c.direct_iterations = value;
            else if (key == "beta1") c.beta1 = value;
            else if (key == "beta2") c.beta2 = value;
            else if (key == "eps") c.eps = value;
            else if (key == "seed") c.seed = value;
            else if (key == "mode") c.mode = mode_from_string(value);
            else throw FormatError("unknown config key '" + key + "'", key_offset(json_text, key.c_str()));
        } catch (const json::type_error&) {
            throw FormatError("config key '" + key + "' has the wrong type",
                              key_offset(json_text, key.c_str()));
        }
    }
    c.validate();
    return c;
}

std::string config_json(const RegistrationConfig& c)
{
    json j{{"levels", c.levels},
           {"lambda", c.lambda},
           {"steps", c.steps},
           {"sigma", c.sigma},
           {"ksize", c.ksize},
           {"smoothing", c.smoothing},
           {"lr", c.lr},
           {"batch", c.batch},
           {"iterations", c.iterations},
           {"width", c.width},
           {"leaky_slope", c.leaky_slope},
           {"direct_lr", c.direct_lr},
           {"direct_iterations", c.direct_iterations},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps", c.eps},
           {"seed", c.seed},
           {"mode", to_string(c.mode)}};
    return j.dump();
}

std::string config_hash(const RegistrationConfig& cfg)
{
    return fnv1a(config_json(cfg));
}

// ---------------------------------------------------------------- plots

namespace {

struct Slice {
    int rows = 0;
    int cols = 0;
    std::vector<std::size_t> voxel; // row-major
    int row_axis = 0;               // field axes spanning the slice
    int col_axis = 1;
};

Slice take_slice(const Shape& s, int axis, int index)
{
    Slice sl;
    if (s.rank() == 1) {
        throw FieldError("plots need a 2-D or 3-D field");
    }
    if (s.rank() == 2) {
        sl.row_axis = 0;
        sl.col_axis = 1;
        sl.rows = s.dim(0);
        sl.cols = s.dim(1);
        for (int r = 0; r < sl.rows; ++r) {
            for (int c = 0; c < sl.cols; ++c) {
                sl.voxel.push_back(s.index(0, r, c));
            }
        }
        return sl;
    }
    if (axis < 0 || axis > 2) {
        throw FieldError("slice axis must be 0, 1 or 2");
    }
    if (index < 0 || index >= s.dim(axis)) {
        throw FieldError("slice index " + std::to_string(index) + " outside [0, " +
                         std::to_string(s.dim(axis) - 1) + "]");
    }
    int axes[2];
    int k = 0;
    for (int a = 0; a < 3; ++a) {
        if (a != axis) {
            axes[k++] = a;
        }
    }
    sl.row_axis = axes[0];
    sl.col_axis = axes[1];
    sl.rows = s.dim(axes[0]);
    sl.cols = s.dim(axes[1]);
    for (int r = 0; r < sl.rows; ++r) {
        for (int c = 0; c < sl.cols; ++c) {
            int q[3];
            q[axis] = index;
            q[axes[0]] = r;
            q[axes[1]] = c;
            sl.voxel.push_back(s.index(q[0], q[1], q[2]));
        }
    }
    return sl;
}

void write_ppm(const fs::path& path, int width, int height, const std::vector<unsigned char>& rgb)
{
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
    write_file_atomic(path, out);
}

} // namespace

void write_grid_plot(const fs::path& path, const DeformationField& d, int axis, int index,
                     int spacing, int zoom)
{
    const Slice sl = take_slice(d.shape(), axis, index);
    const int w = sl.cols * zoom;
    const int h = sl.rows * zoom;
    // in-plane displacement components on the slice
    Volume du(Shape{sl.rows, sl.cols}), dv(Shape{sl.rows, sl.cols});
    for (std::size_t i = 0; i < sl.voxel.size(); ++i) {
        du[i] = d.disp.at(sl.row_axis, sl.voxel[i]);
        dv[i] = d.disp.at(sl.col_axis, sl.voxel[i]);
    }
    std::vector<double> coords;
    coords.reserve(2 * static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            coords.push_back(std::min((y + 0.5) / zoom, sl.rows - 1.0));
            coords.push_back(std::min((x + 0.5) / zoom, sl.cols - 1.0));
        }
    }
    const auto su = sample_linear(du, coords);
    const auto sv = sample_linear(dv, coords);
    const double half_width = 0.5 / zoom;
    std::vector<unsigned char> rgb(3 * static_cast<std::size_t>(w) * h, 255);
    for (std::size_t p = 0; p < su.size(); ++p) {
        const double u = coords[2 * p] + su[p];
        const double v = coords[2 * p + 1] + sv[p];
        const double ru = std::abs(u - spacing * std::round(u / spacing));
        const double rv = std::abs(v - spacing * std::round(v / spacing));
        if (ru < half_width || rv < half_width) {
            rgb[3 * p] = rgb[3 * p + 1] = rgb[3 * p + 2] = 0;
        }
    }
    write_ppm(path, w, h, rgb);
}

void write_jacobian_plot(const fs::path& path, const Volume& det, int axis, int index, int zoom)
{
    const Slice sl = take_slice(det.shape(), axis, index);
    const int w = sl.cols * zoom;
    const int h = sl.rows * zoom;
    std::vector<unsigned char> rgb(3 * static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double j = det[sl.voxel[(y / zoom) * sl.cols + x / zoom]];
            unsigned char r, g, b;
            if (!(j > 0.0)) {
                r = 200;
                g = 0;
                b = 0;
            } else {
                // white at 1, red-ish for expansion, blue for compression
                const double t = std::clamp(std::log2(j) / 2.0, -1.0, 1.0);
                const auto fade = static_cast<unsigned char>(255.0 * (1.0 - std::abs(t)));
                r = t > 0 ? 255 : fade;
                b = t < 0 ? 255 : fade;
                g = fade;
            }
            const std::size_t p = 3 * (static_cast<std::size_t>(y) * w + x);
            rgb[p] = r;
            rgb[p + 1] = g;
            rgb[p + 2] = b;
        }
    }
    write_ppm(path, w, h, rgb);
}

} // namespace mdreg::io
