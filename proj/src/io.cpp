#include "realcompo/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "realcompo/errors.hpp"
#include "realcompo/rng.hpp"

namespace realcompo {

using nlohmann::json;

namespace {

constexpr char kArchiveMagic[8] = {'R', 'C', 'T', 'E', 'N', 'S', 'O', 'R'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::uint64_t uint(int width) {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int b = 0; b < width; ++b) {
            v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * b);
        }
        return v;
    }
    double f64() {
        const std::uint64_t bits = uint(8);
        double d;
        std::memcpy(&d, &bits, sizeof d);
        return d;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) {
            throw ConfigError("io", "truncated tensor archive");
        }
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("io", "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ConfigError("io", "cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ArchiveEntry matrix_entry(const Matrix& m) {
    return {{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, m.data()};
}

ArchiveEntry vector_entry(const std::vector<double>& v) { return {{v.size()}, v}; }

Matrix matrix_from(const TensorArchive& a, const std::string& name) {
    const auto it = a.find(name);
    if (it == a.end() || it->second.dims.size() != 2) {
        throw ConfigError("io", "parameter archive lacks matrix '" + name + "'");
    }
    Matrix m(static_cast<int>(it->second.dims[0]), static_cast<int>(it->second.dims[1]));
    m.data() = it->second.values;
    return m;
}

std::vector<double> vector_from(const TensorArchive& a, const std::string& name) {
    const auto it = a.find(name);
    if (it == a.end() || it->second.dims.size() != 1) {
        throw ConfigError("io", "parameter archive lacks vector '" + name + "'");
    }
    return it->second.values;
}

struct PngWriter {
    png_structp png = nullptr;
    png_infop info  = nullptr;
    FILE* file      = nullptr;

    ~PngWriter() {
        if (png != nullptr) {
            png_destroy_write_struct(&png, info != nullptr ? &info : nullptr);
        }
        if (file != nullptr) {
            std::fclose(file);
        }
    }
};

void write_png_rows(const fs::path& path, int width, int height, int color_type,
                    const std::vector<std::vector<png_byte>>& rows) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    PngWriter w;
    w.file = std::fopen(path.string().c_str(), "wb");
    if (w.file == nullptr) {
        throw ConfigError("io", "cannot write " + path.string());
    }
    w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (w.png == nullptr) {
        throw ConfigError("io", "libpng initialisation failed");
    }
    w.info = png_create_info_struct(w.png);
    if (w.info == nullptr || setjmp(png_jmpbuf(w.png))) {
        throw ConfigError("io", "libpng failed writing " + path.string());
    }
    png_init_io(w.png, w.file);
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    for (const auto& row : rows) {
        png_write_row(w.png, row.data());
    }
    png_write_end(w.png, nullptr);
}

png_byte to_byte(double v) { return static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::array<double, 2> point_from_json(const json& p) {
    if (!p.is_array() || p.size() != 2) {
        throw ConfigError("io", "keypoint must be [x, y]");
    }
    return {p[0].get<double>(), p[1].get<double>()};
}

}  // namespace

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
    std::vector<std::uint8_t> out(std::begin(kArchiveMagic), std::end(kArchiveMagic));
    put_u32(out, kTensorArchiveVersion);
    put_u32(out, static_cast<std::uint32_t>(archive.size()));
    for (const auto& [name, e] : archive) {
        std::uint64_t n = 1;
        for (auto d : e.dims) {
            n *= d;
        }
        if (n != e.values.size()) {
            throw ShapeError("io", "archive entry '" + name + "' dims do not match value count");
        }
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
        for (auto d : e.dims) {
            put_u64(out, d);
        }
        for (double v : e.values) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            put_u64(out, bits);
        }
    }
    return out;
}

TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.str(8) != std::string(kArchiveMagic, 8)) {
        throw ConfigError("io", "not a tensor archive (bad magic)");
    }
    const auto version = static_cast<std::uint32_t>(r.uint(4));
    if (version != kTensorArchiveVersion) {
        throw ConfigError("io", "unsupported tensor archive version " + std::to_string(version));
    }
    const auto count = r.uint(4);
    TensorArchive archive;
    for (std::uint64_t e = 0; e < count; ++e) {
        const std::string name = r.str(static_cast<std::size_t>(r.uint(4)));
        ArchiveEntry entry;
        const auto rank = r.uint(4);
        std::uint64_t n = 1;
        for (std::uint64_t d = 0; d < rank; ++d) {
            entry.dims.push_back(r.uint(8));
            n *= entry.dims.back();
        }
        if (n > bytes.size()) {
            throw ConfigError("io", "tensor archive entry '" + name + "' larger than file");
        }
        entry.values.reserve(static_cast<std::size_t>(n));
        for (std::uint64_t i = 0; i < n; ++i) {
            entry.values.push_back(r.f64());
        }
        archive.emplace(name, std::move(entry));
    }
    if (!r.done()) {
        throw ConfigError("io", "trailing bytes after tensor archive");
    }
    return archive;
}

void write_archive(const fs::path& path, const TensorArchive& archive) { write_bytes(path, encode_archive(archive)); }

TensorArchive read_archive(const fs::path& path) { return decode_archive(read_bytes(path)); }

void write_latent(const fs::path& path, const Latent& latent) {
    TensorArchive a;
    a["sample"] = {{static_cast<std::uint64_t>(latent.height()), static_cast<std::uint64_t>(latent.width()),
                    static_cast<std::uint64_t>(latent.depth())},
                   latent.data()};
    write_archive(path, a);
}

Latent read_latent(const fs::path& path) {
    const auto a  = read_archive(path);
    const auto it = a.find("sample");
    if (it == a.end() || it->second.dims.size() != 3) {
        throw ConfigError("io", path.string() + " holds no rank-3 'sample' tensor");
    }
    const auto& d = it->second.dims;
    Latent z(static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2]));
    z.data() = it->second.values;
    return z;
}

void write_micro_params(const fs::path& path, const MicroParams& p) {
    p.validate();
    TensorArchive a;
    a["channels"] = {{1}, {static_cast<double>(p.channels)}};
    a["w_lift"]   = matrix_entry(p.w_lift);
    a["b_lift"]   = vector_entry(p.b_lift);
    a["w_q"]      = matrix_entry(p.proj.w_q);
    a["w_k"]      = matrix_entry(p.proj.w_k);
    a["w_v"]      = matrix_entry(p.w_v);
    a["w_out"]    = matrix_entry(p.w_out);
    a["b_out"]    = vector_entry(p.b_out);
    write_archive(path, a);
}

MicroParams read_micro_params(const fs::path& path) {
    const auto a = read_archive(path);
    MicroParams p;
    const auto ch = vector_from(a, "channels");
    if (ch.size() != 1) {
        throw ConfigError("io", "malformed channel entry in parameter archive");
    }
    p.channels = static_cast<int>(ch[0]);
    p.w_lift   = matrix_from(a, "w_lift");
    p.b_lift   = vector_from(a, "b_lift");
    p.proj.w_q = matrix_from(a, "w_q");
    p.proj.w_k = matrix_from(a, "w_k");
    p.w_v      = matrix_from(a, "w_v");
    p.w_out    = matrix_from(a, "w_out");
    p.b_out    = vector_from(a, "b_out");
    p.validate();
    return p;
}

void write_png(const fs::path& path, const Latent& image, double scale, double offset, int zoom) {
    if (image.size() == 0 || zoom < 1) {
        throw ShapeError("io", "cannot write an empty image");
    }
    const bool rgb  = image.depth() >= 3;
    const int w     = image.width() * zoom;
    const int h     = image.height() * zoom;
    const int chans = rgb ? 3 : 1;
    std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(h), std::vector<png_byte>(static_cast<std::size_t>(w) * chans));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < chans; ++c) {
                rows[y][static_cast<std::size_t>(x) * chans + c] = to_byte(scale * image.at(y / zoom, x / zoom, c) + offset);
            }
        }
    }
    write_png_rows(path, w, h, rgb ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, rows);
}

void write_png_heatmap(const fs::path& path, const Grid& grid, int zoom) {
    if (grid.size() == 0) {
        throw ShapeError("io", "cannot write an empty heat map");
    }
    const auto [lo, hi] = std::minmax_element(grid.data().begin(), grid.data().end());
    const double span   = *hi - *lo;
    Latent img(grid.height(), grid.width(), 1);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        img[i] = span > 0.0 ? (grid[i] - *lo) / span : 0.0;
    }
    write_png(path, img, 1.0, 0.0, zoom);
}

SegmentationMap read_pgm(const fs::path& path) {
    const auto bytes = read_bytes(path);
    std::size_t pos  = 0;
    auto skip_space  = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') {
                    ++pos;
                }
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto token = [&] {
        skip_space();
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
            t.push_back(static_cast<char>(bytes[pos++]));
        }
        if (t.empty()) {
            throw ConfigError("io", "truncated PGM header in " + path.string());
        }
        return t;
    };
    const std::string magic = token();
    if (magic != "P2" && magic != "P5") {
        throw ConfigError("io", path.string() + " is not a PGM (P2/P5) file");
    }
    SegmentationMap seg;
    try {
        seg.width          = std::stoi(token());
        seg.height         = std::stoi(token());
        const int maxval   = std::stoi(token());
        if (seg.width < 1 || seg.height < 1 || maxval < 1 || maxval > 65535) {
            throw ConfigError("io", "invalid PGM header in " + path.string());
        }
        const std::size_t n = static_cast<std::size_t>(seg.width) * seg.height;
        if (magic == "P2") {
            for (std::size_t i = 0; i < n; ++i) {
                seg.labels.push_back(std::stoi(token()));
            }
        } else {
            ++pos;  // single whitespace after maxval
            const int width = maxval > 255 ? 2 : 1;
            if (pos + n * width > bytes.size()) {
                throw ConfigError("io", "truncated PGM raster in " + path.string());
            }
            for (std::size_t i = 0; i < n; ++i) {
                int v = bytes[pos++];
                if (width == 2) {
                    v = (v << 8) | bytes[pos++];
                }
                seg.labels.push_back(v);
            }
        }
    } catch (const std::invalid_argument&) {
        throw ConfigError("io", "malformed number in " + path.string());
    }
    return seg;
}

void write_pgm(const fs::path& path, const SegmentationMap& seg) {
    std::ostringstream os;
    const int maxval = std::max(1, *std::max_element(seg.labels.begin(), seg.labels.end()));
    os << "P2\n" << seg.width << " " << seg.height << "\n" << maxval << "\n";
    for (int r = 0; r < seg.height; ++r) {
        for (int c = 0; c < seg.width; ++c) {
            os << seg.at(r, c) << (c + 1 == seg.width ? "\n" : " ");
        }
    }
    write_text(path, os.str());
}

void write_grid_csv(const fs::path& path, const Grid& grid) {
    std::ostringstream os;
    os.precision(17);
    for (int r = 0; r < grid.height(); ++r) {
        for (int c = 0; c < grid.width(); ++c) {
            os << grid.at(r, c) << (c + 1 == grid.width() ? "\n" : ",");
        }
    }
    write_text(path, os.str());
}

Layout layout_from_json(const json& j) {
    if (!j.is_array()) {
        throw ConfigError("io", "layout JSON must be a list of {\"object\", \"box\"} entries");
    }
    Layout layout;
    for (const auto& e : j) {
        if (!e.is_object() || !e.contains("object") || !e.contains("box") || !e["object"].is_string() ||
            !e["box"].is_array() || e["box"].size() != 4) {
            throw ConfigError("io", "layout entry must be {\"object\": string, \"box\": [x0, y0, x1, y1]}");
        }
        Box b;
        for (int k = 0; k < 4; ++k) {
            if (!e["box"][k].is_number()) {
                throw ConfigError("io", "layout box coordinates must be numbers");
            }
        }
        b.label = e["object"].get<std::string>();
        b.x0    = e["box"][0].get<double>();
        b.y0    = e["box"][1].get<double>();
        b.x1    = e["box"][2].get<double>();
        b.y1    = e["box"][3].get<double>();
        layout.boxes.push_back(std::move(b));
    }
    return layout;
}

json layout_to_json(const Layout& layout) {
    json j = json::array();
    for (const auto& b : layout.boxes) {
        j.push_back({{"object", b.label}, {"box", {b.x0, b.y0, b.x1, b.y1}}});
    }
    return j;
}

Layout read_layout(const fs::path& path) {
    try {
        return layout_from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        throw ConfigError("io", path.string() + ": " + e.what());
    }
}

KeypointSet keypoints_from_json(const json& j) {
    if (!j.is_array()) {
        throw ConfigError("io", "keypoint JSON must be a list of {\"object\", \"points\"} entries");
    }
    KeypointSet set;
    for (const auto& e : j) {
        if (!e.is_object() || !e.contains("object") || !e.contains("points") || !e["points"].is_array()) {
            throw ConfigError("io", "keypoint entry must be {\"object\": string, \"points\": [[x, y], ...]}");
        }
        KeypointGroup g;
        g.label = e["object"].get<std::string>();
        for (const auto& p : e["points"]) {
            g.points.push_back(point_from_json(p));
        }
        set.groups.push_back(std::move(g));
    }
    return set;
}

KeypointSet read_keypoints(const fs::path& path) {
    try {
        return keypoints_from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        throw ConfigError("io", path.string() + ": " + e.what());
    }
}

json mixture_to_json(const MixtureSpec& spec) {
    json j;
    j["format"]  = "realcompo-mixture";
    j["version"] = 1;
    j["shape"]   = {spec.shape.height, spec.shape.width, spec.shape.depth};
    j["objects"] = json::array();
    for (const auto& o : spec.objects) {
        j["objects"].push_back({{"name", o.name}, {"color", o.color}});
    }
    j["components"] = json::array();
    for (const auto& c : spec.components) {
        json comp;
        comp["weight"]  = c.weight;
        comp["anchors"] = json::array();
        for (const auto& a : c.anchors) {
            comp["anchors"].push_back({a[0], a[1]});
        }
        comp["mean"]  = c.mean.data();
        comp["blobs"] = json::array();
        for (const auto& b : c.blobs) {
            comp["blobs"].push_back(b.data());
        }
        j["components"].push_back(std::move(comp));
    }
    return j;
}

MixtureSpec mixture_from_json(const json& j) {
    try {
        if (j.value("format", "") != "realcompo-mixture" || j.value("version", 0) != 1) {
            throw ConfigError("io", "not a version-1 realcompo mixture file");
        }
        MixtureSpec spec;
        spec.shape = Shape{j["shape"][0].get<int>(), j["shape"][1].get<int>(), j["shape"][2].get<int>()};
        for (const auto& o : j["objects"]) {
            spec.objects.push_back({o["name"].get<std::string>(), o["color"].get<std::vector<double>>()});
        }
        for (const auto& c : j["components"]) {
            MixtureComponent comp;
            comp.weight = c["weight"].get<double>();
            for (const auto& a : c["anchors"]) {
                comp.anchors.push_back(point_from_json(a));
            }
            comp.mean = Latent(spec.shape);
            auto mean = c["mean"].get<std::vector<double>>();
            if (mean.size() != spec.shape.size()) {
                throw ShapeError("io", "mixture component mean has wrong length");
            }
            comp.mean.data() = std::move(mean);
            for (const auto& b : c["blobs"]) {
                Grid g(spec.shape.height, spec.shape.width);
                auto v = b.get<std::vector<double>>();
                if (v.size() != g.size()) {
                    throw ShapeError("io", "mixture blob has wrong length");
                }
                g.data() = std::move(v);
                comp.blobs.push_back(std::move(g));
            }
            spec.components.push_back(std::move(comp));
        }
        spec.finalize();
        spec.validate();
        return spec;
    } catch (const json::exception& e) {
        throw ConfigError("io", std::string("malformed mixture file: ") + e.what());
    }
}

void write_mixture(const fs::path& path, const MixtureSpec& spec) { write_text(path, mixture_to_json(spec).dump()); }

MixtureSpec read_mixture(const fs::path& path) {
    try {
        return mixture_from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        throw ConfigError("io", path.string() + ": " + e.what());
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("io", "cannot open " + path.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ConfigError("io", "cannot write " + path.string());
    }
    out << text;
}

std::string hex_digest(const void* data, std::size_t n) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(data, n)));
    return buf;
}

std::string latent_digest(const Latent& latent) {
    return hex_digest(latent.data().data(), latent.data().size() * sizeof(double));
}

}  // namespace realcompo
