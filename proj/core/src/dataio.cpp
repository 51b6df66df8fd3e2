#include "attnflow/dataio.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace attnflow {

Tensor Dataset::batch(const std::vector<std::int64_t>& indices) const {
    const std::int64_t per = samples.shape.c * samples.shape.h * samples.shape.w;
    Tensor out(Shape(std::int64_t(indices.size()), samples.shape.c, samples.shape.h,
                     samples.shape.w));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::int64_t idx = indices[i];
        if (idx < 0 || idx >= count()) throw DataError("batch index out of range");
        std::copy_n(samples.data.data() + idx * per, per, out.data.data() + std::int64_t(i) * per);
    }
    return out;
}

Tensor Dataset::condition_batch(const std::vector<std::int64_t>& indices) const {
    if (!has_conditions) throw DataError("dataset has no conditions");
    const std::int64_t per = conditions.shape.c * conditions.shape.h * conditions.shape.w;
    Tensor out(Shape(std::int64_t(indices.size()), conditions.shape.c, conditions.shape.h,
                     conditions.shape.w));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(conditions.data.data() + indices[i] * per, per,
                    out.data.data() + std::int64_t(i) * per);
    }
    return out;
}

// --------------------------------------------------------------------------
// IDX

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("IDX " + path + ": truncated while reading " + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

std::vector<unsigned char> read_payload(std::istream& in, const std::string& path,
                                        std::uint64_t expected) {
    std::vector<unsigned char> buf(expected);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(expected));
    const std::uint64_t got = std::uint64_t(in.gcount());
    if (got != expected) {
        throw FormatError("IDX " + path + ": truncated payload, expected " +
                          std::to_string(expected) + " bytes, got " + std::to_string(got));
    }
    return buf;
}

std::string hex_magic(std::uint32_t m) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08x", m);
    return buf;
}

}  // namespace

Tensor idx_read_images(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open IDX file: " + path);
    const std::uint32_t magic = read_be32(in, path, "magic");
    if (magic != 0x00000803u) {
        throw FormatError("IDX " + path + ": bad image magic " + hex_magic(magic) +
                          ", expected 0x00000803");
    }
    const std::uint32_t n = read_be32(in, path, "count");
    const std::uint32_t h = read_be32(in, path, "rows");
    const std::uint32_t w = read_be32(in, path, "cols");
    const std::uint64_t total = std::uint64_t(n) * h * w;
    const auto buf = read_payload(in, path, total);
    Tensor out(Shape(n, 1, h, w));
    for (std::uint64_t i = 0; i < total; ++i) out.data[i] = double(buf[i]);
    return out;
}

std::vector<int> idx_read_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open IDX file: " + path);
    const std::uint32_t magic = read_be32(in, path, "magic");
    if (magic != 0x00000801u) {
        throw FormatError("IDX " + path + ": bad label magic " + hex_magic(magic) +
                          ", expected 0x00000801");
    }
    const std::uint32_t n = read_be32(in, path, "count");
    const auto buf = read_payload(in, path, n);
    return std::vector<int>(buf.begin(), buf.end());
}

// --------------------------------------------------------------------------
// Resampling / dequantization

Tensor downscale_area(const Tensor& x, int factor) {
    if (factor < 1) throw DomainError("downscale_area: factor must be >= 1");
    if (x.shape.h % factor != 0 || x.shape.w % factor != 0) {
        throw ShapeError("downscale_area: " + x.shape.str() + " not divisible by factor " +
                         std::to_string(factor));
    }
    const std::int64_t B = x.shape.b, C = x.shape.c;
    const std::int64_t Ho = x.shape.h / factor, Wo = x.shape.w / factor;
    Tensor y(Shape(B, C, Ho, Wo));
    const double inv = 1.0 / (double(factor) * factor);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t i = 0; i < Ho; ++i) {
                for (std::int64_t j = 0; j < Wo; ++j) {
                    double acc = 0.0;
                    for (int di = 0; di < factor; ++di) {
                        for (int dj = 0; dj < factor; ++dj) {
                            acc += x.at(b, c, i * factor + di, j * factor + dj);
                        }
                    }
                    y.at(b, c, i, j) = acc * inv;
                }
            }
        }
    }
    return y;
}

Tensor nearest_upsample(const Tensor& x, int factor) {
    if (factor < 1) throw DomainError("nearest_upsample: factor must be >= 1");
    Tensor y(Shape(x.shape.b, x.shape.c, x.shape.h * factor, x.shape.w * factor));
    for (std::int64_t b = 0; b < x.shape.b; ++b) {
        for (std::int64_t c = 0; c < x.shape.c; ++c) {
            for (std::int64_t i = 0; i < y.shape.h; ++i) {
                for (std::int64_t j = 0; j < y.shape.w; ++j) {
                    y.at(b, c, i, j) = x.at(b, c, i / factor, j / factor);
                }
            }
        }
    }
    return y;
}

Tensor dequantize(const Tensor& levels, Rng& rng) {
    Tensor out(levels.shape);
    for (std::size_t i = 0; i < levels.data.size(); ++i) {
        const double k = levels.data[i];
        if (k != std::floor(k) || k < 0.0 || k > 255.0) {
            throw DomainError("dequantize: level " + std::to_string(k) + " at flat index " +
                              std::to_string(i) + " is not an integer in [0,255]");
        }
        out.data[i] = (k + rng.uniform()) / 256.0;
    }
    return out;
}

// --------------------------------------------------------------------------
// Toy 2D density rasters

namespace {

struct Point {
    double x, y;  // in [0,1)
};

Point sample_checker(Rng& rng, int res) {
    // uniform over cells with even (i+j) parity
    for (;;) {
        const std::int64_t i = std::int64_t(rng.below(std::uint64_t(res)));
        const std::int64_t j = std::int64_t(rng.below(std::uint64_t(res)));
        if ((i + j) % 2 != 0) continue;
        return {(double(j) + rng.uniform()) / res, (double(i) + rng.uniform()) / res};
    }
}

Point sample_two_moons(Rng& rng) {
    const double t = M_PI * rng.uniform();
    double x, y;
    if (rng.uniform() < 0.5) {
        x = std::cos(t);
        y = std::sin(t);
    } else {
        x = 1.0 - std::cos(t);
        y = 0.5 - std::sin(t);
    }
    x += 0.08 * rng.normal();
    y += 0.08 * rng.normal();
    // map [-1.25, 2.25] x [-0.75, 1.25] into the unit square
    x = (x + 1.25) / 3.5;
    y = (y + 0.75) / 2.0;
    return {std::min(std::max(x, 0.0), 1.0 - 1e-9), std::min(std::max(y, 0.0), 1.0 - 1e-9)};
}

Point sample_rings(Rng& rng) {
    const double r0 = rng.uniform() < 0.5 ? 0.22 : 0.42;
    const double a = 2.0 * M_PI * rng.uniform();
    const double r = r0 + 0.02 * rng.normal();
    double x = 0.5 + r * std::cos(a);
    double y = 0.5 + r * std::sin(a);
    return {std::min(std::max(x, 0.0), 1.0 - 1e-9), std::min(std::max(y, 0.0), 1.0 - 1e-9)};
}

}  // namespace

Dataset toy2d_grid(const std::string& name, int resolution, std::int64_t n, std::uint64_t seed) {
    if (resolution != 8 && resolution != 16) {
        throw ConfigError("toy2d_grid: resolution must be 8 or 16, got " +
                          std::to_string(resolution));
    }
    int density = 0;
    if (name == "checker-density") {
        density = 0;
    } else if (name == "two-moons") {
        density = 1;
    } else if (name == "rings") {
        density = 2;
    } else {
        throw ConfigError("toy2d_grid: unknown dataset name '" + name + "'");
    }

    const std::int64_t points = 4 * std::int64_t(resolution) * resolution;
    const double norm = double(resolution) * resolution / (4.0 * double(points));
    Rng raster_rng(derive_seed(seed, 0x7071));
    Tensor levels(Shape(n, 1, resolution, resolution));
    std::vector<std::int64_t> counts(std::size_t(resolution) * resolution);
    for (std::int64_t img = 0; img < n; ++img) {
        std::fill(counts.begin(), counts.end(), 0);
        for (std::int64_t p = 0; p < points; ++p) {
            Point pt{};
            switch (density) {
                case 0: pt = sample_checker(raster_rng, resolution); break;
                case 1: pt = sample_two_moons(raster_rng); break;
                default: pt = sample_rings(raster_rng); break;
            }
            const std::int64_t i = std::min<std::int64_t>(std::int64_t(pt.y * resolution),
                                                          resolution - 1);
            const std::int64_t j = std::min<std::int64_t>(std::int64_t(pt.x * resolution),
                                                          resolution - 1);
            counts[std::size_t(i * resolution + j)]++;
        }
        for (std::int64_t k = 0; k < resolution * resolution; ++k) {
            const double v = std::min(1.0, double(counts[std::size_t(k)]) * norm);
            levels.data[std::size_t(img * resolution * resolution + k)] = std::round(255.0 * v);
        }
    }
    Rng deq_rng(derive_seed(seed, 0xDE9));
    Dataset out;
    out.kind = "toy2d-grid";
    out.samples = dequantize(levels, deq_rng);
    out.source = name;
    out.seed = seed;
    return out;
}

Dataset dataset_from_idx(const std::string& path, int downscale, std::uint64_t seed) {
    Tensor raw = idx_read_images(path);
    if (downscale > 1) {
        raw = downscale_area(raw, downscale);
        for (auto& v : raw.data) v = std::round(v);  // back to integer levels
    }
    Rng deq_rng(derive_seed(seed, 0xDE9));
    Dataset out;
    out.kind = "idx-images";
    out.samples = dequantize(raw, deq_rng);
    out.source = path;
    out.seed = seed;
    return out;
}

void attach_downscale_condition(Dataset& data) {
    data.conditions = nearest_upsample(downscale_area(data.samples, 2), 2);
    data.has_conditions = true;
}

// --------------------------------------------------------------------------
// PGM

void pgm_write(const Tensor& image, const std::string& path) {
    if (image.shape.b != 1 || image.shape.c != 1) {
        throw ShapeError("pgm_write: expected a (1,1,H,W) image, got " + image.shape.str());
    }
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        const double v = image.data[i];
        if (!(v >= 0.0 && v < 1.0)) {
            throw DomainError("pgm_write: value " + std::to_string(v) + " at flat index " +
                              std::to_string(i) + " outside [0,1)");
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("pgm_write: cannot open " + path);
    out << "P5\n" << image.shape.w << " " << image.shape.h << "\n255\n";
    for (const double v : image.data) {
        const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!out) throw IoError("pgm_write: write failed for " + path);
}

Tensor pgm_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("pgm_read: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw FormatError("pgm_read: bad magic '" + magic + "' in " + path);
    std::int64_t w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || maxval != 255) throw FormatError("pgm_read: bad header in " + path);
    in.get();  // the single whitespace after maxval
    std::vector<unsigned char> buf(std::size_t(w * h));
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (std::uint64_t(in.gcount()) != buf.size()) {
        throw FormatError("pgm_read: truncated pixel data in " + path);
    }
    Tensor out(Shape(1, 1, h, w));
    for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = double(buf[i]) / 256.0;
    return out;
}

Tensor tile_grid(const Tensor& batch) {
    if (batch.shape.c != 1) {
        throw ShapeError("tile_grid: expected single-channel batch, got " + batch.shape.str());
    }
    const std::int64_t n = batch.shape.b, h = batch.shape.h, w = batch.shape.w;
    std::int64_t cols = 1;
    while (cols * cols < n) ++cols;
    const std::int64_t rows = (n + cols - 1) / cols;
    Tensor grid(Shape(1, 1, rows * h, cols * w));
    for (std::int64_t k = 0; k < n; ++k) {
        const std::int64_t r = k / cols, c = k % cols;
        for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
                double v = batch.at(k, 0, i, j);
                v = std::min(std::max(v, 0.0), 1.0 - 1e-9);
                grid.at(0, 0, r * h + i, c * w + j) = v;
            }
        }
    }
    return grid;
}

// --------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void csv_append(const std::string& path, const std::vector<std::string>& header,
                const std::vector<std::string>& row) {
    const bool exists = static_cast<bool>(std::ifstream(path));
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("csv_append: cannot open " + path);
    auto write_row = [&out](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out << ",";
            out << fields[i];
        }
        out << "\n";
    };
    if (!exists) write_row(header);
    write_row(row);
    if (!out) throw IoError("csv_append: write failed for " + path);
}

std::vector<std::vector<std::string>> csv_read(const std::string& path,
                                               std::vector<std::string>* header) {
    std::ifstream in(path);
    if (!in) throw IoError("csv_read: cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            const auto p = line.find(',', start);
            if (p == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, p - start));
            start = p + 1;
        }
        if (first) {
            if (header) *header = fields;
            first = false;
            continue;
        }
        rows.push_back(std::move(fields));
    }
    return rows;
}

}  // namespace attnflow
