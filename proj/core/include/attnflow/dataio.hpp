#pragma once

#include <string>
#include <vector>

#include "attnflow/rng.hpp"
#include "attnflow/tensor.hpp"

namespace attnflow {

// Normalized samples in [0,1) plus optional per-sample condition tensors.
struct Dataset {
    std::string kind;     // "toy2d-grid" or "idx-images"
    Tensor samples;       // (N,C,H,W), dequantized
    Tensor conditions;    // (N,Cc,H,W) when has_conditions
    bool has_conditions = false;
    std::string source;
    std::uint64_t seed = 0;

    std::int64_t count() const { return samples.shape.b; }
    Shape sample_shape() const {
        return Shape(1, samples.shape.c, samples.shape.h, samples.shape.w);
    }
    Tensor batch(const std::vector<std::int64_t>& indices) const;
    Tensor condition_batch(const std::vector<std::int64_t>& indices) const;
};

// IDX binary reader: big-endian 32-bit magic, dimension sizes, unsigned
// bytes. Accepts image files (magic 0x00000803) -> (N,1,H,W) levels 0..255.
Tensor idx_read_images(const std::string& path);
// Label files (magic 0x00000801).
std::vector<int> idx_read_labels(const std::string& path);

// Non-overlapping block means; H and W must be divisible by factor.
Tensor downscale_area(const Tensor& x, int factor);

// Nearest-neighbour upsampling by an integer factor.
Tensor nearest_upsample(const Tensor& x, int factor);

// (k + u)/256 with u ~ U[0,1); levels must be integers in [0,255].
Tensor dequantize(const Tensor& levels, Rng& rng);

// Seeded sampler rasterizing an analytic 2D density ("two-moons", "rings",
// "checker-density") into n quantized single-channel images, then
// dequantizing them. resolution must be 8 or 16.
Dataset toy2d_grid(const std::string& name, int resolution, std::int64_t n, std::uint64_t seed);

// IDX image pipeline: read, optionally downscale (block means, rounded back
// to integer levels), dequantize.
Dataset dataset_from_idx(const std::string& path, int downscale, std::uint64_t seed);

// Attaches per-sample conditions derived from the samples: factor-2 area
// downscale, upsampled back to input resolution.
void attach_downscale_condition(Dataset& data);

// Binary PGM (P5, maxval 255); values in [0,1), round-to-nearest bytes.
void pgm_write(const Tensor& image, const std::string& path);
Tensor pgm_read(const std::string& path);  // -> (1,1,H,W) in [0,1)

// Tiles a (N,1,H,W) batch into one image, clamping values into [0,1).
Tensor tile_grid(const Tensor& batch);

// CSV with a header row; the header is written when the file is created.
void csv_append(const std::string& path, const std::vector<std::string>& header,
                const std::vector<std::string>& row);
std::vector<std::vector<std::string>> csv_read(const std::string& path,
                                               std::vector<std::string>* header = nullptr);

std::string format_double(double v);  // round-trippable %.17g

}  // namespace attnflow
