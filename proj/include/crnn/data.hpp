#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "crnn/kspace.hpp"
#include "crnn/tensor.hpp"

namespace crnn {

/// Synthetic dynamic phantom: a smooth static background plus ellipses whose
/// centers and radii vary sinusoidally with period T, under a smooth spatial
/// phase map so the images are genuinely complex. Magnitudes are normalized
/// to [0, 1].
struct PhantomSpec {
    std::int64_t frames = 8;
    std::int64_t height = 64;
    std::int64_t width = 64;
    int num_ellipses = 3;
    double motion_amp = 1.0;        // 0 freezes all motion
    double texture_scale = 1.0;     // background texture strength
    double phase_smoothness = 1.0;  // larger = smoother phase map
    std::uint64_t seed = 0;

    void validate() const;
};

template <typename T>
ComplexSequence<T> generate_phantom(const PhantomSpec& spec);

/// On-disk tensor container: 8-byte magic "CSEQ0001", 4-byte little-endian
/// header length, UTF-8 JSON header {shape, dtype:"f32", layout, endian},
/// then the raw float payload. layout is "complex-interleaved" for image
/// sequences and "real" for plain tensors (masks use {0,1} values).
void save_sequence(const std::string& path, const ComplexSequence<float>& seq);
ComplexSequence<float> load_sequence(const std::string& path);

void save_real_tensor(const std::string& path, const Tensor<float>& tensor);
Tensor<float> load_real_tensor(const std::string& path);

void save_mask(const std::string& path, const SamplingMask& mask);
SamplingMask load_mask(const std::string& path);

/// Keeps the full phase-encode and time extent and takes a contiguous
/// random window of patch_width along frequency encoding, so undersampling
/// artefacts are unaltered.
template <typename T>
ComplexSequence<T> extract_patch(const ComplexSequence<T>& x, std::int64_t patch_width, std::mt19937_64& rng);

struct AugmentConfig {
    double max_rotation_deg = 15.0;
    double scale_min = 0.95;
    double scale_max = 1.05;
    double max_translate_px = 4.0;
    double elastic_prob = 0.5;
    double elastic_sigma_px = 8.0;
    double elastic_max_amp_px = 3.0;
};

struct AffineParams {
    double rotation_rad = 0.0;
    double scale = 1.0;
    double translate_x = 0.0;
    double translate_y = 0.0;

    static AffineParams identity() { return AffineParams{}; }
};

/// Warps every frame with the same map: an inverse-mapped affine transform
/// about the image center, optionally composed with a per-pixel
/// displacement field (dx, dy of shape (H, W)). Bilinear interpolation is
/// applied to the real and imaginary channels identically; samples outside
/// the source are zero.
template <typename T>
ComplexSequence<T> warp(const ComplexSequence<T>& x, const AffineParams& affine,
                        const Tensor<double>* disp_x = nullptr, const Tensor<double>* disp_y = nullptr);

/// Draws one affine map (and, with probability elastic_prob, a
/// Gaussian-smoothed displacement field shared across frames) and applies
/// it. Deterministic under the rng state.
template <typename T>
ComplexSequence<T> augment(const ComplexSequence<T>& x, std::mt19937_64& rng,
                           const AugmentConfig& cfg = AugmentConfig{});

/// Dataset directory layout: <root>/seq_<idx>.cseq plus manifest.json
/// listing the files and the index splits.
struct DatasetManifest {
    std::vector<std::string> sequences;
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;
};

void write_manifest(const std::string& root, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& root);

std::string phantom_spec_to_json_string(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json_string(const std::string& text);

}  // namespace crnn
