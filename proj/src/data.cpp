#include "crnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace crnn {

using json = nlohmann::json;

void PhantomSpec::validate() const {
    if (frames < 2) throw std::invalid_argument("PhantomSpec: need at least 2 frames, got " + std::to_string(frames));
    if (height < 16 || width < 16)
        throw std::invalid_argument("PhantomSpec: spatial size must be at least 16x16, got " +
                                    std::to_string(height) + "x" + std::to_string(width));
    if (num_ellipses < 0) throw std::invalid_argument("PhantomSpec: num_ellipses must be nonnegative");
    if (motion_amp < 0.0) throw std::invalid_argument("PhantomSpec: motion_amp must be nonnegative");
    if (phase_smoothness <= 0.0) throw std::invalid_argument("PhantomSpec: phase_smoothness must be positive");
}

namespace {

struct CosineTerm {
    double amp, fy, fx, phase;
};

double cosine_field(const std::vector<CosineTerm>& terms, double v, double u) {
    double s = 0.0;
    for (const auto& t : terms) s += t.amp * std::cos(2.0 * M_PI * (t.fy * v + t.fx * u) + t.phase);
    return s;
}

double soft_ellipse(double dy, double dx, double ry, double rx, double softness) {
    const double d = std::sqrt((dy / ry) * (dy / ry) + (dx / rx) * (dx / rx));
    return 1.0 / (1.0 + std::exp((d - 1.0) / softness));
}

struct Ellipse {
    double cy0, cx0;  // rest center
    double ry0, rx0;  // rest semi-axes
    double intensity;
    double move_amp_y, move_amp_x;
    double move_phase_y, move_phase_x;
    double pulse_amp, pulse_phase;
};

}  // namespace

template <typename T>
ComplexSequence<T> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const std::int64_t F = spec.frames, H = spec.height, W = spec.width;
    const double scale = static_cast<double>(std::min(H, W));

    std::vector<CosineTerm> background;
    for (int j = 0; j < 4; ++j) {
        background.push_back(
            {uni(0.02, 0.06) * spec.texture_scale, uni(0.5, 2.0), uni(0.5, 2.0), uni(0.0, 2 * M_PI)});
    }
    std::vector<CosineTerm> phase_terms;
    for (int j = 0; j < 3; ++j) {
        const double f_hi = 1.5 / spec.phase_smoothness;
        phase_terms.push_back({uni(0.2, 0.5), uni(0.2, f_hi), uni(0.2, f_hi), uni(0.0, 2 * M_PI)});
    }

    // All motion stays inside the central region so the border is static.
    std::vector<Ellipse> ellipses;
    for (int e = 0; e < spec.num_ellipses; ++e) {
        Ellipse el;
        const double angle = uni(0.0, 2 * M_PI);
        const double radius = uni(0.02, 0.18) * scale;
        el.cy0 = H / 2.0 + radius * std::sin(angle);
        el.cx0 = W / 2.0 + radius * std::cos(angle);
        el.ry0 = uni(0.05, 0.11) * scale;
        el.rx0 = uni(0.05, 0.11) * scale;
        el.intensity = (e % 2 == 0) ? uni(0.30, 0.50) : -uni(0.15, 0.30);
        el.move_amp_y = spec.motion_amp * uni(0.02, 0.05) * scale;
        el.move_amp_x = spec.motion_amp * uni(0.02, 0.05) * scale;
        el.move_phase_y = uni(0.0, 2 * M_PI);
        el.move_phase_x = uni(0.0, 2 * M_PI);
        el.pulse_amp = spec.motion_amp * uni(0.05, 0.18);
        el.pulse_phase = uni(0.0, 2 * M_PI);
        ellipses.push_back(el);
    }

    Tensor<double> magnitude({F, H, W});
    const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
    const double body_ry = 0.44 * H, body_rx = 0.44 * W;
    for (std::int64_t t = 0; t < F; ++t) {
        const double phase = 2.0 * M_PI * static_cast<double>(t) / static_cast<double>(F);
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const double v = static_cast<double>(y) / H, u = static_cast<double>(x) / W;
                double val = 0.18 + cosine_field(background, v, u);
                val += 0.25 * soft_ellipse(y - cy, x - cx, body_ry, body_rx, 0.04);
                for (const auto& el : ellipses) {
                    const double cyt = el.cy0 + el.move_amp_y * std::sin(phase + el.move_phase_y);
                    const double cxt = el.cx0 + el.move_amp_x * std::sin(phase + el.move_phase_x);
                    const double pulse = 1.0 + el.pulse_amp * std::sin(phase + el.pulse_phase);
                    val += el.intensity * soft_ellipse(y - cyt, x - cxt, el.ry0 * pulse, el.rx0 * pulse, 0.06);
                }
                magnitude.at(t, y, x) = std::max(val, 0.0);
            }
        }
    }

    double peak = 0.0;
    for (std::int64_t i = 0; i < magnitude.numel(); ++i) peak = std::max(peak, magnitude.data()[i]);
    if (peak <= 0.0) peak = 1.0;

    ComplexSequence<T> out(F, H, W);
    for (std::int64_t t = 0; t < F; ++t) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const double v = static_cast<double>(y) / H, u = static_cast<double>(x) / W;
                const double mag = magnitude.at(t, y, x) / peak;
                const double theta = cosine_field(phase_terms, v, u);
                out.at(t, y, x) = std::complex<T>(static_cast<T>(mag * std::cos(theta)),
                                                  static_cast<T>(mag * std::sin(theta)));
            }
        }
    }
    return out;
}

namespace {

constexpr char kMagic[8] = {'C', 'S', 'E', 'Q', '0', '0', '0', '1'};

void write_container(const std::string& path, const std::vector<std::int64_t>& shape, const char* layout,
                     const float* payload, std::size_t count) {
    json header{{"shape", shape}, {"dtype", "f32"}, {"layout", layout}, {"endian", "little"}};
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("tensor container: cannot open '" + path + "' for writing");
    out.write(kMagic, 8);
    const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(reinterpret_cast<const char*>(payload), static_cast<std::streamsize>(count * sizeof(float)));
    if (!out) throw std::runtime_error("tensor container: write to '" + path + "' failed");
}

struct ContainerData {
    std::vector<std::int64_t> shape;
    std::string layout;
    std::vector<float> payload;
};

ContainerData read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("tensor container: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw std::runtime_error("tensor container: '" + path + "' has a bad magic header");
    }
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 4);
    if (len == 0 || static_cast<std::size_t>(len) > bytes.size() - 12 || len > (1u << 20)) {
        throw std::runtime_error("tensor container: '" + path + "' has a corrupted header length");
    }
    json header;
    try {
        header = json::parse(bytes.substr(12, len));
    } catch (const json::exception& e) {
        throw std::runtime_error("tensor container: '" + path + "' has a corrupted header: " + e.what());
    }

    ContainerData data;
    try {
        data.shape = header.at("shape").get<std::vector<std::int64_t>>();
        data.layout = header.at("layout").get<std::string>();
        if (header.at("dtype").get<std::string>() != "f32") {
            throw std::runtime_error("tensor container: '" + path + "' has an unsupported dtype");
        }
        if (header.at("endian").get<std::string>() != "little") {
            throw std::runtime_error("tensor container: '" + path + "' has an unsupported endianness");
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("tensor container: '" + path + "' has a malformed header: " + e.what());
    }
    if (data.layout != "real" && data.layout != "complex-interleaved") {
        throw std::runtime_error("tensor container: '" + path + "' has unknown layout '" + data.layout + "'");
    }

    std::int64_t elems = 1;
    for (auto d : data.shape) {
        if (d < 1) throw std::runtime_error("tensor container: '" + path + "' has a non-positive dimension");
        elems *= d;
    }
    const std::size_t expect =
        static_cast<std::size_t>(elems) * sizeof(float) * (data.layout == "complex-interleaved" ? 2 : 1);
    const std::size_t actual = bytes.size() - 12 - len;
    if (actual != expect) {
        throw std::runtime_error("tensor container: '" + path + "' payload is " + std::to_string(actual) +
                                 " bytes but the header shape requires " + std::to_string(expect));
    }
    data.payload.resize(expect / sizeof(float));
    std::memcpy(data.payload.data(), bytes.data() + 12 + len, expect);
    return data;
}

}  // namespace

void save_sequence(const std::string& path, const ComplexSequence<float>& seq) {
    write_container(path, {seq.frames(), seq.height(), seq.width()}, "complex-interleaved",
                    reinterpret_cast<const float*>(seq.data()), static_cast<std::size_t>(seq.numel()) * 2);
}

ComplexSequence<float> load_sequence(const std::string& path) {
    auto data = read_container(path);
    if (data.layout != "complex-interleaved" || data.shape.size() != 3) {
        throw std::runtime_error("tensor container: '" + path + "' is not a (T,H,W) complex sequence");
    }
    ComplexSequence<float> seq(data.shape[0], data.shape[1], data.shape[2]);
    std::memcpy(seq.data(), data.payload.data(), data.payload.size() * sizeof(float));
    return seq;
}

void save_real_tensor(const std::string& path, const Tensor<float>& tensor) {
    write_container(path, tensor.shape(), "real", tensor.data(), static_cast<std::size_t>(tensor.numel()));
}

Tensor<float> load_real_tensor(const std::string& path) {
    auto data = read_container(path);
    if (data.layout != "real") {
        throw std::runtime_error("tensor container: '" + path + "' is not a real tensor");
    }
    return Tensor<float>(data.shape, std::move(data.payload));
}

void save_mask(const std::string& path, const SamplingMask& mask) {
    Tensor<float> t({mask.frames(), mask.height(), mask.width()});
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = mask.data()[i] ? 1.0f : 0.0f;
    save_real_tensor(path, t);
}

SamplingMask load_mask(const std::string& path) {
    auto t = load_real_tensor(path);
    if (t.rank() != 3) {
        throw std::runtime_error("mask file '" + path + "' must have shape (T, H, W)");
    }
    SamplingMask mask(t.dim(0), t.dim(1), t.dim(2));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const float v = t.data()[i];
        if (v != 0.0f && v != 1.0f) {
            throw std::runtime_error("mask file '" + path + "' contains a value other than 0 or 1");
        }
        mask.data()[i] = v != 0.0f ? 1 : 0;
    }
    return mask;
}

template <typename T>
ComplexSequence<T> extract_patch(const ComplexSequence<T>& x, std::int64_t patch_width, std::mt19937_64& rng) {
    if (patch_width < 1 || patch_width > x.width()) {
        throw std::invalid_argument("extract_patch: patch width " + std::to_string(patch_width) +
                                    " must be in [1, " + std::to_string(x.width()) + "]");
    }
    std::uniform_int_distribution<std::int64_t> dist(0, x.width() - patch_width);
    const std::int64_t start = dist(rng);
    ComplexSequence<T> out(x.frames(), x.height(), patch_width);
    for (std::int64_t t = 0; t < x.frames(); ++t) {
        for (std::int64_t y = 0; y < x.height(); ++y) {
            const std::complex<T>* src = x.frame(t) + y * x.width() + start;
            std::copy(src, src + patch_width, out.frame(t) + y * patch_width);
        }
    }
    return out;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    const std::int64_t radius = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : k) v /= sum;
    return k;
}

/// Separable Gaussian blur with zero-padded borders on an (H, W) field.
void smooth_field(Tensor<double>& field, double sigma) {
    const auto kernel = gaussian_kernel(sigma);
    const std::int64_t radius = static_cast<std::int64_t>(kernel.size() / 2);
    const std::int64_t H = field.dim(0), W = field.dim(1);
    Tensor<double> tmp({H, W});
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (std::int64_t i = -radius; i <= radius; ++i) {
                const std::int64_t xx = x + i;
                if (xx < 0 || xx >= W) continue;
                acc += field.at(y, xx) * kernel[static_cast<std::size_t>(i + radius)];
            }
            tmp.at(y, x) = acc;
        }
    }
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (std::int64_t i = -radius; i <= radius; ++i) {
                const std::int64_t yy = y + i;
                if (yy < 0 || yy >= H) continue;
                acc += tmp.at(yy, x) * kernel[static_cast<std::size_t>(i + radius)];
            }
            field.at(y, x) = acc;
        }
    }
}

}  // namespace

template <typename T>
ComplexSequence<T> warp(const ComplexSequence<T>& x, const AffineParams& affine, const Tensor<double>* disp_x,
                        const Tensor<double>* disp_y) {
    const std::int64_t F = x.frames(), H = x.height(), W = x.width();
    if ((disp_x == nullptr) != (disp_y == nullptr)) {
        throw std::invalid_argument("warp: both displacement components are required");
    }
    if (disp_x && (disp_x->rank() != 2 || disp_x->dim(0) != H || disp_x->dim(1) != W ||
                   disp_y->rank() != 2 || disp_y->dim(0) != H || disp_y->dim(1) != W)) {
        throw std::invalid_argument("warp: displacement field shape must be (H, W)");
    }
    if (affine.scale <= 0.0) throw std::invalid_argument("warp: scale must be positive");

    const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
    const double cos_r = std::cos(affine.rotation_rad), sin_r = std::sin(affine.rotation_rad);
    const double inv_scale = 1.0 / affine.scale;

    ComplexSequence<T> out(F, H, W);
    for (std::int64_t yo = 0; yo < H; ++yo) {
        for (std::int64_t xo = 0; xo < W; ++xo) {
            // Inverse of dst = scale * R(rot) * (src - c) + c + t.
            const double ey = static_cast<double>(yo) - cy - affine.translate_y;
            const double ex = static_cast<double>(xo) - cx - affine.translate_x;
            double xs = inv_scale * (cos_r * ex + sin_r * ey) + cx;
            double ys = inv_scale * (-sin_r * ex + cos_r * ey) + cy;
            if (disp_x) {
                xs += disp_x->at(yo, xo);
                ys += disp_y->at(yo, xo);
            }

            const std::int64_t y0 = static_cast<std::int64_t>(std::floor(ys));
            const std::int64_t x0 = static_cast<std::int64_t>(std::floor(xs));
            const double wy = ys - static_cast<double>(y0);
            const double wx = xs - static_cast<double>(x0);

            for (std::int64_t t = 0; t < F; ++t) {
                double re = 0.0, im = 0.0;
                for (int oy = 0; oy <= 1; ++oy) {
                    for (int ox = 0; ox <= 1; ++ox) {
                        const std::int64_t yy = y0 + oy;
                        const std::int64_t xx = x0 + ox;
                        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                        const double weight = (oy ? wy : 1.0 - wy) * (ox ? wx : 1.0 - wx);
                        if (weight == 0.0) continue;
                        const auto v = x.at(t, yy, xx);
                        re += weight * static_cast<double>(v.real());
                        im += weight * static_cast<double>(v.imag());
                    }
                }
                out.at(t, yo, xo) = std::complex<T>(static_cast<T>(re), static_cast<T>(im));
            }
        }
    }
    return out;
}

template <typename T>
ComplexSequence<T> augment(const ComplexSequence<T>& x, std::mt19937_64& rng, const AugmentConfig& cfg) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    AffineParams affine;
    affine.rotation_rad = uni(-cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0;
    affine.scale = uni(cfg.scale_min, cfg.scale_max);
    affine.translate_x = uni(-cfg.max_translate_px, cfg.max_translate_px);
    affine.translate_y = uni(-cfg.max_translate_px, cfg.max_translate_px);

    const bool use_elastic = unit(rng) < cfg.elastic_prob;
    if (!use_elastic) return warp(x, affine);

    const std::int64_t H = x.height(), W = x.width();
    Tensor<double> dx({H, W}), dy({H, W});
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx.data()[i] = uni(-1.0, 1.0);
    for (std::int64_t i = 0; i < dy.numel(); ++i) dy.data()[i] = uni(-1.0, 1.0);
    smooth_field(dx, cfg.elastic_sigma_px);
    smooth_field(dy, cfg.elastic_sigma_px);

    double peak = 0.0;
    for (std::int64_t i = 0; i < dx.numel(); ++i) {
        peak = std::max({peak, std::abs(dx.data()[i]), std::abs(dy.data()[i])});
    }
    const double amp = uni(0.0, cfg.elastic_max_amp_px);
    if (peak > 0.0) {
        const double s = amp / peak;
        for (std::int64_t i = 0; i < dx.numel(); ++i) {
            dx.data()[i] *= s;
            dy.data()[i] *= s;
        }
    }
    return warp(x, affine, &dx, &dy);
}

void write_manifest(const std::string& root, const DatasetManifest& manifest) {
    json j{{"sequences", manifest.sequences},
           {"splits", json{{"train", manifest.train}, {"val", manifest.val}, {"test", manifest.test}}}};
    const auto path = std::filesystem::path(root) / "manifest.json";
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest to '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::string& root) {
    const auto path = std::filesystem::path(root) / "manifest.json";
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read manifest '" + path.string() + "'");
    json j;
    try {
        in >> j;
        DatasetManifest m;
        m.sequences = j.at("sequences").get<std::vector<std::string>>();
        m.train = j.at("splits").at("train").get<std::vector<int>>();
        m.val = j.at("splits").at("val").get<std::vector<int>>();
        m.test = j.at("splits").at("test").get<std::vector<int>>();
        for (const auto& split : {m.train, m.val, m.test}) {
            for (int idx : split) {
                if (idx < 0 || static_cast<std::size_t>(idx) >= m.sequences.size()) {
                    throw std::runtime_error("manifest split index " + std::to_string(idx) + " out of range");
                }
            }
        }
        return m;
    } catch (const json::exception& e) {
        throw std::runtime_error("manifest '" + path.string() + "' is malformed: " + e.what());
    }
}

std::string phantom_spec_to_json_string(const PhantomSpec& spec) {
    return json{{"frames", spec.frames},
                {"height", spec.height},
                {"width", spec.width},
                {"num_ellipses", spec.num_ellipses},
                {"motion_amp", spec.motion_amp},
                {"texture_scale", spec.texture_scale},
                {"phase_smoothness", spec.phase_smoothness},
                {"seed", spec.seed}}
        .dump();
}

PhantomSpec phantom_spec_from_json_string(const std::string& text) {
    const json j = json::parse(text);
    PhantomSpec spec;
    spec.frames = j.at("frames").get<std::int64_t>();
    spec.height = j.at("height").get<std::int64_t>();
    spec.width = j.at("width").get<std::int64_t>();
    spec.num_ellipses = j.at("num_ellipses").get<int>();
    spec.motion_amp = j.at("motion_amp").get<double>();
    spec.texture_scale = j.at("texture_scale").get<double>();
    spec.phase_smoothness = j.at("phase_smoothness").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.validate();
    return spec;
}

#define CRNN_INSTANTIATE_DATA(T)                                                                   \
    template ComplexSequence<T> generate_phantom<T>(const PhantomSpec&);                           \
    template ComplexSequence<T> extract_patch<T>(const ComplexSequence<T>&, std::int64_t,         \
                                                 std::mt19937_64&);                                \
    template ComplexSequence<T> warp<T>(const ComplexSequence<T>&, const AffineParams&,           \
                                        const Tensor<double>*, const Tensor<double>*);             \
    template ComplexSequence<T> augment<T>(const ComplexSequence<T>&, std::mt19937_64&,           \
                                           const AugmentConfig&);

CRNN_INSTANTIATE_DATA(float)
CRNN_INSTANTIATE_DATA(double)

#undef CRNN_INSTANTIATE_DATA

}  // namespace crnn
