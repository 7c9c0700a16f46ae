#pragma once

// Two-domain datasets: a procedural glyph generator with configurable domain
// shift, IDX (MNIST-format) file I/O, and domain-paired mini-batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtdn/model.hpp"
#include "dtdn/tensor.hpp"

namespace dtdn {

/// Independent, reproducible stream for (seed, purpose, a, b).
inline Rng derive_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(a),
                      static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                      static_cast<std::uint32_t>(b >> 32)};
    return Rng(seq);
}

enum class Domain { source, target };

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct EvalAccess;

/// Fixed-shape images stored row-major, one flat row per sample. Source sets
/// carry labels; target sets may carry ground truth only in a sealed field
/// that training code has no accessor for.
class Dataset {
  public:
    Dataset() = default;
    Dataset(Domain domain, Shape image_shape, std::vector<double> pixels, std::vector<int> labels)
        : domain_(domain), image_shape_(std::move(image_shape)), pixels_(std::move(pixels)) {
        const std::size_t per = numel(image_shape_);
        if (per == 0 || pixels_.size() % per != 0) throw DataError("dataset: pixel buffer does not match image shape");
        size_ = pixels_.size() / per;
        if (!labels.empty() && labels.size() != size_) throw DataError("dataset: label count mismatch");
        if (domain_ == Domain::source) {
            if (labels.size() != size_) throw DataError("dataset: source samples need labels");
            labels_ = std::move(labels);
        } else if (!labels.empty()) {
            held_out_ = std::move(labels);
        }
    }

    Domain domain() const { return domain_; }
    std::size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }
    const Shape& image_shape() const { return image_shape_; }
    std::size_t image_size() const { return numel(image_shape_); }

    std::span<const double> image(std::size_t i) const {
        if (i >= size_) throw std::out_of_range("dataset index out of range");
        return {pixels_.data() + i * image_size(), image_size()};
    }
    std::span<const double> pixels() const { return pixels_; }

    /// Source labels. Empty for target sets.
    std::span<const int> labels() const { return labels_; }
    bool has_held_out_labels() const { return held_out_.has_value(); }

    /// Stacks the given rows into a B x image_size tensor.
    Tensor gather(std::span<const std::size_t> idx) const {
        const std::size_t per = image_size();
        std::vector<double> out(idx.size() * per);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto img = image(idx[i]);
            std::copy(img.begin(), img.end(), out.begin() + i * per);
        }
        return Tensor({idx.size(), per}, std::move(out));
    }

  private:
    friend struct EvalAccess;
    Domain domain_ = Domain::source;
    Shape image_shape_;
    std::vector<double> pixels_;
    std::vector<int> labels_;
    std::optional<std::vector<int>> held_out_;
    std::size_t size_ = 0;
};

/// The only route to target ground truth; used by evaluation code.
struct EvalAccess {
    static std::span<const int> labels(const Dataset& d) {
        if (d.domain() == Domain::source) return d.labels_;
        if (!d.held_out_) throw DataError("target dataset has no held-out labels");
        return *d.held_out_;
    }
};

// ---------------------------------------------------------------------------
// Synthetic glyphs

struct DomainShift {
    double noise_std = 0.0;
    bool intensity_invert = false;
    bool channel_permute = false;
    int translation = 0;  // pixels, applied down and right with zero fill

    bool is_null() const { return noise_std == 0.0 && !intensity_invert && !channel_permute && translation == 0; }
};

struct SynthSpec {
    std::size_t n_classes = 10;
    std::size_t per_class = 100;       // training samples per class and domain
    std::size_t test_per_class = 30;   // held-out samples per class and domain
    std::size_t image_size = 16;
    std::size_t channels = 1;
    // Target classes use templates [offset, offset + n_classes); a non-zero
    // offset gives disjoint source/target label spaces.
    std::size_t target_class_offset = 0;
    DomainShift shift{0.2, true, false, 0};

    void validate() const {
        if (n_classes < 2) throw DataError("synthetic spec: n_classes must be >= 2");
        if (per_class == 0) throw DataError("synthetic spec: per_class must be >= 1");
        if (image_size < 8) throw DataError("synthetic spec: image_size must be >= 8");
        if (channels == 0) throw DataError("synthetic spec: channels must be >= 1");
        if (shift.noise_std < 0) throw DataError("synthetic spec: noise_std must be >= 0");
        if (shift.translation < 0 || static_cast<std::size_t>(shift.translation) >= image_size)
            throw DataError("synthetic spec: translation out of range");
    }
};

struct TwoDomainData {
    Dataset source_train;
    Dataset target_train;
    Dataset source_test;
    Dataset target_test;
};

namespace detail {

struct Stroke {
    double x0, y0, x1, y1;
};

// Three strokes per class, placed by a generator that depends only on the
// class id so both domains share templates across seeds.
inline std::array<Stroke, 3> glyph_template(std::size_t cls, std::size_t size) {
    Rng rng = derive_rng(0x9e3779b97f4a7c15ULL, 0xC1A55, cls);
    const double lo = 2.0, hi = static_cast<double>(size) - 3.0;
    std::uniform_real_distribution<double> pos(lo, hi);
    std::array<Stroke, 3> s{};
    for (auto& st : s) {
        do {
            st = {pos(rng), pos(rng), pos(rng), pos(rng)};
        } while (std::hypot(st.x1 - st.x0, st.y1 - st.y0) < 0.35 * static_cast<double>(size));
    }
    return s;
}

inline double segment_distance(double px, double py, const Stroke& s) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(px - (s.x0 + t * dx), py - (s.y0 + t * dy));
}

// Clean jittered rendering: per-sample endpoint jitter, a global shift of up
// to one pixel, and stroke intensity variation. Values in [0,1].
inline void render_glyph(std::size_t cls, const SynthSpec& spec, Rng& rng, std::span<double> out) {
    const std::size_t S = spec.image_size;
    auto strokes = glyph_template(cls, S);
    std::uniform_real_distribution<double> jitter(-0.75, 0.75);
    std::uniform_int_distribution<int> shift(-1, 1);
    std::uniform_real_distribution<double> gain(0.8, 1.0);
    const double sx = shift(rng), sy = shift(rng);
    for (auto& s : strokes) {
        s.x0 += jitter(rng) + sx;
        s.y0 += jitter(rng) + sy;
        s.x1 += jitter(rng) + sx;
        s.y1 += jitter(rng) + sy;
    }
    const double g = gain(rng);
    for (std::size_t c = 0; c < spec.channels; ++c) {
        const double cg = g * (1.0 - 0.15 * static_cast<double>(c));
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                double d = 1e9;
                for (const auto& s : strokes)
                    d = std::min(d, segment_distance(static_cast<double>(x), static_cast<double>(y), s));
                out[(c * S + y) * S + x] = cg * std::clamp(1.5 - d, 0.0, 1.0);
            }
    }
}

}  // namespace detail

/// Applies a domain shift to one C x S x S image in place. Noise is additive
/// and not clipped, so its variance is exactly the configured one.
inline void apply_shift(const DomainShift& shift, std::size_t channels, std::size_t size, Rng& rng,
                        std::span<double> img) {
    const std::size_t S = size, C = channels;
    if (shift.translation > 0) {
        const std::size_t t = static_cast<std::size_t>(shift.translation);
        std::vector<double> src(img.begin(), img.end());
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x)
                    img[(c * S + y) * S + x] = (y >= t && x >= t) ? src[(c * S + y - t) * S + x - t] : 0.0;
    }
    if (shift.channel_permute && C > 1) {
        std::vector<double> src(img.begin(), img.end());
        for (std::size_t c = 0; c < C; ++c)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(((c + 1) % C) * S * S), S * S,
                        img.begin() + static_cast<std::ptrdiff_t>(c * S * S));
    }
    if (shift.intensity_invert)
        for (auto& p : img) p = 1.0 - p;
    if (shift.noise_std > 0) {
        std::normal_distribution<double> noise(0.0, shift.noise_std);
        for (auto& p : img) p += noise(rng);
    }
}

namespace detail {

inline Dataset synth_split(const SynthSpec& spec, Domain domain, std::size_t class_offset, std::size_t per_class,
                           Rng& rng) {
    const std::size_t per = spec.channels * spec.image_size * spec.image_size;
    const std::size_t n = spec.n_classes * per_class;
    std::vector<double> pixels(n * per);
    std::vector<int> labels(n);
    // Interleave classes so the natural order is not sorted by label.
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = class_offset + i % spec.n_classes;
        std::span<double> img(pixels.data() + i * per, per);
        render_glyph(cls, spec, rng, img);
        if (domain == Domain::target) apply_shift(spec.shift, spec.channels, spec.image_size, rng, img);
        labels[i] = static_cast<int>(cls);
    }
    return Dataset(domain, {spec.channels, spec.image_size, spec.image_size}, std::move(pixels), std::move(labels));
}

}  // namespace detail

/// Source: clean jittered glyphs. Target: the same generator passed through
/// the configured shift; its labels are sealed for evaluation.
inline TwoDomainData synth_two_domain(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng src_train = derive_rng(seed, 1), tgt_train = derive_rng(seed, 2);
    Rng src_test = derive_rng(seed, 3), tgt_test = derive_rng(seed, 4);
    TwoDomainData d;
    d.source_train = detail::synth_split(spec, Domain::source, 0, spec.per_class, src_train);
    d.target_train = detail::synth_split(spec, Domain::target, spec.target_class_offset, spec.per_class, tgt_train);
    d.source_test = detail::synth_split(spec, Domain::source, 0, spec.test_per_class, src_test);
    d.target_test =
        detail::synth_split(spec, Domain::target, spec.target_class_offset, spec.test_per_class, tgt_test);
    return d;
}

// ---------------------------------------------------------------------------
// IDX files: 0x00 0x00 <type> <rank>, big-endian u32 dims, raw payload.

struct IdxArray {
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> bytes;
};

inline IdxArray read_idx(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open IDX file: " + path);
    std::array<unsigned char, 4> magic{};
    if (!in.read(reinterpret_cast<char*>(magic.data()), 4)) throw DataError("IDX file truncated: " + path);
    if (magic[0] != 0 || magic[1] != 0 || magic[2] != 0x08)
        throw DataError("IDX bad magic (expected unsigned-byte payload): " + path);
    IdxArray a;
    std::size_t total = 1;
    for (int r = 0; r < magic[3]; ++r) {
        std::array<unsigned char, 4> b{};
        if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError("IDX header truncated: " + path);
        const std::uint32_t d = (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
                                (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
        a.dims.push_back(d);
        total *= d;
    }
    a.bytes.resize(total);
    if (total > 0 && !in.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(total)))
        throw DataError("IDX payload truncated: " + path);
    return a;
}

inline void write_idx(const std::string& path, const IdxArray& a) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write IDX file: " + path);
    const unsigned char head[4] = {0, 0, 0x08, static_cast<unsigned char>(a.dims.size())};
    out.write(reinterpret_cast<const char*>(head), 4);
    for (auto d : a.dims) {
        const unsigned char b[4] = {static_cast<unsigned char>(d >> 24), static_cast<unsigned char>(d >> 16),
                                    static_cast<unsigned char>(d >> 8), static_cast<unsigned char>(d)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    out.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    if (!out) throw DataError("failed writing IDX file: " + path);
}

inline std::uint8_t quantize_pixel(double p) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0));
}

/// Images file of rank 3 (N x H x W) plus, for source data, a rank-1 labels file.
/// Target label files are loaded into the sealed evaluation field.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path = {},
                        Domain domain = Domain::source) {
    IdxArray img = read_idx(images_path);
    if (img.dims.size() != 3) throw DataError("IDX images must have rank 3: " + images_path);
    const std::size_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
    std::vector<double> pixels(img.bytes.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = img.bytes[i] / 255.0;
    std::vector<int> labels;
    if (!labels_path.empty()) {
        IdxArray lab = read_idx(labels_path);
        if (lab.dims.size() != 1) throw DataError("IDX labels must have rank 1: " + labels_path);
        if (lab.dims[0] != n) throw DataError("IDX label count does not match image count");
        labels.assign(lab.bytes.begin(), lab.bytes.end());
    } else if (domain == Domain::source) {
        throw DataError("source IDX data needs a labels file");
    }
    return Dataset(domain, {1, h, w}, std::move(pixels), std::move(labels));
}

/// Writes single-channel images (quantized to bytes) and, if present, labels.
inline void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path = {}) {
    const auto& s = d.image_shape();
    if (s.size() != 3 || s[0] != 1) throw DataError("save_idx: only single-channel images are supported");
    IdxArray img{{static_cast<std::uint32_t>(d.size()), static_cast<std::uint32_t>(s[1]),
                  static_cast<std::uint32_t>(s[2])},
                 {}};
    img.bytes.reserve(d.pixels().size());
    for (double p : d.pixels()) img.bytes.push_back(quantize_pixel(p));
    write_idx(images_path, img);
    if (!labels_path.empty()) {
        auto labels = EvalAccess::labels(d);
        IdxArray lab{{static_cast<std::uint32_t>(labels.size())}, {}};
        for (int y : labels) lab.bytes.push_back(static_cast<std::uint8_t>(y));
        write_idx(labels_path, lab);
    }
}

// ---------------------------------------------------------------------------
// Batching

struct DomainBatch {
    Tensor x_source;
    std::vector<int> y_source;
    Tensor x_target;
    std::vector<std::size_t> target_indices;
    std::vector<std::size_t> source_indices;
};

struct BatchPlan {
    std::vector<std::size_t> source;
    std::vector<std::size_t> target;
};

/// Index plan for one epoch. Both sets are shuffled independently; the
/// longer set fixes the number of batches and the shorter one wraps so that
/// every batch has exactly B rows per domain.
inline std::vector<BatchPlan> plan_epoch(std::size_t n_source, std::size_t n_target, std::size_t batch,
                                         std::uint64_t seed, std::size_t epoch) {
    if (n_source == 0 || n_target == 0) throw DataError("make_batches: both datasets must be nonempty");
    if (batch == 0) throw DataError("make_batches: batch size must be >= 1");
    if (batch > n_source && batch > n_target)
        throw DataError("make_batches: batch size " + std::to_string(batch) + " exceeds both dataset sizes");
    Rng rng = derive_rng(seed, 0xBA7C4, epoch);
    std::vector<std::size_t> sp(n_source), tp(n_target);
    std::iota(sp.begin(), sp.end(), std::size_t{0});
    std::iota(tp.begin(), tp.end(), std::size_t{0});
    std::shuffle(sp.begin(), sp.end(), rng);
    std::shuffle(tp.begin(), tp.end(), rng);
    const std::size_t longest = std::max(n_source, n_target);
    const std::size_t n_batches = (longest + batch - 1) / batch;
    std::vector<BatchPlan> plan(n_batches);
    for (std::size_t b = 0; b < n_batches; ++b)
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t pos = b * batch + i;
            plan[b].source.push_back(sp[pos % n_source]);
            plan[b].target.push_back(tp[pos % n_target]);
        }
    return plan;
}

inline DomainBatch materialize(const BatchPlan& plan, const Dataset& source, const Dataset& target) {
    DomainBatch b;
    b.x_source = source.gather(plan.source);
    b.x_target = target.gather(plan.target);
    auto labels = source.labels();
    for (auto i : plan.source) b.y_source.push_back(labels[i]);
    b.target_indices = plan.target;
    b.source_indices = plan.source;
    return b;
}

/// All batches of one epoch, deterministic in (seed, epoch).
inline std::vector<DomainBatch> make_batches(const Dataset& source, const Dataset& target, std::size_t batch,
                                             std::uint64_t seed, std::size_t epoch) {
    std::vector<DomainBatch> out;
    for (const auto& p : plan_epoch(source.size(), target.size(), batch, seed, epoch))
        out.push_back(materialize(p, source, target));
    return out;
}

}  // namespace dtdn
