#include "gevit/shapeworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "gevit/parallel.hpp"
#include "gevit/rng.hpp"

namespace gevit {

namespace {

constexpr double kPi = 3.14159265358979323846;

// seed-stream tags
constexpr uint64_t kGeomTag = 0x47454F4Dull;   // shape geometry
constexpr uint64_t kTexTag = 0x54455854ull;    // texture pattern
constexpr uint64_t kBgTag = 0x42414347ull;     // background pattern
constexpr uint64_t kShiftTag = 0x53484654ull;  // shift transforms
constexpr uint64_t kStyleTag = 0x5354594Cull;  // style rendering
constexpr uint64_t kCorrTag = 0x434F5252ull;   // corruption noise

using Point = std::pair<double, double>;

// ------------------------------------------------------------ shape geometry

struct ShapeInstance {
    std::vector<Point> outline;  // dense polyline, canvas coordinates
    bool filled{true};           // filled silhouette vs stroke-only class
    bool closed{true};
    double stroke_halfw{0.0};    // for stroke classes
};

struct GeomJitter {
    double cx, cy, scl, rot;
};

GeomJitter geometry_jitter(int shape_class, uint64_t seed) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(shape_class), kGeomTag));
    GeomJitter j;
    j.cx = kCanvas / 2.0 + rng.uniform(-1.2, 1.2);
    j.cy = kCanvas / 2.0 + rng.uniform(-1.2, 1.2);
    j.scl = rng.uniform(0.92, 1.08);
    j.rot = rng.uniform(-0.3, 0.3);
    return j;
}

std::vector<Point> transform_points(const std::vector<Point>& pts, const GeomJitter& j) {
    std::vector<Point> out;
    out.reserve(pts.size());
    const double c = std::cos(j.rot), s = std::sin(j.rot);
    for (const auto& [x, y] : pts) {
        const double xs = x * j.scl, ys = y * j.scl;
        out.emplace_back(j.cx + c * xs - s * ys, j.cy + s * xs + c * ys);
    }
    return out;
}

std::vector<Point> regular_polygon(const std::vector<Point>& verts, int per_edge) {
    std::vector<Point> out;
    const size_t n = verts.size();
    for (size_t i = 0; i < n; ++i) {
        const auto& a = verts[i];
        const auto& b = verts[(i + 1) % n];
        for (int k = 0; k < per_edge; ++k) {
            const double t = static_cast<double>(k) / per_edge;
            out.emplace_back(a.first + t * (b.first - a.first), a.second + t * (b.second - a.second));
        }
    }
    return out;
}

// base outlines centered at the origin, unit = canvas pixels
ShapeInstance base_shape(int shape_class) {
    ShapeInstance s;
    switch (shape_class) {
        case 0: {  // triangle
            std::vector<Point> v;
            for (int i = 0; i < 3; ++i) {
                const double a = -kPi / 2 + 2.0 * kPi * i / 3;
                v.emplace_back(13.0 * std::cos(a), 13.0 * std::sin(a));
            }
            s.outline = regular_polygon(v, 20);
            break;
        }
        case 1: {  // square
            std::vector<Point> v{{-8.2, -8.2}, {8.2, -8.2}, {8.2, 8.2}, {-8.2, 8.2}};
            s.outline = regular_polygon(v, 16);
            break;
        }
        case 2: {  // five-pointed star
            std::vector<Point> v;
            for (int i = 0; i < 10; ++i) {
                const double r = (i % 2 == 0) ? 13.5 : 5.8;
                const double a = -kPi / 2 + kPi * i / 5;
                v.emplace_back(r * std::cos(a), r * std::sin(a));
            }
            s.outline = regular_polygon(v, 7);
            break;
        }
        case 3: {  // ring: thick circular stroke
            std::vector<Point> v;
            for (int i = 0; i < 64; ++i) {
                const double a = 2.0 * kPi * i / 64;
                v.emplace_back(9.5 * std::cos(a), 9.5 * std::sin(a));
            }
            s.outline = v;
            s.filled = false;
            s.stroke_halfw = 2.6;
            break;
        }
        case 4: {  // cross
            const double L = 11.0, w = 3.6;
            std::vector<Point> v{{-w, -L}, {w, -L}, {w, -w}, {L, -w}, {L, w},  {w, w},
                                 {w, L},   {-w, L}, {-w, w}, {-L, w}, {-L, -w}, {-w, -w}};
            s.outline = regular_polygon(v, 6);
            break;
        }
        case 5: {  // arrow
            std::vector<Point> v{{-11.5, -4.0}, {2.0, -4.0}, {2.0, -9.0}, {12.0, 0.0},
                                 {2.0, 9.0},    {2.0, 4.0},  {-11.5, 4.0}};
            s.outline = regular_polygon(v, 10);
            break;
        }
        case 6: {  // heart curve
            std::vector<Point> v;
            for (int i = 0; i < 72; ++i) {
                const double t = 2.0 * kPi * i / 72;
                const double x = 16.0 * std::pow(std::sin(t), 3.0);
                const double y = 13.0 * std::cos(t) - 5.0 * std::cos(2 * t) - 2.0 * std::cos(3 * t) - std::cos(4 * t);
                v.emplace_back(x * 0.72, -y * 0.72);
            }
            s.outline = v;
            break;
        }
        case 7: {  // S-curve: two half-circle arcs
            std::vector<Point> v;
            const double r = 5.4;
            for (int i = 0; i <= 24; ++i) {  // right-side arc, bottom to middle
                const double a = -kPi / 2 + kPi * i / 24;
                v.emplace_back(r * std::cos(a), -r + r * std::sin(a));
            }
            for (int i = 1; i <= 24; ++i) {  // left-side arc, middle to top
                const double a = -kPi / 2 + kPi * i / 24;
                v.emplace_back(-r * std::cos(a), r + r * std::sin(a));
            }
            s.outline = v;
            s.filled = false;
            s.closed = false;
            s.stroke_halfw = 2.9;
            break;
        }
        case 8: {  // archimedean spiral
            std::vector<Point> v;
            const double r0 = 1.8, turns = 2.0;
            const double theta_max = turns * 2.0 * kPi;
            const double b = (11.3 - r0) / theta_max;
            for (int i = 0; i <= 80; ++i) {
                const double t = theta_max * i / 80;
                const double r = r0 + b * t;
                v.emplace_back(r * std::cos(t), r * std::sin(t));
            }
            s.outline = v;
            s.filled = false;
            s.closed = false;
            s.stroke_halfw = 2.1;
            break;
        }
        default:
            throw std::invalid_argument("base_shape: class " + std::to_string(shape_class) + " out of range");
    }
    return s;
}

ShapeInstance shape_instance(int shape_class, uint64_t seed) {
    ShapeInstance s = base_shape(shape_class);
    s.outline = transform_points(s.outline, geometry_jitter(shape_class, seed));
    return s;
}

double dist_point_segment(double px, double py, const Point& a, const Point& b) {
    const double vx = b.first - a.first, vy = b.second - a.second;
    const double wx = px - a.first, wy = py - a.second;
    const double vv = vx * vx + vy * vy;
    double t = vv > 0 ? (wx * vx + wy * vy) / vv : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (a.first + t * vx), dy = py - (a.second + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

double dist_to_polyline(double px, double py, const std::vector<Point>& pts, bool closed) {
    double best = 1e30;
    const size_t n = pts.size();
    const size_t last = closed ? n : n - 1;
    for (size_t i = 0; i < last; ++i)
        best = std::min(best, dist_point_segment(px, py, pts[i], pts[(i + 1) % n]));
    return best;
}

bool point_in_polygon(double px, double py, const std::vector<Point>& pts) {
    bool inside = false;
    const size_t n = pts.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto& a = pts[i];
        const auto& b = pts[j];
        if ((a.second > py) != (b.second > py)) {
            const double x = (b.first - a.first) * (py - a.second) / (b.second - a.second) + a.first;
            if (px < x) inside = !inside;
        }
    }
    return inside;
}

// signed distance: negative inside the silhouette / stroke band
double shape_signed_distance(const ShapeInstance& s, double px, double py) {
    const double d = dist_to_polyline(px, py, s.outline, s.closed);
    if (s.filled) return point_in_polygon(px, py, s.outline) ? -d : d;
    return d - s.stroke_halfw;
}

double coverage_from_sd(double sd, double aa) { return std::clamp(0.5 - sd / aa, 0.0, 1.0); }

// ------------------------------------------------------------ procedural fill

struct Color {
    double r, g, b;
};

constexpr Color kPalette[kNumClasses] = {
    {0.85, 0.25, 0.25}, {0.30, 0.80, 0.30}, {0.30, 0.40, 0.90},
    {0.85, 0.80, 0.25}, {0.80, 0.30, 0.80}, {0.30, 0.80, 0.80},
    {0.90, 0.55, 0.20}, {0.55, 0.35, 0.85}, {0.82, 0.82, 0.82},
};

struct PatternInstance {
    double period{4.0};
    double phase_x{0.0};
    double phase_y{0.0};
    uint64_t noise_seed{0};
    double tint_r{1.0}, tint_g{1.0}, tint_b{1.0};
};

PatternInstance make_pattern(uint64_t stream_seed, double base_period, double jitter_amount) {
    Rng rng(stream_seed);
    PatternInstance p;
    p.period = base_period * rng.uniform(0.9, 1.15);
    p.phase_x = rng.uniform(0.0, base_period);
    p.phase_y = rng.uniform(0.0, base_period);
    p.noise_seed = rng.next_u64();
    p.tint_r = 1.0 + jitter_amount * rng.uniform(-0.35, 0.35);
    p.tint_g = 1.0 + jitter_amount * rng.uniform(-0.35, 0.35);
    p.tint_b = 1.0 + jitter_amount * rng.uniform(-0.35, 0.35);
    return p;
}

double hash_noise(uint64_t seed, int ix, int iy) {
    uint64_t h = seed ^ (static_cast<uint64_t>(static_cast<uint32_t>(ix)) << 32) ^
                 static_cast<uint64_t>(static_cast<uint32_t>(iy));
    uint64_t st = h;
    return static_cast<double>(splitmix64(st) >> 11) * 0x1.0p-53;
}

double value_noise(uint64_t seed, double x, double y, double cell) {
    const double gx = x / cell, gy = y / cell;
    const int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
    const double fx = gx - x0, fy = gy - y0;
    const double sx = fx * fx * (3 - 2 * fx), sy = fy * fy * (3 - 2 * fy);
    const double v00 = hash_noise(seed, x0, y0), v10 = hash_noise(seed, x0 + 1, y0);
    const double v01 = hash_noise(seed, x0, y0 + 1), v11 = hash_noise(seed, x0 + 1, y0 + 1);
    return (1 - sy) * ((1 - sx) * v00 + sx * v10) + sy * ((1 - sx) * v01 + sx * v11);
}

double square_wave(double t) { return t - std::floor(t) < 0.5 ? 1.0 : 0.0; }

double pattern_intensity(int pattern_class, double x, double y, const PatternInstance& p) {
    switch (pattern_class) {
        case 0: return square_wave((y + p.phase_y) / p.period);                      // horizontal stripes
        case 1: return square_wave((x + p.phase_x) / p.period);                      // vertical stripes
        case 2: return square_wave((x + y + p.phase_x) / (p.period * 1.4142));       // diagonal stripes
        case 3: {                                                                     // checker
            const double cx = std::floor((x + p.phase_x) / p.period);
            const double cy = std::floor((y + p.phase_y) / p.period);
            return std::fmod(std::fabs(cx + cy), 2.0) < 1.0 ? 1.0 : 0.0;
        }
        case 4: {  // polka dots
            const double cell = p.period * 1.6;
            const double lx = x + p.phase_x, ly = y + p.phase_y;
            const double dx = lx - (std::floor(lx / cell) + 0.5) * cell;
            const double dy = ly - (std::floor(ly / cell) + 0.5) * cell;
            return std::sqrt(dx * dx + dy * dy) < cell * 0.32 ? 1.0 : 0.0;
        }
        case 5: {  // concentric rings
            const double dx = x - kCanvas / 2.0 - p.phase_x * 0.5;
            const double dy = y - kCanvas / 2.0 - p.phase_y * 0.5;
            return square_wave(std::sqrt(dx * dx + dy * dy) / p.period);
        }
        case 6: return value_noise(p.noise_seed, x, y, p.period * 1.5) > 0.5 ? 1.0 : 0.0;  // noise field
        case 7: {  // zigzag
            const double tri = std::fabs(2.0 * ((y + p.phase_y) / (p.period * 2) -
                                                std::floor((y + p.phase_y) / (p.period * 2) + 0.5)));
            return square_wave((x + p.phase_x + p.period * 2 * tri) / p.period);
        }
        case 8: {  // cross-hatch
            return std::max(square_wave((x + p.phase_x) / p.period), square_wave((y + p.phase_y) / p.period));
        }
        default:
            throw std::invalid_argument("pattern_intensity: class out of range");
    }
}

Color texture_color(int texture_class, double x, double y, const PatternInstance& p, double jitter) {
    const double it = pattern_intensity(texture_class, x, y, p);
    const double level = 0.55 + 0.45 * it;
    const Color base = kPalette[texture_class];
    Color c{base.r * level, base.g * level, base.b * level};
    if (jitter > 0.0) {
        c.r *= p.tint_r;
        c.g *= p.tint_g;
        c.b *= p.tint_b;
    }
    return {std::clamp(c.r, 0.0, 1.0), std::clamp(c.g, 0.0, 1.0), std::clamp(c.b, 0.0, 1.0)};
}

Color background_color(int background_class, double x, double y, const PatternInstance& p) {
    const double it = pattern_intensity(background_class, x, y, p);
    const double level = 0.12 + 0.30 * it;
    const Color base = kPalette[background_class];
    return {base.r * level, base.g * level, base.b * level};
}

uint64_t bg_stream_seed(const CueSpec& spec) {
    return derive_seed(spec.seed ^ spec.background_salt, static_cast<uint64_t>(spec.background_class), kBgTag);
}

// ------------------------------------------------------------ polyline utils

double perp_distance(const Point& p, const Point& a, const Point& b) {
    const double vx = b.first - a.first, vy = b.second - a.second;
    const double len = std::sqrt(vx * vx + vy * vy);
    if (len < 1e-12) {
        const double dx = p.first - a.first, dy = p.second - a.second;
        return std::sqrt(dx * dx + dy * dy);
    }
    return std::fabs(vx * (a.second - p.second) - (a.first - p.first) * vy) / len;
}

void douglas_peucker(const std::vector<Point>& pts, size_t lo, size_t hi, double eps,
                     std::vector<bool>& keep) {
    if (hi <= lo + 1) return;
    double dmax = 0.0;
    size_t imax = lo;
    for (size_t i = lo + 1; i < hi; ++i) {
        const double d = perp_distance(pts[i], pts[lo], pts[hi]);
        if (d > dmax) {
            dmax = d;
            imax = i;
        }
    }
    if (dmax > eps) {
        keep[imax] = true;
        douglas_peucker(pts, lo, imax, eps, keep);
        douglas_peucker(pts, imax, hi, eps, keep);
    }
}

std::vector<Point> simplify_polyline(const std::vector<Point>& pts, double eps) {
    if (pts.size() <= 2) return pts;
    std::vector<bool> keep(pts.size(), false);
    keep.front() = keep.back() = true;
    // anchor a mid point as well so closed outlines keep their extent
    keep[pts.size() / 2] = true;
    douglas_peucker(pts, 0, pts.size() / 2, eps, keep);
    douglas_peucker(pts, pts.size() / 2, pts.size() - 1, eps, keep);
    std::vector<Point> out;
    for (size_t i = 0; i < pts.size(); ++i)
        if (keep[i]) out.push_back(pts[i]);
    return out;
}

}  // namespace

std::vector<std::pair<double, double>> outline_polyline(int shape_class, uint64_t seed) {
    return shape_instance(shape_class, seed).outline;
}

std::vector<std::pair<double, double>> simplified_outline(int shape_class, uint64_t seed) {
    return simplify_polyline(shape_instance(shape_class, seed).outline, 1.1);
}

std::vector<double> render_coverage(const CueSpec& spec) {
    const ShapeInstance inst = shape_instance(spec.shape_class, spec.seed);
    std::vector<double> cov(static_cast<size_t>(kCanvas) * kCanvas);
    for (int y = 0; y < kCanvas; ++y)
        for (int x = 0; x < kCanvas; ++x)
            cov[static_cast<size_t>(y) * kCanvas + x] =
                coverage_from_sd(shape_signed_distance(inst, x + 0.5, y + 0.5), 1.0);
    return cov;
}

Example render(const CueSpec& spec) {
    if (spec.shape_class < 0 || spec.shape_class >= kNumClasses || spec.texture_class < 0 ||
        spec.texture_class >= kNumClasses || spec.background_class < 0 || spec.background_class >= kNumClasses)
        throw std::invalid_argument("render: class id out of [0," + std::to_string(kNumClasses) + ")");

    const ShapeInstance inst = shape_instance(spec.shape_class, spec.seed);
    const PatternInstance tex = make_pattern(
        derive_seed(spec.seed, static_cast<uint64_t>(spec.texture_class), kTexTag), 4.0, spec.color_jitter);
    const PatternInstance bg = make_pattern(bg_stream_seed(spec), 6.0, 0.0);

    Example ex;
    ex.image = Tensor::zeros({kChannels, kCanvas, kCanvas});
    auto& img = ex.image.data();
    const size_t plane = static_cast<size_t>(kCanvas) * kCanvas;
    for (int y = 0; y < kCanvas; ++y) {
        for (int x = 0; x < kCanvas; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double a = coverage_from_sd(shape_signed_distance(inst, px, py), 1.0);
            const Color fg = texture_color(spec.texture_class, px, py, tex, spec.color_jitter);
            const Color bk = spec.background_blank ? Color{0, 0, 0}
                                                   : background_color(spec.background_class, px, py, bg);
            const size_t i = static_cast<size_t>(y) * kCanvas + x;
            img[i] = a * fg.r + (1 - a) * bk.r;
            img[plane + i] = a * fg.g + (1 - a) * bk.g;
            img[2 * plane + i] = a * fg.b + (1 - a) * bk.b;
        }
    }
    ex.shape_label = spec.shape_class;
    ex.texture_label = spec.texture_class;
    ex.background_label = spec.background_class;
    return ex;
}

CueSpec background_shift(const CueSpec& spec, BackgroundVariant variant) {
    CueSpec out = spec;
    Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(variant), kShiftTag));
    switch (variant) {
        case BackgroundVariant::OnlyFg:
            out.background_blank = true;
            break;
        case BackgroundVariant::MixedSame:
            out.background_salt = rng.next_u64() | 1;  // fresh draw from the same class pool
            break;
        case BackgroundVariant::MixedRand:
            out.background_class = rng.bounded_int(kNumClasses);
            out.background_salt = rng.next_u64() | 1;
            break;
        case BackgroundVariant::MixedNext:
            out.background_class = (spec.shape_class + 1) % kNumClasses;
            out.background_salt = rng.next_u64() | 1;
            break;
    }
    return out;
}

double corruption_param(CorruptionType type, int severity) {
    if (severity < 1 || severity > 5)
        throw std::invalid_argument("corruption_param: severity " + std::to_string(severity) + " out of 1..5");
    static constexpr double kNoise[5] = {0.04, 0.08, 0.12, 0.18, 0.26};
    static constexpr double kImpulse[5] = {0.02, 0.04, 0.07, 0.10, 0.15};
    static constexpr double kBlur[5] = {0.5, 1.0, 1.5, 2.0, 3.0};
    static constexpr double kContrast[5] = {0.8, 0.65, 0.5, 0.4, 0.3};
    static constexpr double kPixelate[5] = {2, 3, 4, 6, 8};
    switch (type) {
        case CorruptionType::GaussianNoise: return kNoise[severity - 1];
        case CorruptionType::ImpulseNoise: return kImpulse[severity - 1];
        case CorruptionType::GaussianBlur: return kBlur[severity - 1];
        case CorruptionType::Contrast: return kContrast[severity - 1];
        case CorruptionType::Pixelate: return kPixelate[severity - 1];
    }
    throw std::invalid_argument("corruption_param: unknown corruption type");
}

Tensor corrupt(const Tensor& image, CorruptionType type, int severity, uint64_t seed) {
    if (image.shape().size() != 3)
        throw std::invalid_argument("corrupt: expected [C x H x W], got " + shape_str(image.shape()));
    if (severity == 0) return Tensor::from_data(image.shape(), image.data());
    const double param = corruption_param(type, severity);
    const int C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
    Tensor out = Tensor::from_data(image.shape(), image.data());
    auto& v = out.data();
    Rng rng(derive_seed(seed, static_cast<uint64_t>(type), kCorrTag, static_cast<uint64_t>(severity)));

    switch (type) {
        case CorruptionType::GaussianNoise: {
            for (auto& p : v) p = std::clamp(p + rng.normal(0.0, param), 0.0, 1.0);
            break;
        }
        case CorruptionType::ImpulseNoise: {
            const size_t plane = static_cast<size_t>(H) * W;
            for (size_t i = 0; i < plane; ++i) {
                if (rng.uniform01() < param) {
                    const double val = rng.uniform01() < 0.5 ? 0.0 : 1.0;
                    for (int c = 0; c < C; ++c) v[static_cast<size_t>(c) * plane + i] = val;
                }
            }
            break;
        }
        case CorruptionType::GaussianBlur: {
            const double sigma = param;
            const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
            std::vector<double> kernel(2 * radius + 1);
            double ksum = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
                ksum += kernel[i + radius];
            }
            for (auto& k : kernel) k /= ksum;
            std::vector<double> tmp(v.size());
            const size_t plane = static_cast<size_t>(H) * W;
            for (int c = 0; c < C; ++c) {  // horizontal pass
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        double s = 0.0;
                        for (int i = -radius; i <= radius; ++i)
                            s += kernel[i + radius] * v[c * plane + y * W + std::clamp(x + i, 0, W - 1)];
                        tmp[c * plane + y * W + x] = s;
                    }
            }
            for (int c = 0; c < C; ++c) {  // vertical pass
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        double s = 0.0;
                        for (int i = -radius; i <= radius; ++i)
                            s += kernel[i + radius] * tmp[c * plane + std::clamp(y + i, 0, H - 1) * W + x];
                        v[c * plane + y * W + x] = std::clamp(s, 0.0, 1.0);
                    }
            }
            break;
        }
        case CorruptionType::Contrast: {
            for (auto& p : v) p = std::clamp(0.5 + (p - 0.5) * param, 0.0, 1.0);
            break;
        }
        case CorruptionType::Pixelate: {
            const int block = static_cast<int>(param);
            const size_t plane = static_cast<size_t>(H) * W;
            for (int c = 0; c < C; ++c)
                for (int by = 0; by < H; by += block)
                    for (int bx = 0; bx < W; bx += block) {
                        const int ey = std::min(by + block, H), ex = std::min(bx + block, W);
                        double s = 0.0;
                        for (int y = by; y < ey; ++y)
                            for (int x = bx; x < ex; ++x) s += v[c * plane + y * W + x];
                        s /= static_cast<double>((ey - by) * (ex - bx));
                        for (int y = by; y < ey; ++y)
                            for (int x = bx; x < ex; ++x) v[c * plane + y * W + x] = s;
                    }
            break;
        }
        default:
            throw std::invalid_argument("corrupt: unknown corruption type");
    }
    return out;
}

CueSpec texture_shift(const CueSpec& spec, TextureVariant mode, int conflict_class) {
    CueSpec out = spec;
    if (mode == TextureVariant::Stylize) {
        Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(mode) + 16, kShiftTag));
        out.texture_class = (spec.shape_class + 1 + rng.bounded_int(kNumClasses - 1)) % kNumClasses;
        out.background_class = rng.bounded_int(kNumClasses);
        out.background_salt = rng.next_u64() | 1;
    } else {
        if (conflict_class == spec.shape_class)
            throw std::invalid_argument("texture_shift: conflict class equals shape class " +
                                        std::to_string(conflict_class));
        if (conflict_class < 0 || conflict_class >= kNumClasses)
            throw std::invalid_argument("texture_shift: conflict class " + std::to_string(conflict_class) +
                                        " out of range");
        out.texture_class = conflict_class;
    }
    return out;
}

Example style_shift(const CueSpec& spec, StyleVariant domain) {
    const ShapeInstance inst = shape_instance(spec.shape_class, spec.seed);
    Rng style_rng(derive_seed(spec.seed, static_cast<uint64_t>(domain), kStyleTag));

    Example ex;
    ex.image = Tensor::zeros({kChannels, kCanvas, kCanvas});
    auto& img = ex.image.data();
    const size_t plane = static_cast<size_t>(kCanvas) * kCanvas;
    auto put = [&](int x, int y, const Color& c) {
        const size_t i = static_cast<size_t>(y) * kCanvas + x;
        img[i] = std::clamp(c.r, 0.0, 1.0);
        img[plane + i] = std::clamp(c.g, 0.0, 1.0);
        img[2 * plane + i] = std::clamp(c.b, 0.0, 1.0);
    };

    if (domain == StyleVariant::PaintingLike) {
        // smooth color fields inside and out, softened edges
        const Color base = kPalette[spec.texture_class];
        const Color bgb = kPalette[spec.background_class];
        const double ang = style_rng.uniform(0.0, kPi);
        const double lam = style_rng.uniform(18.0, 28.0);
        const double ph = style_rng.uniform(0.0, 2 * kPi);
        for (int y = 0; y < kCanvas; ++y)
            for (int x = 0; x < kCanvas; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                const double a = coverage_from_sd(shape_signed_distance(inst, px, py), 2.5);
                const double w = 0.5 + 0.5 * std::sin(2 * kPi * (px * std::cos(ang) + py * std::sin(ang)) / lam + ph);
                const Color fg{base.r * (0.55 + 0.4 * w), base.g * (0.55 + 0.4 * w), base.b * (0.55 + 0.4 * w)};
                const Color bk{bgb.r * (0.15 + 0.2 * (1 - w)), bgb.g * (0.15 + 0.2 * (1 - w)),
                               bgb.b * (0.15 + 0.2 * (1 - w))};
                put(x, y, {a * fg.r + (1 - a) * bk.r, a * fg.g + (1 - a) * bk.g, a * fg.b + (1 - a) * bk.b});
            }
    } else {
        const double paper = 0.92;
        const Color ink{0.15, 0.15, 0.18};
        std::vector<Point> stroke;
        double halfw;
        if (domain == StyleVariant::SketchLike) {
            stroke = inst.outline;
            for (auto& [sx, sy] : stroke) {
                sx += style_rng.normal(0.0, 0.45);
                sy += style_rng.normal(0.0, 0.45);
            }
            halfw = 1.0;
        } else {  // QuickdrawLike: simplified piecewise-linear outline only
            stroke = simplify_polyline(inst.outline, 1.1);
            halfw = 0.8;
        }
        for (int y = 0; y < kCanvas; ++y)
            for (int x = 0; x < kCanvas; ++x) {
                const double d = dist_to_polyline(x + 0.5, y + 0.5, stroke, inst.closed);
                const double a = coverage_from_sd(d - halfw, 1.0);
                put(x, y, {a * ink.r + (1 - a) * paper, a * ink.g + (1 - a) * paper, a * ink.b + (1 - a) * paper});
            }
    }
    ex.shape_label = spec.shape_class;
    ex.texture_label = spec.texture_class;
    ex.background_label = spec.background_class;
    ex.shift = {ShiftFamily::Style, static_cast<uint8_t>(domain), 0};
    return ex;
}

// -------------------------------------------------------------------- suites

const std::vector<SuiteSpec>& all_suites() {
    static const std::vector<SuiteSpec> suites = [] {
        std::vector<SuiteSpec> s;
        const char* bg[] = {"only_fg", "mixed_same", "mixed_rand", "mixed_next"};
        for (int v = 0; v < 4; ++v)
            s.push_back({std::string("background_") + bg[v],
                         {ShiftFamily::Background, static_cast<uint8_t>(v), 0}});
        const char* corr[] = {"gaussian_noise", "impulse_noise", "gaussian_blur", "contrast", "pixelate"};
        for (int t = 0; t < 5; ++t)
            for (int sev = 1; sev <= 5; ++sev)
                s.push_back({std::string("corruption_") + corr[t] + "_s" + std::to_string(sev),
                             {ShiftFamily::Corruption, static_cast<uint8_t>(t), static_cast<uint8_t>(sev)}});
        s.push_back({"texture_stylize", {ShiftFamily::Texture, 0, 0}});
        s.push_back({"texture_cue_conflict", {ShiftFamily::Texture, 1, 0}});
        const char* style[] = {"painting_like", "sketch_like", "quickdraw_like"};
        for (int v = 0; v < 3; ++v)
            s.push_back({std::string("style_") + style[v], {ShiftFamily::Style, static_cast<uint8_t>(v), 0}});
        return s;
    }();
    return suites;
}

const SuiteSpec* find_suite(const std::string& name) {
    for (const auto& s : all_suites())
        if (s.name == name) return &s;
    return nullptr;
}

// --------------------------------------------------------------- dataset io

namespace {

void put_u16(std::ostream& os, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
    os.write(b, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

void put_f32(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

float get_f32(std::istream& is) {
    const uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

constexpr char kDataMagic[9] = "SHFT0001";

}  // namespace

void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_dataset: cannot open " + path);
    os.write(kDataMagic, 8);
    put_u32(os, static_cast<uint32_t>(ds.examples.size()));
    os.put(static_cast<char>(ds.channels));
    os.put(static_cast<char>(ds.height));
    os.put(static_cast<char>(ds.width));
    put_u16(os, static_cast<uint16_t>(ds.n_classes));
    for (const auto& ex : ds.examples) {
        put_u16(os, static_cast<uint16_t>(ex.shape_label));
        put_u16(os, static_cast<uint16_t>(ex.texture_label));
        put_u16(os, static_cast<uint16_t>(ex.background_label));
        os.put(static_cast<char>(ex.domain));
        os.put(static_cast<char>(ex.shift.family));
        os.put(static_cast<char>(ex.shift.variant));
        os.put(static_cast<char>(ex.shift.severity));
        for (double d : ex.image.data()) put_f32(os, static_cast<float>(d));
    }
    if (!os) throw std::runtime_error("write_dataset: write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_dataset: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kDataMagic, 8) != 0)
        throw std::runtime_error("read_dataset: bad magic in " + path);
    Dataset ds;
    const uint32_t n = get_u32(is);
    ds.channels = is.get();
    ds.height = is.get();
    ds.width = is.get();
    ds.n_classes = get_u16(is);
    ds.examples.reserve(n);
    const size_t numel = static_cast<size_t>(ds.channels) * ds.height * ds.width;
    for (uint32_t i = 0; i < n; ++i) {
        Example ex;
        ex.shape_label = get_u16(is);
        ex.texture_label = get_u16(is);
        ex.background_label = get_u16(is);
        ex.domain = static_cast<uint8_t>(is.get());
        ex.shift.family = static_cast<ShiftFamily>(is.get());
        ex.shift.variant = static_cast<uint8_t>(is.get());
        ex.shift.severity = static_cast<uint8_t>(is.get());
        std::vector<double> data(numel);
        for (auto& d : data) d = static_cast<double>(get_f32(is));
        if (!is) throw std::runtime_error("read_dataset: truncated example in " + path);
        ex.image = Tensor::from_data({ds.channels, ds.height, ds.width}, std::move(data));
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("fnv1a_file: cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (is.eof()) break;
    }
    return h;
}

// ------------------------------------------------------------- corpus build

namespace {

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Example make_ood_example(const CueSpec& spec, const SuiteSpec& suite) {
    Example ex;
    switch (suite.tag.family) {
        case ShiftFamily::Background:
            ex = render(background_shift(spec, static_cast<BackgroundVariant>(suite.tag.variant)));
            break;
        case ShiftFamily::Corruption: {
            ex = render(spec);
            ex.image = corrupt(ex.image, static_cast<CorruptionType>(suite.tag.variant), suite.tag.severity,
                               spec.seed);
            break;
        }
        case ShiftFamily::Texture: {
            const auto mode = static_cast<TextureVariant>(suite.tag.variant);
            if (mode == TextureVariant::Stylize) {
                ex = render(texture_shift(spec, mode));
            } else {
                Rng rng(derive_seed(spec.seed, 0x43464Cull, kShiftTag));
                const int conflict = (spec.shape_class + 1 + rng.bounded_int(kNumClasses - 1)) % kNumClasses;
                ex = render(texture_shift(spec, mode, conflict));
            }
            break;
        }
        case ShiftFamily::Style:
            ex = style_shift(spec, static_cast<StyleVariant>(suite.tag.variant));
            break;
        default:
            throw std::invalid_argument("make_ood_example: suite has no shift family");
    }
    ex.domain = 1;
    ex.shift = suite.tag;
    return ex;
}

}  // namespace

std::vector<CorpusFileInfo> build_corpus(const std::string& out_dir, const CorpusOptions& opt) {
    if (opt.n_per_class < 1) throw std::invalid_argument("build_corpus: n_per_class must be >= 1");
    const double rsum = opt.ratio_train + opt.ratio_iid + opt.ratio_ood;
    if (std::fabs(rsum - 1.0) > 1e-9)
        throw std::invalid_argument("build_corpus: split ratios sum to " + std::to_string(rsum) + ", expected 1");

    const int n_train = static_cast<int>(std::llround(opt.ratio_train * opt.n_per_class));
    const int n_iid = static_cast<int>(std::llround(opt.ratio_iid * opt.n_per_class));
    const int n_ood = opt.n_per_class - n_train - n_iid;
    if (n_train < 0 || n_iid < 0 || n_ood < 0)
        throw std::invalid_argument("build_corpus: negative split count");

    std::vector<const SuiteSpec*> suites;
    if (opt.suites.empty()) {
        for (const auto& s : all_suites()) suites.push_back(&s);
    } else {
        for (const auto& name : opt.suites) {
            const SuiteSpec* s = find_suite(name);
            if (!s) throw std::invalid_argument("build_corpus: unknown suite '" + name + "'");
            suites.push_back(s);
        }
    }

    std::filesystem::create_directories(out_dir);

    auto clean_spec = [&](int split, int cls, int idx) {
        CueSpec spec;
        spec.shape_class = cls;
        spec.texture_class = cls;
        spec.background_class = cls;
        spec.color_jitter = 0.25;
        spec.seed = derive_seed(opt.seed, static_cast<uint64_t>(split), static_cast<uint64_t>(cls),
                                static_cast<uint64_t>(idx));
        return spec;
    };

    auto render_split = [&](int split, int per_class) {
        Dataset ds;
        ds.examples.resize(static_cast<size_t>(per_class) * kNumClasses);
        parallel_for(per_class * kNumClasses, [&](int i) {
            const int cls = i / per_class, idx = i % per_class;
            Example ex = render(clean_spec(split, cls, idx));
            ex.domain = 0;
            ds.examples[i] = std::move(ex);
        });
        return ds;
    };

    std::vector<CorpusFileInfo> manifest;
    auto emit = [&](const std::string& file, const std::string& suite, ShiftTag tag, const Dataset& ds) {
        const std::string path = out_dir + "/" + file;
        write_dataset(path, ds);
        manifest.push_back({file, suite, tag, ds.size(), hash_hex(fnv1a_file(path))});
    };

    emit("train.shft", "train", {}, render_split(0, n_train));
    emit("iid_val.shft", "iid_val", {}, render_split(1, n_iid));

    for (const SuiteSpec* suite : suites) {
        Dataset ds;
        ds.examples.resize(static_cast<size_t>(n_ood) * kNumClasses);
        parallel_for(n_ood * kNumClasses, [&](int i) {
            const int cls = i / n_ood, idx = i % n_ood;
            ds.examples[i] = make_ood_example(clean_spec(2, cls, idx), *suite);
        });
        emit("ood_" + suite->name + ".shft", suite->name, suite->tag, ds);
    }
    return manifest;
}

}  // namespace gevit
