#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gevit/tensor.hpp"

namespace gevit {

// 9 classes of silhouettes; the ground-truth label is always the shape class.
inline constexpr int kNumClasses = 9;
inline constexpr int kCanvas = 32;
inline constexpr int kChannels = 3;

enum class ShiftFamily : uint8_t { None = 0, Background = 1, Corruption = 2, Texture = 3, Style = 4 };
enum class BackgroundVariant : uint8_t { OnlyFg = 0, MixedSame = 1, MixedRand = 2, MixedNext = 3 };
enum class CorruptionType : uint8_t { GaussianNoise = 0, ImpulseNoise = 1, GaussianBlur = 2, Contrast = 3, Pixelate = 4 };
enum class TextureVariant : uint8_t { Stylize = 0, CueConflict = 1 };
enum class StyleVariant : uint8_t { PaintingLike = 0, SketchLike = 1, QuickdrawLike = 2 };

struct CueSpec {
    int shape_class{0};
    int texture_class{0};
    int background_class{0};
    double color_jitter{0.25};
    uint64_t seed{0};
    bool background_blank{false};
    uint64_t background_salt{0};  // pool re-draw marker, set by mixed_same
};

struct ShiftTag {
    ShiftFamily family{ShiftFamily::None};
    uint8_t variant{0};
    uint8_t severity{0};
};

struct Example {
    Tensor image;  // [3 x 32 x 32], values in [0,1]
    int shape_label{0};
    int texture_label{0};
    int background_label{0};
    uint8_t domain{0};  // 0 source, 1 target
    ShiftTag shift;
};

struct Dataset {
    int channels{kChannels};
    int height{kCanvas};
    int width{kCanvas};
    int n_classes{kNumClasses};
    std::vector<Example> examples;
    int size() const { return static_cast<int>(examples.size()); }
};

// deterministic rasterization of one cue specification
Example render(const CueSpec& spec);

// per-pixel foreground coverage in [0,1]; the binary mask is coverage > 0.5
std::vector<double> render_coverage(const CueSpec& spec);

CueSpec background_shift(const CueSpec& spec, BackgroundVariant variant);

// pixel-level corruption; severity 0 is the identity, 1..5 index the ladders
Tensor corrupt(const Tensor& image, CorruptionType type, int severity, uint64_t seed);
double corruption_param(CorruptionType type, int severity);

CueSpec texture_shift(const CueSpec& spec, TextureVariant mode, int conflict_class = -1);

Example style_shift(const CueSpec& spec, StyleVariant domain);

// dense boundary polyline of the instance (canvas coordinates, jitter applied)
// and the simplified one used by the quickdraw rendering
std::vector<std::pair<double, double>> outline_polyline(int shape_class, uint64_t seed);
std::vector<std::pair<double, double>> simplified_outline(int shape_class, uint64_t seed);

struct SuiteSpec {
    std::string name;
    ShiftTag tag;
};
const std::vector<SuiteSpec>& all_suites();
const SuiteSpec* find_suite(const std::string& name);

struct CorpusOptions {
    int n_per_class{100};
    double ratio_train{0.7};
    double ratio_iid{0.15};
    double ratio_ood{0.15};
    std::vector<std::string> suites;  // empty means all
    uint64_t seed{0};
};

struct CorpusFileInfo {
    std::string file;   // file name inside the corpus directory
    std::string suite;  // "train", "iid_val", or an OOD suite name
    ShiftTag tag;
    int count{0};
    std::string hash_hex;
};

std::vector<CorpusFileInfo> build_corpus(const std::string& out_dir, const CorpusOptions& opt);

// Dataset file format: magic "SHFT0001"; header: n_examples (u32 LE),
// channels (u8), height (u8), width (u8), n_classes (u16 LE); per example:
// shape/texture/background labels (u16 LE each), domain (u8), family (u8),
// variant (u8), severity (u8), pixels (f32 LE, C*H*W).
void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

uint64_t fnv1a_file(const std::string& path);

}  // namespace gevit
