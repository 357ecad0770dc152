#pragma once

#include "r2moe/image.hpp"
#include "r2moe/numerics.hpp"
#include "r2moe/text_encoder.hpp"

#include <array>
#include <string>
#include <vector>

namespace r2moe {

// ---------------------------------------------------------------------------------------------
// Synthetic shapes

struct Rgb {
    double r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

struct Palette {
    std::string name;
    Rgb primary;
    Rgb secondary;
    bool operator==(const Palette&) const = default;
};

const std::vector<std::string>& shape_families();
const std::vector<std::string>& texture_names();
/// Named base colors (words in the default vocabulary).
const std::vector<std::pair<std::string, Rgb>>& base_colors();
/// Fixed palettes concepts draw from; deliberately not named in the vocabulary.
const std::vector<Palette>& concept_palettes();

struct ShapeParams {
    std::string shape;
    std::string texture;
    Palette palette;
    double cx = 16, cy = 16;  // center, pixels
    double radius = 9;        // half-extent, pixels
    double background = -0.6; // gray level in [-1, 1]
};

/// Renders one shape on a uniform background; values in [-1, 1].
Image render_shape(const ShapeParams& p, int size = 32);
/// True where the rendered shape covers pixel (y, x).
bool shape_covers(const ShapeParams& p, double y, double x);

/// One personalized concept: its attribute triple and 3..8 rendered examples.
struct ConceptDataset {
    int index = 0;  // 1-based
    std::string shape;
    std::string texture;
    Palette palette;
    std::vector<ShapeParams> layouts;
    std::vector<Image> images;

    std::string prompt() const;  // "photo of a V*<index> <shape>"
};

/// Distinct (shape, palette, texture) triples with randomized position/scale/background; deterministic per seed.
std::vector<ConceptDataset> gen_concepts(int count, std::uint64_t seed, int image_size = 32);

/// Generic captioned shape for backbone pretraining: "photo of a <color> <texture> <shape>".
struct CaptionedImage {
    Image image;
    std::string caption;
};
CaptionedImage gen_base_example(Rng& rng, int image_size = 32);

// ---------------------------------------------------------------------------------------------
// Alignment proxy

/// Frozen seeded random two-layer conv net plus a joint color histogram.
class FeatureExtractor {
public:
    explicit FeatureExtractor(std::uint64_t seed = 1234);

    Vec cnn_features(const Image& img) const;
    /// Joint 4x4x4 RGB histogram of [-1,1] values mapped to [0,1], normalized to unit mass.
    static Vec histogram(const Image& img);
    /// [cnn / |cnn| ; hist / |hist|] of the 2x2 average-pooled image
    Vec features(const Image& img) const;
    std::uint64_t parameter_hash() const;

private:
    std::vector<Mat> conv1_;  // per output channel: 3 x 9 (channel x tap)
    std::vector<Mat> conv2_;
    Vec bias1_, bias2_;
};

double cosine(const Vec& a, const Vec& b);

/// Mean pairwise cosine similarity of extracted features; 1 for identical sets.
double image_alignment(const FeatureExtractor& fx, const std::vector<Image>& generated,
                       const std::vector<Image>& reference);

/// Text-alignment proxy: histogram cosine between an image and a palette's rendered colors.
double palette_alignment(const Image& img, const Palette& palette);

// ---------------------------------------------------------------------------------------------
// Metrics

struct MetricRecord {
    int concept_index = 0;
    int after_task = 0;
    double image_alignment = 0.0;
    double text_alignment = 0.0;
    long logical_time = 0;  // monotone evaluation counter; keeps reports reproducible
};

/// Mean over tau < N of max(0, IA_tau measured after task tau - IA_tau measured after task N).
double forgetting(const std::vector<MetricRecord>& records, int final_task);

struct ParamBreakdown {
    long base = 0;            // theta + base K/V + base token rows
    long auxiliary = 0;       // the frozen auxiliary experts
    long experts = 0;         // retained task experts
    long gating = 0;
    long tokens = 0;          // concept token rows
    std::vector<std::array<int, 3>> retained_per_task;  // [task-1][layer] -> 0/1

    long added() const { return auxiliary + experts + gating; }
    long total() const { return base + added() + tokens; }
};

}  // namespace r2moe
