#pragma once

#include "r2moe/denoiser.hpp"
#include "r2moe/eval_harness.hpp"
#include "r2moe/lifelong_trainer.hpp"

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2moe {

struct ParseError : std::runtime_error {
    ParseError(const std::string& what, std::size_t pos)
        : std::runtime_error(what + " at position " + std::to_string(pos)), position(pos)
    {
    }
    std::size_t position;
};

struct LayoutError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Normalized box [x0, x1) x [y0, y1) in image coordinates (x right, y down).
struct BBox {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 1.0;
    double y1 = 1.0;

    bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    bool overlaps(const BBox& o) const { return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1; }
    bool operator==(const BBox&) const = default;
};

struct Region {
    std::string prompt;
    int concept_index = 0;  // 0 when the prompt names no concept token
    BBox box;
    bool operator==(const Region&) const = default;
};

struct RegionPlan {
    std::string background;
    std::vector<Region> regions;
    double gamma_coarse = 0.3;
    double gamma_fine = 1.0;
    double stage_ratio = 0.6;  // r
    bool operator==(const RegionPlan&) const = default;
};

/// Parses `bg: <words> ; region: <words> @ x0,y0,x1,y1 ; ...`.
/// Malformed input throws ParseError with a character position; overlapping boxes throw LayoutError.
RegionPlan plan_layout(const std::string& dsl);
std::string serialize_plan(const RegionPlan& plan);

class LayoutProvider {
public:
    virtual ~LayoutProvider() = default;
    virtual std::string identity() const = 0;
    virtual bool deterministic() const = 0;
    virtual RegionPlan plan(const std::string& prompt) const = 0;
};

class DslLayoutProvider : public LayoutProvider {
public:
    std::string identity() const override { return "dsl-parser"; }
    bool deterministic() const override { return true; }
    RegionPlan plan(const std::string& prompt) const override { return plan_layout(prompt); }
};

/// Binary h x w masks, one per region, by the pixel-center rule.
std::vector<Mat> rasterize_masks(const RegionPlan& plan, int h, int w);
Mat rasterize_box(const BBox& box, int h, int w);
/// Nearest resampling of a binary mask by the pixel-center rule.
Mat resample_mask(const Mat& mask, int h, int w);

/// (1 - union M) * A0 + gamma * sum_u M_u * A_u, masks given on the token grid (row-major tokens).
Mat blend_attention(const Mat& a0, const std::vector<Mat>& regions, const std::vector<Mat>& masks, double gamma);

/// Cross-attention of one layer's queries against a conditioning's keys and values.
Mat region_attention(const Mat& queries, const Conditioning& cond, int layer);

class MaskRefiner {
public:
    virtual ~MaskRefiner() = default;
    virtual std::string identity() const = 0;
    virtual bool deterministic() const = 0;
    /// Image-resolution masks for every region of the plan.
    virtual std::vector<Mat> refine(const Image& estimate, const RegionPlan& plan) const = 0;
};

/// Palette-threshold connected-component refiner.
class PaletteMaskRefiner : public MaskRefiner {
public:
    explicit PaletteMaskRefiner(std::map<int, Palette> palettes, double threshold = 0.25, double dilation = 0.1)
        : palettes_(std::move(palettes)), threshold_(threshold), dilation_(dilation)
    {
    }
    std::string identity() const override { return "palette-component"; }
    bool deterministic() const override { return true; }
    std::vector<Mat> refine(const Image& estimate, const RegionPlan& plan) const override;

    Mat refine_region(const Image& estimate, const Region& region) const;

private:
    std::map<int, Palette> palettes_;
    double threshold_;
    double dilation_;
};

/// Returns the plain bbox rasterization; handy as an identity refiner.
class BoxMaskRefiner : public MaskRefiner {
public:
    std::string identity() const override { return "bbox"; }
    bool deterministic() const override { return true; }
    std::vector<Mat> refine(const Image& estimate, const RegionPlan& plan) const override;
};

/// 10%-style dilation of a box, clipped to the unit square.
BBox dilate(const BBox& box, double fraction);

/// Number of iterations (out of steps) that use the coarse bbox masks.
int coarse_iterations(int steps, double stage_ratio);

struct GuidedTrace {
    std::vector<int> stage;          // per iteration: 0 coarse bbox masks, 1 refined masks
    int refinements = 0;
    std::vector<Mat> refined_masks;  // image resolution, when refinement happened
};

/// Two-stage layout-guided DDIM sampling. Regions use expert-composed weights routed on their own prompt;
/// the background branch and the unconditional branch use the base weights.
Image guided_sample(const LifelongState& state, const RegionPlan& plan, const SamplerOptions& options,
                    const MaskRefiner& refiner, std::uint64_t seed, GuidedTrace* trace = nullptr);

/// Concept index named by a prompt's "V*k" token, or 0.
int concept_in_prompt(const std::string& prompt);

/// All words of the plan (background then regions) as one flat prompt.
std::string flatten_plan(const RegionPlan& plan);

}  // namespace r2moe
