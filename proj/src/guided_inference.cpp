#include "r2moe/guided_inference.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace r2moe {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

// Half-open span of `text` with its offset in the original input.
struct Span {
    std::string text;
    std::size_t pos = 0;
};

Span trim(const std::string& s, std::size_t begin, std::size_t end)
{
    while (begin < end && is_space(s[begin]))
        ++begin;
    while (end > begin && is_space(s[end - 1]))
        --end;
    return {s.substr(begin, end - begin), begin};
}

std::string normalize_words(const std::string& s)
{
    std::istringstream in(s);
    std::string out;
    for (std::string w; in >> w;) {
        if (!out.empty())
            out += ' ';
        out += w;
    }
    return out;
}

double parse_number(const Span& s)
{
    double v = 0.0;
    const char* first = s.text.data();
    const char* last = first + s.text.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (s.text.empty() || ec != std::errc() || ptr != last || !std::isfinite(v))
        throw ParseError("expected a number, got '" + s.text + "'", s.pos);
    return v;
}

std::string format_number(double v)
{
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

Region parse_region(const std::string& dsl, const Span& seg)
{
    static const std::string kTag = "region:";
    if (seg.text.compare(0, kTag.size(), kTag) != 0)
        throw ParseError("expected 'region:'", seg.pos);
    const std::size_t body = seg.pos + kTag.size();
    const std::size_t end = seg.pos + seg.text.size();
    const std::size_t at = dsl.find('@', body);
    if (at == std::string::npos || at >= end)
        throw ParseError("region is missing '@ x0,y0,x1,y1'", end);
    Region r;
    const Span words = trim(dsl, body, at);
    if (words.text.empty())
        throw ParseError("region prompt is empty", body);
    r.prompt = normalize_words(words.text);
    r.concept_index = concept_in_prompt(r.prompt);

    double v[4];
    std::size_t cursor = at + 1;
    for (int i = 0; i < 4; ++i) {
        std::size_t stop = i < 3 ? dsl.find(',', cursor) : end;
        if (stop == std::string::npos || stop > end)
            throw ParseError("bbox needs four comma-separated numbers", end);
        v[i] = parse_number(trim(dsl, cursor, stop));
        cursor = stop + 1;
    }
    r.box = {v[0], v[1], v[2], v[3]};
    if (!(0.0 <= r.box.x0 && r.box.x0 < r.box.x1 && r.box.x1 <= 1.0 && 0.0 <= r.box.y0 && r.box.y0 < r.box.y1 &&
          r.box.y1 <= 1.0))
        throw ParseError("bbox must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1", at + 1);
    return r;
}

}  // namespace

int concept_in_prompt(const std::string& prompt)
{
    std::istringstream in(prompt);
    int found = 0;
    for (std::string w; in >> w;) {
        if (w.rfind("V*", 0) != 0 || w.size() == 2)
            continue;
        int k = 0;
        const auto [ptr, ec] = std::from_chars(w.data() + 2, w.data() + w.size(), k);
        if (ec != std::errc() || ptr != w.data() + w.size() || k < 1)
            continue;
        if (found != 0 && found != k)
            throw LayoutError("prompt '" + prompt + "' names more than one concept");
        found = k;
    }
    return found;
}

RegionPlan plan_layout(const std::string& dsl)
{
    std::vector<Span> segments;
    std::size_t begin = 0;
    while (true) {
        const std::size_t semi = dsl.find(';', begin);
        const std::size_t end = semi == std::string::npos ? dsl.size() : semi;
        segments.push_back(trim(dsl, begin, end));
        if (semi == std::string::npos)
            break;
        begin = semi + 1;
    }

    static const std::string kBg = "bg:";
    const Span& head = segments.front();
    if (head.text.compare(0, kBg.size(), kBg) != 0)
        throw ParseError("layout must start with 'bg:'", head.pos);
    RegionPlan plan;
    plan.background = normalize_words(head.text.substr(kBg.size()));
    if (plan.background.empty())
        throw ParseError("background prompt is empty", head.pos + kBg.size());
    if (concept_in_prompt(plan.background) != 0)
        throw LayoutError("the background prompt may not name a concept");

    for (std::size_t i = 1; i < segments.size(); ++i) {
        if (segments[i].text.empty())
            throw ParseError("empty segment", segments[i].pos);
        plan.regions.push_back(parse_region(dsl, segments[i]));
    }
    for (std::size_t a = 0; a < plan.regions.size(); ++a)
        for (std::size_t b = a + 1; b < plan.regions.size(); ++b)
            if (plan.regions[a].box.overlaps(plan.regions[b].box))
                throw LayoutError("regions " + std::to_string(a + 1) + " and " + std::to_string(b + 1) +
                                  " have overlapping boxes");
    return plan;
}

std::string serialize_plan(const RegionPlan& plan)
{
    std::string out = "bg: " + plan.background;
    for (const auto& r : plan.regions) {
        out += " ; region: " + r.prompt + " @ " + format_number(r.box.x0) + "," + format_number(r.box.y0) + "," +
               format_number(r.box.x1) + "," + format_number(r.box.y1);
    }
    return out;
}

std::string flatten_plan(const RegionPlan& plan)
{
    std::string out = plan.background;
    for (const auto& r : plan.regions)
        out += " " + r.prompt;
    return out;
}

Mat rasterize_box(const BBox& box, int h, int w)
{
    if (h < 1 || w < 1)
        throw DomainError("rasterize: mask size must be positive");
    Mat m = Mat::Zero(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (box.contains((j + 0.5) / w, (i + 0.5) / h))
                m(i, j) = 1.0;
    return m;
}

std::vector<Mat> rasterize_masks(const RegionPlan& plan, int h, int w)
{
    std::vector<Mat> masks;
    for (const auto& r : plan.regions)
        masks.push_back(rasterize_box(r.box, h, w));
    return masks;
}

Mat resample_mask(const Mat& mask, int h, int w)
{
    if (h < 1 || w < 1)
        throw DomainError("resample: mask size must be positive");
    Mat m(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const auto si = static_cast<Eigen::Index>((i + 0.5) / h * static_cast<double>(mask.rows()));
            const auto sj = static_cast<Eigen::Index>((j + 0.5) / w * static_cast<double>(mask.cols()));
            m(i, j) = mask(si, sj);
        }
    return m;
}

Mat blend_attention(const Mat& a0, const std::vector<Mat>& regions, const std::vector<Mat>& masks, double gamma)
{
    if (regions.size() != masks.size())
        throw ShapeError("blend: one mask per region required");
    if (!(gamma >= 0.0 && gamma <= 1.0))
        throw DomainError("blend: gamma must lie in [0, 1]");
    if (regions.empty())
        return a0;
    Vec uni = Vec::Zero(a0.rows());
    Mat out = Mat::Zero(a0.rows(), a0.cols());
    for (std::size_t u = 0; u < regions.size(); ++u) {
        const Mat& m = masks[u];
        if (regions[u].rows() != a0.rows() || regions[u].cols() != a0.cols())
            throw ShapeError("blend: region attention shape differs from A0");
        if (m.size() != a0.rows())
            throw ShapeError("blend: mask cell count differs from the token count");
        for (Eigen::Index y = 0; y < m.rows(); ++y)
            for (Eigen::Index x = 0; x < m.cols(); ++x) {
                const Eigen::Index tok = y * m.cols() + x;
                const double v = m(y, x);
                uni[tok] = std::max(uni[tok], v);
                if (v != 0.0)
                    out.row(tok) += gamma * v * regions[u].row(tok);
            }
    }
    for (Eigen::Index tok = 0; tok < a0.rows(); ++tok)
        out.row(tok) += (1.0 - uni[tok]) * a0.row(tok);
    return out;
}

Mat region_attention(const Mat& queries, const Conditioning& cond, int layer)
{
    const auto& kv = cond.kv[static_cast<std::size_t>(layer)];
    return attention(queries, cond.context * kv.wk, cond.context * kv.wv);
}

BBox dilate(const BBox& b, double fraction)
{
    const double dx = fraction * (b.x1 - b.x0);
    const double dy = fraction * (b.y1 - b.y0);
    return {std::max(0.0, b.x0 - dx), std::max(0.0, b.y0 - dy), std::min(1.0, b.x1 + dx), std::min(1.0, b.y1 + dy)};
}

Mat PaletteMaskRefiner::refine_region(const Image& img, const Region& region) const
{
    const int h = img.height;
    const int w = img.width;
    const Mat fallback = rasterize_box(region.box, h, w);
    const auto it = palettes_.find(region.concept_index);
    if (it == palettes_.end())
        return fallback;

    const Mat window = rasterize_box(dilate(region.box, dilation_), h, w);
    const Palette& pal = it->second;
    auto dist = [&](int y, int x, const Rgb& c) {
        const double r = 0.5 * (img.at(y, x, 0) + 1.0) - c.r;
        const double g = 0.5 * (img.at(y, x, 1) + 1.0) - c.g;
        const double b = 0.5 * (img.at(y, x, 2) + 1.0) - c.b;
        return std::sqrt(r * r + g * g + b * b);
    };
    Mat match = Mat::Zero(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (window(y, x) != 0.0 && std::min(dist(y, x, pal.primary), dist(y, x, pal.secondary)) < threshold_)
                match(y, x) = 1.0;

    // largest 4-connected component; the first found in raster order wins ties
    Mat label = Mat::Zero(h, w);
    int best_label = 0;
    long best_size = 0;
    int next = 0;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (match(y, x) == 0.0 || label(y, x) != 0.0)
                continue;
            ++next;
            long size = 0;
            stack.assign(1, {y, x});
            label(y, x) = next;
            while (!stack.empty()) {
                const auto [cy, cx] = stack.back();
                stack.pop_back();
                ++size;
                const int ny[4] = {cy - 1, cy + 1, cy, cy};
                const int nx[4] = {cx, cx, cx - 1, cx + 1};
                for (int k = 0; k < 4; ++k) {
                    if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w)
                        continue;
                    if (match(ny[k], nx[k]) != 0.0 && label(ny[k], nx[k]) == 0.0) {
                        label(ny[k], nx[k]) = next;
                        stack.push_back({ny[k], nx[k]});
                    }
                }
            }
            if (size > best_size) {
                best_size = size;
                best_label = next;
            }
        }
    // an empty component, or one saturating the whole search window, carries no shape information
    if (best_size == 0 || best_size == static_cast<long>(window.sum()))
        return fallback;
    return (label.array() == best_label).cast<double>().matrix();
}

std::vector<Mat> PaletteMaskRefiner::refine(const Image& estimate, const RegionPlan& plan) const
{
    std::vector<Mat> out;
    for (const auto& r : plan.regions)
        out.push_back(refine_region(estimate, r));
    return out;
}

std::vector<Mat> BoxMaskRefiner::refine(const Image& estimate, const RegionPlan& plan) const
{
    return rasterize_masks(plan, estimate.height, estimate.width);
}

int coarse_iterations(int steps, double stage_ratio)
{
    if (!(stage_ratio >= 0.0 && stage_ratio <= 1.0))
        throw DomainError("stage ratio r must lie in [0, 1]");
    const double v = (1.0 - stage_ratio) * steps;
    const double nearest = std::round(v);
    // treat values within rounding noise of an integer as that integer before taking the ceiling
    return static_cast<int>(std::abs(v - nearest) < 1e-9 ? nearest : std::ceil(v));
}

Image guided_sample(const LifelongState& state, const RegionPlan& plan, const SamplerOptions& options,
                    const MaskRefiner& refiner, std::uint64_t seed, GuidedTrace* trace)
{
    const auto& d = state.model.dims();
    const Conditioning background{state.table.encode(state.vocab.tokenize(plan.background)), state.model.base_kv()};
    const Conditioning uncond = state.null_conditioning();
    if (plan.regions.empty()) {
        if (trace)
            trace->stage.assign(static_cast<std::size_t>(options.steps), 0);
        return ddim_sample(state.model, state.schedule, background, uncond, options, seed);
    }
    if (!(plan.gamma_coarse >= 0.0 && plan.gamma_coarse <= 1.0 && plan.gamma_fine >= 0.0 && plan.gamma_fine <= 1.0))
        throw DomainError("guided sampling: gamma must lie in [0, 1]");

    std::vector<Conditioning> regions;
    for (const auto& r : plan.regions) {
        if (r.concept_index > state.completed_tasks())
            throw LookupError("region '" + r.prompt + "' names unknown concept " + std::to_string(r.concept_index));
        regions.push_back(state.conditioning(state.vocab.tokenize(r.prompt)));
    }

    // keys/values per layer, computed once
    struct KV {
        Mat k, v;
    };
    auto project = [](const Conditioning& c, int l) {
        const auto& p = c.kv[static_cast<std::size_t>(l)];
        return KV{c.context * p.wk, c.context * p.wv};
    };
    std::array<KV, kMoELayers> bg_kv;
    std::array<std::vector<KV>, kMoELayers> region_kv;
    std::array<std::vector<Mat>, kMoELayers> coarse;
    for (int l = 0; l < kMoELayers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        bg_kv[li] = project(background, l);
        for (const auto& r : regions)
            region_kv[li].push_back(project(r, l));
        coarse[li] = rasterize_masks(plan, d.layer_grid(l), d.layer_grid(l));
    }

    const int switch_at = coarse_iterations(options.steps, plan.stage_ratio);
    std::array<std::vector<Mat>, kMoELayers> fine;
    int stage = 0;
    GuidedTrace local;
    GuidedTrace& tr = trace ? *trace : local;
    tr = GuidedTrace{};

    const AttentionHook cond_hook = [&](int l, const Mat& q) {
        const auto li = static_cast<std::size_t>(l);
        const Mat a0 = attention(q, bg_kv[li].k, bg_kv[li].v);
        std::vector<Mat> au;
        for (const auto& kv : region_kv[li])
            au.push_back(attention(q, kv.k, kv.v));
        return stage == 0 ? blend_attention(a0, au, coarse[li], plan.gamma_coarse)
                          : blend_attention(a0, au, fine[li], plan.gamma_fine);
    };
    const auto uncond_hook = standard_attention(uncond);

    const StepObserver observer = [&](int iteration, int, const Mat& z, const Mat* x0) {
        if (iteration == switch_at) {
            const Image estimate = unpatchify(x0 ? *x0 : z, d.image_size, d.image_size, d.channels, d.patch);
            tr.refined_masks = refiner.refine(estimate, plan);
            if (tr.refined_masks.size() != plan.regions.size())
                throw ShapeError("refiner returned the wrong number of masks");
            for (int l = 0; l < kMoELayers; ++l) {
                auto& f = fine[static_cast<std::size_t>(l)];
                f.clear();
                for (const auto& m : tr.refined_masks)
                    f.push_back(resample_mask(m, d.layer_grid(l), d.layer_grid(l)));
            }
            ++tr.refinements;
            stage = 1;
        }
        tr.stage.push_back(stage);
    };

    const Mat z = ddim_loop(
        state.schedule, [&](const Mat& x, int t) { return state.model.predict(x, t, cond_hook); },
        [&](const Mat& x, int t) { return state.model.predict(x, t, uncond_hook); }, options, d.tokens(),
        d.patch_dim(), seed, observer);
    return unpatchify(z, d.image_size, d.image_size, d.channels, d.patch);
}

}  // namespace r2moe
