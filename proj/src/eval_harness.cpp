#include "r2moe/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

namespace r2moe {

const std::vector<std::string>& shape_families()
{
    static const std::vector<std::string> names{"disk", "square", "triangle", "ring",
                                                "cross", "diamond", "bar", "frame"};
    return names;
}

const std::vector<std::string>& texture_names()
{
    static const std::vector<std::string> names{"solid", "striped", "checkered", "dotted"};
    return names;
}

const std::vector<std::pair<std::string, Rgb>>& base_colors()
{
    static const std::vector<std::pair<std::string, Rgb>> colors{
        {"red", {0.9, 0.1, 0.1}},     {"green", {0.1, 0.8, 0.2}},    {"blue", {0.15, 0.25, 0.95}},
        {"yellow", {0.95, 0.9, 0.1}}, {"cyan", {0.1, 0.9, 0.9}},     {"magenta", {0.9, 0.1, 0.85}},
        {"orange", {1.0, 0.55, 0.05}}, {"purple", {0.5, 0.15, 0.7}}, {"white", {0.97, 0.97, 0.97}},
        {"black", {0.05, 0.05, 0.05}}, {"gray", {0.55, 0.55, 0.55}}, {"brown", {0.5, 0.3, 0.1}},
        {"pink", {1.0, 0.6, 0.75}},   {"teal", {0.0, 0.5, 0.5}},     {"olive", {0.5, 0.5, 0.0}},
        {"navy", {0.0, 0.0, 0.45}}};
    return colors;
}

const std::vector<Palette>& concept_palettes()
{
    static const std::vector<Palette> palettes{
        {"coral", {0.95, 0.45, 0.35}, {0.55, 0.12, 0.08}}, {"mint", {0.55, 0.95, 0.7}, {0.1, 0.45, 0.3}},
        {"sky", {0.45, 0.7, 1.0}, {0.08, 0.18, 0.55}},     {"lemon", {1.0, 0.95, 0.35}, {0.6, 0.45, 0.0}},
        {"plum", {0.6, 0.25, 0.7}, {0.95, 0.8, 1.0}},      {"rust", {0.75, 0.35, 0.1}, {0.28, 0.08, 0.0}},
        {"ice", {0.85, 0.95, 1.0}, {0.35, 0.55, 0.8}},     {"forest", {0.15, 0.5, 0.2}, {0.8, 0.9, 0.3}},
        {"rose", {1.0, 0.55, 0.75}, {0.5, 0.08, 0.3}},     {"slate", {0.4, 0.45, 0.55}, {0.92, 0.92, 0.92}}};
    return palettes;
}

bool shape_covers(const ShapeParams& p, double y, double x)
{
    const double dx = (x + 0.5 - p.cx) / p.radius;
    const double dy = (y + 0.5 - p.cy) / p.radius;
    const double r = std::sqrt(dx * dx + dy * dy);
    const double m = std::max(std::abs(dx), std::abs(dy));
    const auto& s = p.shape;
    if (s == "disk")
        return r <= 1.0;
    if (s == "square")
        return m <= 0.85;
    if (s == "triangle")
        return dy >= -0.85 && dy <= 0.85 && std::abs(dx) <= (dy + 0.85) / 1.7 * 0.95;
    if (s == "ring")
        return r <= 1.0 && r >= 0.55;
    if (s == "cross")
        return (std::abs(dx) <= 0.32 && std::abs(dy) <= 0.95) || (std::abs(dy) <= 0.32 && std::abs(dx) <= 0.95);
    if (s == "diamond")
        return std::abs(dx) + std::abs(dy) <= 1.05;
    if (s == "bar")
        return std::abs(dx) <= 0.95 && std::abs(dy) <= 0.38;
    if (s == "frame")
        return m <= 0.9 && m >= 0.58;
    throw LookupError("unknown shape family '" + s + "'");
}

namespace {

bool texture_secondary(const std::string& texture, int y, int x)
{
    if (texture == "solid")
        return false;
    if (texture == "striped")
        return (y / 2) % 2 == 1;
    if (texture == "checkered")
        return ((y / 3) + (x / 3)) % 2 == 1;
    if (texture == "dotted")
        return (y % 4) < 2 && (x % 4) < 2;
    throw LookupError("unknown texture '" + texture + "'");
}

double to_signed(double v01) { return 2.0 * v01 - 1.0; }

}  // namespace

Image render_shape(const ShapeParams& p, int size)
{
    Image img(size, size, 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            if (!shape_covers(p, y, x)) {
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = p.background;
                continue;
            }
            const Rgb& col = texture_secondary(p.texture, y, x) ? p.palette.secondary : p.palette.primary;
            img.at(y, x, 0) = to_signed(col.r);
            img.at(y, x, 1) = to_signed(col.g);
            img.at(y, x, 2) = to_signed(col.b);
        }
    return img;
}

std::string ConceptDataset::prompt() const
{
    return "photo of a " + Vocabulary::concept_token(index) + " " + shape;
}

namespace {

ShapeParams random_layout(Rng& rng, int size)
{
    ShapeParams p;
    const double s = size / 32.0;
    p.cx = rng.uniform(12.0, 20.0) * s;
    p.cy = rng.uniform(12.0, 20.0) * s;
    p.radius = rng.uniform(7.5, 10.5) * s;
    p.background = rng.uniform(-0.9, -0.5);
    return p;
}

}  // namespace

std::vector<ConceptDataset> gen_concepts(int count, std::uint64_t seed, int image_size)
{
    if (count < 1)
        throw DomainError("gen_concepts: count must be >= 1");
    const auto& shapes = shape_families();
    const auto& textures = texture_names();
    const auto& palettes = concept_palettes();
    const auto combos = static_cast<int>(shapes.size() * textures.size() * palettes.size());
    if (count > combos)
        throw DomainError("gen_concepts: more concepts requested than distinct attribute triples");

    Rng rng(seed);
    std::set<std::tuple<int, int, int>> used;
    std::vector<ConceptDataset> out;
    while (static_cast<int>(out.size()) < count) {
        const int s = rng.integer(0, static_cast<int>(shapes.size()) - 1);
        const int t = rng.integer(0, static_cast<int>(textures.size()) - 1);
        const int p = rng.integer(0, static_cast<int>(palettes.size()) - 1);
        if (!used.emplace(s, t, p).second)
            continue;
        ConceptDataset c;
        c.index = static_cast<int>(out.size()) + 1;
        c.shape = shapes[static_cast<std::size_t>(s)];
        c.texture = textures[static_cast<std::size_t>(t)];
        c.palette = palettes[static_cast<std::size_t>(p)];
        const int n = rng.integer(3, 8);
        for (int i = 0; i < n; ++i) {
            ShapeParams layout = random_layout(rng, image_size);
            layout.shape = c.shape;
            layout.texture = c.texture;
            layout.palette = c.palette;
            c.images.push_back(render_shape(layout, image_size));
            c.layouts.push_back(std::move(layout));
        }
        out.push_back(std::move(c));
    }
    return out;
}

CaptionedImage gen_base_example(Rng& rng, int image_size)
{
    const auto& shapes = shape_families();
    const auto& textures = texture_names();
    const auto& colors = base_colors();
    ShapeParams p = random_layout(rng, image_size);
    p.shape = shapes[static_cast<std::size_t>(rng.integer(0, static_cast<int>(shapes.size()) - 1))];
    p.texture = textures[static_cast<std::size_t>(rng.integer(0, static_cast<int>(textures.size()) - 1))];
    const auto& [color_name, rgb] = colors[static_cast<std::size_t>(rng.integer(0, static_cast<int>(colors.size()) - 1))];
    const Rgb dark{rgb.r * 0.35, rgb.g * 0.35, rgb.b * 0.35};
    const Rgb light{0.5 + rgb.r * 0.5, 0.5 + rgb.g * 0.5, 0.5 + rgb.b * 0.5};
    const bool bright = rgb.r + rgb.g + rgb.b > 1.2;
    p.palette = {color_name, rgb, bright ? dark : light};

    // Captions sometimes omit attributes so the class word alone is meaningful.
    std::string caption = "photo of a ";
    const double u = rng.uniform();
    if (u < 0.6)
        caption += color_name + " " + p.texture + " " + p.shape;
    else if (u < 0.8)
        caption += color_name + " " + p.shape;
    else
        caption += p.shape;
    return {render_shape(p, image_size), caption};
}

// ---------------------------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(std::uint64_t seed)
{
    Rng rng(seed);
    for (int o = 0; o < 8; ++o)
        conv1_.push_back(rng.gaussian(3, 9, 1.0 / std::sqrt(27.0)));
    for (int o = 0; o < 16; ++o)
        conv2_.push_back(rng.gaussian(8, 9, 1.0 / std::sqrt(72.0)));
    bias1_ = rng.gaussian(8, 1, 0.05);
    bias2_ = rng.gaussian(16, 1, 0.05);
}

namespace {

// 3x3 stride-2 convolution with zero padding, followed by ReLU. Input/output: channel-major maps.
std::vector<Mat> conv_relu(const std::vector<Mat>& in, const std::vector<Mat>& kernels, const Vec& bias)
{
    const auto h = in[0].rows();
    const auto w = in[0].cols();
    const auto oh = (h + 1) / 2;
    const auto ow = (w + 1) / 2;
    std::vector<Mat> out;
    for (std::size_t o = 0; o < kernels.size(); ++o) {
        Mat m(oh, ow);
        for (Eigen::Index y = 0; y < oh; ++y)
            for (Eigen::Index x = 0; x < ow; ++x) {
                double acc = bias[static_cast<Eigen::Index>(o)];
                for (std::size_t c = 0; c < in.size(); ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const Eigen::Index iy = 2 * y + ky - 1;
                            const Eigen::Index ix = 2 * x + kx - 1;
                            if (iy < 0 || ix < 0 || iy >= h || ix >= w)
                                continue;
                            acc += kernels[o](static_cast<Eigen::Index>(c), ky * 3 + kx) * in[c](iy, ix);
                        }
                m(y, x) = std::max(0.0, acc);
            }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace

Vec FeatureExtractor::cnn_features(const Image& img) const
{
    std::vector<Mat> maps(static_cast<std::size_t>(img.channels), Mat(img.height, img.width));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                maps[static_cast<std::size_t>(c)](y, x) = img.at(y, x, c);
    const auto l1 = conv_relu(maps, conv1_, bias1_);
    const auto l2 = conv_relu(l1, conv2_, bias2_);
    const auto n = static_cast<Eigen::Index>(l2.size());
    Vec f(n * 5);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Mat& m = l2[static_cast<std::size_t>(k)];
        f[k] = m.mean();
        const auto hh = m.rows() / 2;
        const auto hw = m.cols() / 2;
        f[n + 4 * k + 0] = m.topLeftCorner(hh, hw).mean();
        f[n + 4 * k + 1] = m.topRightCorner(hh, m.cols() - hw).mean();
        f[n + 4 * k + 2] = m.bottomLeftCorner(m.rows() - hh, hw).mean();
        f[n + 4 * k + 3] = m.bottomRightCorner(m.rows() - hh, m.cols() - hw).mean();
    }
    return f;
}

Vec FeatureExtractor::histogram(const Image& img)
{
    Vec h = Vec::Zero(64);
    const int pixels = img.height * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            int bin = 0;
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(0.5 * (img.at(y, x, std::min(c, img.channels - 1)) + 1.0), 0.0, 1.0);
                bin = bin * 4 + std::min(3, static_cast<int>(v * 4.0));
            }
            h[bin] += 1.0;
        }
    return h / static_cast<double>(pixels);
}

namespace {

Image average_pool2(const Image& img)
{
    Image out(img.height / 2, img.width / 2, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = 0.25 * (img.at(2 * y, 2 * x, c) + img.at(2 * y + 1, 2 * x, c) +
                                          img.at(2 * y, 2 * x + 1, c) + img.at(2 * y + 1, 2 * x + 1, c));
    return out;
}

}  // namespace

Vec FeatureExtractor::features(const Image& img) const
{
    // pooling first makes both parts less sensitive to pixel-level sampling noise
    const Image pooled = img.height >= 2 && img.width >= 2 ? average_pool2(img) : img;
    const Vec c = cnn_features(pooled);
    const Vec h = histogram(pooled);
    Vec f(c.size() + h.size());
    const double cn = c.norm();
    f.head(c.size()) = cn > 0 ? Vec(c / cn) : c;
    f.tail(h.size()) = h / h.norm();
    return f;
}

std::uint64_t FeatureExtractor::parameter_hash() const
{
    Hasher h;
    for (const auto& k : conv1_)
        h.add(k);
    for (const auto& k : conv2_)
        h.add(k);
    h.add(Mat(bias1_));
    h.add(Mat(bias2_));
    return h.value();
}

double cosine(const Vec& a, const Vec& b)
{
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0)
        return 0.0;
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double image_alignment(const FeatureExtractor& fx, const std::vector<Image>& generated,
                       const std::vector<Image>& reference)
{
    if (generated.empty() || reference.empty())
        throw DomainError("image_alignment: empty image set");
    std::vector<Vec> fg;
    std::vector<Vec> fr;
    for (const auto& g : generated)
        fg.push_back(fx.features(g));
    for (const auto& r : reference)
        fr.push_back(fx.features(r));
    double total = 0.0;
    for (const auto& a : fg)
        for (const auto& b : fr)
            total += cosine(a, b);
    return total / static_cast<double>(fg.size() * fr.size());
}

double palette_alignment(const Image& img, const Palette& palette)
{
    Image ref(2, 2, 3);
    const Rgb cols[4] = {palette.primary, palette.primary, palette.primary, palette.secondary};
    for (int i = 0; i < 4; ++i) {
        ref.at(i / 2, i % 2, 0) = to_signed(cols[i].r);
        ref.at(i / 2, i % 2, 1) = to_signed(cols[i].g);
        ref.at(i / 2, i % 2, 2) = to_signed(cols[i].b);
    }
    return cosine(FeatureExtractor::histogram(img), FeatureExtractor::histogram(ref));
}

double forgetting(const std::vector<MetricRecord>& records, int final_task)
{
    if (final_task <= 1)
        return 0.0;
    auto find = [&](int concept_index, int after) -> double {
        for (const auto& r : records)
            if (r.concept_index == concept_index && r.after_task == after)
                return r.image_alignment;
        throw StateError("forgetting: no record for concept " + std::to_string(concept_index) + " after task " +
                         std::to_string(after));
    };
    double total = 0.0;
    for (int tau = 1; tau < final_task; ++tau)
        total += std::max(0.0, find(tau, tau) - find(tau, final_task));
    return total / static_cast<double>(final_task - 1);
}

}  // namespace r2moe
