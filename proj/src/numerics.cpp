#include "r2moe/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace r2moe {

GradCheckReport grad_check(const std::string& op_name, const DifferentiableFn& f, const Mat& x, double eps,
                           int probes, std::uint64_t seed)
{
    if (!(eps > 0.0))
        throw DomainError("grad_check: eps must be positive");

    Mat analytic = Mat::Zero(x.rows(), x.cols());
    const double base = f(x, &analytic);
    if (!std::isfinite(base))
        throw EvaluationError("grad_check(" + op_name + "): non-finite value at the base point");
    if (analytic.rows() != x.rows() || analytic.cols() != x.cols())
        throw ShapeError("grad_check(" + op_name + "): analytic gradient shape differs from x");

    std::vector<Eigen::Index> coords(static_cast<std::size_t>(x.size()));
    std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    if (probes > 0 && probes < x.size()) {
        Rng rng(seed);
        std::shuffle(coords.begin(), coords.end(), std::mt19937_64(rng.next()));
        coords.resize(static_cast<std::size_t>(probes));
        std::sort(coords.begin(), coords.end());
    }

    GradCheckReport report{op_name, 0.0, 0};
    Mat probe = x;
    for (std::size_t k = 0; k < coords.size(); ++k) {
        const Eigen::Index idx = coords[k];
        const double saved = probe.data()[idx];
        probe.data()[idx] = saved + eps;
        const double plus = f(probe, nullptr);
        probe.data()[idx] = saved - eps;
        const double minus = f(probe, nullptr);
        probe.data()[idx] = saved;
        if (!std::isfinite(plus) || !std::isfinite(minus))
            throw EvaluationError("grad_check(" + op_name + "): non-finite value at probe index " +
                                  std::to_string(idx));
        const double fd = (plus - minus) / (2.0 * eps);
        const double an = analytic.data()[idx];
        const double rel = std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd));
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.probe_count;
    }
    return report;
}

Mat Rng::gaussian(Eigen::Index rows, Eigen::Index cols, double scale)
{
    Mat m(rows, cols);
    // Row-major fill so the stream order matches the serialized layout.
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
            m(i, j) = scale * gaussian();
    return m;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag)
{
    // splitmix64 finalizer over the combined words
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void Hasher::bytes(const void* data, std::size_t n)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        state_ ^= p[i];
        state_ *= 1099511628211ULL;
    }
}

void Hasher::add(const Mat& m)
{
    add(static_cast<std::int64_t>(m.rows()));
    add(static_cast<std::int64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            add(m(i, j));
}

void Hasher::add(double v) { bytes(&v, sizeof v); }
void Hasher::add(std::int64_t v) { bytes(&v, sizeof v); }
void Hasher::add(const std::string& s)
{
    add(static_cast<std::int64_t>(s.size()));
    bytes(s.data(), s.size());
}

std::string hex64(std::uint64_t v)
{
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace r2moe
