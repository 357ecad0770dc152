#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2moe {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

// Error taxonomy shared by every module.
struct DomainError : std::domain_error { using std::domain_error::domain_error; };
struct ShapeError : std::invalid_argument { using std::invalid_argument::invalid_argument; };
struct StateError : std::logic_error { using std::logic_error::logic_error; };
struct LookupError : std::out_of_range { using std::out_of_range::out_of_range; };
struct CapacityError : std::length_error { using std::length_error::length_error; };
struct EvaluationError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x)
{
    return x.derived().array().isFinite().all();
}

/// Numerically stable softmax (max-subtracted) of a vector of any scalar type.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& v)
{
    using Scalar = typename Derived::Scalar;
    if (v.size() == 0)
        throw DomainError("softmax: empty input");
    const auto flat = v.derived().reshaped();
    const Scalar top = flat.maxCoeff();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (flat.array() - top).exp().matrix();
    return e / e.sum();
}

/// Row-wise softmax of a score matrix.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>
softmax_rows(const Eigen::MatrixBase<Derived>& s)
{
    using Scalar = typename Derived::Scalar;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i)
        out.row(i) = softmax(s.row(i).transpose()).transpose();
    return out;
}

/// Mean over the rows of an L x d array.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 1, Eigen::Dynamic> mean_pool_rows(const Eigen::MatrixBase<Derived>& c)
{
    if (c.rows() == 0)
        throw DomainError("mean_pool_rows: no rows");
    return c.colwise().sum() / static_cast<typename Derived::Scalar>(c.rows());
}

struct GradCheckReport {
    std::string op_name;
    double max_rel_error = 0.0;
    int probe_count = 0;
};

/// Scalar objective that also writes its analytic gradient (same shape as x) when grad != nullptr.
using DifferentiableFn = std::function<double(const Mat& x, Mat* grad)>;

/// Central-difference gradient check. Probes min(probes, x.size()) coordinates chosen by seed;
/// probes <= 0 checks every coordinate.
GradCheckReport grad_check(const std::string& op_name, const DifferentiableFn& f, const Mat& x,
                           double eps, int probes = 0, std::uint64_t seed = 0);

/// Seeded generator used everywhere randomness is needed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double gaussian() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int integer(int lo, int hi_inclusive)
    {
        return std::uniform_int_distribution<int>(lo, hi_inclusive)(engine_);
    }
    Mat gaussian(Eigen::Index rows, Eigen::Index cols, double scale);
    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Derive an independent stream seed from a base seed and a tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

/// FNV-1a over the raw bytes of values, row-major.
class Hasher {
public:
    void add(const Mat& m);
    void add(double v);
    void add(std::int64_t v);
    void add(const std::string& s);
    std::uint64_t value() const { return state_; }

private:
    void bytes(const void* data, std::size_t n);
    std::uint64_t state_ = 1469598103934665603ULL;
};

std::string hex64(std::uint64_t v);

}  // namespace r2moe
