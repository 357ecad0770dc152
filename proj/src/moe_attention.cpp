#include "r2moe/moe_attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace r2moe {

GatingNetwork::Grad::Grad(const GatingNetwork& net)
    : hidden_w(Mat::Zero(net.hidden_w.rows(), net.hidden_w.cols())),
      hidden_b(RowVec::Zero(net.hidden_b.size())),
      out_w(Mat::Zero(net.out_w.rows(), net.out_w.cols())),
      out_b(RowVec::Zero(net.out_b.size()))
{
}

void GatingNetwork::Grad::scale(double s)
{
    hidden_w *= s;
    hidden_b *= s;
    out_w *= s;
    out_b *= s;
}

GatingNetwork::Grad& GatingNetwork::Grad::operator+=(const Grad& other)
{
    hidden_w += other.hidden_w;
    hidden_b += other.hidden_b;
    out_w += other.out_w;
    out_b += other.out_b;
    return *this;
}

GatingNetwork::GatingNetwork(int d_in, int hidden, int width, Rng& rng)
    : hidden_w(rng.gaussian(d_in, hidden, 1.0 / std::sqrt(static_cast<double>(d_in)))),
      hidden_b(RowVec::Zero(hidden)),
      out_w(Mat::Zero(hidden, width)),
      out_b(RowVec::Zero(width))
{
}

RowVec GatingNetwork::forward(const Mat& context, GatingCache* cache) const
{
    if (context.rows() == 0)
        throw DomainError("gating: empty context");
    if (context.cols() != hidden_w.rows())
        throw ShapeError("gating: context width " + std::to_string(context.cols()) + " != d_in " +
                         std::to_string(hidden_w.rows()));
    const RowVec pooled = mean_pool_rows(context);
    const RowVec hidden = (pooled * hidden_w + hidden_b).array().tanh().matrix();
    // Per-column dot products keep each column's value independent of the total width.
    RowVec scores(out_w.cols());
    for (Eigen::Index j = 0; j < out_w.cols(); ++j) {
        double s = 0.0;
        for (Eigen::Index h = 0; h < out_w.rows(); ++h)
            s += hidden[h] * out_w(h, j);
        scores[j] = s + out_b[j];
    }
    if (cache) {
        cache->pooled = pooled;
        cache->hidden = hidden;
        cache->rows = context.rows();
    }
    return scores;
}

Mat GatingNetwork::backward(const GatingCache& cache, const RowVec& d_scores, Grad* grad) const
{
    if (d_scores.size() != out_w.cols())
        throw ShapeError("gating backward: score gradient width mismatch");
    const RowVec d_hidden = d_scores * out_w.transpose();
    const RowVec d_pre = (d_hidden.array() * (1.0 - cache.hidden.array().square())).matrix();
    if (grad) {
        grad->out_w += cache.hidden.transpose() * d_scores;
        grad->out_b += d_scores;
        grad->hidden_w += cache.pooled.transpose() * d_pre;
        grad->hidden_b += d_pre;
    }
    const RowVec d_pooled = d_pre * hidden_w.transpose();
    return (d_pooled / static_cast<double>(cache.rows)).replicate(cache.rows, 1);
}

void GatingNetwork::add_zero_column()
{
    out_w.conservativeResize(Eigen::NoChange, out_w.cols() + 1);
    out_w.col(out_w.cols() - 1).setZero();
    out_b.conservativeResize(out_b.size() + 1);
    out_b[out_b.size() - 1] = 0.0;
}

void GatingNetwork::drop_last_column()
{
    if (out_w.cols() <= 1)
        throw StateError("gating: cannot drop the auxiliary expert's column");
    out_w.conservativeResize(Eigen::NoChange, out_w.cols() - 1);
    out_b.conservativeResize(out_b.size() - 1);
}

RowVec gate_coefficients(const Mat& context, const GatingNetwork& net) { return net.forward(context); }

double SelectionResult::alpha_of(int slot) const
{
    for (std::size_t i = 0; i < indices.size(); ++i)
        if (indices[i] == slot)
            return alphas[static_cast<Eigen::Index>(i)];
    return 0.0;
}

SelectionResult select_and_normalize(const RowVec& scores, std::optional<int> current, int k, SelectMode mode,
                                     bool dense, const std::vector<bool>* retained)
{
    const int width = static_cast<int>(scores.size());
    if (k < 1)
        throw DomainError("select: K must be >= 1");
    if (width < 1)
        throw DomainError("select: empty score vector");
    if (retained && static_cast<int>(retained->size()) != width)
        throw ShapeError("select: retained flags width mismatch");
    if (mode == SelectMode::kTrain) {
        if (!current || *current < 1 || *current >= width)
            throw StateError("select: train mode requires the current expert slot");
    }
    if (current && retained && !(*retained)[static_cast<std::size_t>(*current)])
        throw StateError("select: current expert has been pruned");

    auto eligible = [&](int slot) {
        if (retained && !(*retained)[static_cast<std::size_t>(slot)])
            return false;
        return !(current && slot == *current);
    };

    std::vector<int> chosen;
    if (dense) {
        for (int i = 1; i < width; ++i)
            if (eligible(i))
                chosen.push_back(i);
    } else {
        // train mode draws only from experts older than the current one
        const int pool_end = mode == SelectMode::kTrain ? *current : width;
        std::vector<int> pool;
        for (int i = 1; i < pool_end; ++i)
            if (eligible(i))
                pool.push_back(i);
        std::stable_sort(pool.begin(), pool.end(),
                         [&](int a, int b) { return scores[a] > scores[b]; });
        const auto take = std::min<std::size_t>(static_cast<std::size_t>(k - 1), pool.size());
        chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
    if (mode == SelectMode::kTrain)
        chosen.push_back(*current);
    chosen.push_back(0);
    std::sort(chosen.begin(), chosen.end());

    SelectionResult sel;
    sel.indices = chosen;
    Vec picked(static_cast<Eigen::Index>(chosen.size()));
    for (std::size_t i = 0; i < chosen.size(); ++i)
        picked[static_cast<Eigen::Index>(i)] = scores[chosen[i]];
    sel.alphas = softmax(picked);
    return sel;
}

Mat compose_weight(const MoEProjection& proj, const SelectionResult& sel)
{
    Mat w = proj.base;
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
        const int slot = sel.indices[i];
        if (slot < 0 || slot >= static_cast<int>(proj.experts.size()) ||
            !proj.experts[static_cast<std::size_t>(slot)].retained)
            throw StateError("compose_weight: selection references missing or pruned expert " +
                             std::to_string(slot));
        const auto& e = proj.experts[static_cast<std::size_t>(slot)];
        w.noalias() += sel.alphas[static_cast<Eigen::Index>(i)] * (e.down * e.up);
    }
    return w;
}

Vec compose_weight_backward(const MoEProjection& proj, const SelectionResult& sel, const Mat& d_weight,
                            int trainable_slot, ExpertGrad* grad)
{
    Vec d_alpha(static_cast<Eigen::Index>(sel.indices.size()));
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
        const int slot = sel.indices[i];
        const auto& e = proj.experts[static_cast<std::size_t>(slot)];
        const Mat d_up_part = e.down.transpose() * d_weight;  // r x d_out
        d_alpha[static_cast<Eigen::Index>(i)] = (d_up_part.array() * e.up.array()).sum();
        if (grad && slot == trainable_slot) {
            const double a = sel.alphas[static_cast<Eigen::Index>(i)];
            grad->down += a * (d_weight * e.up.transpose());
            grad->up += a * d_up_part;
        }
    }
    return d_alpha;
}

RowVec selection_score_grad(const SelectionResult& sel, const Vec& d_alpha, int width)
{
    RowVec d_scores = RowVec::Zero(width);
    const double mean = sel.alphas.dot(d_alpha);
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        d_scores[sel.indices[i]] += sel.alphas[ii] * (d_alpha[ii] - mean);
    }
    return d_scores;
}

Mat attention(const Mat& q, const Mat& k, const Mat& v, AttentionCache* cache)
{
    if (q.cols() != k.cols() || k.rows() != v.rows())
        throw ShapeError("attention: q/k/v shape mismatch");
    if (q.cols() == 0)
        throw ShapeError("attention: d_k must be positive");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Mat probs = softmax_rows((q * k.transpose()) * scale);
    Mat out = probs * v;
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->probs = std::move(probs);
    }
    return out;
}

AttentionGrad attention_backward(const AttentionCache& cache, const Mat& d_out)
{
    const double scale = 1.0 / std::sqrt(static_cast<double>(cache.q.cols()));
    AttentionGrad g;
    const Mat d_probs = d_out * cache.v.transpose();
    g.dv = cache.probs.transpose() * d_out;
    const Vec row_dot = (d_probs.array() * cache.probs.array()).rowwise().sum();
    const Mat d_scores = (cache.probs.array() * (d_probs.colwise() - row_dot).array()).matrix() * scale;
    g.dq = d_scores * cache.k;
    g.dk = d_scores.transpose() * cache.q;
    return g;
}

Mat cross_attention(const Mat& z, const Mat& context, const Mat& wq, const Mat& wk, const Mat& wv)
{
    if (z.cols() != wq.rows() || context.cols() != wk.rows() || context.cols() != wv.rows() ||
        wq.cols() != wk.cols())
        throw ShapeError("cross_attention: projection shapes inconsistent with inputs");
    return attention(z * wq, context * wk, context * wv);
}

bool MoELayer::all_frozen() const
{
    return std::all_of(key.experts.begin(), key.experts.end(), [](const auto& e) { return e.frozen; }) &&
           std::all_of(value.experts.begin(), value.experts.end(), [](const auto& e) { return e.frozen; });
}

std::vector<bool> MoELayer::retained_flags() const
{
    std::vector<bool> flags;
    for (const auto& e : key.experts)
        flags.push_back(e.retained);
    return flags;
}

int MoELayer::grow(int task, int rank, double down_scale, Rng& rng)
{
    if (!all_frozen())
        throw StateError("grow: previous task's experts are not frozen");
    for (auto* proj : {&key, &value}) {
        LowRankExpert e;
        e.down = rng.gaussian(proj->base.rows(), rank, down_scale);
        e.up = Mat::Zero(rank, proj->base.cols());
        e.owner_task = task;
        proj->experts.push_back(std::move(e));
    }
    gate.add_zero_column();
    return width() - 1;
}

void MoELayer::freeze_all()
{
    for (auto* proj : {&key, &value})
        for (auto& e : proj->experts)
            e.frozen = true;
}

void MoELayer::prune_last()
{
    if (key.experts.size() <= 1)
        throw StateError("prune: only the auxiliary expert remains");
    for (auto* proj : {&key, &value}) {
        proj->experts.back().retained = false;
        proj->experts.pop_back();
    }
    gate.drop_last_column();
}

long MoELayer::expert_parameter_count() const
{
    long n = 0;
    for (const auto* proj : {&key, &value})
        for (const auto& e : proj->experts)
            if (e.retained)
                n += e.parameter_count();
    return n;
}

SelectionResult route(const MoELayer& layer, const Mat& context, std::optional<int> current, int k,
                      SelectMode mode, bool dense)
{
    const auto flags = layer.retained_flags();
    return select_and_normalize(layer.gate.forward(context), current, k, mode, dense, &flags);
}

}  // namespace r2moe
