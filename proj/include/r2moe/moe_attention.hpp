#pragma once

#include "r2moe/numerics.hpp"

#include <optional>
#include <vector>

namespace r2moe {

/// Additive low-rank adapter E = down * up (d_in x r times r x d_out).
struct LowRankExpert {
    Mat down;
    Mat up;
    bool frozen = false;
    bool retained = true;
    int owner_task = 0;

    Mat dense() const { return down * up; }
    long parameter_count() const { return static_cast<long>(down.size() + up.size()); }
};

struct GatingCache {
    RowVec pooled;
    RowVec hidden;  // post-tanh
    Eigen::Index rows = 0;
};

/// Mean-pool followed by a one-hidden-layer tanh MLP with one output column per registered expert.
/// Output columns are computed independently, so growing the width never perturbs existing columns.
struct GatingNetwork {
    Mat hidden_w;  // d_in x h
    RowVec hidden_b;
    Mat out_w;     // h x width
    RowVec out_b;

    struct Grad {
        Mat hidden_w;
        RowVec hidden_b;
        Mat out_w;
        RowVec out_b;

        explicit Grad(const GatingNetwork& net);
        void scale(double s);
        Grad& operator+=(const Grad& other);
    };

    GatingNetwork() = default;
    /// Hidden layer Gaussian(1/sqrt(d_in)); output layer zeros.
    GatingNetwork(int d_in, int hidden, int width, Rng& rng);

    int width() const { return static_cast<int>(out_w.cols()); }
    int d_in() const { return static_cast<int>(hidden_w.rows()); }
    long parameter_count() const
    {
        return static_cast<long>(hidden_w.size() + hidden_b.size() + out_w.size() + out_b.size());
    }

    RowVec forward(const Mat& context, GatingCache* cache = nullptr) const;
    /// Accumulates parameter gradients into grad (if non-null); returns dL/dContext.
    Mat backward(const GatingCache& cache, const RowVec& d_scores, Grad* grad) const;

    void add_zero_column();
    void drop_last_column();
};

/// Raw (unnormalized) expert scores for a prompt embedding.
RowVec gate_coefficients(const Mat& context, const GatingNetwork& net);

enum class SelectMode { kTrain, kInfer };

struct SelectionResult {
    std::vector<int> indices;
    Vec alphas;

    /// Alpha of a given slot, 0 if not selected.
    double alpha_of(int slot) const;
};

/// Forced inclusion of slot 0 (and of `current` in train mode) plus the K-1 highest-scoring prior slots,
/// softmax-normalized over the selection. `dense` selects every eligible slot instead.
/// Ties go to the lower slot index. `retained`, when given, flags structurally removed slots.
SelectionResult select_and_normalize(const RowVec& scores, std::optional<int> current, int k, SelectMode mode,
                                     bool dense = false, const std::vector<bool>* retained = nullptr);

enum class ProjectionRole { kKey, kValue };

/// Frozen base matrix plus its ordered registry of experts (slot 0 is the auxiliary expert).
struct MoEProjection {
    Mat base;
    std::vector<LowRankExpert> experts;
    ProjectionRole role = ProjectionRole::kKey;
};

/// W0 + sum over the selection of alpha_i * E_i.
Mat compose_weight(const MoEProjection& proj, const SelectionResult& sel);

struct ExpertGrad {
    Mat down;
    Mat up;
};

/// Backward of compose_weight: returns dL/dalpha (aligned with sel.indices) and writes the gradient of
/// the expert in `trainable_slot` into grad (when that slot is selected and grad is non-null).
Vec compose_weight_backward(const MoEProjection& proj, const SelectionResult& sel, const Mat& d_weight,
                            int trainable_slot, ExpertGrad* grad);

/// Softmax backward restricted to the selection; unselected slots receive 0.
RowVec selection_score_grad(const SelectionResult& sel, const Vec& d_alpha, int width);

struct AttentionCache {
    Mat q;
    Mat k;
    Mat v;
    Mat probs;
};

/// Softmax(q k^T / sqrt(d_k)) v.
Mat attention(const Mat& q, const Mat& k, const Mat& v, AttentionCache* cache = nullptr);

struct AttentionGrad {
    Mat dq;
    Mat dk;
    Mat dv;
};
AttentionGrad attention_backward(const AttentionCache& cache, const Mat& d_out);

/// Cross-attention of spatial tokens z over context C.
Mat cross_attention(const Mat& z, const Mat& context, const Mat& wq, const Mat& wk, const Mat& wv);

/// Key/value projections of one cross-attention layer sharing a gating network.
struct MoELayer {
    MoEProjection key;
    MoEProjection value;
    GatingNetwork gate;

    int width() const { return gate.width(); }
    bool all_frozen() const;
    std::vector<bool> retained_flags() const;

    /// Appends a trainable expert for `task` (down ~ N(0, down_scale^2), up = 0) to both projections and a
    /// zero output column to the gate. Returns the new slot.
    int grow(int task, int rank, double down_scale, Rng& rng);
    void freeze_all();
    /// Structurally removes the newest expert and its gating column.
    void prune_last();

    long expert_parameter_count() const;
};

/// Routing for one layer: gate the context then select.
SelectionResult route(const MoELayer& layer, const Mat& context, std::optional<int> current, int k,
                      SelectMode mode, bool dense = false);

}  // namespace r2moe
