#pragma once

#include "r2moe/image.hpp"
#include "r2moe/moe_attention.hpp"
#include "r2moe/numerics.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>

namespace r2moe {

inline constexpr int kMoELayers = 3;
inline constexpr std::array<const char*, kMoELayers> kLayerNames{"early", "middle", "late"};

struct ModelDims {
    int image_size = 32;
    int channels = 3;
    int patch = 4;
    int width = 64;     // model width; also the attention key width
    int time_dim = 16;
    int d_in = 32;      // text embedding width
    int rank = 4;       // expert rank
    int gate_hidden = 32;

    int grid() const { return image_size / patch; }
    int tokens() const { return grid() * grid(); }
    int patch_dim() const { return patch * patch * channels; }
    /// Spatial side of the token grid seen by each attention layer.
    int layer_grid(int layer) const { return layer == 1 ? grid() / 2 : grid(); }

    bool operator==(const ModelDims&) const = default;
};

/// Linear beta schedule and its cumulative products.
struct NoiseSchedule {
    Vec betas;
    Vec alphas;
    Vec alpha_bar;

    int steps() const { return static_cast<int>(betas.size()); }
    static NoiseSchedule linear(int steps, double beta_start, double beta_end);
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise
Mat add_noise(const NoiseSchedule& schedule, const Mat& z0, int t, const Mat& noise);

/// Sinusoidal timestep features.
RowVec time_features(int t, int dim);

/// Frozen backbone parameters theta (the base K/V projections live in the MoE layers).
struct Backbone {
    Mat pos;    // tokens x width
    Mat w_in;   // patch_dim x width
    Mat b_in;   // 1 x width
    Mat w_t1;   // time_dim x width
    Mat w_mix;  // coarse tokens x coarse tokens, mixes the middle grid
    Mat w_mid;  // width x width
    Mat b_mid;
    Mat w_t2;
    Mat w_skip;
    Mat w_up;
    Mat b_up;
    Mat w_t3;
    Mat w_a;    // per-token residual block after the late attention
    Mat b_a;
    Mat w_t4;
    Mat w_b;
    Mat w_out;  // width x patch_dim
    Mat w_res;  // patch_dim x patch_dim, input-to-output skip
    Mat b_out;
    std::array<Mat, kMoELayers> w_q;

    template <typename F>
    void for_each(F&& f)
    {
        f("pos", pos); f("w_in", w_in); f("b_in", b_in); f("w_t1", w_t1);
        f("w_mix", w_mix); f("w_mid", w_mid); f("b_mid", b_mid); f("w_t2", w_t2);
        f("w_skip", w_skip); f("w_up", w_up); f("b_up", b_up); f("w_t3", w_t3);
        f("w_a", w_a); f("b_a", b_a); f("w_t4", w_t4); f("w_b", w_b);
        f("w_out", w_out); f("w_res", w_res); f("b_out", b_out);
        for (int l = 0; l < kMoELayers; ++l)
            f(std::string("w_q.") + kLayerNames[static_cast<std::size_t>(l)], w_q[static_cast<std::size_t>(l)]);
    }
    template <typename F>
    void for_each(F&& f) const
    {
        const_cast<Backbone*>(this)->for_each([&](const std::string& n, Mat& m) { f(n, static_cast<const Mat&>(m)); });
    }

    Backbone zeros_like() const;
};

/// Composed key/value projections for one attention layer.
struct LayerKV {
    Mat wk;
    Mat wv;
};
using LayerKVs = std::array<LayerKV, kMoELayers>;

/// Replaces a layer's attention: receives the layer's queries, returns its attention output.
using AttentionHook = std::function<Mat(int layer, const Mat& queries)>;

struct ForwardCache {
    Mat z;
    double out_scale = 1.0;
    RowVec temb;
    Mat h1, h1a, pooled, mixed, h2, h2a, up, h3, h3a, h4, h5;
    Mat context;
    LayerKVs kv;
    std::array<AttentionCache, kMoELayers> attn;
};

struct BackwardResult {
    std::optional<Backbone> d_theta;
    std::array<Mat, kMoELayers> d_wk;
    std::array<Mat, kMoELayers> d_wv;
    Mat d_context;
};

/// Miniature pixel-space conditional denoiser with cross-attention at three depths.
class Denoiser {
public:
    Denoiser() = default;
    /// Random backbone with empty expert registries.
    Denoiser(const ModelDims& dims, const NoiseSchedule& schedule, std::uint64_t seed);

    const ModelDims& dims() const { return dims_; }
    const Vec& alpha_bar() const { return alpha_bar_; }
    Backbone& theta() { return theta_; }
    const Backbone& theta() const { return theta_; }
    std::array<MoELayer, kMoELayers>& layers() { return layers_; }
    const std::array<MoELayer, kMoELayers>& layers() const { return layers_; }
    MoELayer& layer(int l) { return layers_[static_cast<std::size_t>(l)]; }
    const MoELayer& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }

    /// Adds the frozen auxiliary expert and a width-1 gating network to every layer.
    void attach_experts(std::uint64_t seed, double aux_scale = 0.01);
    bool has_experts() const { return layers_[0].width() > 0; }

    /// Noise prediction with standard cross-attention over `context` using the given K/V projections.
    Mat predict(const Mat& z, int t, const Mat& context, const LayerKVs& kv, ForwardCache* cache = nullptr) const;
    /// Noise prediction with every attention layer supplied by the hook.
    Mat predict(const Mat& z, int t, const AttentionHook& hook) const;
    BackwardResult backward(const ForwardCache& cache, const Mat& d_out, bool need_theta) const;

    LayerKVs base_kv() const;
    LayerKVs composed_kv(const std::array<SelectionResult, kMoELayers>& selections) const;

    /// Hash of theta including the base K/V projections.
    std::uint64_t theta_hash() const;
    long theta_parameter_count() const;

private:
    template <typename Attend>
    Mat forward_impl(const Mat& z, int t, Attend&& attend, ForwardCache* cache) const;

    ModelDims dims_;
    Vec alpha_bar_;  // the network output F is read as eps = sqrt(1 - abar) z + sqrt(abar) F
    Backbone theta_;
    std::array<MoELayer, kMoELayers> layers_;
    Mat pool_;      // coarse <- fine average pooling
    Mat upsample_;  // fine <- coarse nearest upsampling
};

/// Mean squared error between predicted and true noise.
double mse(const Mat& prediction, const Mat& target);

/// Batch of one denoising example.
struct DenoiseExample {
    Mat z0;
    int t = 0;
    Mat noise;
};

/// Mean over the batch of the per-example MSE of the model's noise prediction.
double denoise_loss(const Denoiser& model, const NoiseSchedule& schedule, const std::vector<DenoiseExample>& batch,
                    const Mat& context, const LayerKVs& kv);

// ---------------------------------------------------------------------------------------------
// DDIM sampling

using NoisePredictor = std::function<Mat(const Mat& z, int t)>;

struct SamplerOptions {
    int steps = 50;
    double guidance = 7.0;
    double eta = 0.0;
    bool clip_x0 = true;
};

/// Descending DDIM timesteps floor(i * T / steps), i = steps-1 .. 0.
std::vector<int> ddim_timesteps(int total, int steps);

struct DdimStep {
    Mat z_prev;
    Mat x0;
};

/// One DDIM update from t to t_prev (t_prev < 0 means the final step to x0).
DdimStep ddim_step(const NoiseSchedule& schedule, const Mat& z, const Mat& eps, int t, int t_prev, double eta,
                   bool clip_x0, const Mat* noise);

/// Called before each iteration with (iteration index, timestep, current latent, latest x0 estimate or nullptr).
using StepObserver = std::function<void(int iteration, int t, const Mat& z, const Mat* x0)>;

/// Generic classifier-free-guided DDIM loop over latents of the given shape.
/// Guidance 1 uses the conditional prediction alone.
Mat ddim_loop(const NoiseSchedule& schedule, const NoisePredictor& cond, const NoisePredictor& uncond,
              const SamplerOptions& options, Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
              const StepObserver& observer = {});

/// Fixed conditioning for a sampling run: context plus the K/V projections used with it.
struct Conditioning {
    Mat context;
    LayerKVs kv;
};

/// Hook computing standard attention against precomputed keys/values of a conditioning.
AttentionHook standard_attention(const Conditioning& cond);

Image ddim_sample(const Denoiser& model, const NoiseSchedule& schedule, const Conditioning& cond,
                  const Conditioning& uncond, const SamplerOptions& options, std::uint64_t seed);

}  // namespace r2moe
