#include "r2moe/denoiser.hpp"

#include <cmath>

namespace r2moe {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end)
{
    if (steps < 1)
        throw DomainError("schedule: need at least one timestep");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw DomainError("schedule: betas must satisfy 0 < start <= end < 1");
    NoiseSchedule s;
    s.betas = steps == 1 ? Vec(Vec::Constant(1, beta_start)) : Vec(Vec::LinSpaced(steps, beta_start, beta_end));
    s.alphas = (1.0 - s.betas.array()).matrix();
    s.alpha_bar.resize(steps);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        prod *= s.alphas[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

Mat add_noise(const NoiseSchedule& schedule, const Mat& z0, int t, const Mat& noise)
{
    if (t < 0 || t >= schedule.steps())
        throw DomainError("add_noise: timestep " + std::to_string(t) + " out of range");
    if (noise.rows() != z0.rows() || noise.cols() != z0.cols())
        throw ShapeError("add_noise: noise shape differs from z0");
    const double ab = schedule.alpha_bar[t];
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * noise;
}

RowVec time_features(int t, int dim)
{
    RowVec f(dim);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(1000.0) * k / half);
        f[k] = std::sin(t * freq);
        f[half + k] = std::cos(t * freq);
    }
    return f;
}

Backbone Backbone::zeros_like() const
{
    Backbone z = *this;
    z.for_each([](const std::string&, Mat& m) { m.setZero(); });
    return z;
}

Denoiser::Denoiser(const ModelDims& dims, const NoiseSchedule& schedule, std::uint64_t seed)
    : dims_(dims), alpha_bar_(schedule.alpha_bar)
{
    if (dims.image_size % dims.patch != 0 || dims.grid() % 2 != 0)
        throw ShapeError("model dims: patch grid must be even");
    Rng rng(seed);
    const int w = dims.width;
    const double sw = 1.0 / std::sqrt(static_cast<double>(w));
    theta_.pos = rng.gaussian(dims.tokens(), w, 0.1);
    theta_.w_in = rng.gaussian(dims.patch_dim(), w, 1.0 / std::sqrt(static_cast<double>(dims.patch_dim())));
    theta_.b_in = Mat::Zero(1, w);
    theta_.w_t1 = rng.gaussian(dims.time_dim, w, 1.0 / std::sqrt(static_cast<double>(dims.time_dim)));
    const int coarse = dims.tokens() / 4;
    theta_.w_mix = Mat::Identity(coarse, coarse) + rng.gaussian(coarse, coarse, 0.1 / std::sqrt(double(coarse)));
    theta_.w_mid = rng.gaussian(w, w, sw);
    theta_.b_mid = Mat::Zero(1, w);
    theta_.w_t2 = rng.gaussian(dims.time_dim, w, 1.0 / std::sqrt(static_cast<double>(dims.time_dim)));
    theta_.w_skip = rng.gaussian(w, w, sw);
    theta_.w_up = rng.gaussian(w, w, sw);
    theta_.b_up = Mat::Zero(1, w);
    theta_.w_t3 = rng.gaussian(dims.time_dim, w, 1.0 / std::sqrt(static_cast<double>(dims.time_dim)));
    theta_.w_a = rng.gaussian(w, w, sw);
    theta_.b_a = Mat::Zero(1, w);
    theta_.w_t4 = rng.gaussian(dims.time_dim, w, 1.0 / std::sqrt(static_cast<double>(dims.time_dim)));
    theta_.w_b = rng.gaussian(w, w, 0.1 * sw);
    theta_.w_out = rng.gaussian(w, dims.patch_dim(), 0.1 * sw);
    theta_.w_res = Mat::Zero(dims.patch_dim(), dims.patch_dim());
    theta_.b_out = Mat::Zero(1, dims.patch_dim());
    for (int l = 0; l < kMoELayers; ++l) {
        theta_.w_q[static_cast<std::size_t>(l)] = rng.gaussian(w, w, sw);
        auto& layer = layers_[static_cast<std::size_t>(l)];
        layer.key.role = ProjectionRole::kKey;
        layer.value.role = ProjectionRole::kValue;
        layer.key.base = rng.gaussian(dims.d_in, w, 1.0 / std::sqrt(static_cast<double>(dims.d_in)));
        layer.value.base = rng.gaussian(dims.d_in, w, 1.0 / std::sqrt(static_cast<double>(dims.d_in)));
    }

    const int g = dims.grid();
    const int c = g / 2;
    pool_ = Mat::Zero(c * c, g * g);
    upsample_ = Mat::Zero(g * g, c * c);
    for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) {
            const int fine = y * g + x;
            const int coarse = (y / 2) * c + (x / 2);
            pool_(coarse, fine) = 0.25;
            upsample_(fine, coarse) = 1.0;
        }
}

void Denoiser::attach_experts(std::uint64_t seed, double aux_scale)
{
    if (has_experts())
        throw StateError("experts already attached");
    Rng rng(seed);
    for (auto& layer : layers_) {
        for (auto* proj : {&layer.key, &layer.value}) {
            LowRankExpert e0;
            e0.down = rng.gaussian(dims_.d_in, dims_.rank, aux_scale);
            e0.up = rng.gaussian(dims_.rank, dims_.width, aux_scale);
            e0.frozen = true;
            e0.owner_task = 0;
            proj->experts.push_back(std::move(e0));
        }
        layer.gate = GatingNetwork(dims_.d_in, dims_.gate_hidden, 1, rng);
    }
}

template <typename Attend>
Mat Denoiser::forward_impl(const Mat& z, int t, Attend&& attend, ForwardCache* cache) const
{
    if (z.rows() != dims_.tokens() || z.cols() != dims_.patch_dim())
        throw ShapeError("denoiser: latent shape mismatch");
    if (t < 0 || t >= alpha_bar_.size())
        throw DomainError("denoiser: timestep " + std::to_string(t) + " out of range");
    const RowVec temb = time_features(t, dims_.time_dim);
    const double ab = alpha_bar_[t];
    const auto& th = theta_;

    Mat h1 = ((z * th.w_in + th.pos).rowwise() + (temb * th.w_t1 + th.b_in).row(0)).array().tanh().matrix();
    Mat h1a = h1 + attend(0, h1 * th.w_q[0]);
    Mat pooled = pool_ * h1a;
    Mat mixed = th.w_mix * pooled;
    Mat h2 = ((mixed * th.w_mid).rowwise() + (temb * th.w_t2 + th.b_mid).row(0)).array().tanh().matrix();
    Mat h2a = h2 + attend(1, h2 * th.w_q[1]);
    Mat up = upsample_ * h2a;
    Mat h3 = ((h1a * th.w_skip + up * th.w_up).rowwise() + (temb * th.w_t3 + th.b_up).row(0))
                 .array()
                 .tanh()
                 .matrix();
    Mat h3a = h3 + attend(2, h3 * th.w_q[2]);
    Mat h4 = ((h3a * th.w_a).rowwise() + (temb * th.w_t4 + th.b_a).row(0)).array().tanh().matrix();
    Mat h5 = h3a + h4 * th.w_b;
    Mat f = (h5 * th.w_out + z * th.w_res).rowwise() + th.b_out.row(0);
    Mat out = std::sqrt(1.0 - ab) * z + std::sqrt(ab) * f;

    if (cache) {
        cache->z = z;
        cache->out_scale = std::sqrt(ab);
        cache->temb = temb;
        cache->h1 = std::move(h1);
        cache->h1a = std::move(h1a);
        cache->pooled = std::move(pooled);
        cache->mixed = std::move(mixed);
        cache->h2 = std::move(h2);
        cache->h2a = std::move(h2a);
        cache->up = std::move(up);
        cache->h3 = std::move(h3);
        cache->h3a = std::move(h3a);
        cache->h4 = std::move(h4);
        cache->h5 = std::move(h5);
    }
    return out;
}

Mat Denoiser::predict(const Mat& z, int t, const Mat& context, const LayerKVs& kv, ForwardCache* cache) const
{
    if (context.cols() != dims_.d_in)
        throw ShapeError("denoiser: context width mismatch");
    auto attend = [&](int l, const Mat& q) {
        const auto& p = kv[static_cast<std::size_t>(l)];
        AttentionCache* ac = cache ? &cache->attn[static_cast<std::size_t>(l)] : nullptr;
        return attention(q, context * p.wk, context * p.wv, ac);
    };
    Mat out = forward_impl(z, t, attend, cache);
    if (cache) {
        cache->context = context;
        cache->kv = kv;
    }
    return out;
}

Mat Denoiser::predict(const Mat& z, int t, const AttentionHook& hook) const
{
    return forward_impl(z, t, hook, nullptr);
}

namespace {

RowVec colsum(const Mat& m) { return m.colwise().sum(); }

}  // namespace

BackwardResult Denoiser::backward(const ForwardCache& c, const Mat& d_eps, bool need_theta) const
{
    const Mat d_out = c.out_scale * d_eps;
    const auto& th = theta_;
    BackwardResult r;
    Backbone g;
    if (need_theta)
        g = th.zeros_like();
    r.d_context = Mat::Zero(c.context.rows(), c.context.cols());

    // Attention layer l backward: consumes dA, returns dH contribution through the queries.
    auto attn_back = [&](int l, const Mat& h, const Mat& d_a) -> Mat {
        const auto li = static_cast<std::size_t>(l);
        const AttentionGrad ag = attention_backward(c.attn[li], d_a);
        r.d_wk[li] = c.context.transpose() * ag.dk;
        r.d_wv[li] = c.context.transpose() * ag.dv;
        r.d_context += ag.dk * c.kv[li].wk.transpose() + ag.dv * c.kv[li].wv.transpose();
        if (need_theta)
            g.w_q[li] += h.transpose() * ag.dq;
        return ag.dq * th.w_q[li].transpose();
    };

    const Mat d_h5 = d_out * th.w_out.transpose();
    const Mat d_h4 = d_h5 * th.w_b.transpose();
    const Mat d_pre4 = (d_h4.array() * (1.0 - c.h4.array().square())).matrix();
    const Mat d_h3a = d_h5 + d_pre4 * th.w_a.transpose();
    if (need_theta) {
        g.w_out += c.h5.transpose() * d_out;
        g.w_b += c.h4.transpose() * d_h5;
        g.w_a += c.h3a.transpose() * d_pre4;
        const RowVec s4 = colsum(d_pre4);
        g.b_a += s4;
        g.w_t4 += c.temb.transpose() * s4;
        g.w_res += c.z.transpose() * d_out;
        g.b_out += colsum(d_out);
    }
    const Mat d_h3 = d_h3a + attn_back(2, c.h3, d_h3a);
    const Mat d_pre3 = (d_h3.array() * (1.0 - c.h3.array().square())).matrix();
    Mat d_h1a = d_pre3 * th.w_skip.transpose();
    const Mat d_up = d_pre3 * th.w_up.transpose();
    if (need_theta) {
        g.w_skip += c.h1a.transpose() * d_pre3;
        g.w_up += c.up.transpose() * d_pre3;
        const RowVec s = colsum(d_pre3);
        g.b_up += s;
        g.w_t3 += c.temb.transpose() * s;
    }

    const Mat d_h2a = upsample_.transpose() * d_up;
    const Mat d_h2 = d_h2a + attn_back(1, c.h2, d_h2a);
    const Mat d_pre2 = (d_h2.array() * (1.0 - c.h2.array().square())).matrix();
    const Mat d_mixed = d_pre2 * th.w_mid.transpose();
    const Mat d_pooled = th.w_mix.transpose() * d_mixed;
    if (need_theta) {
        g.w_mix += d_mixed * c.pooled.transpose();
        g.w_mid += c.mixed.transpose() * d_pre2;
        const RowVec s = colsum(d_pre2);
        g.b_mid += s;
        g.w_t2 += c.temb.transpose() * s;
    }
    d_h1a += pool_.transpose() * d_pooled;

    const Mat d_h1 = d_h1a + attn_back(0, c.h1, d_h1a);
    if (need_theta) {
        const Mat d_pre1 = (d_h1.array() * (1.0 - c.h1.array().square())).matrix();
        g.w_in += c.z.transpose() * d_pre1;
        g.pos += d_pre1;
        const RowVec s = colsum(d_pre1);
        g.b_in += s;
        g.w_t1 += c.temb.transpose() * s;
        r.d_theta = std::move(g);
    }
    return r;
}

LayerKVs Denoiser::base_kv() const
{
    LayerKVs kv;
    for (int l = 0; l < kMoELayers; ++l)
        kv[static_cast<std::size_t>(l)] = {layer(l).key.base, layer(l).value.base};
    return kv;
}

LayerKVs Denoiser::composed_kv(const std::array<SelectionResult, kMoELayers>& selections) const
{
    LayerKVs kv;
    for (int l = 0; l < kMoELayers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        kv[li] = {compose_weight(layer(l).key, selections[li]), compose_weight(layer(l).value, selections[li])};
    }
    return kv;
}

std::uint64_t Denoiser::theta_hash() const
{
    Hasher h;
    theta_.for_each([&](const std::string& name, const Mat& m) {
        h.add(name);
        h.add(m);
    });
    for (const auto& layer : layers_) {
        h.add(layer.key.base);
        h.add(layer.value.base);
    }
    return h.value();
}

long Denoiser::theta_parameter_count() const
{
    long n = 0;
    theta_.for_each([&](const std::string&, const Mat& m) { n += static_cast<long>(m.size()); });
    for (const auto& layer : layers_)
        n += static_cast<long>(layer.key.base.size() + layer.value.base.size());
    return n;
}

double mse(const Mat& prediction, const Mat& target)
{
    if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
        throw ShapeError("mse: shape mismatch");
    return (prediction - target).squaredNorm() / static_cast<double>(prediction.size());
}

double denoise_loss(const Denoiser& model, const NoiseSchedule& schedule, const std::vector<DenoiseExample>& batch,
                    const Mat& context, const LayerKVs& kv)
{
    if (batch.empty())
        throw DomainError("denoise_loss: empty batch");
    double total = 0.0;
    for (const auto& ex : batch) {
        const Mat zt = add_noise(schedule, ex.z0, ex.t, ex.noise);
        total += mse(model.predict(zt, ex.t, context, kv), ex.noise);
    }
    return total / static_cast<double>(batch.size());
}

std::vector<int> ddim_timesteps(int total, int steps)
{
    if (steps < 1)
        throw DomainError("ddim: steps must be >= 1");
    if (steps > total)
        throw DomainError("ddim: steps (" + std::to_string(steps) + ") exceed schedule length (" +
                          std::to_string(total) + ")");
    std::vector<int> ts;
    for (int i = steps - 1; i >= 0; --i)
        ts.push_back(static_cast<int>((static_cast<long>(i) * total) / steps));
    return ts;
}

DdimStep ddim_step(const NoiseSchedule& schedule, const Mat& z, const Mat& eps, int t, int t_prev, double eta,
                   bool clip_x0, const Mat* noise)
{
    const double ab = schedule.alpha_bar[t];
    const double ab_prev = t_prev >= 0 ? schedule.alpha_bar[t_prev] : 1.0;
    DdimStep out;
    out.x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    if (clip_x0)
        out.x0 = out.x0.cwiseMax(-1.0).cwiseMin(1.0);
    const double sigma2 = eta * eta * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma2));
    out.z_prev = std::sqrt(ab_prev) * out.x0 + dir * eps;
    if (sigma2 > 0.0 && noise)
        out.z_prev += std::sqrt(sigma2) * *noise;
    return out;
}

Mat ddim_loop(const NoiseSchedule& schedule, const NoisePredictor& cond, const NoisePredictor& uncond,
              const SamplerOptions& options, Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
              const StepObserver& observer)
{
    if (options.guidance < 0.0)
        throw DomainError("ddim: guidance scale must be >= 0");
    const auto ts = ddim_timesteps(schedule.steps(), options.steps);
    Rng rng(seed);
    Mat z = rng.gaussian(rows, cols, 1.0);
    Mat x0;
    bool have_x0 = false;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
        if (observer)
            observer(static_cast<int>(i), t, z, have_x0 ? &x0 : nullptr);
        Mat eps = cond(z, t);
        if (options.guidance != 1.0) {
            const Mat e_u = uncond(z, t);
            eps = e_u + options.guidance * (eps - e_u);
        }
        Mat step_noise;
        if (options.eta > 0.0)
            step_noise = rng.gaussian(rows, cols, 1.0);
        auto step = ddim_step(schedule, z, eps, t, t_prev, options.eta, options.clip_x0,
                              options.eta > 0.0 ? &step_noise : nullptr);
        z = std::move(step.z_prev);
        x0 = std::move(step.x0);
        have_x0 = true;
        if (!all_finite(z))
            throw NumericError("ddim: non-finite latent at timestep " + std::to_string(t));
    }
    return z;
}

AttentionHook standard_attention(const Conditioning& cond)
{
    std::array<Mat, kMoELayers> keys;
    std::array<Mat, kMoELayers> values;
    for (std::size_t l = 0; l < kMoELayers; ++l) {
        keys[l] = cond.context * cond.kv[l].wk;
        values[l] = cond.context * cond.kv[l].wv;
    }
    return [keys = std::move(keys), values = std::move(values)](int l, const Mat& q) {
        const auto li = static_cast<std::size_t>(l);
        return attention(q, keys[li], values[li]);
    };
}

Image ddim_sample(const Denoiser& model, const NoiseSchedule& schedule, const Conditioning& cond,
                  const Conditioning& uncond, const SamplerOptions& options, std::uint64_t seed)
{
    const auto cond_hook = standard_attention(cond);
    const auto uncond_hook = standard_attention(uncond);
    const auto& d = model.dims();
    const Mat z = ddim_loop(
        schedule, [&](const Mat& x, int t) { return model.predict(x, t, cond_hook); },
        [&](const Mat& x, int t) { return model.predict(x, t, uncond_hook); }, options, d.tokens(), d.patch_dim(),
        seed);
    return unpatchify(z, d.image_size, d.image_size, d.channels, d.patch);
}

}  // namespace r2moe
