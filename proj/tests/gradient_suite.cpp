#include "gradient_suite.hpp"

#include "support.hpp"

#include "r2moe/denoiser.hpp"
#include "r2moe/lifelong_trainer.hpp"
#include "r2moe/moe_attention.hpp"

namespace r2moe::testing {

namespace {

constexpr double kEps = 1e-6;

double dot(const Mat& a, const Mat& b) { return (a.array() * b.array()).sum(); }

void gating_checks(std::vector<GradCheckReport>& out, int probes, Rng& rng)
{
    GatingNetwork net(6, 5, 4, rng);
    net.out_w = rng.gaussian(5, 4, 0.7);
    net.out_b = rng.gaussian(1, 4, 0.3);
    net.hidden_b = rng.gaussian(1, 5, 0.3);
    const Mat context = rng.gaussian(3, 6, 1.0);
    const RowVec r = rng.gaussian(1, 4, 1.0);

    auto run = [&](const GatingNetwork& n, const Mat& c, GatingNetwork::Grad* g, Mat* dc) {
        GatingCache cache;
        const RowVec s = n.forward(c, &cache);
        if (g || dc) {
            const Mat d = n.backward(cache, r, g);
            if (dc)
                *dc = d;
        }
        return s.dot(r);
    };
    enum Which { kHiddenW, kHiddenB, kOutW, kOutB };
    auto f = [&](Which which) {
        return [&, which](const Mat& x, Mat* grad) {
            GatingNetwork n = net;
            switch (which) {
            case kHiddenW: n.hidden_w = x; break;
            case kHiddenB: n.hidden_b = x; break;
            case kOutW: n.out_w = x; break;
            case kOutB: n.out_b = x; break;
            }
            GatingNetwork::Grad g(n);
            const double v = run(n, context, grad ? &g : nullptr, nullptr);
            if (grad) {
                switch (which) {
                case kHiddenW: *grad = g.hidden_w; break;
                case kHiddenB: *grad = g.hidden_b; break;
                case kOutW: *grad = g.out_w; break;
                case kOutB: *grad = g.out_b; break;
                }
            }
            return v;
        };
    };
    out.push_back(grad_check("gating_mlp.hidden_w", f(kHiddenW), net.hidden_w, kEps, probes, rng.next()));
    out.push_back(grad_check("gating_mlp.hidden_b", f(kHiddenB), Mat(net.hidden_b), kEps, probes, rng.next()));
    out.push_back(grad_check("gating_mlp.out_w", f(kOutW), net.out_w, kEps, probes, rng.next()));
    out.push_back(grad_check("gating_mlp.out_b", f(kOutB), Mat(net.out_b), kEps, probes, rng.next()));
    out.push_back(grad_check("gating_mlp.context",
                             [&](const Mat& x, Mat* grad) { return run(net, x, nullptr, grad); }, context, kEps,
                             probes, rng.next()));
}

void compose_checks(std::vector<GradCheckReport>& out, int probes, Rng& rng)
{
    MoEProjection proj;
    proj.base = rng.gaussian(6, 5, 1.0);
    for (int i = 0; i < 4; ++i) {
        LowRankExpert e;
        e.down = rng.gaussian(6, 2, 0.5);
        e.up = rng.gaussian(2, 5, 0.5);
        e.owner_task = i;
        proj.experts.push_back(e);
    }
    const Mat r = rng.gaussian(6, 5, 1.0);
    const RowVec scores = rng.gaussian(1, 4, 1.0);
    const int current = 3;

    out.push_back(grad_check("compose_weight.scores",
                             [&](const Mat& x, Mat* grad) {
                                 const RowVec s = x;
                                 const auto sel = select_and_normalize(s, current, 2, SelectMode::kTrain);
                                 const double v = dot(compose_weight(proj, sel), r);
                                 if (grad) {
                                     const Vec da = compose_weight_backward(proj, sel, r, -1, nullptr);
                                     *grad = selection_score_grad(sel, da, 4);
                                 }
                                 return v;
                             },
                             Mat(scores), kEps, probes, rng.next()));
    const auto sel = select_and_normalize(scores, current, 2, SelectMode::kTrain);
    for (const bool down : {true, false}) {
        const Mat x0 = down ? proj.experts[current].down : proj.experts[current].up;
        out.push_back(grad_check(down ? "compose_weight.expert_down" : "compose_weight.expert_up",
                                 [&](const Mat& x, Mat* grad) {
                                     MoEProjection p = proj;
                                     (down ? p.experts[current].down : p.experts[current].up) = x;
                                     const double v = dot(compose_weight(p, sel), r);
                                     if (grad) {
                                         // backward accumulates
                                         ExpertGrad g{Mat::Zero(6, 2), Mat::Zero(2, 5)};
                                         compose_weight_backward(p, sel, r, current, &g);
                                         *grad = down ? g.down : g.up;
                                     }
                                     return v;
                                 },
                                 x0, kEps, probes, rng.next()));
    }
}

void attention_checks(std::vector<GradCheckReport>& out, int probes, Rng& rng)
{
    const Mat z = rng.gaussian(5, 4, 1.0);
    const Mat c = rng.gaussian(3, 6, 1.0);
    const Mat wq = rng.gaussian(4, 3, 0.7);
    const Mat wk = rng.gaussian(6, 3, 0.7);
    const Mat wv = rng.gaussian(6, 2, 0.7);
    const Mat r = rng.gaussian(5, 2, 1.0);

    enum Which { kZ, kC, kWq, kWk, kWv };
    auto f = [&](Which which) {
        return [&, which](const Mat& x, Mat* grad) {
            const Mat& zz = which == kZ ? x : z;
            const Mat& cc = which == kC ? x : c;
            const Mat& q_w = which == kWq ? x : wq;
            const Mat& k_w = which == kWk ? x : wk;
            const Mat& v_w = which == kWv ? x : wv;
            AttentionCache cache;
            const Mat o = attention(zz * q_w, cc * k_w, cc * v_w, &cache);
            if (grad) {
                const AttentionGrad g = attention_backward(cache, r);
                switch (which) {
                case kZ: *grad = g.dq * q_w.transpose(); break;
                case kC: *grad = g.dk * k_w.transpose() + g.dv * v_w.transpose(); break;
                case kWq: *grad = zz.transpose() * g.dq; break;
                case kWk: *grad = cc.transpose() * g.dk; break;
                case kWv: *grad = cc.transpose() * g.dv; break;
                }
            }
            return dot(o, r);
        };
    };
    out.push_back(grad_check("cross_attention.z", f(kZ), z, kEps, probes, rng.next()));
    out.push_back(grad_check("cross_attention.context", f(kC), c, kEps, probes, rng.next()));
    out.push_back(grad_check("cross_attention.wq", f(kWq), wq, kEps, probes, rng.next()));
    out.push_back(grad_check("cross_attention.wk", f(kWk), wk, kEps, probes, rng.next()));
    out.push_back(grad_check("cross_attention.wv", f(kWv), wv, kEps, probes, rng.next()));
}

void denoise_checks(std::vector<GradCheckReport>& out, int probes, Rng& rng)
{
    const ModelDims dims = tiny_dims();
    const NoiseSchedule schedule = NoiseSchedule::linear(20, 5e-4, 0.1);
    Denoiser model(dims, schedule, rng.next());
    // give the zero-initialized pieces some mass so every path carries gradient
    model.theta().for_each([&](const std::string&, Mat& m) { m += rng.gaussian(m.rows(), m.cols(), 0.05); });
    const Mat context = rng.gaussian(5, dims.d_in, 1.0);
    const LayerKVs kv = model.base_kv();
    const Mat z0 = rng.gaussian(dims.tokens(), dims.patch_dim(), 0.5);
    const Mat noise = rng.gaussian(dims.tokens(), dims.patch_dim(), 1.0);
    const int t = 11;
    const Mat zt = add_noise(schedule, z0, t, noise);

    auto loss = [&](const Denoiser& m, const Mat& ctx, const LayerKVs& k, BackwardResult* back) {
        ForwardCache cache;
        const Mat pred = m.predict(zt, t, ctx, k, &cache);
        if (back)
            *back = m.backward(cache, 2.0 * (pred - noise) / static_cast<double>(pred.size()), true);
        return mse(pred, noise);
    };

    std::vector<std::string> names;
    model.theta().for_each([&](const std::string& n, Mat&) { names.push_back(n); });
    for (const auto& name : names) {
        Mat x0;
        model.theta().for_each([&](const std::string& n, Mat& m) {
            if (n == name)
                x0 = m;
        });
        out.push_back(grad_check("denoise_loss.theta." + name,
                                 [&](const Mat& x, Mat* grad) {
                                     Denoiser m = model;
                                     m.theta().for_each([&](const std::string& n, Mat& p) {
                                         if (n == name)
                                             p = x;
                                     });
                                     BackwardResult back;
                                     const double v = loss(m, context, kv, grad ? &back : nullptr);
                                     if (grad)
                                         back.d_theta->for_each([&](const std::string& n, Mat& p) {
                                             if (n == name)
                                                 *grad = p;
                                         });
                                     return v;
                                 },
                                 x0, kEps, probes, rng.next()));
    }
    for (int l = 0; l < kMoELayers; ++l)
        for (const bool key : {true, false}) {
            const auto li = static_cast<std::size_t>(l);
            out.push_back(grad_check(std::string("denoise_loss.") + (key ? "wk." : "wv.") + kLayerNames[li],
                                     [&](const Mat& x, Mat* grad) {
                                         LayerKVs k = kv;
                                         (key ? k[li].wk : k[li].wv) = x;
                                         BackwardResult back;
                                         const double v = loss(model, context, k, grad ? &back : nullptr);
                                         if (grad)
                                             *grad = key ? back.d_wk[li] : back.d_wv[li];
                                         return v;
                                     },
                                     key ? kv[li].wk : kv[li].wv, kEps, probes, rng.next()));
        }
    out.push_back(grad_check("denoise_loss.context",
                             [&](const Mat& x, Mat* grad) {
                                 BackwardResult back;
                                 const double v = loss(model, x, kv, grad ? &back : nullptr);
                                 if (grad)
                                     *grad = back.d_context;
                                 return v;
                             },
                             context, kEps, probes, rng.next()));
}

void objective_checks(std::vector<GradCheckReport>& out, int probes, Rng& rng)
{
    LifelongState state = tiny_state(rng.next());
    const auto tasks = tiny_tasks(2, 7);
    TrainConfig config = tiny_train(4);
    config.beta = 10.0;
    config.max_grad_norm = 0.0;
    train_task(state, tasks[0], config, 1);

    TaskTrainer trainer(state, tasks[1], config, 2);
    for (int i = 0; i < 4; ++i)
        trainer.step();  // moves the gates away from the snapshot so distillation is active
    const TaskBatch batch = trainer.draw_batch();
    const Vec x0 = trainer.pack();
    double distill = 0.0;
    trainer.objective(batch, nullptr, nullptr, &distill);
    if (!(distill > 0.0))
        throw StateError("gradient suite: distillation term inactive");

    auto f = [&](const Mat& x, Mat* grad) {
        trainer.unpack(x);
        Vec g;
        const double v = trainer.objective(batch, grad ? &g : nullptr);
        if (grad)
            *grad = g;
        return v;
    };
    // many packed coordinates have gradients near 1e-8; at eps 1e-6 the O(1) loss's rounding swamps them
    out.push_back(grad_check("task_objective.with_routing_distillation", f, Mat(x0), 1e-3, probes, rng.next()));
    trainer.unpack(x0);
}

}  // namespace

std::vector<GradCheckReport> gradient_suite(int probes, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<GradCheckReport> out;
    gating_checks(out, probes, rng);
    compose_checks(out, probes, rng);
    attention_checks(out, probes, rng);
    denoise_checks(out, probes, rng);
    objective_checks(out, probes, rng);
    return out;
}

}  // namespace r2moe::testing
