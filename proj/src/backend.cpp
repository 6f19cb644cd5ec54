#include "personalize/backend.hpp"

#include <algorithm>
#include <cmath>

#include "personalize/errors.hpp"
#include "personalize/rng.hpp"

namespace personalize {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kTimeFeatures = 8;  // 4 sin/cos pairs

// Sinusoidal features of normalized time, matching the NeTI input encoding.
Tensor time_features(int t, int T) {
    Tensor f = Tensor::zeros({kTimeFeatures});
    const double tn = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
    for (int k = 0; k < kTimeFeatures / 2; ++k) {
        const double arg = kPi * tn * std::pow(2.0, k);
        f.data[2 * k + 0] = std::sin(arg);
        f.data[2 * k + 1] = std::cos(arg);
    }
    return f;
}

Tensor gaussian_tensor(const std::vector<int>& shape, Rng& rng, double scl) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = rng.gaussian() * scl;
    return t;
}

}  // namespace

void NoiseSchedule::check_index(int t) const {
    if (t < 0 || t >= T) throw IndexError("timestep out of range: " + std::to_string(t));
}

double NoiseSchedule::sqrt_alpha_bar(int t) const {
    check_index(t);
    return std::sqrt(alpha_bar[static_cast<size_t>(t)]);
}

double NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const {
    check_index(t);
    return std::sqrt(1.0 - alpha_bar[static_cast<size_t>(t)]);
}

NoiseSchedule make_noise_schedule(int T, const std::string& kind) {
    if (T < 1) throw SpecError("noise schedule needs T >= 1");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    if (kind == "linear") {
        // Reference DDPM endpoints are tuned for T=1000; rescale so the total
        // signal decay is comparable at toy step counts.
        const double scl = 1000.0 / static_cast<double>(T);
        for (int t = 0; t < T; ++t) {
            const double frac = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
            const double b = scl * (1e-4 + (0.02 - 1e-4) * frac);
            s.beta[static_cast<size_t>(t)] = std::clamp(b, 1e-8, 0.999);
        }
    } else if (kind == "cosine") {
        const double eps = 0.008;
        auto f = [&](double u) {
            const double c = std::cos((u + eps) / (1.0 + eps) * kPi / 2.0);
            return c * c;
        };
        double prev = 1.0;
        for (int t = 0; t < T; ++t) {
            const double cur = f(static_cast<double>(t + 1) / static_cast<double>(T)) / f(0.0);
            const double b = 1.0 - cur / prev;
            s.beta[static_cast<size_t>(t)] = std::clamp(b, 1e-8, 0.999);
            prev = cur;
        }
    } else {
        throw SpecError("unknown noise schedule kind: " + kind);
    }
    double acc = 1.0;
    for (int t = 0; t < T; ++t) {
        acc *= 1.0 - s.beta[static_cast<size_t>(t)];
        s.alpha_bar[static_cast<size_t>(t)] = acc;
    }
    return s;
}

Tensor add_noise(const Tensor& z0, const Tensor& eps, int t, const NoiseSchedule& schedule) {
    require_same_shape(z0, eps, "add_noise");
    const double a = schedule.sqrt_alpha_bar(t);
    const double b = schedule.sqrt_one_minus_alpha_bar(t);
    Tensor out = Tensor::zeros(z0.shape);
    for (int64_t i = 0; i < z0.size(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
    return out;
}

Tensor gaussian_latent(const std::vector<int>& shape, Rng& rng) {
    return gaussian_tensor(shape, rng, 1.0);
}

ad::Var predict_eps(ad::Tape& tape, const EpsilonPredictor& model, ad::Var z_t, int t,
                    const ConditioningBundle& conditioning) {
    model.schedule().check_index(t);
    const size_t n_seq = conditioning.sequences.size();
    const size_t L = static_cast<size_t>(model.layer_count());
    if (n_seq != 1 && n_seq != L) {
        throw ConditioningError("conditioning provides " + std::to_string(n_seq) +
                                " layer sequences; model expects 1 or " + std::to_string(L));
    }
    if (!z_t.value().all_finite()) throw NonFiniteError("z_t contains non-finite values");
    ad::Var eps = model.predict(tape, z_t, t, conditioning);
    if (!eps.value().all_finite()) throw NonFiniteError("epsilon prediction is non-finite");
    return eps;
}

Tensor predict_eps(const EpsilonPredictor& model, const Tensor& z_t, int t,
                   const ConditioningBundle& conditioning) {
    if (conditioning.sequences.empty() || conditioning.sequences.front().tape == nullptr)
        throw ConditioningError("conditioning bundle has no tape-bound sequences");
    ad::Tape& tape = *conditioning.sequences.front().tape;
    return predict_eps(tape, model, tape.constant(z_t), t, conditioning).value();
}

ToyUNet::ToyUNet(ToyUNetConfig cfg)
    : cfg_(cfg), schedule_(make_noise_schedule(cfg.T, cfg.schedule_kind)) {
    if (cfg_.channels < 1 || cfg_.d_text < 1 || cfg_.width < 1 || cfg_.layers < 1)
        throw SpecError("ToyUNet config dimensions must be positive");
    layers_.resize(static_cast<size_t>(cfg_.layers));
}

ToyUNet::ToyUNet(ToyUNetConfig cfg, uint64_t seed) : ToyUNet(cfg) {
    Rng rng(split_seed(seed, 0xBACB01EULL));
    const int C = cfg_.channels, F = cfg_.width, D = cfg_.d_text;
    const double in_scl = 1.0 / std::sqrt(9.0 * C);
    const double mid_scl = 1.0 / std::sqrt(9.0 * F);
    const double attn_q = 1.0 / std::sqrt(static_cast<double>(F));
    const double attn_kv = 1.0 / std::sqrt(static_cast<double>(D));
    conv_in_w = gaussian_tensor({F, C, 3, 3}, rng, in_scl);
    conv_in_b = Tensor::zeros({F});
    time_w = gaussian_tensor({kTimeFeatures, F}, rng, 1.0 / std::sqrt(8.0));
    for (Layer& l : layers_) {
        l.conv_w = gaussian_tensor({F, F, 3, 3}, rng, mid_scl);
        l.conv_b = Tensor::zeros({F});
        l.wq = gaussian_tensor({F, F}, rng, attn_q);
        l.wk = gaussian_tensor({D, F}, rng, attn_kv);
        l.wv = gaussian_tensor({D, F}, rng, attn_kv);
    }
    conv_out_w = gaussian_tensor({C, F, 3, 3}, rng, mid_scl);
    conv_out_b = Tensor::zeros({C});
    gains = Tensor::vector({1.0, 1.0});
}

ToyUNet ToyUNet::zeros(ToyUNetConfig cfg) {
    ToyUNet m(cfg);
    const int C = cfg.channels, F = cfg.width, D = cfg.d_text;
    m.conv_in_w = Tensor::zeros({F, C, 3, 3});
    m.conv_in_b = Tensor::zeros({F});
    m.time_w = Tensor::zeros({kTimeFeatures, F});
    for (Layer& l : m.layers_) {
        l.conv_w = Tensor::zeros({F, F, 3, 3});
        l.conv_b = Tensor::zeros({F});
        l.wq = Tensor::zeros({F, F});
        l.wk = Tensor::zeros({D, F});
        l.wv = Tensor::zeros({D, F});
    }
    m.conv_out_w = Tensor::zeros({C, F, 3, 3});
    m.conv_out_b = Tensor::zeros({C});
    m.gains = Tensor::zeros({2});
    return m;
}

ad::Var ToyUNet::predict(ad::Tape& tape, ad::Var z_t, int t,
                         const ConditioningBundle& conditioning) const {
    schedule_.check_index(t);
    if (z_t.value().ndim() != 3 || z_t.value().shape[0] != cfg_.channels)
        throw ShapeError("ToyUNet expects a (" + std::to_string(cfg_.channels) + ",H,W) latent");
    if (conditioning.d != cfg_.d_text)
        throw ConditioningError("conditioning dimension " + std::to_string(conditioning.d) +
                                " does not match model d_text " + std::to_string(cfg_.d_text));
    const int H = z_t.value().shape[1];
    const int W = z_t.value().shape[2];
    const int F = cfg_.width;
    const double inv_sqrt_f = 1.0 / std::sqrt(static_cast<double>(F));

    // Channel bias from time features.
    Tensor tf = time_features(t, cfg_.T);
    ad::Var t_bias = tape.matmul(tape.reshape(tape.constant(tf), {1, kTimeFeatures}),
                                 tape.constant(time_w));
    t_bias = tape.reshape(t_bias, {F});

    ad::Var h = tape.conv2d(z_t, tape.constant(conv_in_w), tape.constant(conv_in_b));
    h = tape.silu(tape.add_channel_bias(h, t_bias));

    for (int li = 0; li < cfg_.layers; ++li) {
        const Layer& l = layers_[static_cast<size_t>(li)];
        ad::Var cond = conditioning.sequences.size() == 1
                           ? conditioning.sequences[0]
                           : conditioning.sequences[static_cast<size_t>(li)];
        ad::Var hc = tape.silu(tape.conv2d(h, tape.constant(l.conv_w), tape.constant(l.conv_b)));
        // Cross-attention: every pixel attends over the conditioning rows.
        ad::Var hq = tape.transpose2d(tape.reshape(h, {F, H * W}));  // (HW,F)
        ad::Var q = tape.matmul(hq, tape.constant(l.wq));            // (HW,F)
        ad::Var k = tape.matmul(cond, tape.constant(l.wk));          // (n,F)
        ad::Var v = tape.matmul(cond, tape.constant(l.wv));          // (n,F)
        ad::Var attn = tape.softmax_rows(tape.scale(tape.matmul_nt(q, k), inv_sqrt_f));
        ad::Var mixed = tape.matmul(attn, v);                        // (HW,F)
        ad::Var bias = tape.reshape(tape.transpose2d(mixed), {F, H, W});
        h = tape.add(hc, bias);
    }

    ad::Var x0 = tape.conv2d(h, tape.constant(conv_out_w), tape.constant(conv_out_b));

    const double sa = schedule_.sqrt_alpha_bar(t);
    const double sb = schedule_.sqrt_one_minus_alpha_bar(t);
    ad::Var skip = tape.scale(z_t, gains.data[0] / sb);
    ad::Var pull = tape.scale(x0, gains.data[1] * sa / sb);
    return tape.sub(skip, pull);
}

std::vector<std::pair<std::string, const Tensor*>> ToyUNet::parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("conv_in/w", &conv_in_w);
    out.emplace_back("conv_in/b", &conv_in_b);
    out.emplace_back("time/w", &time_w);
    for (size_t li = 0; li < layers_.size(); ++li) {
        const std::string p = "layer" + std::to_string(li) + "/";
        out.emplace_back(p + "conv/w", &layers_[li].conv_w);
        out.emplace_back(p + "conv/b", &layers_[li].conv_b);
        out.emplace_back(p + "attn/wq", &layers_[li].wq);
        out.emplace_back(p + "attn/wk", &layers_[li].wk);
        out.emplace_back(p + "attn/wv", &layers_[li].wv);
    }
    out.emplace_back("conv_out/w", &conv_out_w);
    out.emplace_back("conv_out/b", &conv_out_b);
    out.emplace_back("gains", &gains);
    return out;
}

Archive make_backbone_archive(const ToyUNet& model) {
    Archive a;
    a.meta["kind"] = "backbone";
    a.meta["channels"] = model.cfg_.channels;
    a.meta["d_text"] = model.cfg_.d_text;
    a.meta["width"] = model.cfg_.width;
    a.meta["layers"] = model.cfg_.layers;
    a.meta["schedule"] = {{"T", model.cfg_.T}, {"kind", model.cfg_.schedule_kind}};
    for (const auto& [name, tensor] : model.parameters()) a.put(name, *tensor);
    return a;
}

ToyUNet load_backbone_archive(const Archive& archive) {
    if (!archive.meta.contains("kind") || archive.meta["kind"] != "backbone")
        throw FormatError("archive is not a backbone checkpoint");
    ToyUNetConfig cfg;
    cfg.channels = archive.meta.at("channels").get<int>();
    cfg.d_text = archive.meta.at("d_text").get<int>();
    cfg.width = archive.meta.at("width").get<int>();
    cfg.layers = archive.meta.at("layers").get<int>();
    cfg.T = archive.meta.at("schedule").at("T").get<int>();
    cfg.schedule_kind = archive.meta.at("schedule").at("kind").get<std::string>();
    ToyUNet m(cfg);
    m.conv_in_w = archive.get("conv_in/w");
    m.conv_in_b = archive.get("conv_in/b");
    m.time_w = archive.get("time/w");
    for (size_t li = 0; li < m.layers_.size(); ++li) {
        const std::string p = "layer" + std::to_string(li) + "/";
        m.layers_[li].conv_w = archive.get(p + "conv/w");
        m.layers_[li].conv_b = archive.get(p + "conv/b");
        m.layers_[li].wq = archive.get(p + "attn/wq");
        m.layers_[li].wk = archive.get(p + "attn/wk");
        m.layers_[li].wv = archive.get(p + "attn/wv");
    }
    m.conv_out_w = archive.get("conv_out/w");
    m.conv_out_b = archive.get("conv_out/b");
    m.gains = archive.get("gains");
    return m;
}

std::vector<int> sample_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw SpecError("sampler steps must lie in [1, T]; got " + std::to_string(steps));
    // Trailing spacing: the grid always starts at T-1, so one step denoises
    // from full noise in a single jump.
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i)
        ts[static_cast<size_t>(i)] = static_cast<int>(
            static_cast<int64_t>(steps - i) * static_cast<int64_t>(T) / steps - 1);
    return ts;
}

Tensor sample(ad::Tape& tape, const EpsilonPredictor& model,
              const ConditioningBundle& conditioning, const std::vector<int>& latent_shape,
              const SampleOptions& options) {
    if (options.guidance != 1.0 && options.uncond == nullptr)
        throw SpecError("guidance != 1 requires an unconditional bundle");
    const ConditioningProvider cond = [&](ad::Tape&, int) { return conditioning; };
    if (options.uncond != nullptr) {
        const ConditioningBundle& uncond_bundle = *options.uncond;
        const ConditioningProvider uncond = [&](ad::Tape&, int) { return uncond_bundle; };
        return sample(tape, model, cond, latent_shape, options, &uncond);
    }
    return sample(tape, model, cond, latent_shape, options, nullptr);
}

Tensor sample(ad::Tape& tape, const EpsilonPredictor& model,
              const ConditioningProvider& conditioning, const std::vector<int>& latent_shape,
              const SampleOptions& options, const ConditioningProvider* uncond) {
    const NoiseSchedule& sched = model.schedule();
    const std::vector<int> ts = sample_timesteps(sched.T, options.steps);
    const bool guided = options.guidance != 1.0;
    if (guided && uncond == nullptr)
        throw SpecError("guidance != 1 requires an unconditional bundle");

    Rng rng(options.seed);
    Tensor z = gaussian_latent(latent_shape, rng);

    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        ad::Var zv = tape.constant(z);
        Tensor eps = predict_eps(tape, model, zv, t, conditioning(tape, t)).value();
        if (guided) {
            const Tensor eps_u = predict_eps(tape, model, zv, t, (*uncond)(tape, t)).value();
            for (int64_t j = 0; j < eps.size(); ++j)
                eps.data[j] = eps_u.data[j] + options.guidance * (eps.data[j] - eps_u.data[j]);
        }
        const double sa = sched.sqrt_alpha_bar(t);
        const double sb = sched.sqrt_one_minus_alpha_bar(t);
        const double abar_prev =
            i + 1 < ts.size() ? sched.alpha_bar[static_cast<size_t>(ts[i + 1])] : 1.0;
        const double sa_p = std::sqrt(abar_prev);
        const double sb_p = std::sqrt(1.0 - abar_prev);
        // DDIM (eta=0): move to the predicted x0, then re-noise deterministically.
        for (int64_t j = 0; j < z.size(); ++j) {
            const double x0 = (z.data[j] - sb * eps.data[j]) / sa;
            z.data[j] = sa_p * x0 + sb_p * eps.data[j];
        }
    }
    if (!z.all_finite()) throw NonFiniteError("sampler produced non-finite values");
    return z;
}

}  // namespace personalize
