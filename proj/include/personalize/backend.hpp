#pragma once

#include <functional>
#include <string>
#include <vector>

#include "personalize/archive.hpp"
#include "personalize/autodiff.hpp"
#include "personalize/rng.hpp"
#include "personalize/embedders.hpp"
#include "personalize/image.hpp"
#include "personalize/tensor.hpp"

namespace personalize {

struct NoiseSchedule {
    int T = 0;
    std::string kind;
    std::vector<double> beta;       // (0,1)
    std::vector<double> alpha_bar;  // strictly decreasing, (0,1)

    double sqrt_alpha_bar(int t) const;
    double sqrt_one_minus_alpha_bar(int t) const;
    void check_index(int t) const;  // IndexError
};

NoiseSchedule make_noise_schedule(int T, const std::string& kind);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor add_noise(const Tensor& z0, const Tensor& eps, int t, const NoiseSchedule& schedule);

// Standard-normal latent with a fixed element order, so draws are
// reproducible across platforms.
Tensor gaussian_latent(const std::vector<int>& shape, Rng& rng);

class EpsilonPredictor {
public:
    virtual ~EpsilonPredictor() = default;
    virtual int layer_count() const = 0;
    virtual const NoiseSchedule& schedule() const = 0;
    // Tape-level forward pass; conditioning rows stay differentiable while
    // model parameters enter as constants (the backbone is frozen).
    virtual ad::Var predict(ad::Tape& tape, ad::Var z_t, int t,
                            const ConditioningBundle& conditioning) const = 0;
};

// Validating wrapper: checks timestep range, layer-sequence count, and the
// conditioning dimension before dispatching to the model.
ad::Var predict_eps(ad::Tape& tape, const EpsilonPredictor& model, ad::Var z_t, int t,
                    const ConditioningBundle& conditioning);
Tensor predict_eps(const EpsilonPredictor& model, const Tensor& z_t, int t,
                   const ConditioningBundle& conditioning);

struct ToyUNetConfig {
    int channels = 3;
    int d_text = 16;  // conditioning embedding dimension
    int width = 16;   // feature channels
    int layers = 4;   // cross-attention layers L
    int T = 100;
    std::string schedule_kind = "linear";
};

// Small convolutional x0-predictor with cross-attention to the conditioning
// sequence at each of L layers, re-expressed as an epsilon prediction:
//   eps_hat = g1 * z_t / sqrt(1-abar) - g2 * sqrt(abar)/sqrt(1-abar) * x0_net
// With unit gains this is the exact eps<->x0 change of variables, so driving
// x0_net toward z0 drives the diffusion loss toward zero; with every
// parameter (gains included) zero the output is identically zero.
class ToyUNet final : public EpsilonPredictor {
public:
    ToyUNet(ToyUNetConfig cfg, uint64_t seed);
    static ToyUNet zeros(ToyUNetConfig cfg);

    int layer_count() const override { return cfg_.layers; }
    const NoiseSchedule& schedule() const override { return schedule_; }
    const ToyUNetConfig& config() const { return cfg_; }

    ad::Var predict(ad::Tape& tape, ad::Var z_t, int t,
                    const ConditioningBundle& conditioning) const override;

    // (name, tensor) pairs in a stable order; names key the checkpoint.
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;

    friend Archive make_backbone_archive(const ToyUNet& model);
    friend ToyUNet load_backbone_archive(const Archive& archive);

private:
    explicit ToyUNet(ToyUNetConfig cfg);  // uninitialized parameters

    struct Layer {
        Tensor conv_w, conv_b;  // (F,F,3,3), (F)
        Tensor wq, wk, wv;      // (F,F), (d_text,F), (d_text,F)
    };

    ToyUNetConfig cfg_;
    NoiseSchedule schedule_;
    Tensor conv_in_w, conv_in_b;    // (F,C,3,3), (F)
    Tensor time_w;                  // (8,F): sinusoidal time features -> channel bias
    std::vector<Layer> layers_;
    Tensor conv_out_w, conv_out_b;  // (C,F,3,3), (C)
    Tensor gains;                   // (2): g1, g2
};

Archive make_backbone_archive(const ToyUNet& model);
ToyUNet load_backbone_archive(const Archive& archive);

class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual Tensor encode(const Image& image) const = 0;
    virtual Image decode(const Tensor& latent) const = 0;
};

// Toy codec: pixel space is the latent space.
class IdentityCodec final : public LatentCodec {
public:
    Tensor encode(const Image& image) const override { return image.to_tensor(); }
    Image decode(const Tensor& latent) const override { return Image::from_tensor(latent); }
};

struct SampleOptions {
    int steps = 20;
    uint64_t seed = 0;
    double guidance = 1.0;                        // 1.0 = off
    const ConditioningBundle* uncond = nullptr;  // required when guidance != 1.0
};

// Deterministic DDIM (eta = 0) loop over a trailing timestep grid. The
// conditioning bundle must live on `tape`.
Tensor sample(ad::Tape& tape, const EpsilonPredictor& model,
              const ConditioningBundle& conditioning, const std::vector<int>& latent_shape,
              const SampleOptions& options);

// Same loop with per-timestep conditioning: the provider is invoked once per
// DDIM step. Timestep-dependent embeddings (NeTI) need this; a constant
// provider reproduces the fixed-bundle overload exactly. When guidance != 1,
// `uncond` must be non-null (SampleOptions::uncond is ignored here).
using ConditioningProvider = std::function<ConditioningBundle(ad::Tape&, int t)>;
Tensor sample(ad::Tape& tape, const EpsilonPredictor& model,
              const ConditioningProvider& conditioning, const std::vector<int>& latent_shape,
              const SampleOptions& options, const ConditioningProvider* uncond = nullptr);

// The descending timestep grid used by sample(): steps=1 visits T-1 only.
std::vector<int> sample_timesteps(int T, int steps);

}  // namespace personalize
