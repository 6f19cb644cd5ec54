#pragma once

#include <string>
#include <utility>
#include <vector>

#include "personalize/autodiff.hpp"
#include "personalize/tensor.hpp"

namespace personalize {

struct LossWeights {
    double w_s = 1.0;
    double w_b = 1.0;
    double w_i = 1.0;
    double w_c_max = 0.1;
    double tau = 0.07;

    void check() const;  // SpecError on invariant breach
};

enum class ScheduleKind { kZero, kOne, kLinear, kExponential, kSigmoid, kCosine };

ScheduleKind schedule_kind_from_name(const std::string& name);  // SpecError
std::string schedule_kind_name(ScheduleKind kind);
// All schedule kinds, in the fixed order used by reports and ablations.
const std::vector<ScheduleKind>& all_schedule_kinds();

struct WeightSchedule {
    ScheduleKind kind = ScheduleKind::kZero;
    int total_steps = 1;
    double k = 0.0;  // shape parameter; used by sigmoid (default 10) and exponential (default 5)
};

// Fills the kind-appropriate default shape parameter.
WeightSchedule make_weight_schedule(ScheduleKind kind, int total_steps);
WeightSchedule make_weight_schedule(const std::string& kind, int total_steps);

// Contrastive weight at `step` in [0, S]. Ramps rise from exactly 0 at step 0
// to exactly w_c_max at step S.
double schedule_weight(int step, const WeightSchedule& schedule, double w_c_max);

// ||mask o (eps - eps_hat)||^2 / (#masked elements). `normalize=false` keeps
// the raw squared norm (the Eq. 4 form), which makes the subject/background
// decomposition identity exact. An all-zero mask yields 0 and sets
// *empty_mask instead of throwing.
ad::Var masked_mse(ad::Tape& tape, ad::Var eps, ad::Var eps_hat, const Mask& mask,
                   bool normalize = true, bool* empty_mask = nullptr);
double masked_mse(const Tensor& eps, const Tensor& eps_hat, const Mask& mask,
                  bool normalize = true, bool* empty_mask = nullptr);

// Plain MSE over all elements.
ad::Var joint_loss(ad::Tape& tape, ad::Var eps, ad::Var eps_hat);
double joint_loss(const Tensor& eps, const Tensor& eps_hat);

// InfoNCE over explicit positive/negative pairs:
//   -log( sum_P e^{s} / (sum_P e^{s} + sum_N e^{s}) ),  s(a,b) = sim(a,b)/tau
// computed as logsumexp(P u N) - logsumexp(P). sim is the dot product of
// unit-normalized vectors unless normalize=false (raw dot products).
ad::Var info_nce(ad::Tape& tape, const std::vector<std::pair<ad::Var, ad::Var>>& positives,
                 const std::vector<std::pair<ad::Var, ad::Var>>& negatives, double tau = 0.07,
                 bool normalize = true);
double info_nce(const std::vector<std::pair<Tensor, Tensor>>& positives,
                const std::vector<std::pair<Tensor, Tensor>>& negatives, double tau = 0.07,
                bool normalize = true);

struct LossBreakdown {
    double l_sub = 0.0;
    double l_bg = 0.0;
    double l_joint = 0.0;
    double l_infonce = 0.0;
    double total = 0.0;
    double w_c_effective = 0.0;
};

// total = w_s*l_sub + w_b*l_bg + w_i*l_joint + schedule_weight(step)*l_infonce
LossBreakdown total_loss(double l_sub, double l_bg, double l_joint, double l_infonce,
                         const LossWeights& weights, int step, const WeightSchedule& schedule);

// Tape-level weighted sum for the training step. `l_infonce` may be an
// invalid Var when the contrastive term is skipped (w_c_effective == 0); the
// term then never enters the graph, so a zero schedule is bitwise identical
// to training without the contrastive loss.
ad::Var weighted_total(ad::Tape& tape, ad::Var l_sub, ad::Var l_bg, ad::Var l_joint,
                       ad::Var l_infonce, const LossWeights& weights, double w_c_effective);

}  // namespace personalize
