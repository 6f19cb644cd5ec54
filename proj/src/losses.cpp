#include "personalize/losses.hpp"

#include <cmath>

#include "personalize/errors.hpp"

namespace personalize {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_mask_resolution(const Tensor& t, const Mask& mask) {
    int h = 0, w = 0;
    if (t.ndim() == 3) {
        h = t.shape[1];
        w = t.shape[2];
    } else if (t.ndim() == 2) {
        h = t.shape[0];
        w = t.shape[1];
    } else {
        throw ShapeError("masked_mse expects a (C,H,W) or (H,W) tensor, got " +
                         shape_string(t.shape));
    }
    if (h != mask.height || w != mask.width)
        throw ShapeError("mask resolution " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " does not match latent " +
                         std::to_string(h) + "x" + std::to_string(w));
}

ad::Var pair_logit(ad::Tape& tape, const std::pair<ad::Var, ad::Var>& pair, double tau,
                   bool normalize, int64_t dim) {
    const ad::Var& a = pair.first;
    const ad::Var& b = pair.second;
    if (a.value().ndim() != 1 || b.value().ndim() != 1 || a.value().size() != dim ||
        b.value().size() != dim)
        throw DimensionError("InfoNCE pair vectors must share one dimension");
    ad::Var av = normalize ? tape.normalize(a) : a;
    ad::Var bv = normalize ? tape.normalize(b) : b;
    return tape.scale(tape.dot(av, bv), 1.0 / tau);
}

}  // namespace

void LossWeights::check() const {
    for (double v : {w_s, w_b, w_i, w_c_max, tau})
        if (!std::isfinite(v)) throw SpecError("loss weights must be finite");
    if (w_s < 0 || w_b < 0 || w_i < 0 || w_c_max < 0)
        throw SpecError("loss weights must be nonnegative");
    if (tau <= 0) throw SpecError("tau must be positive");
}

ScheduleKind schedule_kind_from_name(const std::string& name) {
    if (name == "zero") return ScheduleKind::kZero;
    if (name == "one") return ScheduleKind::kOne;
    if (name == "linear") return ScheduleKind::kLinear;
    if (name == "exponential") return ScheduleKind::kExponential;
    if (name == "sigmoid") return ScheduleKind::kSigmoid;
    if (name == "cosine") return ScheduleKind::kCosine;
    throw SpecError("unknown weight schedule kind: " + name);
}

std::string schedule_kind_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::kZero: return "zero";
        case ScheduleKind::kOne: return "one";
        case ScheduleKind::kLinear: return "linear";
        case ScheduleKind::kExponential: return "exponential";
        case ScheduleKind::kSigmoid: return "sigmoid";
        case ScheduleKind::kCosine: return "cosine";
    }
    throw SpecError("unknown weight schedule kind");
}

const std::vector<ScheduleKind>& all_schedule_kinds() {
    static const std::vector<ScheduleKind> kinds = {
        ScheduleKind::kZero,    ScheduleKind::kOne,     ScheduleKind::kLinear,
        ScheduleKind::kExponential, ScheduleKind::kSigmoid, ScheduleKind::kCosine};
    return kinds;
}

WeightSchedule make_weight_schedule(ScheduleKind kind, int total_steps) {
    if (total_steps < 1) throw SpecError("weight schedule needs total_steps >= 1");
    WeightSchedule s;
    s.kind = kind;
    s.total_steps = total_steps;
    if (kind == ScheduleKind::kSigmoid) s.k = 10.0;
    if (kind == ScheduleKind::kExponential) s.k = 5.0;
    return s;
}

WeightSchedule make_weight_schedule(const std::string& kind, int total_steps) {
    return make_weight_schedule(schedule_kind_from_name(kind), total_steps);
}

double schedule_weight(int step, const WeightSchedule& schedule, double w_c_max) {
    const int S = schedule.total_steps;
    if (S < 1) throw SpecError("weight schedule needs total_steps >= 1");
    if (w_c_max < 0 || !std::isfinite(w_c_max)) throw SpecError("w_c_max must be finite and >= 0");
    if (step < 0 || step > S)
        throw IndexError("schedule step " + std::to_string(step) + " outside [0, " +
                         std::to_string(S) + "]");
    const double x = static_cast<double>(step) / static_cast<double>(S);
    switch (schedule.kind) {
        case ScheduleKind::kZero: return 0.0;
        case ScheduleKind::kOne: return w_c_max;
        case ScheduleKind::kLinear: return w_c_max * x;
        case ScheduleKind::kCosine: return w_c_max * 0.5 * (1.0 - std::cos(kPi * x));
        case ScheduleKind::kSigmoid: {
            const double k = schedule.k;
            if (k <= 0) throw SpecError("sigmoid schedule needs k > 0");
            auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
            const double lo = sig(-k / 2.0);
            const double hi = sig(k / 2.0);
            // Affine rescale: exactly 0 at step 0 and w_c_max at step S.
            return w_c_max * (sig(k * (x - 0.5)) - lo) / (hi - lo);
        }
        case ScheduleKind::kExponential: {
            const double k = schedule.k;
            if (k <= 0) throw SpecError("exponential schedule needs k > 0");
            return w_c_max * (1.0 - std::exp(-k * x)) / (1.0 - std::exp(-k));
        }
    }
    throw SpecError("unknown weight schedule kind");
}

ad::Var masked_mse(ad::Tape& tape, ad::Var eps, ad::Var eps_hat, const Mask& mask, bool normalize,
                   bool* empty_mask) {
    require_same_shape(eps.value(), eps_hat.value(), "masked_mse");
    check_mask_resolution(eps.value(), mask);
    const int64_t masked_pixels = mask.count();
    if (empty_mask != nullptr) *empty_mask = masked_pixels == 0;
    if (masked_pixels == 0) return tape.constant(Tensor::scalar(0.0));
    ad::Var diff = tape.mul_mask(tape.sub(eps, eps_hat), mask);
    ad::Var raw = tape.sum(tape.square(diff));
    if (!normalize) return raw;
    const int channels = eps.value().ndim() == 3 ? eps.value().shape[0] : 1;
    return tape.scale(raw, 1.0 / static_cast<double>(masked_pixels * channels));
}

double masked_mse(const Tensor& eps, const Tensor& eps_hat, const Mask& mask, bool normalize,
                  bool* empty_mask) {
    ad::Tape tape(false);
    return masked_mse(tape, tape.constant(eps), tape.constant(eps_hat), mask, normalize,
                      empty_mask)
        .value()
        .data[0];
}

ad::Var joint_loss(ad::Tape& tape, ad::Var eps, ad::Var eps_hat) {
    require_same_shape(eps.value(), eps_hat.value(), "joint_loss");
    return tape.mean(tape.square(tape.sub(eps, eps_hat)));
}

double joint_loss(const Tensor& eps, const Tensor& eps_hat) {
    ad::Tape tape(false);
    return joint_loss(tape, tape.constant(eps), tape.constant(eps_hat)).value().data[0];
}

ad::Var info_nce(ad::Tape& tape, const std::vector<std::pair<ad::Var, ad::Var>>& positives,
                 const std::vector<std::pair<ad::Var, ad::Var>>& negatives, double tau,
                 bool normalize) {
    if (positives.empty()) throw EmptyPositiveError("InfoNCE needs at least one positive pair");
    if (tau <= 0 || !std::isfinite(tau)) throw SpecError("tau must be positive");
    const int64_t dim = positives.front().first.value().size();
    std::vector<ad::Var> pos_logits;
    pos_logits.reserve(positives.size());
    for (const auto& p : positives) pos_logits.push_back(pair_logit(tape, p, tau, normalize, dim));
    std::vector<ad::Var> all_logits = pos_logits;
    for (const auto& n : negatives) all_logits.push_back(pair_logit(tape, n, tau, normalize, dim));
    ad::Var lse_all = tape.logsumexp(tape.stack_scalars(all_logits));
    ad::Var lse_pos = tape.logsumexp(tape.stack_scalars(pos_logits));
    return tape.sub(lse_all, lse_pos);
}

double info_nce(const std::vector<std::pair<Tensor, Tensor>>& positives,
                const std::vector<std::pair<Tensor, Tensor>>& negatives, double tau,
                bool normalize) {
    ad::Tape tape(false);
    std::vector<std::pair<ad::Var, ad::Var>> p, n;
    for (const auto& [a, b] : positives) p.emplace_back(tape.constant(a), tape.constant(b));
    for (const auto& [a, b] : negatives) n.emplace_back(tape.constant(a), tape.constant(b));
    return info_nce(tape, p, n, tau, normalize).value().data[0];
}

LossBreakdown total_loss(double l_sub, double l_bg, double l_joint, double l_infonce,
                         const LossWeights& weights, int step, const WeightSchedule& schedule) {
    weights.check();
    for (double v : {l_sub, l_bg, l_joint, l_infonce})
        if (!std::isfinite(v)) throw NonFiniteError("loss component is not finite");
    LossBreakdown out;
    out.l_sub = l_sub;
    out.l_bg = l_bg;
    out.l_joint = l_joint;
    out.l_infonce = l_infonce;
    out.w_c_effective = schedule_weight(step, schedule, weights.w_c_max);
    out.total = weights.w_s * l_sub + weights.w_b * l_bg + weights.w_i * l_joint +
                out.w_c_effective * l_infonce;
    if (!std::isfinite(out.total)) throw NonFiniteError("total loss is not finite");
    return out;
}

ad::Var weighted_total(ad::Tape& tape, ad::Var l_sub, ad::Var l_bg, ad::Var l_joint,
                       ad::Var l_infonce, const LossWeights& weights, double w_c_effective) {
    weights.check();
    std::vector<ad::Var> terms = {tape.scale(l_sub, weights.w_s), tape.scale(l_bg, weights.w_b),
                                  tape.scale(l_joint, weights.w_i)};
    if (l_infonce.valid() && w_c_effective != 0.0)
        terms.push_back(tape.scale(l_infonce, w_c_effective));
    return tape.add_scalars(terms);
}

}  // namespace personalize
