#pragma once

#include <cstdint>
#include <vector>

#include "efdit/network.hpp"
#include "efdit/spectral.hpp"
#include "efdit/tensor.hpp"

namespace efdit {

// Linear-beta DDPM schedule. Index convention: t runs 1..T, alpha_bar[0] = 1,
// so the posterior variance at t = 1 is exactly zero.
struct NoiseSchedule {
    int t_count = 0;
    std::vector<double> beta;       // beta[0] unused
    std::vector<double> alpha;      // alpha[t] = 1 - beta[t]
    std::vector<double> alpha_bar;  // alpha_bar[t] = prod_{s<=t} alpha[s]

    static NoiseSchedule linear(int t_count, double beta_start = 1e-4, double beta_end = 0.02);

    void check_t(int t) const;
    double posterior_sigma2(int t) const;
    // mu = coef_x0(t) * x0 + coef_xt(t) * x_t
    double coef_x0(int t) const;
    double coef_xt(int t) const;
};

struct GuidanceConfig {
    double gamma = 0.7;
    int t_split = 40;       // perceptual stage: t <= t_split
    double w_sub = 1.0;
    double w_super = 1.0;
    double d0 = 4.0;        // filter cutoff, cycles
    int steps = 200;        // reverse transitions (== T for the classic chain)
};

struct LossConfig {
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double kl_temperature = 1.0;
    bool aux_all_steps = true;  // false: high/rec terms only for t <= t_split
};

// Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one t per
// batch row.
Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, const std::vector<int>& t,
                const Tensor& eps);

// x_{0|t} = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t); differentiable
// through eps_hat.
Tensor estimate_x0(const NoiseSchedule& ns, const Tensor& x_t, const std::vector<int>& t,
                   const Tensor& eps_hat);

// gamma * x0t (1 + high) + (1 - gamma) * low. Value-level (sampling path).
Tensor perceptual_refine(const Tensor& x0t, const BandFilters& filters, double gamma);

// One reverse transition t -> t-1 with the DDPM posterior; noise is ignored
// at t = 1 where the posterior variance vanishes.
Tensor posterior_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& x0_target, int t,
                      const Tensor& noise);

// Generalized transition t_hi -> t_lo for strided sampling; reduces exactly
// to posterior_step when t_lo == t_hi - 1.
Tensor posterior_step_between(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& x0_target,
                              int t_hi, int t_lo, const Tensor& noise);

// KL divergence between per-channel spatial softmax distributions of the two
// maps; mean over batch and channels. Differentiable in both inputs.
Tensor kl_feature(const Tensor& p_map, const Tensor& q_map, double temperature);

// Frequency-domain band pass as a differentiable op (the operator is linear
// and self-adjoint, so the pullback applies the same filter).
Tensor band_filter_tracked(const Tensor& x, const RadialFilter& filter);

struct Batch {
    Tensor x0;  // [B x H x W x C]
    std::vector<TieredCondition> conds;
};

struct LossResult {
    Tensor total;  // tracked scalar when the model ran tracked
    double l_org = 0.0;
    double l_high_pix = 0.0;
    double l_rec = 0.0;
};

// Draws t ~ U[1, T] and eps per batch row, runs the model with per-level
// condition dropout, and assembles total = l_org + lambda1 l_high + lambda2 l_rec.
LossResult loss_total(const DenoiserModel& model, const ParamLookup* tracked, const Batch& batch,
                      const NoiseSchedule& ns, const LossConfig& lc, const GuidanceConfig& gc,
                      Rng& rng, std::uint64_t attn_seed);

// Single-condition classifier-free guidance:
// eps = eps(x|null) + w (eps(x|c) - eps(x|null)). A zero scale skips the
// corresponding model evaluation entirely.
Tensor cfg_predict(const DenoiserModel& model, const Tensor& x_t, const std::vector<int>& t,
                   const std::vector<TieredCondition>& conds, double w, std::uint64_t attn_seed);

// Two-direction guidance: eps(x|null) + w_sub d_sub + w_super d_super, where
// each direction drops the other level.
Tensor tiered_cfg_predict(const DenoiserModel& model, const Tensor& x_t,
                          const std::vector<int>& t, const std::vector<TieredCondition>& conds,
                          double w_sub, double w_super, std::uint64_t attn_seed);

struct SampleTrace {
    std::vector<int> step;
    std::vector<double> hf_ratio, x0_min, x0_max;
};

// Plain DDPM sampling with single-condition guidance on the subclass.
Tensor ddpm_sample(const DenoiserModel& model, const NoiseSchedule& ns,
                   const std::vector<TieredCondition>& conds, double w, int steps, Rng& rng,
                   SampleTrace* trace = nullptr);

// Frequency-guided sampling: in the perceptual stage (t <= t_split) the
// posterior target is the refined estimate; outside it the raw x_{0|t}. The
// target is clamped to [-1, 1] in both stages.
Tensor guided_sample(const DenoiserModel& model, const NoiseSchedule& ns,
                     const GuidanceConfig& gc, const std::vector<TieredCondition>& conds,
                     Rng& rng, SampleTrace* trace = nullptr);

}  // namespace efdit
