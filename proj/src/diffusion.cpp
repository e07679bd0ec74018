#include "efdit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace efdit {

// ---- schedule ---------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int t_count, double beta_start, double beta_end) {
    if (t_count < 1) throw ConfigError("schedule needs at least one step");
    if (beta_start <= 0.0 || beta_end >= 1.0 || beta_end < beta_start) {
        throw ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule ns;
    ns.t_count = t_count;
    ns.beta.assign(static_cast<std::size_t>(t_count) + 1, 0.0);
    ns.alpha.assign(static_cast<std::size_t>(t_count) + 1, 1.0);
    ns.alpha_bar.assign(static_cast<std::size_t>(t_count) + 1, 1.0);
    for (int t = 1; t <= t_count; ++t) {
        const double frac = t_count == 1 ? 0.0
                                         : static_cast<double>(t - 1) /
                                               static_cast<double>(t_count - 1);
        ns.beta[static_cast<std::size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
        ns.alpha[static_cast<std::size_t>(t)] = 1.0 - ns.beta[static_cast<std::size_t>(t)];
        ns.alpha_bar[static_cast<std::size_t>(t)] =
            ns.alpha_bar[static_cast<std::size_t>(t - 1)] * ns.alpha[static_cast<std::size_t>(t)];
    }
    return ns;
}

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > t_count) {
        throw ContractError("timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(t_count) + "]");
    }
}

double NoiseSchedule::posterior_sigma2(int t) const {
    check_t(t);
    return (1.0 - alpha_bar[static_cast<std::size_t>(t - 1)]) /
           (1.0 - alpha_bar[static_cast<std::size_t>(t)]) * beta[static_cast<std::size_t>(t)];
}

double NoiseSchedule::coef_x0(int t) const {
    check_t(t);
    return std::sqrt(alpha_bar[static_cast<std::size_t>(t - 1)]) *
           beta[static_cast<std::size_t>(t)] / (1.0 - alpha_bar[static_cast<std::size_t>(t)]);
}

double NoiseSchedule::coef_xt(int t) const {
    check_t(t);
    return std::sqrt(alpha[static_cast<std::size_t>(t)]) *
           (1.0 - alpha_bar[static_cast<std::size_t>(t - 1)]) /
           (1.0 - alpha_bar[static_cast<std::size_t>(t)]);
}

// ---- forward / estimate -------------------------------------------------------

namespace {

std::vector<double> per_row(const NoiseSchedule& ns, const std::vector<int>& t,
                            double (*f)(double abar)) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        ns.check_t(t[i]);
        out[i] = f(ns.alpha_bar[static_cast<std::size_t>(t[i])]);
    }
    return out;
}

void check_batch_shape(const Tensor& x, const std::vector<int>& t, const char* tag) {
    if (x.rank() != 4) {
        throw DimError(std::string(tag) + ": expected [B x H x W x C], got " + shape_str(x.shape));
    }
    if (x.shape[0] != static_cast<std::int64_t>(t.size())) {
        throw ContractError(std::string(tag) + ": timestep count does not match the batch");
    }
}

}  // namespace

Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, const std::vector<int>& t,
                const Tensor& eps) {
    check_batch_shape(x0, t, "q_sample");
    if (eps.shape != x0.shape) {
        throw DimError("q_sample: noise shape " + shape_str(eps.shape) + " vs " +
                       shape_str(x0.shape));
    }
    const auto a = per_row(ns, t, [](double ab) { return std::sqrt(ab); });
    const auto b = per_row(ns, t, [](double ab) { return std::sqrt(1.0 - ab); });
    return add(scale_rows(x0, a), scale_rows(eps, b));
}

Tensor estimate_x0(const NoiseSchedule& ns, const Tensor& x_t, const std::vector<int>& t,
                   const Tensor& eps_hat) {
    check_batch_shape(x_t, t, "estimate_x0");
    if (eps_hat.shape != x_t.shape) {
        throw DimError("estimate_x0: prediction shape " + shape_str(eps_hat.shape) + " vs " +
                       shape_str(x_t.shape));
    }
    const auto inv_a = per_row(ns, t, [](double ab) {
        if (ab <= 0.0) throw NumericError("estimate_x0: alpha_bar is zero");
        return 1.0 / std::sqrt(ab);
    });
    const auto b_over_a = per_row(ns, t, [](double ab) {
        return std::sqrt(1.0 - ab) / std::sqrt(ab);
    });
    return sub(scale_rows(x_t, inv_a), scale_rows(eps_hat, b_over_a));
}

// ---- band filtering --------------------------------------------------------

namespace {

// Applies the mask image-by-image over a [B x H x W x C] batch (or a single
// [H x W x C] image).
Tensor apply_band_batched(const Tensor& x, const RadialFilter& filter) {
    if (x.rank() == 3) return apply_band(x, filter);
    if (x.rank() != 4) throw DimError("apply_band_batched: bad rank for " + shape_str(x.shape));
    const std::int64_t b = x.shape[0];
    const std::int64_t per = x.numel() / b;
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    Tensor img({x.shape[1], x.shape[2], x.shape[3]});
    for (std::int64_t i = 0; i < b; ++i) {
        std::copy_n(x.data.data() + i * per, per, img.data.data());
        Tensor f = apply_band(img, filter);
        std::copy_n(f.data.data(), per, out.data.data() + i * per);
    }
    return out;
}

}  // namespace

Tensor band_filter_tracked(const Tensor& x, const RadialFilter& filter) {
    Tensor value = apply_band_batched(x, filter);
    if (!x.tape) return value;
    const std::int64_t id = x.node;
    const RadialFilter flt = filter;
    std::vector<std::int64_t> shape = x.shape;
    return x.tape->track_custom("band_filter", {&x}, std::move(value),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (id < 0) return;
            Tensor g;
            g.shape = shape;
            g.data = dy;
            Tensor pulled = apply_band_batched(g, flt);
            auto& dx = t.grad_buffer(id);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += pulled.data[i];
        });
}

Tensor perceptual_refine(const Tensor& x0t, const BandFilters& filters, double gamma) {
    if (gamma < 0.0 || gamma > 1.0) throw ConfigError("gamma must lie in [0, 1]");
    const BandPair bands{apply_band_batched(x0t, filters.high),
                         apply_band_batched(x0t, filters.low)};
    Tensor out;
    out.shape = x0t.shape;
    out.data.assign(x0t.data.size(), 0.0);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double enhanced = x0t.data[i] * (1.0 + bands.high.data[i]);
        out.data[i] = gamma * enhanced + (1.0 - gamma) * bands.low.data[i];
    }
    return out;
}

// ---- posterior ---------------------------------------------------------------

Tensor posterior_step_between(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& x0_target,
                              int t_hi, int t_lo, const Tensor& noise) {
    ns.check_t(t_hi);
    if (t_lo < 0 || t_lo >= t_hi) {
        throw ContractError("posterior_step_between: need 0 <= t_lo < t_hi");
    }
    if (x_t.shape != x0_target.shape || x_t.shape != noise.shape) {
        throw DimError("posterior_step_between: shape mismatch");
    }
    const double abar_hi = ns.alpha_bar[static_cast<std::size_t>(t_hi)];
    const double abar_lo = ns.alpha_bar[static_cast<std::size_t>(t_lo)];
    const double beta_eff = 1.0 - abar_hi / abar_lo;
    const double denom = 1.0 - abar_hi;
    const double c_x0 = std::sqrt(abar_lo) * beta_eff / denom;
    const double c_xt = std::sqrt(abar_hi / abar_lo) * (1.0 - abar_lo) / denom;
    const double sigma = std::sqrt((1.0 - abar_lo) / denom * beta_eff);
    Tensor out;
    out.shape = x_t.shape;
    out.data.assign(x_t.data.size(), 0.0);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = c_x0 * x0_target.data[i] + c_xt * x_t.data[i] + sigma * noise.data[i];
    }
    return out;
}

Tensor posterior_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& x0_target, int t,
                      const Tensor& noise) {
    return posterior_step_between(ns, x_t, x0_target, t, t - 1, noise);
}

// ---- feature KL ---------------------------------------------------------------

Tensor kl_feature(const Tensor& p_map, const Tensor& q_map, double temperature) {
    if (temperature <= 0.0) throw ConfigError("kl_feature: temperature must be positive");
    if (p_map.shape != q_map.shape) {
        throw DimError("kl_feature: shape mismatch " + shape_str(p_map.shape) + " vs " +
                       shape_str(q_map.shape));
    }
    if (p_map.rank() != 3 && p_map.rank() != 4) {
        throw DimError("kl_feature: expected image or batch, got " + shape_str(p_map.shape));
    }
    const bool batched = p_map.rank() == 4;
    const std::int64_t b = batched ? p_map.shape[0] : 1;
    const std::int64_t h = p_map.shape[batched ? 1 : 0];
    const std::int64_t w = p_map.shape[batched ? 2 : 1];
    const std::int64_t c = p_map.shape[batched ? 3 : 2];
    const std::int64_t spatial = h * w;
    const std::int64_t slices = b * c;

    // log-softmax over spatial positions per (image, channel) slice
    std::vector<double> prob_p(p_map.data.size()), prob_q(p_map.data.size());
    std::vector<double> diff(p_map.data.size());  // logP - logQ
    std::vector<double> kl_slice(static_cast<std::size_t>(slices), 0.0);
    auto slice_logsoftmax = [&](const std::vector<double>& src, std::vector<double>& prob,
                                std::vector<double>& logp, std::int64_t bi, std::int64_t ci) {
        const std::int64_t base = bi * spatial * c + ci;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t s = 0; s < spatial; ++s) {
            mx = std::max(mx, src[static_cast<std::size_t>(base + s * c)] / temperature);
        }
        double z = 0.0;
        for (std::int64_t s = 0; s < spatial; ++s) {
            z += std::exp(src[static_cast<std::size_t>(base + s * c)] / temperature - mx);
        }
        const double lz = std::log(z) + mx;
        for (std::int64_t s = 0; s < spatial; ++s) {
            const std::size_t idx = static_cast<std::size_t>(base + s * c);
            logp[idx] = src[idx] / temperature - lz;
            prob[idx] = std::exp(logp[idx]);
        }
    };
    std::vector<double> logp(p_map.data.size()), logq(p_map.data.size());
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t ci = 0; ci < c; ++ci) {
            slice_logsoftmax(p_map.data, prob_p, logp, bi, ci);
            slice_logsoftmax(q_map.data, prob_q, logq, bi, ci);
            double kl = 0.0;
            const std::int64_t base = bi * spatial * c + ci;
            for (std::int64_t s = 0; s < spatial; ++s) {
                const std::size_t idx = static_cast<std::size_t>(base + s * c);
                diff[idx] = logp[idx] - logq[idx];
                kl += prob_p[idx] * diff[idx];
            }
            kl_slice[static_cast<std::size_t>(bi * c + ci)] = kl;
        }
    }
    double total = 0.0;
    for (double v : kl_slice) total += v;
    Tensor value = Tensor::scalar_of(total / static_cast<double>(slices));

    GradTape* tape = p_map.tape ? p_map.tape : q_map.tape;
    if (!tape) return value;
    const std::int64_t idp = p_map.tape ? p_map.node : -1;
    const std::int64_t idq = q_map.tape ? q_map.node : -1;
    const double inv_slices_tau = 1.0 / (static_cast<double>(slices) * temperature);
    return tape->track_custom("kl_feature",
        std::vector<const Tensor*>{&p_map, &q_map}, std::move(value),
        [=](const std::vector<double>& dy, GradTape& t) {
            const double g = dy[0] * inv_slices_tau;
            if (idp >= 0) {
                auto& dp = t.grad_buffer(idp);
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    for (std::int64_t ci = 0; ci < c; ++ci) {
                        const double kl = kl_slice[static_cast<std::size_t>(bi * c + ci)];
                        const std::int64_t base = bi * spatial * c + ci;
                        for (std::int64_t s = 0; s < spatial; ++s) {
                            const std::size_t idx = static_cast<std::size_t>(base + s * c);
                            dp[idx] += g * prob_p[idx] * (diff[idx] - kl);
                        }
                    }
                }
            }
            if (idq >= 0) {
                auto& dq = t.grad_buffer(idq);
                for (std::size_t i = 0; i < prob_p.size(); ++i) {
                    dq[i] += g * (prob_q[i] - prob_p[i]);
                }
            }
        });
}

// ---- training loss -------------------------------------------------------------

LossResult loss_total(const DenoiserModel& model, const ParamLookup* tracked, const Batch& batch,
                      const NoiseSchedule& ns, const LossConfig& lc, const GuidanceConfig& gc,
                      Rng& rng, std::uint64_t attn_seed) {
    const std::int64_t b = batch.x0.shape[0];
    if (static_cast<std::int64_t>(batch.conds.size()) != b) {
        throw ContractError("loss_total: condition count does not match the batch");
    }
    std::vector<int> t(static_cast<std::size_t>(b));
    for (auto& ti : t) ti = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(ns.t_count)));
    Tensor eps = Tensor::randn(batch.x0.shape, rng);
    std::vector<std::pair<bool, bool>> drops(static_cast<std::size_t>(b));
    for (auto& d : drops) {
        d.first = rng.uniform() < model.config().drop_prob_sub;
        d.second = rng.uniform() < model.config().drop_prob_super;
    }

    Tensor x_t = q_sample(ns, batch.x0, t, eps);
    Tensor eps_hat = model.forward(x_t, t, batch.conds, drops, attn_seed, tracked);
    Tensor l_org = mse(eps_hat, eps);
    Tensor x0t = estimate_x0(ns, x_t, t, eps_hat);

    // optional restriction of the auxiliary terms to the perceptual stage
    Tensor x0t_sel = x0t;
    bool have_rows = true;
    if (!lc.aux_all_steps) {
        std::vector<int> keep;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] <= gc.t_split) keep.push_back(static_cast<int>(i));
        }
        have_rows = !keep.empty();
        if (have_rows) {
            const std::int64_t per = x0t.numel() / b;
            Tensor flat = reshape(x0t, {b, per});
            x0t_sel = reshape(take_rows(flat, keep),
                              {static_cast<std::int64_t>(keep.size()), batch.x0.shape[1],
                               batch.x0.shape[2], batch.x0.shape[3]});
        }
    }

    LossResult res;
    Tensor total = l_org;
    if (have_rows) {
        const BandFilters filters =
            make_band_filters(gc.d0, batch.x0.shape[1], batch.x0.shape[2]);
        Tensor high = band_filter_tracked(x0t_sel, filters.high);
        Tensor enhanced = add(x0t_sel, mul(x0t_sel, high));
        Tensor l_high = kl_feature(enhanced, x0t_sel, lc.kl_temperature);
        Tensor low = band_filter_tracked(x0t_sel, filters.low);
        Tensor blend = add(scale(enhanced, gc.gamma), scale(low, 1.0 - gc.gamma));
        Tensor l_rec = kl_feature(blend, x0t_sel, lc.kl_temperature);
        total = add(total, add(scale(l_high, lc.lambda1), scale(l_rec, lc.lambda2)));
        res.l_high_pix = l_high.scalar();
        res.l_rec = l_rec.scalar();
    }
    res.l_org = l_org.scalar();
    res.total = total;
    return res;
}

// ---- guidance -----------------------------------------------------------------

namespace {

std::vector<TieredCondition> null_conds(std::size_t n) {
    return std::vector<TieredCondition>(n, TieredCondition{});
}

void accumulate_direction(Tensor& out, const Tensor& eps_cond, const Tensor& eps_null, double w) {
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += w * (eps_cond.data[i] - eps_null.data[i]);
    }
}

}  // namespace

Tensor cfg_predict(const DenoiserModel& model, const Tensor& x_t, const std::vector<int>& t,
                   const std::vector<TieredCondition>& conds, double w, std::uint64_t attn_seed) {
    // every branch shares one attention seed, so a null condition yields an
    // exactly-zero guidance direction
    Tensor eps_null = model.forward(x_t, t, null_conds(conds.size()), {}, attn_seed);
    if (w == 0.0) return eps_null;
    Tensor eps_cond = model.forward(x_t, t, conds, {}, attn_seed);
    Tensor out = eps_null;
    accumulate_direction(out, eps_cond, eps_null, w);
    return out;
}

Tensor tiered_cfg_predict(const DenoiserModel& model, const Tensor& x_t,
                          const std::vector<int>& t, const std::vector<TieredCondition>& conds,
                          double w_sub, double w_super, std::uint64_t attn_seed) {
    for (const TieredCondition& c : conds) {
        if (c.subclass == TieredCondition::kNull && c.superclass == TieredCondition::kNull) {
            throw ContractError("tiered_cfg_predict: both condition levels are null");
        }
    }
    Tensor eps_null = model.forward(x_t, t, null_conds(conds.size()), {}, attn_seed);
    Tensor out = eps_null;
    if (w_sub != 0.0) {
        std::vector<TieredCondition> sub_only = conds;
        for (auto& c : sub_only) c.superclass = TieredCondition::kNull;
        Tensor eps_sub = model.forward(x_t, t, sub_only, {}, attn_seed);
        accumulate_direction(out, eps_sub, eps_null, w_sub);
    }
    if (w_super != 0.0) {
        std::vector<TieredCondition> super_only = conds;
        for (auto& c : super_only) c.subclass = TieredCondition::kNull;
        Tensor eps_super = model.forward(x_t, t, super_only, {}, attn_seed);
        accumulate_direction(out, eps_super, eps_null, w_super);
    }
    return out;
}

// ---- sampling -------------------------------------------------------------------

namespace {

std::vector<int> step_subsequence(int t_count, int steps) {
    if (steps < 1 || steps > t_count) {
        throw ConfigError("sampler steps must lie in [1, T]");
    }
    // tau[0] = 0 < tau[1] < ... < tau[steps] = T, evenly spaced
    std::vector<int> tau(static_cast<std::size_t>(steps) + 1, 0);
    for (int i = 1; i <= steps; ++i) {
        tau[static_cast<std::size_t>(i)] = static_cast<int>(
            std::llround(static_cast<double>(t_count) * i / static_cast<double>(steps)));
        if (tau[static_cast<std::size_t>(i)] <= tau[static_cast<std::size_t>(i - 1)]) {
            tau[static_cast<std::size_t>(i)] = tau[static_cast<std::size_t>(i - 1)] + 1;
        }
    }
    tau[static_cast<std::size_t>(steps)] = t_count;
    return tau;
}

void check_finite(const Tensor& x, int t_step) {
    for (double v : x.data) {
        if (!std::isfinite(v)) {
            throw NumericError("sampler: non-finite value at step t=" + std::to_string(t_step));
        }
    }
}

void clamp_unit(Tensor& x) {
    for (double& v : x.data) v = std::clamp(v, -1.0, 1.0);
}

void record_trace(SampleTrace* trace, int t_step, const Tensor& x0_target_preclamp,
                  const RadialFilter& high) {
    if (!trace) return;
    const std::int64_t b = x0_target_preclamp.shape[0];
    const std::int64_t per = x0_target_preclamp.numel() / b;
    double ratio = 0.0;
    double mn = std::numeric_limits<double>::infinity();
    double mx = -std::numeric_limits<double>::infinity();
    Tensor img({x0_target_preclamp.shape[1], x0_target_preclamp.shape[2],
                x0_target_preclamp.shape[3]});
    for (std::int64_t i = 0; i < b; ++i) {
        std::copy_n(x0_target_preclamp.data.data() + i * per, per, img.data.data());
        ratio += high_freq_energy_ratio(img, high);
    }
    for (double v : x0_target_preclamp.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    trace->step.push_back(t_step);
    trace->hf_ratio.push_back(ratio / static_cast<double>(b));
    trace->x0_min.push_back(mn);
    trace->x0_max.push_back(mx);
}

}  // namespace

Tensor ddpm_sample(const DenoiserModel& model, const NoiseSchedule& ns,
                   const std::vector<TieredCondition>& conds, double w, int steps, Rng& rng,
                   SampleTrace* trace) {
    const ModelConfig& mc = model.config();
    const std::int64_t b = static_cast<std::int64_t>(conds.size());
    const auto tau = step_subsequence(ns.t_count, steps);
    const std::uint64_t attn_base = rng.fork(0xA77).state;
    const RadialFilter high = make_filter(FilterKind::high_pass,
                                          static_cast<double>(std::min(mc.height, mc.width)) / 8.0,
                                          mc.height, mc.width);

    Tensor x = Tensor::randn({b, mc.height, mc.width, mc.channels}, rng);
    Tensor zero = Tensor::zeros(x.shape);
    for (int i = steps; i >= 1; --i) {
        const int t_hi = tau[static_cast<std::size_t>(i)];
        const int t_lo = tau[static_cast<std::size_t>(i - 1)];
        const std::vector<int> t_vec(static_cast<std::size_t>(b), t_hi);
        Tensor eps_hat = cfg_predict(model, x, t_vec, conds, w,
                                     Rng::mix(attn_base, static_cast<std::uint64_t>(t_hi)));
        Tensor x0_target = estimate_x0(ns, x, t_vec, eps_hat);
        record_trace(trace, t_hi, x0_target, high);
        clamp_unit(x0_target);
        Tensor noise = t_lo > 0 ? Tensor::randn(x.shape, rng) : zero;
        x = posterior_step_between(ns, x, x0_target, t_hi, t_lo, noise);
        check_finite(x, t_hi);
    }
    return x;
}

Tensor guided_sample(const DenoiserModel& model, const NoiseSchedule& ns,
                     const GuidanceConfig& gc, const std::vector<TieredCondition>& conds,
                     Rng& rng, SampleTrace* trace) {
    const ModelConfig& mc = model.config();
    const std::int64_t b = static_cast<std::int64_t>(conds.size());
    const auto tau = step_subsequence(ns.t_count, gc.steps);
    const std::uint64_t attn_base = rng.fork(0xA77).state;
    const BandFilters filters = make_band_filters(gc.d0, mc.height, mc.width);

    Tensor x = Tensor::randn({b, mc.height, mc.width, mc.channels}, rng);
    Tensor zero = Tensor::zeros(x.shape);
    for (int i = gc.steps; i >= 1; --i) {
        const int t_hi = tau[static_cast<std::size_t>(i)];
        const int t_lo = tau[static_cast<std::size_t>(i - 1)];
        const std::vector<int> t_vec(static_cast<std::size_t>(b), t_hi);
        Tensor eps_hat =
            tiered_cfg_predict(model, x, t_vec, conds, gc.w_sub, gc.w_super,
                               Rng::mix(attn_base, static_cast<std::uint64_t>(t_hi)));
        Tensor x0_target = estimate_x0(ns, x, t_vec, eps_hat);
        if (t_hi <= gc.t_split) {
            x0_target = perceptual_refine(x0_target, filters, gc.gamma);
        }
        record_trace(trace, t_hi, x0_target, filters.high);
        clamp_unit(x0_target);
        Tensor noise = t_lo > 0 ? Tensor::randn(x.shape, rng) : zero;
        x = posterior_step_between(ns, x, x0_target, t_hi, t_lo, noise);
        check_finite(x, t_hi);
    }
    return x;
}

}  // namespace efdit
