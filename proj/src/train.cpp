#include "efdit/train.hpp"

#include <cmath>
#include <sstream>

namespace efdit {

Trainer::Trainer(DenoiserModel& model, const Dataset& data, const NoiseSchedule& ns,
                 const LossConfig& lc, const GuidanceConfig& gc, const TrainSettings& ts,
                 FinetuneMode mode)
    : model_(model), data_(data), ns_(ns), lc_(lc), gc_(gc), ts_(ts), rng_(ts.seed) {
    if (data_.samples.empty()) throw ContractError("trainer: empty dataset");
    if (ts_.batch < 1) throw ConfigError("trainer: batch must be positive");
    selection_ = finetune_mask(model_.params(), mode);
    for (const std::string& name : selection_.names) {
        const Parameter* p = model_.params().find(name);
        Slot slot;
        slot.m1.assign(p->value.data.size(), 0.0);
        slot.m2.assign(p->value.data.size(), 0.0);
        slots_.emplace(name, std::move(slot));
    }
}

StepLog Trainer::step() {
    ++step_count_;
    const std::int64_t b = ts_.batch;
    const DatasetSpec& spec = data_.spec;

    Batch batch;
    batch.x0 = Tensor({b, spec.height, spec.width, spec.channels});
    batch.conds.resize(static_cast<std::size_t>(b));
    const std::int64_t per = spec.height * spec.width * spec.channels;
    for (std::int64_t i = 0; i < b; ++i) {
        const auto pick = rng_.below(data_.samples.size());
        const Sample& s = data_.samples[pick];
        std::copy(s.image.data.begin(), s.image.data.end(), batch.x0.data.begin() + i * per);
        batch.conds[static_cast<std::size_t>(i)] = s.label;
    }

    GradTape tape;
    ParamLookup tracked;
    tracked.reserve(selection_.names.size());
    for (const std::string& name : selection_.names) {
        tracked.emplace(name, tape.watch(model_.params().find(name)->value));
    }

    const std::uint64_t attn_seed = Rng::mix(ts_.seed, static_cast<std::uint64_t>(step_count_));
    LossResult res = loss_total(model_, &tracked, batch, ns_, lc_, gc_, rng_, attn_seed);
    tape.backward(res.total);

    // optional global-norm clipping
    double scale_grad = 1.0;
    if (ts_.grad_clip > 0.0) {
        double norm2 = 0.0;
        for (const std::string& name : selection_.names) {
            const Tensor g = tape.grad(tracked.at(name));
            for (double v : g.data) norm2 += v * v;
        }
        const double norm = std::sqrt(norm2);
        if (norm > ts_.grad_clip) scale_grad = ts_.grad_clip / norm;
    }

    for (const std::string& name : selection_.names) {
        Parameter* p = model_.params().find(name);
        const Tensor g = tape.grad(tracked.at(name));
        Slot& slot = slots_.at(name);
        if (ts_.optimizer == TrainSettings::Opt::adam) {
            const double corr1 = 1.0 - std::pow(ts_.adam_beta1, step_count_);
            const double corr2 = 1.0 - std::pow(ts_.adam_beta2, step_count_);
            for (std::size_t i = 0; i < p->value.data.size(); ++i) {
                const double gi = g.data[i] * scale_grad;
                slot.m1[i] = ts_.adam_beta1 * slot.m1[i] + (1.0 - ts_.adam_beta1) * gi;
                slot.m2[i] = ts_.adam_beta2 * slot.m2[i] + (1.0 - ts_.adam_beta2) * gi * gi;
                p->value.data[i] -= ts_.lr * (slot.m1[i] / corr1) /
                                    (std::sqrt(slot.m2[i] / corr2) + ts_.adam_eps);
            }
        } else {
            for (std::size_t i = 0; i < p->value.data.size(); ++i) {
                const double gi = g.data[i] * scale_grad;
                slot.m1[i] = ts_.momentum * slot.m1[i] + gi;
                p->value.data[i] -= ts_.lr * slot.m1[i];
            }
        }
    }

    StepLog log;
    log.step = step_count_;
    log.l_org = res.l_org;
    log.l_high_pix = res.l_high_pix;
    log.l_rec = res.l_rec;
    log.l_total = res.total.scalar();
    if (!std::isfinite(log.l_total)) {
        throw NumericError("trainer: non-finite loss at step " + std::to_string(step_count_));
    }
    return log;
}

std::vector<StepLog> Trainer::run(int steps) {
    std::vector<StepLog> logs;
    logs.reserve(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) logs.push_back(step());
    return logs;
}

std::string losses_csv_header() { return "step,L_org,L_high_pix,L_rec,L_EFD\n"; }

std::string losses_csv_row(const StepLog& log) {
    std::ostringstream os;
    os.precision(12);
    os << log.step << "," << log.l_org << "," << log.l_high_pix << "," << log.l_rec << ","
       << log.l_total << "\n";
    return os.str();
}

}  // namespace efdit
