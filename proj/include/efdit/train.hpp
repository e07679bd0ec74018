#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "efdit/config.hpp"
#include "efdit/data.hpp"
#include "efdit/diffusion.hpp"
#include "efdit/network.hpp"

namespace efdit {

struct StepLog {
    int step = 0;
    double l_org = 0.0, l_high_pix = 0.0, l_rec = 0.0, l_total = 0.0;
};

// Single-threaded training loop over a frozen dataset. The finetune mode
// restricts the watched (and therefore updated) parameters; everything else
// stays bit-identical.
class Trainer {
public:
    Trainer(DenoiserModel& model, const Dataset& data, const NoiseSchedule& ns,
            const LossConfig& lc, const GuidanceConfig& gc, const TrainSettings& ts,
            FinetuneMode mode = FinetuneMode::full);

    StepLog step();
    std::vector<StepLog> run(int steps);

    const FinetuneSelection& selection() const { return selection_; }
    int steps_done() const { return step_count_; }

private:
    DenoiserModel& model_;
    const Dataset& data_;
    NoiseSchedule ns_;
    LossConfig lc_;
    GuidanceConfig gc_;
    TrainSettings ts_;
    FinetuneSelection selection_;
    Rng rng_;
    int step_count_ = 0;

    struct Slot {
        std::vector<double> m1, m2;
    };
    std::unordered_map<std::string, Slot> slots_;
};

std::string losses_csv_header();
std::string losses_csv_row(const StepLog& log);

}  // namespace efdit
