#pragma once

#include <cstdint>
#include <string>

#include "efdit/data.hpp"
#include "efdit/diffusion.hpp"
#include "efdit/network.hpp"

namespace efdit {

struct TrainSettings {
    enum class Opt { adam, sgd };
    int steps = 5000;
    int batch = 16;
    double lr = 1e-4;
    Opt optimizer = Opt::adam;
    double momentum = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 7;
    int checkpoint_every = 1000;
    double grad_clip = 0.0;  // 0 disables clipping
};

// One key = value file of sections [model] [schedule] [guidance] [loss]
// [data] [train]; unknown keys are rejected by name. Derived defaults
// (t_split = T/5, d0 = min(H,W)/8, sampler steps = T, model/data geometry)
// are resolved by finalize().
struct RunConfig {
    ModelConfig model;
    int schedule_t = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    GuidanceConfig guidance;
    LossConfig loss;
    DatasetSpec data;
    TrainSettings train;

    // sentinels: negative/zero means "derive at finalize"
    int t_split_raw = -1;
    double d0_raw = 0.0;
    int sample_steps_raw = 0;

    void finalize();
    NoiseSchedule make_schedule() const;
};

// Parses the file into base (later keys win); throws ConfigError with the
// offending key or section name.
RunConfig load_config_file(const std::string& path, RunConfig base = {});

// Applies one "section.key = value" assignment.
void apply_config_kv(RunConfig& cfg, const std::string& section, const std::string& key,
                     const std::string& value);

// Fully resolved config text (finalize first for derived fields).
std::string serialize_config(const RunConfig& cfg);

}  // namespace efdit
