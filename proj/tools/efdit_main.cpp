#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "efdit/attention.hpp"
#include "efdit/config.hpp"
#include "efdit/data.hpp"
#include "efdit/diffusion.hpp"
#include "efdit/eval.hpp"
#include "efdit/network.hpp"
#include "efdit/train.hpp"

namespace fs = std::filesystem;
using namespace efdit;

namespace {

std::string timestamp_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    localtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

// One directory per invocation; an explicit --run-dir must not exist yet.
std::string make_run_dir(const std::string& out_root, const std::string& cmd,
                         const std::string& explicit_dir) {
    if (!explicit_dir.empty()) {
        if (fs::exists(explicit_dir)) {
            throw IoError("run directory already exists: " + explicit_dir);
        }
        fs::create_directories(explicit_dir);
        return explicit_dir;
    }
    const std::string base = out_root + "/" + timestamp_now() + "-" + cmd;
    std::string dir = base;
    int suffix = 1;
    while (fs::exists(dir)) dir = base + "-" + std::to_string(suffix++);
    fs::create_directories(dir);
    return dir;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << text;
    if (!os) throw IoError("write failed for " + path);
}

void echo_resolved(const RunConfig& cfg, const std::string& run_dir) {
    write_text(run_dir + "/resolved.cfg", serialize_config(cfg));
}

struct CommonFlags {
    std::string config_path;
    std::string run_dir;
    std::string out_root = "runs";
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "config file (key = value sections)");
    cmd->add_option("--run-dir", flags.run_dir, "explicit run directory (must not exist)");
    cmd->add_option("--out-root", flags.out_root, "root for timestamped run directories");
}

RunConfig base_config(const CommonFlags& flags, const std::string& ckpt_for_sibling = "") {
    RunConfig cfg;
    std::string path = flags.config_path;
    if (path.empty() && !ckpt_for_sibling.empty()) {
        const fs::path sibling = fs::path(ckpt_for_sibling).parent_path() / "resolved.cfg";
        if (fs::exists(sibling)) path = sibling.string();
    }
    if (!path.empty()) cfg = load_config_file(path, cfg);
    return cfg;
}

std::vector<TieredCondition> make_conditions(const RunConfig& cfg, int n,
                                             std::optional<int> sub, std::optional<int> super) {
    std::vector<TieredCondition> conds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        TieredCondition c;
        if (sub.has_value()) {
            c.subclass = *sub;
            c.superclass = super.has_value() ? *super
                           : (*sub == TieredCondition::kNull
                                  ? TieredCondition::kNull
                                  : cfg.data.parent_of(*sub));
        } else if (super.has_value()) {
            c.superclass = *super;
        } else {
            c.subclass = i % cfg.data.n_sub();
            c.superclass = cfg.data.parent_of(c.subclass);
        }
        if (c.subclass != TieredCondition::kNull && c.superclass != TieredCondition::kNull &&
            c.superclass != cfg.data.parent_of(c.subclass)) {
            throw ContractError("superclass " + std::to_string(c.superclass) +
                                " is not the parent of subclass " + std::to_string(c.subclass));
        }
        conds[static_cast<std::size_t>(i)] = c;
    }
    return conds;
}

int run_training(const RunConfig& cfg_in, const CommonFlags& flags, const std::string& data_path,
                 const std::string& base_ckpt, bool finetune) {
    RunConfig cfg = cfg_in;
    Dataset ds = data_path.empty() ? generate(cfg.data) : load(data_path);
    cfg.data = ds.spec;
    cfg.finalize();

    const std::string run_dir = make_run_dir(flags.out_root, finetune ? "finetune" : "train",
                                             flags.run_dir);
    echo_resolved(cfg, run_dir);

    DenoiserModel model(cfg.model);
    FinetuneMode mode = FinetuneMode::full;
    if (finetune) {
        load_into_model(model, base_ckpt);
        mode = FinetuneMode::bias_norm_embed;
    }

    const NoiseSchedule ns = cfg.make_schedule();
    Trainer trainer(model, ds, ns, cfg.loss, cfg.guidance, cfg.train, mode);
    if (finetune) {
        std::printf("trainable_ratio=%.6f (%lld of %lld elements)\n", trainer.selection().ratio,
                    static_cast<long long>(trainer.selection().selected_elements),
                    static_cast<long long>(trainer.selection().total_elements));
    }

    std::ofstream losses(run_dir + "/losses.csv");
    if (!losses) throw IoError("cannot open " + run_dir + "/losses.csv");
    losses << losses_csv_header();

    save_checkpoint(model.params(), run_dir + "/checkpoint_step0.efd1");
    for (int i = 1; i <= cfg.train.steps; ++i) {
        const StepLog log = trainer.step();
        losses << losses_csv_row(log);
        if (cfg.train.checkpoint_every > 0 && i % cfg.train.checkpoint_every == 0) {
            save_checkpoint(model.params(),
                            run_dir + "/checkpoint_step" + std::to_string(i) + ".efd1");
        }
        if (i % 100 == 0 || i == cfg.train.steps) {
            std::printf("step %d  L_EFD %.6f  (org %.6f, high %.6f, rec %.6f)\n", log.step,
                        log.l_total, log.l_org, log.l_high_pix, log.l_rec);
            std::fflush(stdout);
        }
    }
    save_checkpoint(model.params(), run_dir + "/checkpoint_final.efd1");
    std::printf("run directory: %s\n", run_dir.c_str());
    return 0;
}

int cmd_generate_data(const CommonFlags& flags, const RunConfig& cfg_in, const std::string& out) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    const std::string run_dir = make_run_dir(flags.out_root, "generate-data", flags.run_dir);
    echo_resolved(cfg, run_dir);
    Dataset ds = generate(cfg.data);
    const std::string path = out.empty() ? run_dir + "/data.efdd" : out;
    save(ds, path);
    std::printf("wrote %zu samples (%d subclasses) to %s\n", ds.samples.size(),
                ds.spec.n_sub(), path.c_str());
    return 0;
}

int cmd_sample(const CommonFlags& flags, const RunConfig& cfg_in, const std::string& ckpt, int n,
               std::optional<int> sub, std::optional<int> super, bool trace,
               const std::string& out_data) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    const std::string run_dir = make_run_dir(flags.out_root, "sample", flags.run_dir);
    echo_resolved(cfg, run_dir);

    DenoiserModel model(cfg.model);
    load_into_model(model, ckpt);
    const NoiseSchedule ns = cfg.make_schedule();
    const std::vector<TieredCondition> conds = make_conditions(cfg, n, sub, super);

    Rng rng(cfg.train.seed);
    SampleTrace tr;
    Tensor batch = guided_sample(model, ns, cfg.guidance, conds, rng, trace ? &tr : nullptr);

    const std::int64_t per = batch.numel() / batch.shape[0];
    Tensor img({cfg.data.height, cfg.data.width, cfg.data.channels});
    Dataset out_ds;
    out_ds.spec = cfg.data;
    for (int i = 0; i < n; ++i) {
        std::copy_n(batch.data.data() + i * per, per, img.data.data());
        char name[64];
        std::snprintf(name, sizeof(name), "/sample_%03d.%s", i,
                      cfg.data.channels == 3 ? "ppm" : "pgm");
        export_image(img, run_dir + name);
        if (!out_data.empty()) {
            Sample s;
            s.image = img.detached();
            s.label = conds[static_cast<std::size_t>(i)];
            out_ds.samples.push_back(std::move(s));
        }
    }
    if (!out_data.empty()) save(out_ds, out_data);
    if (trace) {
        std::ostringstream os;
        os << "step,hf_ratio,x0_min,x0_max\n";
        os.precision(10);
        for (std::size_t i = 0; i < tr.step.size(); ++i) {
            os << tr.step[i] << "," << tr.hf_ratio[i] << "," << tr.x0_min[i] << ","
               << tr.x0_max[i] << "\n";
        }
        write_text(run_dir + "/trace.csv", os.str());
    }
    std::printf("wrote %d samples to %s\n", n, run_dir.c_str());
    return 0;
}

int cmd_bench(const CommonFlags& flags, const std::string& lengths_csv, double c, int d,
              std::uint64_t seed) {
    const std::string run_dir = make_run_dir(flags.out_root, "bench-attention", flags.run_dir);
    std::vector<std::int64_t> lengths;
    std::stringstream ss(lengths_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) lengths.push_back(std::stoll(tok));
    }
    if (lengths.empty()) throw ConfigError("bench-attention: no lengths given");
    AttentionConfig acfg;
    acfg.c = c;
    acfg.rng_seed = seed;
    const auto rows = complexity_probe(lengths, acfg, d);
    const std::string csv = probe_csv(rows);
    std::fputs(csv.c_str(), stdout);
    write_text(run_dir + "/bench.csv", csv);
    return 0;
}

int cmd_eval(const CommonFlags& flags, const RunConfig& cfg_in, const std::string& real_path,
             const std::string& gen_path, std::uint64_t seed) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    const std::string run_dir = make_run_dir(flags.out_root, "eval", flags.run_dir);
    echo_resolved(cfg, run_dir);

    Dataset real = load(real_path);
    Dataset gen = load(gen_path);

    FeatureExtractor fx;
    fx.seed = seed;
    if (static_cast<std::int64_t>(real.samples.size()) < fx.d_feat + 1 ||
        static_cast<std::int64_t>(gen.samples.size()) < fx.d_feat + 1) {
        std::fprintf(stderr,
                     "warning: fewer samples than d_feat+1=%lld; covariance will be singular\n",
                     static_cast<long long>(fx.d_feat + 1));
    }
    const GaussianStats stats_real = gaussian_stats(fx.extract_all(real.samples));
    const GaussianStats stats_gen = gaussian_stats(fx.extract_all(gen.samples));
    const double fid = frechet_distance(stats_real, stats_gen);

    ProbeClassifier probe;
    probe.train(real);
    Tensor probs({static_cast<std::int64_t>(gen.samples.size()), probe.n_classes()});
    for (std::size_t i = 0; i < gen.samples.size(); ++i) {
        const std::vector<double> p = probe.probabilities(gen.samples[i].image);
        std::copy(p.begin(), p.end(),
                  probs.data.begin() + static_cast<std::int64_t>(i) * probe.n_classes());
    }
    const double is_like = inception_score_like(probs);
    const auto [sub_acc, super_acc] = class_accuracy(gen.samples, probe);

    double hf_mean = 0.0;
    for (const Sample& s : gen.samples) {
        hf_mean += high_freq_energy_ratio(s.image, cfg.guidance.d0);
    }
    hf_mean /= static_cast<double>(gen.samples.size());

    std::ostringstream os;
    os.precision(10);
    os << "metric,value\n";
    os << "fid_like," << fid << "\n";
    os << "is_like," << is_like << "\n";
    os << "sub_acc," << sub_acc << "\n";
    os << "super_acc," << super_acc << "\n";
    os << "hf_ratio_mean," << hf_mean << "\n";
    std::fputs(os.str().c_str(), stdout);
    write_text(run_dir + "/report.csv", os.str());
    return 0;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"frequency-guided diffusion sandbox: tiered-condition DDPM with sparse "
                 "attention, synthetic data, and evaluation tools"};
    app.require_subcommand(1);

    // generate-data
    auto* gen_cmd = app.add_subcommand("generate-data", "write a synthetic hierarchical dataset");
    CommonFlags gen_flags;
    add_common(gen_cmd, gen_flags);
    std::optional<int> gd_n_super, gd_subs, gd_samples;
    std::optional<std::uint64_t> gd_seed;
    std::string gd_out;
    gen_cmd->add_option("--n-super", gd_n_super, "superclass count (1..4)");
    gen_cmd->add_option("--subs-per-super", gd_subs, "subclasses per superclass");
    gen_cmd->add_option("--samples", gd_samples, "samples per subclass");
    gen_cmd->add_option("--seed", gd_seed, "dataset seed");
    gen_cmd->add_option("--out", gd_out, "output file (default <run-dir>/data.efdd)");

    // train / finetune
    auto* train_cmd = app.add_subcommand("train", "train the denoiser from scratch");
    CommonFlags train_flags;
    add_common(train_cmd, train_flags);
    std::string train_data;
    std::optional<int> train_steps, train_batch;
    std::optional<double> train_lr;
    std::optional<std::uint64_t> train_seed;
    std::optional<std::string> train_opt;
    train_cmd->add_option("--data", train_data, "dataset file (default: generate from config)");
    train_cmd->add_option("--steps", train_steps, "optimizer steps");
    train_cmd->add_option("--batch", train_batch, "batch size");
    train_cmd->add_option("--lr", train_lr, "learning rate");
    train_cmd->add_option("--seed", train_seed, "training seed");
    train_cmd->add_option("--optimizer", train_opt, "adam|sgd");

    auto* ft_cmd = app.add_subcommand("finetune",
                                      "bias+norm+embedding fine-tune from a base checkpoint");
    CommonFlags ft_flags;
    add_common(ft_cmd, ft_flags);
    std::string ft_data, ft_base;
    std::optional<int> ft_steps, ft_batch;
    std::optional<double> ft_lr;
    std::optional<std::uint64_t> ft_seed;
    ft_cmd->add_option("--data", ft_data, "dataset file (default: generate from config)");
    ft_cmd->add_option("--base", ft_base, "base checkpoint")->required();
    ft_cmd->add_option("--steps", ft_steps, "optimizer steps");
    ft_cmd->add_option("--batch", ft_batch, "batch size");
    ft_cmd->add_option("--lr", ft_lr, "learning rate");
    ft_cmd->add_option("--seed", ft_seed, "training seed");

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "draw images from a trained checkpoint");
    CommonFlags sample_flags;
    add_common(sample_cmd, sample_flags);
    std::string sp_ckpt, sp_out_data;
    int sp_n = 16;
    std::optional<int> sp_sub, sp_super, sp_tsplit, sp_steps;
    std::optional<double> sp_gamma, sp_wsub, sp_wsuper, sp_d0;
    std::optional<std::uint64_t> sp_seed;
    bool sp_trace = false;
    sample_cmd->add_option("--ckpt", sp_ckpt, "checkpoint file")->required();
    sample_cmd->add_option("--n", sp_n, "number of samples");
    sample_cmd->add_option("--sub", sp_sub, "subclass id (-1 for null)");
    sample_cmd->add_option("--super", sp_super, "superclass id (-1 for null)");
    sample_cmd->add_option("--gamma", sp_gamma, "enhancement/degradation blend in [0,1]");
    sample_cmd->add_option("--t-split", sp_tsplit, "perceptual-stage threshold");
    sample_cmd->add_option("--w-sub", sp_wsub, "subclass guidance scale");
    sample_cmd->add_option("--w-super", sp_wsuper, "superclass guidance scale");
    sample_cmd->add_option("--steps", sp_steps, "reverse steps (<= schedule T)");
    sample_cmd->add_option("--d0", sp_d0, "filter cutoff in cycles");
    sample_cmd->add_option("--seed", sp_seed, "sampling seed");
    sample_cmd->add_flag("--trace", sp_trace, "write per-step diagnostics CSV");
    sample_cmd->add_option("--out-data", sp_out_data, "also write samples as an EFDD file");

    // bench-attention
    auto* bench_cmd = app.add_subcommand("bench-attention", "dense vs sparse scaling probe");
    CommonFlags bench_flags;
    add_common(bench_cmd, bench_flags);
    std::string bn_lengths = "256,512,1024,2048,4096,8192";
    double bn_c = 5.0;
    int bn_d = 32;
    std::uint64_t bn_seed = 1;
    bench_cmd->add_option("--lengths", bn_lengths, "comma-separated sequence lengths");
    bench_cmd->add_option("--c", bn_c, "sampling factor");
    bench_cmd->add_option("--d", bn_d, "head dimension");
    bench_cmd->add_option("--seed", bn_seed, "probe seed");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "score generated samples against a real dataset");
    CommonFlags eval_flags;
    add_common(eval_cmd, eval_flags);
    std::string ev_real, ev_gen;
    std::uint64_t ev_seed = 99;
    eval_cmd->add_option("--real", ev_real, "real dataset (EFDD)")->required();
    eval_cmd->add_option("--gen", ev_gen, "generated samples (EFDD)")->required();
    eval_cmd->add_option("--seed", ev_seed, "feature projection seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (gen_cmd->parsed()) {
        RunConfig cfg = base_config(gen_flags);
        if (gd_n_super) cfg.data.n_super = *gd_n_super;
        if (gd_subs) cfg.data.subs_per_super = *gd_subs;
        if (gd_samples) cfg.data.samples_per_sub = *gd_samples;
        if (gd_seed) cfg.data.seed = *gd_seed;
        return cmd_generate_data(gen_flags, cfg, gd_out);
    }
    if (train_cmd->parsed()) {
        RunConfig cfg = base_config(train_flags);
        if (train_steps) cfg.train.steps = *train_steps;
        if (train_batch) cfg.train.batch = *train_batch;
        if (train_lr) cfg.train.lr = *train_lr;
        if (train_seed) cfg.train.seed = *train_seed;
        if (train_opt) {
            apply_config_kv(cfg, "train", "optimizer", *train_opt);
        }
        return run_training(cfg, train_flags, train_data, "", false);
    }
    if (ft_cmd->parsed()) {
        RunConfig cfg = base_config(ft_flags, ft_base);
        if (ft_steps) cfg.train.steps = *ft_steps;
        if (ft_batch) cfg.train.batch = *ft_batch;
        if (ft_lr) cfg.train.lr = *ft_lr;
        if (ft_seed) cfg.train.seed = *ft_seed;
        return run_training(cfg, ft_flags, ft_data, ft_base, true);
    }
    if (sample_cmd->parsed()) {
        RunConfig cfg = base_config(sample_flags, sp_ckpt);
        if (sp_gamma) cfg.guidance.gamma = *sp_gamma;
        if (sp_tsplit) cfg.t_split_raw = *sp_tsplit;
        if (sp_wsub) cfg.guidance.w_sub = *sp_wsub;
        if (sp_wsuper) cfg.guidance.w_super = *sp_wsuper;
        if (sp_steps) cfg.sample_steps_raw = *sp_steps;
        if (sp_d0) cfg.d0_raw = *sp_d0;
        if (sp_seed) cfg.train.seed = *sp_seed;
        return cmd_sample(sample_flags, cfg, sp_ckpt, sp_n, sp_sub, sp_super, sp_trace,
                          sp_out_data);
    }
    if (bench_cmd->parsed()) {
        return cmd_bench(bench_flags, bn_lengths, bn_c, bn_d, bn_seed);
    }
    if (eval_cmd->parsed()) {
        RunConfig cfg = base_config(eval_flags);
        return cmd_eval(eval_flags, cfg, ev_real, ev_gen, ev_seed);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "contract error: %s\n", e.what());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
