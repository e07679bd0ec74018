#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "efdit/data.hpp"

#ifndef EFDIT_CLI_PATH
#error "EFDIT_CLI_PATH must point at the efdit binary"
#endif

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code;
    std::string out;
    std::string err;
};

fs::path work_root() {
    static fs::path root = [] {
        fs::path p = fs::temp_directory_path() / "efdit_cli_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path out = work_root() / ("out" + std::to_string(counter) + ".txt");
    const fs::path err = work_root() / ("err" + std::to_string(counter) + ".txt");
    ++counter;
    const std::string cmd = std::string(EFDIT_CLI_PATH) + " " + args + " > " + out.string() +
                            " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

std::string small_config() {
    static std::string path = [] {
        const fs::path p = work_root() / "small.cfg";
        std::ofstream os(p);
        os << "# desk-size run for the CLI tests\n"
           << "[data]\n"
           << "n_super = 2\nsubs_per_super = 2\nsamples_per_sub = 6\n"
           << "height = 16\nwidth = 16\nseed = 9\n"
           << "[schedule]\nt = 20\n"
           << "[model]\nd_model = 32\nheads = 4\nblocks = 1\npatch = 4\ntime_embed_dim = 16\n"
           << "[train]\nsteps = 2\nbatch = 4\ncheckpoint_every = 0\n"
           << "[guidance]\nw_super = 1.0\n";
        return p.string();
    }();
    return path;
}

std::string slurp_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generate-data writes a loadable dataset") {
    const fs::path dir = work_root() / "gen";
    const fs::path out = work_root() / "data.efdd";
    RunResult r = run_cli("generate-data --config " + small_config() + " --run-dir " +
                          dir.string() + " --out " + out.string());
    CHECK(r.exit_code == 0);
    REQUIRE(fs::exists(out));
    efdit::Dataset ds = efdit::load(out.string());
    CHECK(ds.samples.size() == 2 * 2 * 6);
    CHECK(fs::exists(dir / "resolved.cfg"));
}

TEST_CASE("unknown config keys are rejected by name") {
    const fs::path bad = work_root() / "bad.cfg";
    {
        std::ofstream os(bad);
        os << "[model]\nwibble = 3\n";
    }
    RunResult r = run_cli("train --config " + bad.string() + " --run-dir " +
                          (work_root() / "never").string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("model.wibble") != std::string::npos);
}

TEST_CASE("train --steps 0 writes an initial checkpoint and an empty loss log") {
    const fs::path dir = work_root() / "train0";
    RunResult r = run_cli("train --config " + small_config() + " --steps 0 --run-dir " +
                          dir.string());
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir / "checkpoint_final.efd1"));
    CHECK(slurp_file(dir / "losses.csv") == "step,L_org,L_high_pix,L_rec,L_EFD\n");
}

TEST_CASE("train runs steps and logs one row per step") {
    const fs::path dir = work_root() / "train2";
    RunResult r = run_cli("train --config " + small_config() + " --run-dir " + dir.string());
    CHECK(r.exit_code == 0);
    const std::string log = slurp_file(dir / "losses.csv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 3);  // header + 2 steps
}

TEST_CASE("sampling is reproducible byte for byte") {
    const fs::path train_dir = work_root() / "train_for_sample";
    RunResult t = run_cli("train --config " + small_config() + " --steps 0 --run-dir " +
                          train_dir.string());
    REQUIRE(t.exit_code == 0);
    const std::string ckpt = (train_dir / "checkpoint_final.efd1").string();

    const fs::path s1 = work_root() / "sample1";
    const fs::path s2 = work_root() / "sample2";
    const std::string args = "sample --ckpt " + ckpt + " --n 2 --seed 7 --steps 20 --trace";
    RunResult a = run_cli(args + " --run-dir " + s1.string());
    RunResult b = run_cli(args + " --run-dir " + s2.string());
    CHECK(a.exit_code == 0);
    CHECK(b.exit_code == 0);
    CHECK(slurp_file(s1 / "sample_000.pgm") == slurp_file(s2 / "sample_000.pgm"));
    CHECK(slurp_file(s1 / "sample_001.pgm") == slurp_file(s2 / "sample_001.pgm"));
    CHECK(fs::exists(s1 / "trace.csv"));
    CHECK(slurp_file(s1 / "trace.csv").rfind("step,hf_ratio,x0_min,x0_max", 0) == 0);
}

TEST_CASE("missing checkpoint exits with the io code") {
    RunResult r = run_cli("sample --ckpt " + (work_root() / "nope.efd1").string() +
                          " --config " + small_config() + " --run-dir " +
                          (work_root() / "sample_missing").string());
    CHECK(r.exit_code == 3);
}

TEST_CASE("finetune reports the trainable ratio before training") {
    const fs::path train_dir = work_root() / "train_base";
    RunResult t = run_cli("train --config " + small_config() + " --steps 0 --run-dir " +
                          train_dir.string());
    REQUIRE(t.exit_code == 0);

    const fs::path ft_dir = work_root() / "ft";
    RunResult r = run_cli("finetune --config " + small_config() + " --base " +
                          (train_dir / "checkpoint_final.efd1").string() + " --steps 1 " +
                          "--run-dir " + ft_dir.string());
    CHECK(r.exit_code == 0);
    const auto pos = r.out.find("trainable_ratio=");
    REQUIRE(pos != std::string::npos);
    const double ratio = std::stod(r.out.substr(pos + 16));
    CHECK(ratio > 0.0);
    CHECK(ratio < 0.10);
}

TEST_CASE("bench-attention emits the CSV schema") {
    const fs::path dir = work_root() / "bench";
    RunResult r = run_cli("bench-attention --lengths 8,16 --run-dir " + dir.string());
    CHECK(r.exit_code == 0);
    CHECK(r.out.rfind("L,method,dot_products,wall_time_ns,seed", 0) == 0);
    CHECK(fs::exists(dir / "bench.csv"));
}

TEST_CASE("eval writes the metric report") {
    const fs::path real_file = work_root() / "real.efdd";
    const fs::path gen_file = work_root() / "genset.efdd";
    {
        efdit::DatasetSpec spec;
        spec.n_super = 2;
        spec.subs_per_super = 2;
        spec.samples_per_sub = 40;
        spec.height = 16;
        spec.width = 16;
        spec.seed = 5;
        efdit::save(efdit::generate(spec), real_file.string());
        spec.seed = 6;
        efdit::save(efdit::generate(spec), gen_file.string());
    }
    const fs::path dir = work_root() / "eval";
    RunResult r = run_cli("eval --real " + real_file.string() + " --gen " + gen_file.string() +
                          " --config " + small_config() + " --run-dir " + dir.string());
    CHECK(r.exit_code == 0);
    const std::string report = slurp_file(dir / "report.csv");
    for (const char* metric : {"fid_like", "is_like", "sub_acc", "super_acc", "hf_ratio_mean"}) {
        CHECK(report.find(metric) != std::string::npos);
    }
}

TEST_CASE("checkpoint/model mismatch exits with the contract code") {
    const fs::path train_dir = work_root() / "train_mismatch";
    RunResult t = run_cli("train --config " + small_config() + " --steps 0 --run-dir " +
                          train_dir.string());
    REQUIRE(t.exit_code == 0);

    const fs::path other_cfg = work_root() / "other.cfg";
    {
        std::ofstream os(other_cfg);
        os << "[data]\nn_super = 2\nsubs_per_super = 2\nheight = 16\nwidth = 16\n"
           << "[schedule]\nt = 20\n"
           << "[model]\nd_model = 64\nheads = 4\nblocks = 1\npatch = 4\ntime_embed_dim = 16\n";
    }
    RunResult r = run_cli("sample --ckpt " + (train_dir / "checkpoint_final.efd1").string() +
                          " --config " + other_cfg.string() + " --n 1 --run-dir " +
                          (work_root() / "sample_mismatch").string());
    CHECK(r.exit_code == 5);
}

TEST_CASE("an existing run directory is never reused") {
    const fs::path dir = work_root() / "occupied";
    fs::create_directories(dir);
    RunResult r = run_cli("bench-attention --lengths 8 --run-dir " + dir.string());
    CHECK(r.exit_code == 3);
}
