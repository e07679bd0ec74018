#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "efdit/data.hpp"
#include "efdit/network.hpp"
#include "efdit/train.hpp"
#include "helpers.hpp"

using namespace efdit;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.channels = 1;
    cfg.patch = 4;
    cfg.d_model = 32;
    cfg.blocks = 2;
    cfg.heads = 4;
    cfg.mlp_ratio = 2;
    cfg.time_embed_dim = 16;
    cfg.n_sub = 6;
    cfg.n_super = 2;
    cfg.init_seed = 5;
    return cfg;
}

// the output projection is zero at init; randomize it so gradients and
// conditioning reach the output
void perturb_output(DenoiserModel& model, std::uint64_t seed) {
    Rng rng(seed);
    for (double& v : model.params().find("final.proj.w")->value.data) {
        v = rng.uniform(-0.2, 0.2);
    }
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("embed_condition: unconditional collapse and additivity") {
    DenoiserModel model(tiny_config());
    std::vector<std::pair<bool, bool>> drop_all = {{true, true}};
    Tensor a = model.embed_condition({TieredCondition{2, 0}}, drop_all);
    Tensor b = model.embed_condition({TieredCondition{5, 1}}, drop_all);
    CHECK(a.data == b.data);  // bit-identical for every condition

    // dropping only the superclass shifts the output by (e_super - e_null_super)
    Tensor kept = model.embed_condition({TieredCondition{2, 1}}, {{false, false}});
    Tensor dropped = model.embed_condition({TieredCondition{2, 1}}, {{false, true}});
    const Tensor& table = model.params().find("embed.super_table")->value;
    const std::int64_t d = tiny_config().d_model;
    for (std::int64_t j = 0; j < d; ++j) {
        const double diff = kept.data[j] - dropped.data[j];
        const double expected = table.data[1 * d + j] - table.data[2 * d + j];  // row 1 vs null row
        CHECK(diff == doctest::Approx(expected).epsilon(1e-15));
    }
}

TEST_CASE("embed_condition equals direct table-row reads") {
    ModelConfig cfg = tiny_config();
    DenoiserModel model(cfg);
    const Tensor& sub_t = model.params().find("embed.sub_table")->value;
    const Tensor& super_t = model.params().find("embed.super_table")->value;
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        const int sub = static_cast<int>(rng.below(cfg.n_sub));
        const int sup = static_cast<int>(rng.below(cfg.n_super));
        Tensor e = model.embed_condition({TieredCondition{sub, sup}}, {});
        for (std::int64_t j = 0; j < cfg.d_model; ++j) {
            CHECK(e.data[j] == sub_t.data[sub * cfg.d_model + j] +
                                   super_t.data[sup * cfg.d_model + j]);
        }
    }
}

TEST_CASE("embed_condition rejects out-of-range ids") {
    DenoiserModel model(tiny_config());
    CHECK_THROWS_AS(model.embed_condition({TieredCondition{99, 0}}, {}), ContractError);
    CHECK_THROWS_AS(model.embed_condition({TieredCondition{0, 7}}, {}), ContractError);
}

TEST_CASE("forward keeps the input shape and is zero at init") {
    DenoiserModel model(tiny_config());
    Rng rng(23);
    Tensor x = Tensor::randn({2, 16, 16, 1}, rng);
    std::vector<TieredCondition> conds = {TieredCondition{0, 0}, TieredCondition{4, 1}};
    Tensor out = model.forward(x, {3, 7}, conds);
    CHECK(out.shape == x.shape);
    for (double v : out.data) CHECK(v == 0.0);  // zero-initialized output projection
}

TEST_CASE("forward validates geometry") {
    ModelConfig bad = tiny_config();
    bad.patch = 5;
    CHECK_THROWS_AS(DenoiserModel{bad}, ConfigError);

    DenoiserModel model(tiny_config());
    Rng rng(3);
    Tensor wrong = Tensor::randn({1, 8, 8, 1}, rng);
    CHECK_THROWS_AS(model.forward(wrong, {1}, {TieredCondition{0, 0}}), DimError);
    Tensor ok = Tensor::randn({2, 16, 16, 1}, rng);
    CHECK_THROWS_AS(model.forward(ok, {1}, {TieredCondition{0, 0}}), ContractError);
}

TEST_CASE("forward is deterministic and permutation-consistent") {
    DenoiserModel model(tiny_config());
    perturb_output(model, 31);
    Rng rng(29);
    Tensor x = Tensor::randn({3, 16, 16, 1}, rng);
    std::vector<TieredCondition> conds = {TieredCondition{0, 0}, TieredCondition{3, 1},
                                          TieredCondition{5, 1}};
    Tensor a = model.forward(x, {2, 9, 14}, conds, {}, 77);
    Tensor b = model.forward(x, {2, 9, 14}, conds, {}, 77);
    CHECK(a.data == b.data);

    // permute the batch: rows permute identically (no cross-sample leakage)
    const std::vector<int> perm = {2, 0, 1};
    Tensor xp({3, 16, 16, 1});
    const std::int64_t per = 16 * 16;
    std::vector<TieredCondition> conds_p(3);
    std::vector<int> t_p(3);
    const std::vector<int> t_ids = {2, 9, 14};
    for (int i = 0; i < 3; ++i) {
        std::copy_n(x.data.data() + perm[i] * per, per, xp.data.data() + i * per);
        conds_p[i] = conds[static_cast<std::size_t>(perm[i])];
        t_p[i] = t_ids[static_cast<std::size_t>(perm[i])];
    }
    Tensor out_p = model.forward(xp, t_p, conds_p, {}, 77);
    for (int i = 0; i < 3; ++i) {
        for (std::int64_t j = 0; j < per; ++j) {
            CHECK(out_p.data[i * per + j] == a.data[perm[i] * per + j]);
        }
    }
}

TEST_CASE("subclass table only receives gradient through used rows") {
    ModelConfig cfg = tiny_config();
    DenoiserModel model(cfg);
    perturb_output(model, 41);
    Rng rng(43);
    Tensor x = Tensor::randn({2, 16, 16, 1}, rng);
    std::vector<TieredCondition> conds = {TieredCondition{1, 0}, TieredCondition{4, 1}};

    GradTape tape;
    ParamLookup tracked;
    tracked.emplace("embed.sub_table", tape.watch(model.params().find("embed.sub_table")->value));
    Tensor out = model.forward(x, {3, 8}, conds, {}, 7, &tracked);
    Tensor loss = reduce_all(Reduce::sum, mul(out, out));
    tape.backward(loss);
    Tensor g = tape.grad(tracked.at("embed.sub_table"));

    const std::int64_t d = cfg.d_model;
    for (int row = 0; row <= cfg.n_sub; ++row) {
        double norm = 0.0;
        for (std::int64_t j = 0; j < d; ++j) norm += std::abs(g.data[row * d + j]);
        if (row == 1 || row == 4) {
            CHECK(norm > 0.0);
        } else {
            CHECK(norm == 0.0);
        }
    }

    // finite-difference spot check on one used element
    const std::int64_t probe = 1 * d + 3;
    const double h = 1e-5;
    auto eval = [&](double delta) {
        DenoiserModel m2(cfg);
        perturb_output(m2, 41);
        m2.params().find("embed.sub_table")->value.data[probe] += delta;
        Tensor o = m2.forward(x, {3, 8}, conds, {}, 7);
        double acc = 0.0;
        for (double v : o.data) acc += v * v;
        return acc;
    };
    const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
    CHECK(g.data[probe] == doctest::Approx(numeric).epsilon(1e-5));
}

TEST_CASE("finetune mask selects roles and reports the ratio") {
    DenoiserModel model(tiny_config());
    const FinetuneSelection full = finetune_mask(model.params(), FinetuneMode::full);
    CHECK(full.ratio == 1.0);

    const FinetuneSelection sel = finetune_mask(model.params(), FinetuneMode::bias_norm_embed);
    // independent recount straight from the role tags
    std::int64_t expect_sel = 0, expect_total = 0;
    for (const Parameter& p : model.params().items) {
        expect_total += p.value.numel();
        if (p.role != ParamRole::weight) expect_sel += p.value.numel();
    }
    CHECK(sel.selected_elements == expect_sel);
    CHECK(sel.total_elements == expect_total);
    CHECK(sel.ratio == doctest::Approx(static_cast<double>(expect_sel) / expect_total));
    CHECK(sel.ratio < 0.10);

    for (const std::string& name : sel.names) {
        CHECK(model.params().find(name)->role != ParamRole::weight);
    }

    ModelParams broken;
    broken.add("orphan", ParamRole::untagged, Tensor::zeros({3}));
    CHECK_THROWS_AS(finetune_mask(broken, FinetuneMode::bias_norm_embed), ContractError);
}

TEST_CASE("masked training leaves weight matrices bit-identical") {
    ModelConfig cfg = tiny_config();
    DenoiserModel model(cfg);
    perturb_output(model, 51);

    DatasetSpec spec;
    spec.n_super = cfg.n_super;
    spec.subs_per_super = cfg.n_sub / cfg.n_super;
    spec.samples_per_sub = 4;
    spec.height = 16;
    spec.width = 16;
    Dataset ds = generate(spec);

    std::vector<std::pair<std::string, std::vector<double>>> weights_before;
    for (const Parameter& p : model.params().items) {
        if (p.role == ParamRole::weight) weights_before.emplace_back(p.name, p.value.data);
    }

    NoiseSchedule ns = NoiseSchedule::linear(20);
    TrainSettings ts;
    ts.batch = 4;
    ts.seed = 3;
    GuidanceConfig gc;
    gc.t_split = 4;
    gc.d0 = 2.0;
    Trainer trainer(model, ds, ns, LossConfig{}, gc, ts, FinetuneMode::bias_norm_embed);
    trainer.run(5);

    for (const auto& [name, before] : weights_before) {
        CHECK(model.params().find(name)->value.data == before);
    }
    // and the masked parameters actually moved
    double moved = 0.0;
    const Tensor& table = model.params().find("embed.sub_table")->value;
    DenoiserModel fresh(cfg);
    const Tensor& orig = fresh.params().find("embed.sub_table")->value;
    for (std::size_t i = 0; i < table.data.size(); ++i) {
        moved += std::abs(table.data[i] - orig.data[i]);
    }
    CHECK(moved > 0.0);
}

TEST_CASE("checkpoint round trip is bitwise and validates the container") {
    DenoiserModel model(tiny_config());
    perturb_output(model, 61);
    const std::string path = temp_path("efdit_test_ckpt.efd1");
    save_checkpoint(model.params(), path);

    ModelParams loaded = load_checkpoint(path);
    REQUIRE(loaded.items.size() == model.params().items.size());
    for (std::size_t i = 0; i < loaded.items.size(); ++i) {
        CHECK(loaded.items[i].name == model.params().items[i].name);
        CHECK(loaded.items[i].role == model.params().items[i].role);
        CHECK(loaded.items[i].value.shape == model.params().items[i].value.shape);
        CHECK(loaded.items[i].value.data == model.params().items[i].value.data);
    }

    DenoiserModel model2(tiny_config());
    load_into_model(model2, path);
    Rng rng(1);
    Tensor x = Tensor::randn({1, 16, 16, 1}, rng);
    Tensor a = model.forward(x, {5}, {TieredCondition{1, 0}}, {}, 9);
    Tensor b = model2.forward(x, {5}, {TieredCondition{1, 0}}, {}, 9);
    CHECK(a.data == b.data);

    // truncation reports an offset
    {
        std::ifstream in(path, std::ios::binary);
        std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(path + ".trunc", std::ios::binary);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
    }
    try {
        load_checkpoint(path + ".trunc");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }

    // magic check
    {
        std::ofstream out(path + ".bad", std::ios::binary);
        out << "NOPEnope";
    }
    CHECK_THROWS_AS(load_checkpoint(path + ".bad"), IoError);

    // architecture mismatch
    ModelConfig other = tiny_config();
    other.d_model = 64;
    DenoiserModel model3(other);
    CHECK_THROWS_AS(load_into_model(model3, path), ContractError);

    std::remove(path.c_str());
    std::remove((path + ".trunc").c_str());
    std::remove((path + ".bad").c_str());
}

TEST_CASE("full attention mode runs the same contract") {
    ModelConfig cfg = tiny_config();
    cfg.pro_attention = false;
    DenoiserModel model(cfg);
    perturb_output(model, 71);
    Rng rng(73);
    Tensor x = Tensor::randn({2, 16, 16, 1}, rng);
    Tensor out = model.forward(x, {1, 19}, {TieredCondition{0, 0}, TieredCondition{5, 1}});
    CHECK(out.shape == x.shape);
    for (double v : out.data) CHECK(std::isfinite(v));
}
