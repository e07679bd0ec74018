#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "efdit/attention.hpp"
#include "efdit/tensor.hpp"

namespace efdit {

// Hierarchical label: a fine subclass plus its coarse superclass. Either
// level may be null (kNull) to request the unconditional embedding row.
struct TieredCondition {
    static constexpr int kNull = -1;
    int subclass = kNull;
    int superclass = kNull;
};

enum class ParamRole : std::uint8_t {
    untagged = 0,
    bias = 1,
    norm_gain = 2,
    norm_bias = 3,
    embedding = 4,
    weight = 5,
};

struct Parameter {
    std::string name;
    ParamRole role = ParamRole::untagged;
    Tensor value;
};

struct ModelParams {
    std::vector<Parameter> items;

    Parameter& add(std::string name, ParamRole role, Tensor value);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    std::int64_t total_elements() const;
};

enum class FinetuneMode { full, bias_norm_embed };

struct FinetuneSelection {
    std::vector<std::string> names;
    std::int64_t selected_elements = 0;
    std::int64_t total_elements = 0;
    double ratio = 0.0;
};

// full -> everything; bias_norm_embed -> exactly the roles
// {bias, norm_gain, norm_bias, embedding}.
FinetuneSelection finetune_mask(const ModelParams& params, FinetuneMode mode);

// During training the trainer watches parameters on a tape and passes the
// tracked copies here; the model falls back to stored values for any
// parameter not present.
using ParamLookup = std::unordered_map<std::string, Tensor>;

struct ModelConfig {
    std::int64_t height = 32, width = 32, channels = 1;
    std::int64_t patch = 4;
    std::int64_t d_model = 64;
    std::int64_t blocks = 4;
    std::int64_t heads = 4;
    std::int64_t mlp_ratio = 4;
    std::int64_t time_embed_dim = 64;
    int n_sub = 20;
    int n_super = 4;
    bool super_embedding = true;   // false = subclass-only ablation
    bool pro_attention = true;
    double attn_c = 5.0;
    double drop_prob_sub = 0.1;
    double drop_prob_super = 0.1;
    std::uint64_t init_seed = 1;

    std::int64_t tokens() const { return (height / patch) * (width / patch); }
    std::int64_t patch_dim() const { return patch * patch * channels; }
};

// Conditional noise predictor: patch embedding with fixed 2D sinusoidal
// positions, adaptive-norm transformer blocks driven by timestep + tiered
// label conditioning, and a zero-initialized output projection (so the
// prediction is exactly zero at initialization).
class DenoiserModel {
public:
    explicit DenoiserModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }

    // Sum of the subclass and superclass rows; dropped or null levels
    // contribute their learned null row. d_model vector per condition.
    Tensor embed_condition(const std::vector<TieredCondition>& conds,
                           const std::vector<std::pair<bool, bool>>& drops,
                           const ParamLookup* tracked = nullptr) const;

    // x [B x H x W x C], one timestep id and condition per batch row.
    Tensor forward(const Tensor& x, const std::vector<int>& t_ids,
                   const std::vector<TieredCondition>& conds,
                   const std::vector<std::pair<bool, bool>>& drops = {},
                   std::uint64_t attn_seed = 0, const ParamLookup* tracked = nullptr) const;

private:
    ModelConfig cfg_;
    ModelParams params_;
    Tensor pos_embedding_;  // [tokens x d_model], fixed

    Tensor timestep_embedding(const std::vector<int>& t_ids) const;
    Tensor repeat_rows_of_pos(std::int64_t b) const;
};

// Checkpoint format: magic "EFD1", u32 version, u32 count, manifest of
// (name, role, shape, data offset), then raw little-endian f64 payload.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

// Loads a checkpoint into an existing model; names and shapes must agree.
void load_into_model(DenoiserModel& model, const std::string& path);

}  // namespace efdit
