#include "efdit/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>

namespace efdit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and dataset formats assume a little-endian host");

// ---- parameter store --------------------------------------------------------

Parameter& ModelParams::add(std::string name, ParamRole role, Tensor value) {
    if (find(name)) throw ContractError("duplicate parameter name: " + name);
    items.push_back(Parameter{std::move(name), role, std::move(value)});
    return items.back();
}

Parameter* ModelParams::find(const std::string& name) {
    for (Parameter& p : items) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

const Parameter* ModelParams::find(const std::string& name) const {
    for (const Parameter& p : items) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

std::int64_t ModelParams::total_elements() const {
    std::int64_t n = 0;
    for (const Parameter& p : items) n += p.value.numel();
    return n;
}

FinetuneSelection finetune_mask(const ModelParams& params, FinetuneMode mode) {
    FinetuneSelection sel;
    for (const Parameter& p : params.items) {
        if (p.role == ParamRole::untagged) {
            throw ContractError("untagged parameter: " + p.name);
        }
        sel.total_elements += p.value.numel();
        const bool pick = mode == FinetuneMode::full ||
                          p.role == ParamRole::bias || p.role == ParamRole::norm_gain ||
                          p.role == ParamRole::norm_bias || p.role == ParamRole::embedding;
        if (pick) {
            sel.names.push_back(p.name);
            sel.selected_elements += p.value.numel();
        }
    }
    sel.ratio = sel.total_elements == 0
                    ? 0.0
                    : static_cast<double>(sel.selected_elements) /
                          static_cast<double>(sel.total_elements);
    return sel;
}

// ---- model ------------------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-5;

Tensor fanin_uniform(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), -limit, limit, rng);
}

// bias broadcast over the rows of a rank-2 tensor
Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    const std::int64_t rows = x.shape[0];
    return add(x, repeat_rows(reshape(bias, {1, bias.numel()}), rows));
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_t) {
    return add(mul(x, add(scale_t, Tensor::scalar_of(1.0))), shift);
}

}  // namespace

DenoiserModel::DenoiserModel(const ModelConfig& cfg) : cfg_(cfg) {
    if (cfg_.patch <= 0 || cfg_.height % cfg_.patch != 0 || cfg_.width % cfg_.patch != 0) {
        throw ConfigError("image " + std::to_string(cfg_.height) + "x" +
                          std::to_string(cfg_.width) + " not divisible by patch " +
                          std::to_string(cfg_.patch));
    }
    if (cfg_.d_model % cfg_.heads != 0) {
        throw ConfigError("d_model must be divisible by the head count");
    }
    if (cfg_.d_model % 4 != 0) {
        throw ConfigError("d_model must be a multiple of 4 for the 2D position encoding");
    }
    if (cfg_.time_embed_dim % 2 != 0) {
        throw ConfigError("time_embed_dim must be even");
    }

    Rng rng(cfg_.init_seed);
    const std::int64_t d = cfg_.d_model;
    const std::int64_t pd = cfg_.patch_dim();
    const std::int64_t hidden = d * cfg_.mlp_ratio;

    params_.add("patch_embed.w", ParamRole::weight, fanin_uniform({pd, d}, pd, rng));
    params_.add("patch_embed.b", ParamRole::bias, Tensor::zeros({d}));
    params_.add("time_mlp.w1", ParamRole::weight,
                fanin_uniform({cfg_.time_embed_dim, d}, cfg_.time_embed_dim, rng));
    params_.add("time_mlp.b1", ParamRole::bias, Tensor::zeros({d}));
    params_.add("time_mlp.w2", ParamRole::weight, fanin_uniform({d, d}, d, rng));
    params_.add("time_mlp.b2", ParamRole::bias, Tensor::zeros({d}));
    params_.add("embed.sub_table", ParamRole::embedding,
                fanin_uniform({cfg_.n_sub + 1, d}, d, rng));
    params_.add("embed.super_table", ParamRole::embedding,
                fanin_uniform({cfg_.n_super + 1, d}, d, rng));

    for (std::int64_t i = 0; i < cfg_.blocks; ++i) {
        const std::string b = "block" + std::to_string(i) + ".";
        params_.add(b + "ln1.g", ParamRole::norm_gain, Tensor::ones({d}));
        params_.add(b + "ln1.b", ParamRole::norm_bias, Tensor::zeros({d}));
        params_.add(b + "attn.wqkv", ParamRole::weight, fanin_uniform({d, 3 * d}, d, rng));
        params_.add(b + "attn.bqkv", ParamRole::bias, Tensor::zeros({3 * d}));
        params_.add(b + "attn.wo", ParamRole::weight, fanin_uniform({d, d}, d, rng));
        params_.add(b + "attn.bo", ParamRole::bias, Tensor::zeros({d}));
        params_.add(b + "ln2.g", ParamRole::norm_gain, Tensor::ones({d}));
        params_.add(b + "ln2.b", ParamRole::norm_bias, Tensor::zeros({d}));
        params_.add(b + "mlp.w1", ParamRole::weight, fanin_uniform({d, hidden}, d, rng));
        params_.add(b + "mlp.b1", ParamRole::bias, Tensor::zeros({hidden}));
        params_.add(b + "mlp.w2", ParamRole::weight, fanin_uniform({hidden, d}, hidden, rng));
        params_.add(b + "mlp.b2", ParamRole::bias, Tensor::zeros({d}));
        params_.add(b + "mod.w", ParamRole::weight, fanin_uniform({d, 6 * d}, d, rng));
        params_.add(b + "mod.b", ParamRole::bias, Tensor::zeros({6 * d}));
    }

    params_.add("final.ln.g", ParamRole::norm_gain, Tensor::ones({d}));
    params_.add("final.ln.b", ParamRole::norm_bias, Tensor::zeros({d}));
    params_.add("final.mod.w", ParamRole::weight, fanin_uniform({d, 2 * d}, d, rng));
    params_.add("final.mod.b", ParamRole::bias, Tensor::zeros({2 * d}));
    // zero-initialized output projection: the model predicts exactly zero
    // noise until training moves it
    params_.add("final.proj.w", ParamRole::weight, Tensor::zeros({d, pd}));
    params_.add("final.proj.b", ParamRole::bias, Tensor::zeros({pd}));

    // fixed 2D sinusoidal positions over the patch grid
    const std::int64_t gh = cfg_.height / cfg_.patch;
    const std::int64_t gw = cfg_.width / cfg_.patch;
    pos_embedding_ = Tensor({gh * gw, d});
    const std::int64_t quarter = d / 4;
    for (std::int64_t py = 0; py < gh; ++py) {
        for (std::int64_t px = 0; px < gw; ++px) {
            const std::int64_t n = py * gw + px;
            for (std::int64_t i = 0; i < quarter; ++i) {
                const double freq =
                    std::exp(-std::log(10000.0) * static_cast<double>(i) /
                             static_cast<double>(quarter));
                pos_embedding_.data[static_cast<std::size_t>(n * d + i)] =
                    std::sin(static_cast<double>(py) * freq);
                pos_embedding_.data[static_cast<std::size_t>(n * d + quarter + i)] =
                    std::cos(static_cast<double>(py) * freq);
                pos_embedding_.data[static_cast<std::size_t>(n * d + 2 * quarter + i)] =
                    std::sin(static_cast<double>(px) * freq);
                pos_embedding_.data[static_cast<std::size_t>(n * d + 3 * quarter + i)] =
                    std::cos(static_cast<double>(px) * freq);
            }
        }
    }
}

Tensor DenoiserModel::timestep_embedding(const std::vector<int>& t_ids) const {
    const std::int64_t b = static_cast<std::int64_t>(t_ids.size());
    const std::int64_t dim = cfg_.time_embed_dim;
    const std::int64_t half = dim / 2;
    Tensor out({b, dim});
    for (std::int64_t i = 0; i < b; ++i) {
        const double t = static_cast<double>(t_ids[static_cast<std::size_t>(i)]);
        for (std::int64_t j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                         static_cast<double>(half));
            out.data[static_cast<std::size_t>(i * dim + j)] = std::sin(t * freq);
            out.data[static_cast<std::size_t>(i * dim + half + j)] = std::cos(t * freq);
        }
    }
    return out;
}

Tensor DenoiserModel::embed_condition(const std::vector<TieredCondition>& conds,
                                      const std::vector<std::pair<bool, bool>>& drops,
                                      const ParamLookup* tracked) const {
    const std::size_t b = conds.size();
    if (!drops.empty() && drops.size() != b) {
        throw ContractError("embed_condition: drop flags do not match the batch");
    }
    auto lookup = [&](const char* name) -> const Tensor& {
        if (tracked) {
            auto it = tracked->find(name);
            if (it != tracked->end()) return it->second;
        }
        return params_.find(name)->value;
    };
    std::vector<int> sub_rows(b), super_rows(b);
    for (std::size_t i = 0; i < b; ++i) {
        const TieredCondition& c = conds[i];
        const bool drop_sub = !drops.empty() && drops[i].first;
        const bool drop_super = !drops.empty() && drops[i].second;
        if (c.subclass != TieredCondition::kNull &&
            (c.subclass < 0 || c.subclass >= cfg_.n_sub)) {
            throw ContractError("subclass id " + std::to_string(c.subclass) + " out of range");
        }
        if (c.superclass != TieredCondition::kNull &&
            (c.superclass < 0 || c.superclass >= cfg_.n_super)) {
            throw ContractError("superclass id " + std::to_string(c.superclass) + " out of range");
        }
        sub_rows[i] = (c.subclass == TieredCondition::kNull || drop_sub) ? cfg_.n_sub : c.subclass;
        super_rows[i] = (!cfg_.super_embedding || c.superclass == TieredCondition::kNull ||
                         drop_super)
                            ? cfg_.n_super
                            : c.superclass;
    }
    Tensor e_sub = take_rows(lookup("embed.sub_table"), sub_rows);
    Tensor e_super = take_rows(lookup("embed.super_table"), super_rows);
    return add(e_sub, e_super);
}

namespace {

// Multi-head sparse attention over the packed qkv activations, fused into a
// single tape node with an analytic pullback. Selected queries attend over
// all keys; the rest take the column mean of V.
struct HeadSaved {
    std::vector<int> selected;
    std::vector<double> probs;    // |selected| x L, softmax rows
    std::vector<double> q, k, v;  // L x dh slices
};

Tensor fused_attention(const ModelConfig& cfg, const Tensor& qkv, std::int64_t batch,
                       std::uint64_t block_seed) {
    const std::int64_t l = cfg.tokens();
    const std::int64_t d = cfg.d_model;
    const std::int64_t heads = cfg.heads;
    const std::int64_t dh = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::int64_t cols = 3 * d;

    Tensor out({batch * l, d});
    auto saved = std::make_shared<std::vector<HeadSaved>>();
    if (qkv.tape) saved->resize(static_cast<std::size_t>(batch * heads));

    std::vector<double> q(static_cast<std::size_t>(l * dh));
    std::vector<double> k(static_cast<std::size_t>(l * dh));
    std::vector<double> v(static_cast<std::size_t>(l * dh));
    std::vector<double> scores(static_cast<std::size_t>(l));
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
            const std::int64_t qoff = h * dh;
            const std::int64_t koff = d + h * dh;
            const std::int64_t voff = 2 * d + h * dh;
            for (std::int64_t i = 0; i < l; ++i) {
                const double* row = qkv.data.data() + (b * l + i) * cols;
                for (std::int64_t t = 0; t < dh; ++t) {
                    q[static_cast<std::size_t>(i * dh + t)] = row[qoff + t];
                    k[static_cast<std::size_t>(i * dh + t)] = row[koff + t];
                    v[static_cast<std::size_t>(i * dh + t)] = row[voff + t];
                }
            }

            std::vector<int> selected;
            if (cfg.pro_attention) {
                AttentionConfig acfg;
                acfg.c = cfg.attn_c;
                acfg.rng_seed = Rng::mix(block_seed, static_cast<std::uint64_t>(h));
                Tensor qt({l, dh}, q);
                Tensor kt({l, dh}, k);
                selected = score_queries(qt, kt, acfg).selected;
            } else {
                selected.resize(static_cast<std::size_t>(l));
                for (std::int64_t i = 0; i < l; ++i) selected[static_cast<std::size_t>(i)] =
                    static_cast<int>(i);
            }

            // fallback: column mean of V
            std::vector<double> vmean(static_cast<std::size_t>(dh), 0.0);
            for (std::int64_t j = 0; j < l; ++j) {
                for (std::int64_t t = 0; t < dh; ++t) {
                    vmean[static_cast<std::size_t>(t)] += v[static_cast<std::size_t>(j * dh + t)];
                }
            }
            for (double& t : vmean) t /= static_cast<double>(l);
            for (std::int64_t i = 0; i < l; ++i) {
                double* orow = out.data.data() + (b * l + i) * d + h * dh;
                for (std::int64_t t = 0; t < dh; ++t) orow[t] = vmean[static_cast<std::size_t>(t)];
            }

            const std::int64_t u = static_cast<std::int64_t>(selected.size());
            std::vector<double> probs(static_cast<std::size_t>(u * l));
            for (std::int64_t si = 0; si < u; ++si) {
                const int i = selected[static_cast<std::size_t>(si)];
                const double* qi = q.data() + static_cast<std::int64_t>(i) * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::int64_t j = 0; j < l; ++j) {
                    double acc = 0.0;
                    const double* kj = k.data() + j * dh;
                    for (std::int64_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
                    scores[static_cast<std::size_t>(j)] = acc * inv;
                    mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
                }
                double z = 0.0;
                for (std::int64_t j = 0; j < l; ++j) {
                    const double e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                    probs[static_cast<std::size_t>(si * l + j)] = e;
                    z += e;
                }
                double* orow = out.data.data() + (b * l + i) * d + h * dh;
                for (std::int64_t t = 0; t < dh; ++t) orow[t] = 0.0;
                for (std::int64_t j = 0; j < l; ++j) {
                    const double p = probs[static_cast<std::size_t>(si * l + j)] / z;
                    probs[static_cast<std::size_t>(si * l + j)] = p;
                    const double* vj = v.data() + j * dh;
                    for (std::int64_t t = 0; t < dh; ++t) orow[t] += p * vj[t];
                }
            }

            if (qkv.tape) {
                HeadSaved& hs = (*saved)[static_cast<std::size_t>(b * heads + h)];
                hs.selected = std::move(selected);
                hs.probs = std::move(probs);
                hs.q = q;
                hs.k = k;
                hs.v = v;
            }
        }
    }

    if (!qkv.tape) return out;
    const std::int64_t id = qkv.node;
    return qkv.tape->track_custom("attention", {&qkv}, std::move(out),
        [=](const std::vector<double>& dy, GradTape& tape) {
            if (id < 0) return;
            auto& dqkv = tape.grad_buffer(id);
            std::vector<double> dq(static_cast<std::size_t>(l * dh));
            std::vector<double> dk(static_cast<std::size_t>(l * dh));
            std::vector<double> dv(static_cast<std::size_t>(l * dh));
            std::vector<double> da(static_cast<std::size_t>(l));
            std::vector<char> is_sel(static_cast<std::size_t>(l));
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t h = 0; h < heads; ++h) {
                    const HeadSaved& hs = (*saved)[static_cast<std::size_t>(b * heads + h)];
                    std::fill(dq.begin(), dq.end(), 0.0);
                    std::fill(dk.begin(), dk.end(), 0.0);
                    std::fill(dv.begin(), dv.end(), 0.0);
                    std::fill(is_sel.begin(), is_sel.end(), 0);
                    for (int i : hs.selected) is_sel[static_cast<std::size_t>(i)] = 1;

                    // fallback rows pull the output gradient into the V mean
                    std::vector<double> dmean(static_cast<std::size_t>(dh), 0.0);
                    for (std::int64_t i = 0; i < l; ++i) {
                        if (is_sel[static_cast<std::size_t>(i)]) continue;
                        const double* dyrow = dy.data() + (b * l + i) * d + h * dh;
                        for (std::int64_t t = 0; t < dh; ++t) dmean[static_cast<std::size_t>(t)] += dyrow[t];
                    }
                    for (std::int64_t j = 0; j < l; ++j) {
                        for (std::int64_t t = 0; t < dh; ++t) {
                            dv[static_cast<std::size_t>(j * dh + t)] +=
                                dmean[static_cast<std::size_t>(t)] / static_cast<double>(l);
                        }
                    }

                    const std::int64_t u = static_cast<std::int64_t>(hs.selected.size());
                    for (std::int64_t si = 0; si < u; ++si) {
                        const int i = hs.selected[static_cast<std::size_t>(si)];
                        const double* dyrow =
                            dy.data() + (b * l + static_cast<std::int64_t>(i)) * d + h * dh;
                        const double* prow = hs.probs.data() + si * l;
                        // dV += A^T dO ; dA = dO V^T
                        double dot = 0.0;
                        for (std::int64_t j = 0; j < l; ++j) {
                            const double* vj = hs.v.data() + j * dh;
                            double* dvj = dv.data() + j * dh;
                            double acc = 0.0;
                            for (std::int64_t t = 0; t < dh; ++t) {
                                dvj[t] += prow[j] * dyrow[t];
                                acc += dyrow[t] * vj[t];
                            }
                            da[static_cast<std::size_t>(j)] = acc;
                            dot += acc * prow[j];
                        }
                        // softmax pullback, then into q and k
                        const double* qi = hs.q.data() + static_cast<std::int64_t>(i) * dh;
                        double* dqi = dq.data() + static_cast<std::int64_t>(i) * dh;
                        for (std::int64_t j = 0; j < l; ++j) {
                            const double ds = prow[j] * (da[static_cast<std::size_t>(j)] - dot) * inv;
                            if (ds == 0.0) continue;
                            const double* kj = hs.k.data() + j * dh;
                            double* dkj = dk.data() + j * dh;
                            for (std::int64_t t = 0; t < dh; ++t) {
                                dqi[t] += ds * kj[t];
                                dkj[t] += ds * qi[t];
                            }
                        }
                    }

                    const std::int64_t qoff = h * dh;
                    const std::int64_t koff = d + h * dh;
                    const std::int64_t voff = 2 * d + h * dh;
                    for (std::int64_t i = 0; i < l; ++i) {
                        double* grow = dqkv.data() + (b * l + i) * cols;
                        for (std::int64_t t = 0; t < dh; ++t) {
                            grow[qoff + t] += dq[static_cast<std::size_t>(i * dh + t)];
                            grow[koff + t] += dk[static_cast<std::size_t>(i * dh + t)];
                            grow[voff + t] += dv[static_cast<std::size_t>(i * dh + t)];
                        }
                    }
                }
            }
        });
}

// Token layout: token n of image b lives at row b*N + n; patch pixels are
// packed column-major-in-channel order ((dy*p + dx)*C + c).
std::vector<std::int64_t> unpatchify_map(const ModelConfig& cfg, std::int64_t b) {
    const std::int64_t p = cfg.patch, ch = cfg.channels, w = cfg.width, h = cfg.height;
    const std::int64_t gw = w / p;
    const std::int64_t pd = cfg.patch_dim();
    std::vector<std::int64_t> map(static_cast<std::size_t>(b * h * w * ch));
    std::int64_t out = 0;
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                for (std::int64_t c = 0; c < ch; ++c) {
                    const std::int64_t n = (y / p) * gw + (x / p);
                    const std::int64_t col = ((y % p) * p + (x % p)) * ch + c;
                    map[static_cast<std::size_t>(out++)] =
                        (bi * (gw * (h / p)) + n) * pd + col;
                }
            }
        }
    }
    return map;
}

Tensor patchify(const ModelConfig& cfg, const Tensor& x) {
    const std::int64_t b = x.shape[0];
    const auto map = unpatchify_map(cfg, b);
    Tensor out({b * cfg.tokens(), cfg.patch_dim()});
    for (std::size_t i = 0; i < map.size(); ++i) {
        out.data[static_cast<std::size_t>(map[i])] = x.data[i];
    }
    return out;
}

Tensor unpatchify(const ModelConfig& cfg, const Tensor& tokens, std::int64_t b) {
    const auto map = unpatchify_map(cfg, b);
    Tensor value({b, cfg.height, cfg.width, cfg.channels});
    for (std::size_t i = 0; i < map.size(); ++i) {
        value.data[i] = tokens.data[static_cast<std::size_t>(map[i])];
    }
    if (!tokens.tape) return value;
    const std::int64_t id = tokens.node;
    return tokens.tape->track_custom("unpatchify", {&tokens}, std::move(value),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (id < 0) return;
            auto& dx = t.grad_buffer(id);
            for (std::size_t i = 0; i < map.size(); ++i) {
                dx[static_cast<std::size_t>(map[i])] += dy[i];
            }
        });
}

}  // namespace

Tensor DenoiserModel::forward(const Tensor& x, const std::vector<int>& t_ids,
                              const std::vector<TieredCondition>& conds,
                              const std::vector<std::pair<bool, bool>>& drops,
                              std::uint64_t attn_seed, const ParamLookup* tracked) const {
    if (x.rank() != 4) throw DimError("forward: expected [B x H x W x C], got " + shape_str(x.shape));
    if (x.shape[1] != cfg_.height || x.shape[2] != cfg_.width || x.shape[3] != cfg_.channels) {
        throw DimError("forward: input " + shape_str(x.shape) + " does not match the model");
    }
    const std::int64_t b = x.shape[0];
    if (static_cast<std::int64_t>(t_ids.size()) != b ||
        static_cast<std::int64_t>(conds.size()) != b) {
        throw ContractError("forward: timestep/condition count does not match the batch");
    }
    auto P = [&](const std::string& name) -> const Tensor& {
        if (tracked) {
            auto it = tracked->find(name);
            if (it != tracked->end()) return it->second;
        }
        const Parameter* p = params_.find(name);
        if (!p) throw ContractError("unknown parameter: " + name);
        return p->value;
    };

    const std::int64_t d = cfg_.d_model;
    const std::int64_t n_tok = cfg_.tokens();

    Tensor tok = add_row_bias(matmul(patchify(cfg_, x), P("patch_embed.w")), P("patch_embed.b"));
    tok = add(tok, repeat_rows_of_pos(b));

    Tensor temb = timestep_embedding(t_ids);
    Tensor th = silu(add_row_bias(matmul(temb, P("time_mlp.w1")), P("time_mlp.b1")));
    Tensor tvec = add_row_bias(matmul(th, P("time_mlp.w2")), P("time_mlp.b2"));
    Tensor cond = add(tvec, embed_condition(conds, drops, tracked));
    Tensor cond_act = silu(cond);

    for (std::int64_t blk = 0; blk < cfg_.blocks; ++blk) {
        const std::string bp = "block" + std::to_string(blk) + ".";
        Tensor mod = add_row_bias(matmul(cond_act, P(bp + "mod.w")), P(bp + "mod.b"));
        auto expand = [&](std::int64_t off) {
            return repeat_rows(slice_cols(mod, off, d), n_tok);
        };
        Tensor shift1 = expand(0), scale1 = expand(d), gate1 = expand(2 * d);
        Tensor shift2 = expand(3 * d), scale2 = expand(4 * d), gate2 = expand(5 * d);

        Tensor h1 = modulate(layernorm(tok, P(bp + "ln1.g"), P(bp + "ln1.b"), kLnEps),
                             shift1, scale1);
        Tensor qkv = add_row_bias(matmul(h1, P(bp + "attn.wqkv")), P(bp + "attn.bqkv"));
        Tensor heads_out =
            fused_attention(cfg_, qkv, b, Rng::mix(attn_seed, static_cast<std::uint64_t>(blk)));
        Tensor att_out = add_row_bias(matmul(heads_out, P(bp + "attn.wo")), P(bp + "attn.bo"));
        tok = add(tok, mul(gate1, att_out));

        Tensor h2 = modulate(layernorm(tok, P(bp + "ln2.g"), P(bp + "ln2.b"), kLnEps),
                             shift2, scale2);
        Tensor m1 = silu(add_row_bias(matmul(h2, P(bp + "mlp.w1")), P(bp + "mlp.b1")));
        Tensor m2 = add_row_bias(matmul(m1, P(bp + "mlp.w2")), P(bp + "mlp.b2"));
        tok = add(tok, mul(gate2, m2));
    }

    Tensor modf = add_row_bias(matmul(cond_act, P("final.mod.w")), P("final.mod.b"));
    Tensor shiftf = repeat_rows(slice_cols(modf, 0, d), n_tok);
    Tensor scalef = repeat_rows(slice_cols(modf, d, d), n_tok);
    Tensor hf = modulate(layernorm(tok, P("final.ln.g"), P("final.ln.b"), kLnEps), shiftf, scalef);
    Tensor out_tok = add_row_bias(matmul(hf, P("final.proj.w")), P("final.proj.b"));
    return unpatchify(cfg_, out_tok, b);
}

Tensor DenoiserModel::repeat_rows_of_pos(std::int64_t b) const {
    Tensor out({b * pos_embedding_.shape[0], pos_embedding_.shape[1]});
    for (std::int64_t i = 0; i < b; ++i) {
        std::copy(pos_embedding_.data.begin(), pos_embedding_.data.end(),
                  out.data.begin() + i * pos_embedding_.numel());
    }
    return out;
}

// ---- checkpoint io -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'E', 'F', 'D', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(const std::string& buf, std::size_t& off, const std::string& path) {
    if (off + sizeof(T) > buf.size()) {
        throw IoError(path + ": truncated at byte offset " + std::to_string(off));
    }
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.items.size()));
    std::uint64_t offset = 0;
    for (const Parameter& p : params.items) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p.role));
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p.value.rank()));
        for (std::int64_t dim : p.value.shape) {
            write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
        }
        write_pod<std::uint64_t>(os, offset);
        offset += static_cast<std::uint64_t>(p.value.numel()) * sizeof(double);
    }
    for (const Parameter& p : params.items) {
        os.write(reinterpret_cast<const char*>(p.value.data.data()),
                 static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::size_t off = 0;
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw IoError(path + ": bad magic, not an EFD1 checkpoint");
    }
    off = 4;
    const auto version = read_pod<std::uint32_t>(buf, off, path);
    if (version != kVersion) {
        throw IoError(path + ": unsupported version " + std::to_string(version));
    }
    const auto count = read_pod<std::uint32_t>(buf, off, path);
    struct Entry {
        std::string name;
        ParamRole role;
        std::vector<std::int64_t> shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        const auto name_len = read_pod<std::uint16_t>(buf, off, path);
        if (off + name_len > buf.size()) {
            throw IoError(path + ": truncated at byte offset " + std::to_string(off));
        }
        e.name.assign(buf.data() + off, name_len);
        off += name_len;
        e.role = static_cast<ParamRole>(read_pod<std::uint8_t>(buf, off, path));
        const auto rank = read_pod<std::uint8_t>(buf, off, path);
        for (std::uint8_t r = 0; r < rank; ++r) {
            e.shape.push_back(read_pod<std::uint32_t>(buf, off, path));
        }
        e.offset = read_pod<std::uint64_t>(buf, off, path);
        entries.push_back(std::move(e));
    }
    const std::size_t data_start = off;
    std::uint64_t expected = 0;
    for (const Entry& e : entries) expected += static_cast<std::uint64_t>(numel_of(e.shape)) * 8;
    if (buf.size() != data_start + expected) {
        throw IoError(path + ": length mismatch, expected " +
                      std::to_string(data_start + expected) + " bytes but file has " +
                      std::to_string(buf.size()));
    }
    ModelParams params;
    for (const Entry& e : entries) {
        Tensor t(e.shape);
        std::memcpy(t.data.data(), buf.data() + data_start + e.offset,
                    t.data.size() * sizeof(double));
        params.add(e.name, e.role, std::move(t));
    }
    return params;
}

void load_into_model(DenoiserModel& model, const std::string& path) {
    ModelParams loaded = load_checkpoint(path);
    ModelParams& dst = model.params();
    if (loaded.items.size() != dst.items.size()) {
        throw ContractError(path + ": checkpoint has " + std::to_string(loaded.items.size()) +
                            " parameters, model expects " + std::to_string(dst.items.size()));
    }
    for (Parameter& p : dst.items) {
        const Parameter* src = loaded.find(p.name);
        if (!src) throw ContractError(path + ": checkpoint missing parameter " + p.name);
        if (src->value.shape != p.value.shape) {
            throw ContractError(path + ": shape mismatch for " + p.name + ": checkpoint " +
                                shape_str(src->value.shape) + " vs model " +
                                shape_str(p.value.shape));
        }
        p.value.data = src->value.data;
        p.role = src->role;
    }
}

}  // namespace efdit
