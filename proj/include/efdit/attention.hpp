#pragma once

#include <cstdint>
#include <vector>

#include "efdit/tensor.hpp"

namespace efdit {

// Sampling budget for sparse attention. With query/key counts L_Q and L_K:
//   u = ceil(c * ln L_Q)           queries kept for exact attention
//   U = ceil(L_K * ln L_Q)         total sampled score budget
//   s = ceil(U / L_Q)              per-query sample ceiling
// The budget is spread evenly (floor + remainder), so at most s keys are
// sampled per query and the total never exceeds U.
struct AttentionConfig {
    double c = 5.0;
    std::uint64_t rng_seed = 0;
    // 0 = derive from c; tests use overrides for degenerate configurations.
    std::int64_t u_override = 0;
    std::int64_t s_override = 0;

    std::int64_t u(std::int64_t l_q) const;
    std::int64_t budget(std::int64_t l_q, std::int64_t l_k) const;  // U
    std::int64_t s(std::int64_t l_q, std::int64_t l_k) const;
};

struct SparsityReport {
    std::vector<double> measures;    // sampled max-mean score per query
    std::vector<int> selected;       // top-u query indices, ascending
    std::int64_t dot_products_used = 0;
    bool u_clamped = false;
};

// Dense softmax attention: row i is sum_j p(k_j | q_i) v_j with scores
// q_i.k_j / sqrt(d).
Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Log-sum-exp of the scaled scores minus their arithmetic mean. Bounded by
// ln L_K <= M <= max-mean + ln L_K.
double exact_sparsity_measure(const std::vector<double>& query_row, const Tensor& k);

// Max of the scaled scores minus their mean over an explicit key subset.
double max_mean_measure(const std::vector<double>& query_row, const Tensor& k,
                        const std::vector<int>& sampled_keys);

// Computes only the sampled measurement + top-u selection (no output rows).
SparsityReport score_queries(const Tensor& q, const Tensor& k, const AttentionConfig& cfg);

// Sparse attention: selected queries attend exactly over all keys; the rest
// fall back to the column mean of V.
std::pair<Tensor, SparsityReport> pro_attention(const Tensor& q, const Tensor& k,
                                                const Tensor& v, const AttentionConfig& cfg);

struct ProbeRow {
    std::int64_t l = 0;
    std::string method;
    std::int64_t dot_products = 0;
    std::int64_t wall_time_ns = 0;
    std::uint64_t seed = 0;
};

// Runs dense and sparse attention over a range of symmetric lengths and
// reports dot-product counts plus wall time per method.
std::vector<ProbeRow> complexity_probe(const std::vector<std::int64_t>& lengths,
                                       const AttentionConfig& cfg, std::int64_t d = 32);

std::string probe_csv(const std::vector<ProbeRow>& rows);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace efdit
