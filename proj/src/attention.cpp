#include "efdit/attention.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace efdit {

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw DimError("attention expects rank-2 Q, K, V");
    }
    if (q.shape[1] == 0 || q.shape[1] != k.shape[1]) {
        if (q.shape[1] == 0) throw ConfigError("attention: zero head dimension");
        throw DimError("attention: Q has d=" + std::to_string(q.shape[1]) + " but K has d=" +
                       std::to_string(k.shape[1]));
    }
    if (k.shape[0] != v.shape[0]) {
        throw DimError("attention: K has " + std::to_string(k.shape[0]) + " rows but V has " +
                       std::to_string(v.shape[0]));
    }
}

double dot(const double* a, const double* b, std::int64_t d) {
    double s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

std::int64_t AttentionConfig::u(std::int64_t l_q) const {
    if (u_override > 0) return std::min<std::int64_t>(u_override, l_q);
    const double raw = c * std::log(static_cast<double>(l_q));
    auto v = static_cast<std::int64_t>(std::ceil(raw));
    return std::clamp<std::int64_t>(v, 1, l_q);
}

std::int64_t AttentionConfig::budget(std::int64_t l_q, std::int64_t l_k) const {
    const double raw = static_cast<double>(l_k) * std::log(static_cast<double>(l_q));
    return static_cast<std::int64_t>(std::ceil(raw));
}

std::int64_t AttentionConfig::s(std::int64_t l_q, std::int64_t l_k) const {
    if (s_override > 0) return std::min<std::int64_t>(s_override, l_k);
    const std::int64_t total = budget(l_q, l_k);
    const std::int64_t per = (total + l_q - 1) / l_q;
    return std::clamp<std::int64_t>(per, 1, l_k);
}

Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    check_qkv(q, k, v);
    const std::int64_t lq = q.shape[0], lk = k.shape[0], d = q.shape[1], dv = v.shape[1];
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor out({lq, dv});
    std::vector<double> scores(static_cast<std::size_t>(lk));
    for (std::int64_t i = 0; i < lq; ++i) {
        const double* qi = q.data.data() + i * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < lk; ++j) {
            scores[static_cast<std::size_t>(j)] = dot(qi, k.data.data() + j * d, d) * inv_sqrt_d;
            mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (std::int64_t j = 0; j < lk; ++j) {
            scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
            z += scores[static_cast<std::size_t>(j)];
        }
        double* orow = out.data.data() + i * dv;
        for (std::int64_t j = 0; j < lk; ++j) {
            const double p = scores[static_cast<std::size_t>(j)] / z;
            const double* vrow = v.data.data() + j * dv;
            for (std::int64_t t = 0; t < dv; ++t) orow[t] += p * vrow[t];
        }
    }
    return out;
}

double exact_sparsity_measure(const std::vector<double>& query_row, const Tensor& k) {
    if (k.rank() != 2 || k.shape[0] < 1) throw ContractError("exact_sparsity_measure: empty K");
    const std::int64_t lk = k.shape[0], d = k.shape[1];
    if (static_cast<std::int64_t>(query_row.size()) != d) {
        throw DimError("exact_sparsity_measure: query dimension mismatch");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> scores(static_cast<std::size_t>(lk));
    double mean = 0.0;
    for (std::int64_t j = 0; j < lk; ++j) {
        const double s = dot(query_row.data(), k.data.data() + j * d, d) * inv_sqrt_d;
        scores[static_cast<std::size_t>(j)] = s;
        mean += s;
        mx = std::max(mx, s);
    }
    mean /= static_cast<double>(lk);
    double z = 0.0;
    for (std::int64_t j = 0; j < lk; ++j) z += std::exp(scores[static_cast<std::size_t>(j)] - mx);
    return mx + std::log(z) - mean;
}

double max_mean_measure(const std::vector<double>& query_row, const Tensor& k,
                        const std::vector<int>& sampled_keys) {
    if (sampled_keys.empty()) throw ContractError("max_mean_measure: empty key sample");
    const std::int64_t d = k.shape[1];
    if (static_cast<std::int64_t>(query_row.size()) != d) {
        throw DimError("max_mean_measure: query dimension mismatch");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    double mx = -std::numeric_limits<double>::infinity();
    double mean = 0.0;
    for (int j : sampled_keys) {
        if (j < 0 || j >= k.shape[0]) throw ContractError("max_mean_measure: key index out of range");
        const double s = dot(query_row.data(), k.data.data() + static_cast<std::int64_t>(j) * d, d) *
                         inv_sqrt_d;
        mean += s;
        mx = std::max(mx, s);
    }
    mean /= static_cast<double>(sampled_keys.size());
    return mx - mean;
}

SparsityReport score_queries(const Tensor& q, const Tensor& k, const AttentionConfig& cfg) {
    const std::int64_t lq = q.shape[0], lk = k.shape[0], d = q.shape[1];
    SparsityReport rep;
    rep.measures.assign(static_cast<std::size_t>(lq),
                        -std::numeric_limits<double>::infinity());

    std::int64_t u = cfg.u(lq);
    if (cfg.u_override > lq) {
        u = lq;
        rep.u_clamped = true;
    }

    // Spread the total budget U evenly; the first (U mod L_Q) queries get one
    // extra sample. Total sampled pairs never exceed U.
    std::int64_t total = cfg.budget(lq, lk);
    std::int64_t base = total / lq;
    std::int64_t rem = total % lq;
    const std::int64_t cap = cfg.s_override > 0 ? cfg.s_override : lk;
    if (cfg.s_override > 0) {
        base = std::min<std::int64_t>(cfg.s_override, lk);
        rem = 0;
    }

    std::vector<int> rows(static_cast<std::size_t>(lq));
    std::iota(rows.begin(), rows.end(), 0);
    std::vector<double> qrow(static_cast<std::size_t>(d));
    Rng master(cfg.rng_seed);
    for (std::int64_t i = 0; i < lq; ++i) {
        std::int64_t si = std::min<std::int64_t>(std::min<std::int64_t>(base + (i < rem ? 1 : 0), cap), lk);
        if (si <= 0) continue;
        Rng qrng = master.fork(static_cast<std::uint64_t>(i));
        const std::vector<int> sample = qrng.sample_without_replacement(static_cast<int>(lk),
                                                                        static_cast<int>(si));
        std::copy_n(q.data.data() + i * d, d, qrow.data());
        rep.measures[static_cast<std::size_t>(i)] = max_mean_measure(qrow, k, sample);
        rep.dot_products_used += static_cast<std::int64_t>(sample.size());
    }

    // Top-u by measure; ties broken by the lower query index.
    std::vector<int> order(static_cast<std::size_t>(lq));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return rep.measures[static_cast<std::size_t>(a)] > rep.measures[static_cast<std::size_t>(b)];
    });
    rep.selected.assign(order.begin(), order.begin() + u);
    std::sort(rep.selected.begin(), rep.selected.end());
    return rep;
}

std::pair<Tensor, SparsityReport> pro_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                                const AttentionConfig& cfg) {
    check_qkv(q, k, v);
    const std::int64_t lq = q.shape[0], lk = k.shape[0], d = q.shape[1], dv = v.shape[1];
    SparsityReport rep = score_queries(q, k, cfg);

    // Fallback: every non-selected row gets the column mean of V (exact
    // softmax output under uniform scores).
    std::vector<double> vmean(static_cast<std::size_t>(dv), 0.0);
    for (std::int64_t j = 0; j < lk; ++j) {
        const double* vrow = v.data.data() + j * dv;
        for (std::int64_t t = 0; t < dv; ++t) vmean[static_cast<std::size_t>(t)] += vrow[t];
    }
    for (double& t : vmean) t /= static_cast<double>(lk);

    Tensor out({lq, dv});
    for (std::int64_t i = 0; i < lq; ++i) {
        std::copy(vmean.begin(), vmean.end(), out.data.begin() + i * dv);
    }

    // Selected rows: exact attention against all keys.
    Tensor qsel({static_cast<std::int64_t>(rep.selected.size()), d});
    for (std::size_t i = 0; i < rep.selected.size(); ++i) {
        std::copy_n(q.data.data() + static_cast<std::int64_t>(rep.selected[i]) * d, d,
                    qsel.data.data() + static_cast<std::int64_t>(i) * d);
    }
    Tensor osel = full_attention(qsel, k, v);
    for (std::size_t i = 0; i < rep.selected.size(); ++i) {
        std::copy_n(osel.data.data() + static_cast<std::int64_t>(i) * dv, dv,
                    out.data.begin() + static_cast<std::int64_t>(rep.selected[i]) * dv);
    }
    rep.dot_products_used += static_cast<std::int64_t>(rep.selected.size()) * lk;
    return {std::move(out), std::move(rep)};
}

std::vector<ProbeRow> complexity_probe(const std::vector<std::int64_t>& lengths,
                                       const AttentionConfig& cfg, std::int64_t d) {
    std::vector<ProbeRow> rows;
    for (std::int64_t l : lengths) {
        Rng rng(Rng::mix(cfg.rng_seed, static_cast<std::uint64_t>(l)));
        Tensor q = Tensor::randn({l, d}, rng);
        Tensor k = Tensor::randn({l, d}, rng);
        Tensor v = Tensor::randn({l, d}, rng);

        const auto t0 = std::chrono::steady_clock::now();
        Tensor dense = full_attention(q, k, v);
        const auto t1 = std::chrono::steady_clock::now();
        AttentionConfig run = cfg;
        run.rng_seed = Rng::mix(cfg.rng_seed, static_cast<std::uint64_t>(l) * 31);
        auto [sparse, rep] = pro_attention(q, k, v, run);
        const auto t2 = std::chrono::steady_clock::now();

        // keep the outputs alive so the timed work is not elided
        volatile double sink = dense.data[0] + sparse.data[0];
        (void)sink;

        ProbeRow dense_row;
        dense_row.l = l;
        dense_row.method = "dense";
        dense_row.dot_products = l * l;
        dense_row.wall_time_ns =
            std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
        dense_row.seed = cfg.rng_seed;
        rows.push_back(dense_row);

        ProbeRow pro_row;
        pro_row.l = l;
        pro_row.method = "pro";
        pro_row.dot_products = rep.dot_products_used;
        pro_row.wall_time_ns =
            std::chrono::duration_cast<std::chrono::nanoseconds>(t2 - t1).count();
        pro_row.seed = run.rng_seed;
        rows.push_back(pro_row);
    }
    return rows;
}

std::string probe_csv(const std::vector<ProbeRow>& rows) {
    std::ostringstream os;
    os << "L,method,dot_products,wall_time_ns,seed\n";
    for (const ProbeRow& r : rows) {
        os << r.l << "," << r.method << "," << r.dot_products << "," << r.wall_time_ns << ","
           << r.seed << "\n";
    }
    return os.str();
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need >= 2 points");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]);
        const double ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace efdit
