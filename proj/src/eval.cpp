#include "efdit/eval.hpp"

#include <algorithm>
#include <cmath>

#include "efdit/spectral.hpp"

namespace efdit {

// ---- probe feature map ---------------------------------------------------------

namespace {

constexpr std::int64_t kBlocks = 8;       // 8x8 grid of pixel means
constexpr std::int64_t kRadialBins = 8;   // power-spectrum rings, 2 cycles wide
constexpr std::int64_t kAngleBins = 6;    // orientation of the high band
constexpr double kHighBandMin = 5.0;      // cycles; below this is "shape" energy
constexpr double kPi2 = 3.14159265358979323846264338327950288;

}  // namespace

std::int64_t ProbeClassifier::feature_dim() { return kBlocks * kBlocks + kRadialBins + kAngleBins; }

std::vector<double> ProbeClassifier::features(const Tensor& image) {
    if (image.rank() != 3) throw DimError("probe features: expected [H x W x C]");
    const std::int64_t h = image.shape[0], w = image.shape[1], c = image.shape[2];
    std::vector<double> out(static_cast<std::size_t>(feature_dim()), 0.0);

    std::vector<std::int64_t> counts(static_cast<std::size_t>(kBlocks * kBlocks), 0);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t by = y * kBlocks / h;
            const std::int64_t bx = x * kBlocks / w;
            double v = 0.0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                v += image.data[static_cast<std::size_t>((y * w + x) * c + ch)];
            }
            out[static_cast<std::size_t>(by * kBlocks + bx)] += v / static_cast<double>(c);
            counts[static_cast<std::size_t>(by * kBlocks + bx)]++;
        }
    }
    for (std::int64_t i = 0; i < kBlocks * kBlocks; ++i) {
        if (counts[static_cast<std::size_t>(i)] > 0) {
            out[static_cast<std::size_t>(i)] /= static_cast<double>(counts[static_cast<std::size_t>(i)]);
        }
    }

    // power spectrum, channel-summed, DC excluded
    Spectrum s = fft2(image);
    double total = 0.0, high_total = 0.0;
    std::vector<double> radial(static_cast<std::size_t>(kRadialBins), 0.0);
    std::vector<double> angular(static_cast<std::size_t>(kAngleBins), 0.0);
    for (std::int64_t u = 0; u < s.h; ++u) {
        const double fu = static_cast<double>(u <= s.h / 2 ? u : u - s.h);
        for (std::int64_t v = 0; v < s.w; ++v) {
            const double fv = static_cast<double>(v <= s.w / 2 ? v : v - s.w);
            if (u == 0 && v == 0) continue;
            double e = 0.0;
            for (std::int64_t ch = 0; ch < s.c; ++ch) {
                e += s.re[s.index(u, v, ch)] * s.re[s.index(u, v, ch)] +
                     s.im[s.index(u, v, ch)] * s.im[s.index(u, v, ch)];
            }
            const double d = std::sqrt(fu * fu + fv * fv);
            total += e;
            auto rb = static_cast<std::int64_t>(d / 2.0);
            radial[static_cast<std::size_t>(std::min(rb, kRadialBins - 1))] += e;
            if (d >= kHighBandMin) {
                high_total += e;
                double ang = std::atan2(fu, fv);
                if (ang < 0) ang += kPi2;  // fold to [0, pi)
                if (ang >= kPi2) ang -= kPi2;
                auto ab = static_cast<std::int64_t>(ang / kPi2 * kAngleBins);
                angular[static_cast<std::size_t>(std::min(ab, kAngleBins - 1))] += e;
            }
        }
    }
    const double tiny = 1e-12;
    for (std::int64_t i = 0; i < kRadialBins; ++i) {
        out[static_cast<std::size_t>(kBlocks * kBlocks + i)] =
            radial[static_cast<std::size_t>(i)] / (total + tiny);
    }
    for (std::int64_t i = 0; i < kAngleBins; ++i) {
        out[static_cast<std::size_t>(kBlocks * kBlocks + kRadialBins + i)] =
            angular[static_cast<std::size_t>(i)] / (high_total + tiny);
    }
    return out;
}

std::vector<double> ProbeClassifier::normalized_features(const Tensor& image) const {
    std::vector<double> f = features(image);
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] = (f[i] - feat_mean_[i]) / feat_std_[i];
    }
    return f;
}

void ProbeClassifier::train(const Dataset& ds, int epochs, double lr, std::uint64_t seed) {
    if (ds.samples.empty()) throw ContractError("probe train: empty dataset");
    n_sub_ = ds.spec.n_sub();
    subs_per_super_ = ds.spec.subs_per_super;
    const std::int64_t n = static_cast<std::int64_t>(ds.samples.size());
    const std::int64_t fdim = feature_dim();

    Tensor feats({n, fdim});
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::vector<double> f = features(ds.samples[static_cast<std::size_t>(i)].image);
        std::copy(f.begin(), f.end(), feats.data.begin() + i * fdim);
        labels[static_cast<std::size_t>(i)] =
            ds.samples[static_cast<std::size_t>(i)].label.subclass;
    }
    feat_mean_.assign(static_cast<std::size_t>(fdim), 0.0);
    feat_std_.assign(static_cast<std::size_t>(fdim), 0.0);
    for (std::int64_t j = 0; j < fdim; ++j) {
        double m = 0.0;
        for (std::int64_t i = 0; i < n; ++i) m += feats.data[static_cast<std::size_t>(i * fdim + j)];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = feats.data[static_cast<std::size_t>(i * fdim + j)] - m;
            v += d * d;
        }
        feat_mean_[static_cast<std::size_t>(j)] = m;
        feat_std_[static_cast<std::size_t>(j)] = std::sqrt(v / static_cast<double>(n)) + 1e-8;
    }
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < fdim; ++j) {
            auto& v = feats.data[static_cast<std::size_t>(i * fdim + j)];
            v = (v - feat_mean_[static_cast<std::size_t>(j)]) /
                feat_std_[static_cast<std::size_t>(j)];
        }
    }

    Rng rng(seed);
    w_ = Tensor::uniform({fdim, n_sub_}, -0.01, 0.01, rng);
    b_ = Tensor::zeros({n_sub_});

    // full-batch Adam
    std::vector<double> mw(w_.data.size(), 0.0), vw(w_.data.size(), 0.0);
    std::vector<double> mb(b_.data.size(), 0.0), vb(b_.data.size(), 0.0);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        GradTape tape;
        Tensor w = tape.watch(w_);
        Tensor b = tape.watch(b_);
        Tensor logits = add(matmul(feats, w), repeat_rows(reshape(b, {1, n_sub_}), n));
        Tensor loss = cross_entropy(logits, labels);
        tape.backward(loss);
        Tensor gw = tape.grad(w);
        Tensor gb = tape.grad(b);
        const double corr1 = 1.0 - std::pow(b1, epoch);
        const double corr2 = 1.0 - std::pow(b2, epoch);
        for (std::size_t i = 0; i < w_.data.size(); ++i) {
            mw[i] = b1 * mw[i] + (1 - b1) * gw.data[i];
            vw[i] = b2 * vw[i] + (1 - b2) * gw.data[i] * gw.data[i];
            w_.data[i] -= lr * (mw[i] / corr1) / (std::sqrt(vw[i] / corr2) + eps);
        }
        for (std::size_t i = 0; i < b_.data.size(); ++i) {
            mb[i] = b1 * mb[i] + (1 - b1) * gb.data[i];
            vb[i] = b2 * vb[i] + (1 - b2) * gb.data[i] * gb.data[i];
            b_.data[i] -= lr * (mb[i] / corr1) / (std::sqrt(vb[i] / corr2) + eps);
        }
    }
    trained_ = true;
}

std::vector<double> ProbeClassifier::probabilities(const Tensor& image) const {
    if (!trained_) throw ContractError("probe used before training");
    const std::vector<double> f = normalized_features(image);
    std::vector<double> logits(static_cast<std::size_t>(n_sub_), 0.0);
    for (int k = 0; k < n_sub_; ++k) {
        double acc = b_.data[static_cast<std::size_t>(k)];
        for (std::size_t j = 0; j < f.size(); ++j) {
            acc += f[j] * w_.data[j * static_cast<std::size_t>(n_sub_) +
                                  static_cast<std::size_t>(k)];
        }
        logits[static_cast<std::size_t>(k)] = acc;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& v : logits) {
        v = std::exp(v - mx);
        z += v;
    }
    for (double& v : logits) v /= z;
    return logits;
}

int ProbeClassifier::predict(const Tensor& image) const {
    const std::vector<double> p = probabilities(image);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

// ---- feature extractor ----------------------------------------------------------

std::vector<double> FeatureExtractor::extract(const Tensor& image) const {
    if (mode == FeatureMode::probe_classifier) {
        if (!probe || !probe->trained()) {
            throw ContractError("feature extractor: probe mode requires a trained probe");
        }
        return ProbeClassifier::features(image);
    }
    // fixed seeded projection of raw pixels
    const std::int64_t n = image.numel();
    std::vector<double> out(static_cast<std::size_t>(d_feat), 0.0);
    const double inv = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::int64_t r = 0; r < d_feat; ++r) {
        Rng row(Rng::mix(seed, static_cast<std::uint64_t>(r)));
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            acc += row.normal() * image.data[static_cast<std::size_t>(i)];
        }
        out[static_cast<std::size_t>(r)] = acc * inv;
    }
    return out;
}

Tensor FeatureExtractor::extract_all(const std::vector<Sample>& samples) const {
    if (samples.empty()) throw ContractError("extract_all: no samples");
    const std::vector<double> first = extract(samples[0].image);
    const std::int64_t d = static_cast<std::int64_t>(first.size());
    Tensor out({static_cast<std::int64_t>(samples.size()), d});
    std::copy(first.begin(), first.end(), out.data.begin());
    for (std::size_t i = 1; i < samples.size(); ++i) {
        const std::vector<double> f = extract(samples[i].image);
        std::copy(f.begin(), f.end(), out.data.begin() + static_cast<std::int64_t>(i) * d);
    }
    return out;
}

// ---- gaussian statistics --------------------------------------------------------

GaussianStats gaussian_stats(const Tensor& features) {
    if (features.rank() != 2) throw DimError("gaussian_stats: expected [N x D]");
    const std::int64_t n = features.shape[0], d = features.shape[1];
    if (n < 2) throw ContractError("gaussian_stats: need at least two samples");
    GaussianStats g;
    g.mu.assign(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
            g.mu[static_cast<std::size_t>(j)] += features.data[static_cast<std::size_t>(i * d + j)];
        }
    }
    for (double& v : g.mu) v /= static_cast<double>(n);
    g.sigma = Tensor({d, d});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t a = 0; a < d; ++a) {
            const double da = features.data[static_cast<std::size_t>(i * d + a)] -
                              g.mu[static_cast<std::size_t>(a)];
            for (std::int64_t b = 0; b < d; ++b) {
                const double db = features.data[static_cast<std::size_t>(i * d + b)] -
                                  g.mu[static_cast<std::size_t>(b)];
                g.sigma.data[static_cast<std::size_t>(a * d + b)] += da * db;
            }
        }
    }
    for (double& v : g.sigma.data) v /= static_cast<double>(n - 1);
    return g;
}

// ---- symmetric eigensolver -------------------------------------------------------

std::vector<double> symmetric_eigen(const Tensor& a, Tensor* vectors) {
    if (a.rank() != 2 || a.shape[0] != a.shape[1]) {
        throw DimError("symmetric_eigen: expected a square matrix");
    }
    const std::int64_t n = a.shape[0];
    Tensor m = a.detached();
    Tensor v = Tensor::zeros({n, n});
    for (std::int64_t i = 0; i < n; ++i) v.data[static_cast<std::size_t>(i * n + i)] = 1.0;

    auto at = [&](std::int64_t r, std::int64_t c) -> double& {
        return m.data[static_cast<std::size_t>(r * n + c)];
    };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
        }
        if (off < 1e-24) break;
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = at(p, p), aqq = at(q, q);
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::int64_t k = 0; k < n; ++k) {
                    const double mkp = at(k, p), mkq = at(k, q);
                    at(k, p) = c * mkp - s * mkq;
                    at(k, q) = s * mkp + c * mkq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double mpk = at(p, k), mqk = at(q, k);
                    at(p, k) = c * mpk - s * mqk;
                    at(q, k) = s * mpk + c * mqk;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double vkp = v.data[static_cast<std::size_t>(k * n + p)];
                    const double vkq = v.data[static_cast<std::size_t>(k * n + q)];
                    v.data[static_cast<std::size_t>(k * n + p)] = c * vkp - s * vkq;
                    v.data[static_cast<std::size_t>(k * n + q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) eig[static_cast<std::size_t>(i)] = at(i, i);
    if (vectors) *vectors = std::move(v);
    return eig;
}

// ---- frechet distance ------------------------------------------------------------

namespace {

Tensor matmul_plain(const Tensor& a, const Tensor& b) { return matmul(a, b); }

Tensor sqrt_psd(const Tensor& sym) {
    Tensor vecs;
    std::vector<double> eig = symmetric_eigen(sym, &vecs);
    const std::int64_t n = sym.shape[0];
    Tensor out({n, n});
    for (std::int64_t a = 0; a < n; ++a) {
        for (std::int64_t b = 0; b < n; ++b) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < n; ++k) {
                const double l = std::max(eig[static_cast<std::size_t>(k)], 0.0);
                acc += vecs.data[static_cast<std::size_t>(a * n + k)] * std::sqrt(l) *
                       vecs.data[static_cast<std::size_t>(b * n + k)];
            }
            out.data[static_cast<std::size_t>(a * n + b)] = acc;
        }
    }
    return out;
}

void require_symmetric(const Tensor& s, const char* which) {
    const std::int64_t n = s.shape[0];
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = i + 1; j < n; ++j) {
            if (std::abs(s.data[static_cast<std::size_t>(i * n + j)] -
                         s.data[static_cast<std::size_t>(j * n + i)]) > 1e-9) {
                throw ContractError(std::string("frechet_distance: covariance ") + which +
                                    " is not symmetric");
            }
        }
    }
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.mu.size() != b.mu.size()) throw ContractError("frechet_distance: dimension mismatch");
    require_symmetric(a.sigma, "a");
    require_symmetric(b.sigma, "b");
    const std::int64_t n = a.sigma.shape[0];
    double mean_term = 0.0;
    for (std::size_t i = 0; i < a.mu.size(); ++i) {
        const double d = a.mu[i] - b.mu[i];
        mean_term += d * d;
    }
    Tensor root_a = sqrt_psd(a.sigma);
    Tensor inner = matmul_plain(matmul_plain(root_a, b.sigma), root_a);
    // symmetrize before the second decomposition; the product picks up
    // rounding asymmetry
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = i + 1; j < n; ++j) {
            const double m = 0.5 * (inner.data[static_cast<std::size_t>(i * n + j)] +
                                    inner.data[static_cast<std::size_t>(j * n + i)]);
            inner.data[static_cast<std::size_t>(i * n + j)] = m;
            inner.data[static_cast<std::size_t>(j * n + i)] = m;
        }
    }
    std::vector<double> eig = symmetric_eigen(inner, nullptr);
    double tr_sqrt = 0.0;
    for (double l : eig) tr_sqrt += std::sqrt(std::max(l, 0.0));
    double trace_term = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        trace_term += a.sigma.data[static_cast<std::size_t>(i * n + i)] +
                      b.sigma.data[static_cast<std::size_t>(i * n + i)];
    }
    return std::max(0.0, mean_term + trace_term - 2.0 * tr_sqrt);
}

// ---- inception-style score --------------------------------------------------------

double inception_score_like(const Tensor& probs) {
    if (probs.rank() != 2) throw DimError("inception_score_like: expected [N x K]");
    const std::int64_t n = probs.shape[0], k = probs.shape[1];
    std::vector<double> marginal(static_cast<std::size_t>(k), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        double row_sum = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double p = probs.data[static_cast<std::size_t>(i * k + j)];
            if (p < 0.0) throw ContractError("inception_score_like: negative probability");
            row_sum += p;
            marginal[static_cast<std::size_t>(j)] += p;
        }
        if (std::abs(row_sum - 1.0) > 1e-6) {
            throw ContractError("inception_score_like: row " + std::to_string(i) +
                                " sums to " + std::to_string(row_sum));
        }
    }
    for (double& v : marginal) v /= static_cast<double>(n);
    double mean_kl = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
            const double p = probs.data[static_cast<std::size_t>(i * k + j)];
            if (p > 0.0) mean_kl += p * std::log(p / marginal[static_cast<std::size_t>(j)]);
        }
    }
    mean_kl /= static_cast<double>(n);
    return std::exp(mean_kl);
}

std::pair<double, double> class_accuracy(const std::vector<Sample>& samples,
                                         const ProbeClassifier& probe) {
    if (!probe.trained()) throw ContractError("class_accuracy: untrained probe");
    if (samples.empty()) throw ContractError("class_accuracy: no samples");
    std::int64_t sub_ok = 0, super_ok = 0;
    for (const Sample& s : samples) {
        const int pred = probe.predict(s.image);
        if (pred == s.label.subclass) sub_ok++;
        if (pred / probe.subs_per_super() == s.label.superclass) super_ok++;
    }
    const double n = static_cast<double>(samples.size());
    return {static_cast<double>(sub_ok) / n, static_cast<double>(super_ok) / n};
}

}  // namespace efdit
