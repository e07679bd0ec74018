#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "efdit/data.hpp"
#include "efdit/tensor.hpp"

namespace efdit {

// Linear softmax classifier over a fixed, deterministic feature map (block
// means plus radial and orientation power-spectrum bins). Predicts the
// subclass; superclass accuracy is derived through the parent map.
class ProbeClassifier {
public:
    // feature map alone (no training required); deterministic
    static std::vector<double> features(const Tensor& image);
    static std::int64_t feature_dim();

    void train(const Dataset& ds, int epochs = 400, double lr = 0.05,
               std::uint64_t seed = 1234);
    bool trained() const { return trained_; }
    int n_classes() const { return n_sub_; }
    int subs_per_super() const { return subs_per_super_; }

    std::vector<double> probabilities(const Tensor& image) const;
    int predict(const Tensor& image) const;

private:
    Tensor w_, b_;
    std::vector<double> feat_mean_, feat_std_;
    int n_sub_ = 0;
    int subs_per_super_ = 1;
    bool trained_ = false;

    std::vector<double> normalized_features(const Tensor& image) const;
};

enum class FeatureMode { random_projection, probe_classifier };

// Deterministic feature extractor for distribution metrics. random_projection
// uses a fixed seeded matrix over raw pixels; probe_classifier uses the probe
// input features (its penultimate layer).
struct FeatureExtractor {
    FeatureMode mode = FeatureMode::random_projection;
    std::int64_t d_feat = 64;
    std::uint64_t seed = 99;
    const ProbeClassifier* probe = nullptr;

    std::vector<double> extract(const Tensor& image) const;
    Tensor extract_all(const std::vector<Sample>& samples) const;  // [N x D]
};

struct GaussianStats {
    std::vector<double> mu;
    Tensor sigma;  // [D x D], symmetric
};

// Unbiased mean/covariance of row features.
GaussianStats gaussian_stats(const Tensor& features);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}) with the matrix square
// root taken through a symmetric eigendecomposition; negative eigenvalues are
// clipped at zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// exp(mean_i KL(p_i || mean_j p_j)) over row-stochastic class probabilities.
double inception_score_like(const Tensor& probs);

// (subclass accuracy, superclass accuracy) of the probe on labeled samples.
std::pair<double, double> class_accuracy(const std::vector<Sample>& samples,
                                         const ProbeClassifier& probe);

// Symmetric eigendecomposition by cyclic Jacobi rotations; returns
// eigenvalues and fills vectors column-wise (A = V diag(l) V^T).
std::vector<double> symmetric_eigen(const Tensor& a, Tensor* vectors = nullptr);

}  // namespace efdit
