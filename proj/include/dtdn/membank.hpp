#pragma once

// Target-domain anchor matrix: one L2-normalized row per target training
// sample, refreshed by an exponential moving average and searched by cosine
// similarity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtdn/model.hpp"
#include "dtdn/tensor.hpp"

namespace dtdn {

class MemoryBank {
  public:
    MemoryBank() = default;
    MemoryBank(std::size_t rows, std::size_t dim, double eta, double tau, std::vector<double> anchors)
        : rows_(rows), dim_(dim), eta_(eta), tau_(tau), anchors_(std::move(anchors)) {
        if (anchors_.size() != rows_ * dim_) throw ShapeError("MemoryBank: anchor buffer size mismatch");
        if (!(tau_ > 0)) throw std::invalid_argument("MemoryBank: temperature must be positive");
        if (eta_ < 0 || eta_ > 1) throw std::invalid_argument("MemoryBank: update rate must lie in [0,1]");
    }

    std::size_t rows() const { return rows_; }
    std::size_t dim() const { return dim_; }
    double eta() const { return eta_; }
    double tau() const { return tau_; }

    std::span<const double> row(std::size_t i) const {
        check_index(i);
        return {anchors_.data() + i * dim_, dim_};
    }
    std::span<const double> anchors() const { return anchors_; }

    /// A as a constant N x D tensor (no gradient flows into the bank).
    Tensor as_tensor() const { return Tensor({rows_, dim_}, anchors_, false); }

    double cosine(std::size_t i, std::size_t j) const {
        auto a = row(i);
        auto b = row(j);
        return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    }

    /// A_i <- normalize((1 - eta) A_i + eta f). Other rows are untouched.
    void update_row(std::size_t i, std::span<const double> feature) {
        check_index(i);
        if (feature.size() != dim_)
            throw ShapeError("update_row: feature of length " + std::to_string(feature.size()) + " for bank dim " +
                             std::to_string(dim_));
        double* a = anchors_.data() + i * dim_;
        std::vector<double> next(dim_);
        double ss = 0.0;
        for (std::size_t d = 0; d < dim_; ++d) {
            next[d] = (1.0 - eta_) * a[d] + eta_ * feature[d];
            ss += next[d] * next[d];
        }
        const double nrm = std::sqrt(ss);
        if (nrm == 0.0) return;  // exact cancellation: keep the previous anchor
        for (std::size_t d = 0; d < dim_; ++d) a[d] = next[d] / nrm;
    }

  private:
    void check_index(std::size_t i) const {
        if (i >= rows_)
            throw std::out_of_range("memory bank index " + std::to_string(i) + " out of range [0," +
                                    std::to_string(rows_) + ")");
    }

    std::size_t rows_ = 0;
    std::size_t dim_ = 0;
    double eta_ = 0.01;
    double tau_ = 0.05;
    std::vector<double> anchors_;
};

/// Standard-normal rows, each scaled to unit length.
inline MemoryBank init_bank(std::size_t rows, std::size_t dim, double eta, double tau, Rng& rng) {
    if (rows == 0 || dim == 0) throw std::invalid_argument("init_bank: rows and dim must be >= 1");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> a(rows * dim);
    for (std::size_t i = 0; i < rows; ++i) {
        double ss = 0.0;
        do {
            ss = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                a[i * dim + d] = normal(rng);
                ss += a[i * dim + d] * a[i * dim + d];
            }
        } while (ss == 0.0);
        const double nrm = std::sqrt(ss);
        for (std::size_t d = 0; d < dim; ++d) a[i * dim + d] /= nrm;
    }
    return MemoryBank(rows, dim, eta, tau, std::move(a));
}

/// Each target sample is its own class: the label is its dataset index.
inline std::size_t pseudo_label(std::size_t dataset_index, std::size_t dataset_size) {
    if (dataset_index >= dataset_size)
        throw std::out_of_range("pseudo_label: index " + std::to_string(dataset_index) + " out of range");
    return dataset_index;
}

namespace detail {

// Highest cosine first, lower index on ties.
inline std::vector<std::size_t> top_by_cosine(const MemoryBank& bank, std::size_t i,
                                              std::vector<std::size_t> candidates, std::size_t k) {
    std::vector<double> sim(bank.rows());
    for (auto j : candidates) sim[j] = bank.cosine(i, j);
    const std::size_t take = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); });
    candidates.resize(take);
    return candidates;
}

inline void check_k(const MemoryBank& bank, std::size_t k) {
    if (k < 1 || k + 1 > bank.rows())
        throw std::out_of_range("top-k: k=" + std::to_string(k) + " must lie in [1, " +
                                std::to_string(bank.rows() - 1) + "]");
}

}  // namespace detail

/// The k rows j != i most similar to row i.
inline std::vector<std::size_t> topk_neighbors_openset(const MemoryBank& bank, std::size_t i, std::size_t k) {
    detail::check_k(bank, k);
    (void)bank.row(i);
    std::vector<std::size_t> cand;
    cand.reserve(bank.rows() - 1);
    for (std::size_t j = 0; j < bank.rows(); ++j)
        if (j != i) cand.push_back(j);
    return detail::top_by_cosine(bank, i, std::move(cand), k);
}

/// Top-k restricted to rows sharing row i's predicted label. Returns fewer
/// than k when the class is small; a singleton class falls back to the
/// unrestricted search.
inline std::vector<std::size_t> topk_neighbors_closeset(const MemoryBank& bank, std::size_t i, std::size_t k,
                                                        std::span<const int> predicted_labels) {
    detail::check_k(bank, k);
    if (predicted_labels.size() != bank.rows())
        throw ShapeError("topk_neighbors_closeset: need one predicted label per bank row");
    (void)bank.row(i);
    std::vector<std::size_t> cand;
    for (std::size_t j = 0; j < bank.rows(); ++j)
        if (j != i && predicted_labels[j] == predicted_labels[i]) cand.push_back(j);
    if (cand.empty()) return topk_neighbors_openset(bank, i, k);
    return detail::top_by_cosine(bank, i, std::move(cand), k);
}

}  // namespace dtdn
