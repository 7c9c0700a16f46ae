#pragma once

// Retrieval (CMC rank-k, mAP), closed-set accuracy, and open-set OS / OS*
// with an unknown-class threshold on the maximum softmax probability.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtdn/tensor.hpp"

namespace dtdn {

/// Label used for "unknown" in open-set ground truth and predictions.
inline constexpr int kUnknownClass = -1;

namespace detail {

inline void require_rows(const Tensor& t, std::size_t n, const char* what) {
    if (t.rank() != 2 || t.dim(0) != n)
        throw ShapeError(std::string(what) + ": expected " + std::to_string(n) + " rows, got " + to_string(t.shape()));
}

// Gallery order for one query: cosine (dot product of normalized rows)
// descending, lower gallery index first on ties.
inline std::vector<std::size_t> rank_gallery(const Tensor& query, std::size_t q, const Tensor& gallery) {
    const std::size_t G = gallery.dim(0), D = gallery.dim(1);
    std::vector<double> sim(G, 0.0);
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t d = 0; d < D; ++d) sim[g] += query.at(q, d) * gallery.at(g, d);
    std::vector<std::size_t> order(G);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    return order;
}

inline void check_retrieval_inputs(const Tensor& query, std::span<const int> query_ids, const Tensor& gallery,
                                   std::span<const int> gallery_ids) {
    require_rows(query, query_ids.size(), "retrieval query");
    require_rows(gallery, gallery_ids.size(), "retrieval gallery");
    if (query.dim(1) != gallery.dim(1)) throw ShapeError("retrieval: embedding widths differ");
    for (int id : query_ids)
        if (std::find(gallery_ids.begin(), gallery_ids.end(), id) == gallery_ids.end())
            throw std::invalid_argument("retrieval: query id " + std::to_string(id) + " absent from gallery");
}

inline std::size_t argmax_row(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

}  // namespace detail

struct RetrievalResult {
    std::map<std::size_t, double> rank_k;
    double mAP = 0.0;
};

/// Fraction of queries with a same-id gallery entry among the top k, per k.
inline std::map<std::size_t, double> cmc_rank_k(const Tensor& query_emb, std::span<const int> query_ids,
                                                const Tensor& gallery_emb, std::span<const int> gallery_ids,
                                                std::span<const std::size_t> ks) {
    detail::check_retrieval_inputs(query_emb, query_ids, gallery_emb, gallery_ids);
    std::map<std::size_t, double> out;
    for (auto k : ks) out[k] = 0.0;
    for (std::size_t q = 0; q < query_ids.size(); ++q) {
        auto order = detail::rank_gallery(query_emb, q, gallery_emb);
        std::size_t first_hit = order.size();
        for (std::size_t r = 0; r < order.size(); ++r)
            if (gallery_ids[order[r]] == query_ids[q]) {
                first_hit = r;
                break;
            }
        for (auto k : ks)
            if (first_hit < k) out[k] += 1.0;
    }
    for (auto& [k, v] : out) v /= static_cast<double>(query_ids.size());
    return out;
}

/// Mean over queries of average precision over the full ranked gallery.
inline double mean_average_precision(const Tensor& query_emb, std::span<const int> query_ids,
                                     const Tensor& gallery_emb, std::span<const int> gallery_ids) {
    detail::check_retrieval_inputs(query_emb, query_ids, gallery_emb, gallery_ids);
    double total = 0.0;
    for (std::size_t q = 0; q < query_ids.size(); ++q) {
        auto order = detail::rank_gallery(query_emb, q, gallery_emb);
        std::size_t hits = 0;
        double ap = 0.0;
        for (std::size_t r = 0; r < order.size(); ++r)
            if (gallery_ids[order[r]] == query_ids[q]) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(r + 1);
            }
        total += ap / static_cast<double>(hits);
    }
    return total / static_cast<double>(query_ids.size());
}

inline RetrievalResult evaluate_retrieval(const Tensor& query_emb, std::span<const int> query_ids,
                                          const Tensor& gallery_emb, std::span<const int> gallery_ids) {
    static constexpr std::size_t ks[] = {1, 5, 10, 20};
    return {cmc_rank_k(query_emb, query_ids, gallery_emb, gallery_ids, ks),
            mean_average_precision(query_emb, query_ids, gallery_emb, gallery_ids)};
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
inline double classification_accuracy(const Tensor& logits, std::span<const int> labels) {
    detail::require_rows(logits, labels.size(), "classification_accuracy");
    if (labels.empty()) return 0.0;
    const std::size_t C = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (static_cast<int>(detail::argmax_row(logits.data().subspan(i * C, C))) == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Per-class accuracy averaged over the classes present in the labels.
inline double mean_class_accuracy(const Tensor& logits, std::span<const int> labels) {
    detail::require_rows(logits, labels.size(), "mean_class_accuracy");
    const std::size_t C = logits.dim(1);
    std::map<int, std::pair<std::size_t, std::size_t>> tally;  // class -> (correct, total)
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& t = tally[labels[i]];
        ++t.second;
        if (static_cast<int>(detail::argmax_row(logits.data().subspan(i * C, C))) == labels[i]) ++t.first;
    }
    if (tally.empty()) return 0.0;
    double s = 0.0;
    for (auto& [c, t] : tally) s += static_cast<double>(t.first) / static_cast<double>(t.second);
    return s / static_cast<double>(tally.size());
}

struct OpenSetResult {
    double os = 0.0;       // mean per-class accuracy over known classes and "unknown"
    double os_star = 0.0;  // mean per-class accuracy over known classes only
    double threshold = 0.0;
    std::vector<int> predictions;
};

/// Predicts argmax when its softmax probability reaches the threshold and
/// kUnknownClass otherwise. Classes are averaged only if they occur in the
/// ground truth; a mean over no classes is reported as 0.
inline OpenSetResult openset_accuracy(const Tensor& logits, std::span<const int> truth, double threshold) {
    detail::require_rows(logits, truth.size(), "openset_accuracy");
    if (threshold < 0.0 || threshold >= 1.0) throw std::invalid_argument("openset_accuracy: threshold must be in [0,1)");
    const std::size_t C = logits.dim(1);
    OpenSetResult res;
    res.threshold = threshold;
    std::map<int, std::pair<std::size_t, std::size_t>> tally;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] != kUnknownClass && (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= C))
            throw std::invalid_argument("openset_accuracy: label out of range");
        auto row = logits.data().subspan(i * C, C);
        const std::size_t best = detail::argmax_row(row);
        double se = 0.0;
        for (double z : row) se += std::exp(z - row[best]);
        const double pmax = 1.0 / se;
        const int pred = pmax >= threshold ? static_cast<int>(best) : kUnknownClass;
        res.predictions.push_back(pred);
        auto& t = tally[truth[i]];
        ++t.second;
        if (pred == truth[i]) ++t.first;
    }
    double all = 0.0, known = 0.0;
    std::size_t n_all = 0, n_known = 0;
    for (auto& [c, t] : tally) {
        const double acc = static_cast<double>(t.first) / static_cast<double>(t.second);
        all += acc;
        ++n_all;
        if (c != kUnknownClass) {
            known += acc;
            ++n_known;
        }
    }
    res.os = n_all ? all / static_cast<double>(n_all) : 0.0;
    res.os_star = n_known ? known / static_cast<double>(n_known) : 0.0;
    return res;
}

/// One "run_id,epoch,metric,value" line.
inline void write_metric_row(std::ostream& os, const std::string& run_id, std::size_t epoch, const std::string& metric,
                             double value) {
    const auto old = os.precision(17);
    os << run_id << ',' << epoch << ',' << metric << ',' << value << '\n';
    os.precision(old);
}

}  // namespace dtdn
