#pragma once

// Training objectives: supervised task loss on source recombinations,
// prediction agreement on target recombinations, anchor-neighborhood loss
// against the memory bank, and their weighted total.

#include <cstddef>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtdn/membank.hpp"
#include "dtdn/ops.hpp"

namespace dtdn {

/// How the per-row target terms of l_agree and l_neighbor are combined
/// over the batch. The mask regularizer is unaffected.
enum class Reduction { sum, mean };
struct LossConfig {
    double w = 1e-4;        // mask L1 weight
    double lambda1 = 0.8;   // neighbor loss weight
    double lambda2 = 1.0;   // agreement loss weight
    double tau = 0.05;      // temperature
    std::size_t k = 6;      // neighbors per anchor
    Reduction reduction = Reduction::sum;

    void validate() const {
        if (!(w > 0)) throw std::invalid_argument("loss config: w must be > 0");
        if (!(tau > 0)) throw std::invalid_argument("loss config: tau must be > 0");
        if (k < 1) throw std::invalid_argument("loss config: k must be >= 1");
        if (lambda1 < 0 || lambda2 < 0) throw std::invalid_argument("loss config: lambdas must be >= 0");
    }
};

/// Mean over samples of the per-sample L1 norm of the mask.
inline Tensor mask_l1(const Tensor& mask) {
    return scale(l1_norm(mask), 1.0 / static_cast<double>(mask.dim(0)));
}

/// CE(r_ss) + CE(r_st) + w * |M_S|_1
inline Tensor l_task(const Tensor& r_ss_logits, const Tensor& r_st_logits, std::span<const int> labels,
                     const Tensor& mask_source, double w) {
    return add(add(softmax_cross_entropy(r_ss_logits, labels), softmax_cross_entropy(r_st_logits, labels)),
               scale(mask_l1(mask_source), w));
}

/// Cosine similarities of normalized embeddings to every bank row, over tau.
inline Tensor bank_logits(const Tensor& embedding, const MemoryBank& bank) {
    if (embedding.rank() != 2 || embedding.dim(1) != bank.dim())
        throw ShapeError("bank_logits: embedding " + to_string(embedding.shape()) + " vs bank dim " +
                         std::to_string(bank.dim()));
    const std::size_t N = bank.rows(), D = bank.dim();
    std::vector<double> at(D * N);
    auto a = bank.anchors();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t d = 0; d < D; ++d) at[d * N + n] = a[n * D + d];
    return scale(matmul(embedding, Tensor({D, N}, std::move(at))), 1.0 / bank.tau());
}

/// Affinity rows d_i = softmax_n(A_n . e_i / tau); B x N, each row sums to 1.
inline Tensor cosine_affinity(const Tensor& embedding, const MemoryBank& bank) {
    return exp(log_softmax_rows(bank_logits(embedding, bank)));
}

/// Single-embedding form: length-N affinity vector.
inline Tensor cosine_affinity_row(const Tensor& embedding, const MemoryBank& bank) {
    return reshape(cosine_affinity(reshape(embedding, {1, embedding.size()}), bank), {bank.rows()});
}

/// P(pseudo class | embedding) for each row, evaluated at its own target index.
inline Tensor pseudo_class_prob(const Tensor& embedding, const MemoryBank& bank,
                                std::span<const std::size_t> target_index) {
    for (auto t : target_index)
        if (t >= bank.rows()) throw std::out_of_range("pseudo_class_prob: target index out of range");
    return exp(pick(log_softmax_rows(bank_logits(embedding, bank)), target_index));
}

namespace detail {

inline Tensor reduce_rows(const Tensor& per_row, Reduction r) {
    return r == Reduction::sum ? sum(per_row) : mean(per_row);
}

}  // namespace detail

/// sum_i |P(y_i | emb_ts_i) - P(y_i | emb_tt_i)| + w * |M_T|_1
inline Tensor l_agree(const Tensor& emb_ts, const Tensor& emb_tt, std::span<const std::size_t> pseudo_labels,
                      const MemoryBank& bank, const Tensor& mask_target, double w,
                      Reduction reduction = Reduction::sum) {
    const Tensor p = pseudo_class_prob(emb_ts, bank, pseudo_labels);
    const Tensor q = pseudo_class_prob(emb_tt, bank, pseudo_labels);
    return add(detail::reduce_rows(abs(sub(p, q)), reduction), scale(mask_l1(mask_target), w));
}

/// -sum_i log sum_{j in K_i} d_ij
inline Tensor l_neighbor(const Tensor& emb_tt, const MemoryBank& bank,
                         const std::vector<std::vector<std::size_t>>& neighbor_sets,
                         Reduction reduction = Reduction::sum) {
    for (const auto& s : neighbor_sets)
        if (s.empty()) throw std::invalid_argument("l_neighbor: empty neighbor set");
    return scale(detail::reduce_rows(logsumexp_subset(log_softmax_rows(bank_logits(emb_tt, bank)), neighbor_sets),
                                     reduction),
                 -1.0);
}

inline Tensor total_loss(const Tensor& task, const Tensor& neighbor, const Tensor& agree, double lambda1,
                         double lambda2) {
    return add(add(task, scale(neighbor, lambda1)), scale(agree, lambda2));
}

struct LossBreakdown {
    double l_task = 0;
    double l_agree = 0;
    double l_neighbor = 0;
    double mask_l1_source = 0;
    double mask_l1_target = 0;
    double total = 0;
    double mean_mask_source = 0;
    double mean_mask_target = 0;

    static constexpr const char* csv_header =
        "step,l_task,l_agree,l_neighbor,mask_l1_S,mask_l1_T,total,mean_mask_S,mean_mask_T";

    void write_csv_row(std::ostream& os, std::size_t step) const {
        const auto old = os.precision(17);
        os << step << ',' << l_task << ',' << l_agree << ',' << l_neighbor << ',' << mask_l1_source << ','
           << mask_l1_target << ',' << total << ',' << mean_mask_source << ',' << mean_mask_target << '\n';
        os.precision(old);
    }
};

}  // namespace dtdn
