#pragma once

// Shuffling within a domain, swapping across domains, and recombination of
// task-relevant and task-irrelevant rows. Labels always follow h_tr.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dtdn/model.hpp"
#include "dtdn/ops.hpp"

namespace dtdn {

using Permutation = std::vector<std::size_t>;

inline bool is_permutation_of_range(const Permutation& perm) {
    std::vector<char> hit(perm.size(), 0);
    for (auto p : perm) {
        if (p >= perm.size() || hit[p]) return false;
        hit[p] = 1;
    }
    return true;
}

inline Permutation inverse(const Permutation& perm) {
    Permutation inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return inv;
}

/// Uniform over all permutations of [0,n), or over derangements when
/// requested (impossible for n == 1, which yields the identity).
inline Permutation random_permutation(std::size_t n, Rng& rng, bool require_derangement = false) {
    Permutation perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (;;) {
        for (std::size_t i = n; i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(perm[i - 1], perm[pick(rng)]);
        }
        if (!require_derangement || n < 2) return perm;
        bool fixed_point = false;
        for (std::size_t i = 0; i < n && !fixed_point; ++i) fixed_point = perm[i] == i;
        if (!fixed_point) return perm;
    }
}

/// Row i of the result is row perm[i] of h_ti.
inline Tensor shuffle_within_domain(const Tensor& h_ti, const Permutation& perm) {
    if (h_ti.rank() != 2 || perm.size() != h_ti.dim(0))
        throw ShapeError("shuffle_within_domain: permutation of length " + std::to_string(perm.size()) +
                         " for tensor " + to_string(h_ti.shape()));
    if (!is_permutation_of_range(perm)) throw ShapeError("shuffle_within_domain: invalid permutation");
    return gather_rows(h_ti, perm);
}

/// Positional exchange: the first result pairs with source h_tr, the second with target h_tr.
inline std::pair<Tensor, Tensor> swap_between_domains(const Tensor& h_ti_source, const Tensor& h_ti_target) {
    if (h_ti_source.shape() != h_ti_target.shape())
        throw ShapeError("swap_between_domains: batch mismatch " + to_string(h_ti_source.shape()) + " vs " +
                         to_string(h_ti_target.shape()));
    return {h_ti_target, h_ti_source};
}

inline Tensor combine(const Tensor& h_tr, const Tensor& h_ti) { return add(h_tr, h_ti); }

struct RearrangedBatch {
    Tensor r_ss;  // source h_tr + shuffled source h_ti
    Tensor r_st;  // source h_tr + target h_ti
    Tensor r_ts;  // target h_tr + source h_ti
    Tensor r_tt;  // target h_tr + shuffled target h_ti
    std::vector<int> labels_source;
    std::vector<std::size_t> pseudo_labels_target;
    Permutation source_perm;
    Permutation target_perm;
};

inline RearrangedBatch build_rearranged_batch(const DisentangledPair& source, std::vector<int> labels_source,
                                              const DisentangledPair& target,
                                              std::vector<std::size_t> pseudo_labels_target, Rng& rng,
                                              bool require_derangement = false) {
    const std::size_t B = source.h_tr.dim(0);
    if (target.h_tr.dim(0) != B)
        throw ShapeError("build_rearranged_batch: source batch " + std::to_string(B) + " vs target batch " +
                         std::to_string(target.h_tr.dim(0)));
    if (labels_source.size() != B || pseudo_labels_target.size() != B)
        throw ShapeError("build_rearranged_batch: label count does not match batch");

    RearrangedBatch out;
    out.source_perm = random_permutation(B, rng, require_derangement);
    out.target_perm = random_permutation(B, rng, require_derangement);
    auto [ti_for_source, ti_for_target] = swap_between_domains(source.h_ti, target.h_ti);
    out.r_ss = combine(source.h_tr, shuffle_within_domain(source.h_ti, out.source_perm));
    out.r_st = combine(source.h_tr, ti_for_source);
    out.r_ts = combine(target.h_tr, ti_for_target);
    out.r_tt = combine(target.h_tr, shuffle_within_domain(target.h_ti, out.target_perm));
    out.labels_source = std::move(labels_source);
    out.pseudo_labels_target = std::move(pseudo_labels_target);
    return out;
}

}  // namespace dtdn
