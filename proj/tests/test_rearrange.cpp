#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "dtdn/rearrange.hpp"
#include "support/gradcheck.hpp"

using namespace dtdn;
using dtdn::testing::random_tensor;

namespace {

std::vector<std::vector<double>> rows_of(const Tensor& t) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < t.dim(0); ++i) {
        auto r = t.data().subspan(i * t.dim(1), t.dim(1));
        out.emplace_back(r.begin(), r.end());
    }
    return out;
}

DisentangledPair random_pair(std::size_t B, std::size_t D, dtdn::testing::Rng& r) {
    Tensor h = random_tensor({B, D}, r, -1, 1, false);
    Tensor m = random_tensor({B, D}, r, 0.05, 0.95, false);
    return disentangle(h, m);
}

}  // namespace

TEST(Shuffle, IdentityLeavesInput) {
    Tensor x = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
    Tensor y = shuffle_within_domain(x, {0, 1, 2});
    EXPECT_EQ(y.values(), x.values());
}

TEST(Shuffle, RotatesRowsByPermutation) {
    Tensor x = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
    Tensor y = shuffle_within_domain(x, {2, 0, 1});
    EXPECT_EQ(y.values(), (std::vector<double>{5, 6, 1, 2, 3, 4}));
}

TEST(Shuffle, InverseRecoversInput) {
    dtdn::testing::Rng r(1);
    Rng prng(2);
    for (std::size_t B : {1u, 2u, 5u, 16u}) {
        Tensor x = random_tensor({B, 3}, r, -1, 1, false);
        auto perm = random_permutation(B, prng);
        EXPECT_EQ(shuffle_within_domain(shuffle_within_domain(x, perm), inverse(perm)).values(), x.values());
    }
}

TEST(Shuffle, InvalidPermutationThrows) {
    Tensor x = Tensor::zeros({3, 2});
    EXPECT_THROW(shuffle_within_domain(x, {0, 0, 1}), ShapeError);
    EXPECT_THROW(shuffle_within_domain(x, {0, 1, 3}), ShapeError);
    EXPECT_THROW(shuffle_within_domain(x, {0, 1}), ShapeError);
}

TEST(Shuffle, GradientRoutesThroughPermutation) {
    Tensor x = Tensor::matrix(3, 1, {0, 0, 0}, true);
    Tensor w = Tensor::matrix(3, 1, {10, 20, 30});
    backward(sum(mul(shuffle_within_domain(x, {2, 0, 1}), w)));
    // Output row i reads input row perm[i], so input row perm[i] receives w[i].
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{20, 30, 10}));
}

TEST(RandomPermutation, IsBijection) {
    Rng rng(3);
    for (std::size_t n = 1; n < 40; ++n) EXPECT_TRUE(is_permutation_of_range(random_permutation(n, rng)));
}

TEST(RandomPermutation, DerangementHasNoFixedPoints) {
    Rng rng(4);
    for (std::size_t n = 2; n < 20; ++n) {
        auto p = random_permutation(n, rng, true);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NE(p[i], i);
    }
}

TEST(RandomPermutation, UniformOverThreeElements) {
    Rng rng(5);
    std::map<Permutation, int> counts;
    const int draws = 60000;
    for (int i = 0; i < draws; ++i) ++counts[random_permutation(3, rng)];
    ASSERT_EQ(counts.size(), 6u);
    for (auto& [p, c] : counts) EXPECT_NEAR(c, draws / 6.0, 0.05 * draws / 6.0);
}

TEST(Swap, ExchangesOperands) {
    Tensor a = Tensor::matrix(2, 1, {1, 2}), b = Tensor::matrix(2, 1, {3, 4});
    auto [x, y] = swap_between_domains(a, b);
    EXPECT_TRUE(x.same_node(b));
    EXPECT_TRUE(y.same_node(a));
    auto [u, v] = swap_between_domains(x, y);
    EXPECT_TRUE(u.same_node(a));
    EXPECT_TRUE(v.same_node(b));
}

TEST(Swap, PreservesRowMultiset) {
    dtdn::testing::Rng r(6);
    Tensor a = random_tensor({4, 3}, r, -1, 1, false), b = random_tensor({4, 3}, r, -1, 1, false);
    auto [x, y] = swap_between_domains(a, b);
    auto in = rows_of(a), out = rows_of(x);
    auto in2 = rows_of(b), out2 = rows_of(y);
    in.insert(in.end(), in2.begin(), in2.end());
    out.insert(out.end(), out2.begin(), out2.end());
    std::sort(in.begin(), in.end());
    std::sort(out.begin(), out.end());
    EXPECT_EQ(in, out);
}

TEST(Swap, BatchMismatchThrows) {
    EXPECT_THROW(swap_between_domains(Tensor::zeros({2, 3}), Tensor::zeros({3, 3})), ShapeError);
}

TEST(Combine, AddsElementwise) {
    EXPECT_EQ(combine(Tensor::vector({1, 2}), Tensor::vector({3, 4})).values(), (std::vector<double>{4, 6}));
    Tensor h = Tensor::vector({1.5, -2});
    EXPECT_EQ(combine(h, Tensor::zeros({2})).values(), h.values());
    EXPECT_THROW(combine(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST(Combine, DisentangledPartsReassemble) {
    dtdn::testing::Rng r(7);
    Tensor h = random_tensor({3, 4}, r, -5, 5, false);
    auto p = disentangle(h, random_tensor({3, 4}, r, 0.01, 0.99, false));
    Tensor c = combine(p.h_tr, p.h_ti);
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(c[i], h[i], 1e-15 * 5);
}

TEST(BuildRearranged, SingleSampleDegeneratesToIdentity) {
    dtdn::testing::Rng r(8);
    auto s = random_pair(1, 4, r), t = random_pair(1, 4, r);
    Rng rng(9);
    auto rb = build_rearranged_batch(s, {3}, t, {7}, rng);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(rb.r_ss[j], s.h_tr[j] + s.h_ti[j], 1e-15);
        EXPECT_NEAR(rb.r_tt[j], t.h_tr[j] + t.h_ti[j], 1e-15);
    }
}

TEST(BuildRearranged, FourCombinationsMatchHandRecomputation) {
    dtdn::testing::Rng r(10);
    auto s = random_pair(4, 3, r), t = random_pair(4, 3, r);
    Rng rng(11);
    auto rb = build_rearranged_batch(s, {0, 1, 2, 3}, t, {10, 11, 12, 13}, rng);
    ASSERT_TRUE(is_permutation_of_range(rb.source_perm));
    ASSERT_TRUE(is_permutation_of_range(rb.target_perm));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(rb.r_ss.at(i, j), s.h_tr.at(i, j) + s.h_ti.at(rb.source_perm[i], j));
            EXPECT_EQ(rb.r_st.at(i, j), s.h_tr.at(i, j) + t.h_ti.at(i, j));
            EXPECT_EQ(rb.r_ts.at(i, j), t.h_tr.at(i, j) + s.h_ti.at(i, j));
            EXPECT_EQ(rb.r_tt.at(i, j), t.h_tr.at(i, j) + t.h_ti.at(rb.target_perm[i], j));
        }
}

TEST(BuildRearranged, LabelsFollowTaskRelevantRows) {
    dtdn::testing::Rng r(12);
    auto s = random_pair(6, 2, r), t = random_pair(6, 2, r);
    const std::vector<int> labels{5, 1, 4, 1, 0, 9};
    const std::vector<std::size_t> pseudo{20, 21, 22, 23, 24, 25};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        auto rb = build_rearranged_batch(s, labels, t, pseudo, rng);
        EXPECT_EQ(rb.labels_source, labels);
        EXPECT_EQ(rb.pseudo_labels_target, pseudo);
    }
}

TEST(BuildRearranged, AllOnesMasksReduceCrossDomainRowsToHidden) {
    dtdn::testing::Rng r(13);
    Tensor hs = random_tensor({3, 4}, r, -1, 1, false), ht = random_tensor({3, 4}, r, -1, 1, false);
    auto s = disentangle(hs, Tensor::full({3, 4}, 1.0)), t = disentangle(ht, Tensor::full({3, 4}, 1.0));
    Rng rng(14);
    auto rb = build_rearranged_batch(s, {0, 1, 2}, t, {0, 1, 2}, rng);
    EXPECT_EQ(rb.r_st.values(), hs.values());
    EXPECT_EQ(rb.r_ts.values(), ht.values());
    EXPECT_EQ(rb.r_ss.values(), hs.values());
    EXPECT_EQ(rb.r_tt.values(), ht.values());
}

TEST(BuildRearranged, BatchMismatchThrows) {
    dtdn::testing::Rng r(15);
    auto s = random_pair(2, 3, r), t = random_pair(3, 3, r);
    Rng rng(16);
    EXPECT_THROW(build_rearranged_batch(s, {0, 1}, t, {0, 1, 2}, rng), ShapeError);
    auto t2 = random_pair(2, 3, r);
    EXPECT_THROW(build_rearranged_batch(s, {0}, t2, {0, 1}, rng), ShapeError);
}
