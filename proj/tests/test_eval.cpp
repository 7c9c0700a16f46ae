#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "dtdn/eval.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace dtdn;
using dtdn::testing::Matrix;

namespace {

Tensor from_angles_deg(const std::vector<double>& deg) {
    std::vector<double> v;
    for (double d : deg) {
        const double r = d * std::numbers::pi / 180.0;
        v.push_back(std::cos(r));
        v.push_back(std::sin(r));
    }
    return Tensor({deg.size(), 2}, std::move(v));
}

Matrix to_matrix(const Tensor& t) {
    Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
    return m;
}

Tensor unit_rows(std::size_t n, std::size_t d, dtdn::testing::Rng& rng) {
    std::normal_distribution<double> normal;
    std::vector<double> v;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(d);
        for (auto& x : row) x = normal(rng);
        row = dtdn::testing::normalized(row);
        v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor({n, d}, std::move(v));
}

// Gallery at 0,20,...,140 degrees with ids 0,1,2,0,1,2,3,4. Queries at
// 5,65,125,35,101 degrees with ids 3,1,2,0,4. Ranking by angular distance:
//   q0: g0 g1 g2 g3 g4 g5 g6 g7 -> id 3 at rank 7
//   q1: g3 g4 g2 g5 g1 g6 g0 g7 -> id 1 at ranks 2, 5
//   q2: g6 g7 g5 g4 g3 g2 g1 g0 -> id 2 at ranks 3, 6
//   q3: g2 g1 g3 g0 g4 g5 g6 g7 -> id 0 at ranks 3, 4
//   q4: g5 g6 g4 g7 g3 g2 g1 g0 -> id 4 at rank 4
struct HandCase {
    Tensor query = from_angles_deg({5, 65, 125, 35, 101});
    std::vector<int> query_ids{3, 1, 2, 0, 4};
    Tensor gallery = from_angles_deg({0, 20, 40, 60, 80, 100, 120, 140});
    std::vector<int> gallery_ids{0, 1, 2, 0, 1, 2, 3, 4};
};

}  // namespace

TEST(Cmc, SelfRetrievalIsPerfect) {
    dtdn::testing::Rng rng(1);
    Tensor e = unit_rows(6, 4, rng);
    const std::vector<int> ids{0, 1, 2, 3, 4, 5};
    const std::size_t ks[] = {1, 5};
    auto r = cmc_rank_k(e, ids, e, ids, ks);
    EXPECT_EQ(r.at(1), 1.0);
    EXPECT_EQ(r.at(5), 1.0);
}

TEST(Cmc, OrthogonalTiesFollowIndexOrder) {
    // All cosines are 0, so every ranking is the gallery order 0..3.
    Tensor q = Tensor::matrix(2, 6, {0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1});
    Tensor g = Tensor::matrix(4, 6, {1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0});
    const std::vector<int> qid{7, 9}, gid{9, 7, 7, 9};
    const std::size_t ks[] = {1, 2};
    auto r = cmc_rank_k(q, qid, g, gid, ks);
    EXPECT_EQ(r.at(1), 0.5);
    EXPECT_EQ(r.at(2), 1.0);
}

TEST(Cmc, HandRankingTable) {
    HandCase h;
    const std::size_t ks[] = {1, 2, 3, 4, 5, 7, 10, 20};
    auto r = cmc_rank_k(h.query, h.query_ids, h.gallery, h.gallery_ids, ks);
    EXPECT_EQ(r.at(1), 0.0);
    EXPECT_EQ(r.at(2), 0.2);
    EXPECT_EQ(r.at(3), 0.6);
    EXPECT_EQ(r.at(4), 0.8);
    EXPECT_EQ(r.at(5), 0.8);
    EXPECT_EQ(r.at(7), 1.0);
    EXPECT_EQ(r.at(10), 1.0);
    EXPECT_EQ(r.at(20), 1.0);
}

TEST(Cmc, MonotoneInK) {
    for (int seed = 0; seed < 20; ++seed) {
        dtdn::testing::Rng rng(seed);
        Tensor q = unit_rows(5, 3, rng), g = unit_rows(12, 3, rng);
        std::vector<int> qid, gid;
        std::uniform_int_distribution<int> pick(0, 3);
        for (int i = 0; i < 12; ++i) gid.push_back(i < 4 ? i : pick(rng));
        for (int i = 0; i < 5; ++i) qid.push_back(pick(rng));
        const std::size_t ks[] = {1, 2, 3, 5, 8, 12, 20};
        auto r = cmc_rank_k(q, qid, g, gid, ks);
        double prev = 0.0;
        for (auto& [k, v] : r) {
            EXPECT_GE(v, prev);
            EXPECT_LE(v, 1.0);
            EXPECT_NEAR(v, dtdn::testing::cmc_oracle(to_matrix(q), qid, to_matrix(g), gid, k), 1e-12);
            prev = v;
        }
    }
}

TEST(Cmc, QueryIdAbsentFromGalleryThrows) {
    Tensor e = Tensor::matrix(1, 2, {1, 0});
    const std::vector<int> qid{1}, gid{2};
    const std::size_t ks[] = {1};
    EXPECT_THROW(cmc_rank_k(e, qid, e, gid, ks), std::invalid_argument);
    EXPECT_THROW(mean_average_precision(e, qid, e, gid), std::invalid_argument);
}

TEST(Map, TopRankedMatchesGiveOne) {
    // Two tight pairs, each far from the other: every match outranks every non-match.
    Tensor g = from_angles_deg({0, 1, 90, 91});
    const std::vector<int> gid{0, 0, 1, 1};
    EXPECT_EQ(mean_average_precision(g, gid, g, gid), 1.0);
}

TEST(Map, MatchesAtRanksOneAndThree) {
    Tensor q = from_angles_deg({0});
    Tensor g = from_angles_deg({10, 20, 30, 40, 50});
    const std::vector<int> qid{1}, gid{1, 0, 1, 0, 0};
    EXPECT_NEAR(mean_average_precision(q, qid, g, gid), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
    EXPECT_NEAR(mean_average_precision(q, qid, g, gid), 0.8333, 1e-4);
}

TEST(Map, HandRankingTable) {
    HandCase h;
    const double expected = (1.0 / 7 + (1.0 / 2 + 2.0 / 5) / 2 + (1.0 / 3 + 2.0 / 6) / 2 + (1.0 / 3 + 2.0 / 4) / 2 + 1.0 / 4) / 5;
    EXPECT_NEAR(mean_average_precision(h.query, h.query_ids, h.gallery, h.gallery_ids), expected, 1e-15);
}

TEST(Map, MatchesBruteForceOracle) {
    for (int seed = 0; seed < 50; ++seed) {
        dtdn::testing::Rng rng(seed);
        Tensor q = unit_rows(4, 3, rng), g = unit_rows(10, 3, rng);
        std::vector<int> qid, gid;
        std::uniform_int_distribution<int> pick(0, 2);
        for (int i = 0; i < 10; ++i) gid.push_back(i < 3 ? i : pick(rng));
        for (int i = 0; i < 4; ++i) qid.push_back(pick(rng));
        EXPECT_NEAR(mean_average_precision(q, qid, g, gid),
                    dtdn::testing::map_oracle(to_matrix(q), qid, to_matrix(g), gid), 1e-12);
    }
}

TEST(Retrieval, RankingUnchangedByPositiveRescaling) {
    dtdn::testing::Rng rng(3);
    Tensor q = unit_rows(3, 4, rng), g = unit_rows(9, 4, rng);
    auto scaled = [](const Tensor& t, double s) {
        std::vector<double> v = t.values();
        for (auto& x : v) x *= s;
        return Tensor(t.shape(), std::move(v));
    };
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_EQ(detail::rank_gallery(q, i, g), detail::rank_gallery(scaled(q, 3.5), i, scaled(g, 0.25)));
    const std::vector<int> qid{0, 1, 2}, gid{0, 1, 2, 0, 1, 2, 0, 1, 2};
    auto a = evaluate_retrieval(q, qid, g, gid), b = evaluate_retrieval(scaled(q, 7), qid, scaled(g, 2), gid);
    EXPECT_EQ(a.rank_k, b.rank_k);
    EXPECT_EQ(a.mAP, b.mAP);
    EXPECT_EQ(a.rank_k.size(), 4u);
}

TEST(Retrieval, IdenticalGalleryRowsTieToLowerIndex) {
    Tensor q = from_angles_deg({0});
    Tensor g = from_angles_deg({30, 30, 0});
    EXPECT_EQ(detail::rank_gallery(q, 0, g), (std::vector<std::size_t>{2, 0, 1}));
}

TEST(Accuracy, OneHotLogitsArePerfect) {
    Tensor logits = Tensor::matrix(3, 3, {1, 0, 0, 0, 0, 1, 0, 1, 0});
    const std::vector<int> labels{0, 2, 1};
    EXPECT_EQ(classification_accuracy(logits, labels), 1.0);
}

TEST(Accuracy, ZeroLogitsPredictClassZero) {
    const std::vector<int> labels{0, 1, 0, 2, 0, 1, 1};
    EXPECT_DOUBLE_EQ(classification_accuracy(Tensor::zeros({7, 3}), labels), 3.0 / 7.0);
}

TEST(Accuracy, MatchesCountingOracle) {
    dtdn::testing::Rng rng(4);
    Tensor logits = dtdn::testing::random_tensor({20, 5}, rng, -2, 2, false);
    std::vector<int> labels;
    std::uniform_int_distribution<int> pick(0, 4);
    for (int i = 0; i < 20; ++i) labels.push_back(pick(rng));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 5; ++c)
            if (logits.at(i, c) > logits.at(i, best)) best = c;
        correct += static_cast<int>(best) == labels[i];
    }
    EXPECT_DOUBLE_EQ(classification_accuracy(logits, labels), static_cast<double>(correct) / 20.0);
}

TEST(Accuracy, ClassMeanAveragesPresentClasses) {
    Tensor logits = Tensor::matrix(4, 3, {1, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0, 0});
    const std::vector<int> labels{0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(mean_class_accuracy(logits, labels), (1.0 + 0.5) / 2);
}

TEST(OpenSet, HandConfusionAtThresholdPointThree) {
    // Max softmax probabilities: 0.711, 0.25, 0.269, 0.475, 0.269, 0.870.
    Tensor logits = Tensor::matrix(6, 4,
                                   {2, 0, 0, 0,      //
                                    0, 0, 0, 0,      //
                                    0.1, 0, 0, 0,    //
                                    0, 0, 1, 0,      //
                                    0, 0, 0, 0.1,    //
                                    0, 0, 0, 3});
    const std::vector<int> truth{0, kUnknownClass, 0, 2, kUnknownClass, 2};
    auto r = openset_accuracy(logits, truth, 0.3);
    EXPECT_EQ(r.predictions, (std::vector<int>{0, kUnknownClass, kUnknownClass, 2, kUnknownClass, 3}));
    // class 0: 1/2, class 2: 1/2, unknown: 2/2.
    EXPECT_EQ(r.os_star, 0.5);
    EXPECT_EQ(r.os, 2.0 / 3.0);
    EXPECT_EQ(r.threshold, 0.3);
}

TEST(OpenSet, AllUnknownBelowThreshold) {
    const std::vector<int> truth(3, kUnknownClass);
    auto r = openset_accuracy(Tensor::zeros({3, 5}), truth, 0.3);
    EXPECT_EQ(r.os, 1.0);
    EXPECT_EQ(r.os_star, 0.0);
}

TEST(OpenSet, ZeroThresholdEqualsClassMeanAccuracy) {
    for (int seed = 0; seed < 10; ++seed) {
        dtdn::testing::Rng rng(seed);
        Tensor logits = dtdn::testing::random_tensor({12, 4}, rng, -2, 2, false);
        std::vector<int> labels;
        std::uniform_int_distribution<int> pick(0, 3);
        for (int i = 0; i < 12; ++i) labels.push_back(pick(rng));
        auto r = openset_accuracy(logits, labels, 0.0);
        for (int p : r.predictions) EXPECT_NE(p, kUnknownClass);
        EXPECT_DOUBLE_EQ(r.os_star, mean_class_accuracy(logits, labels));
        EXPECT_DOUBLE_EQ(r.os, r.os_star);
    }
}

TEST(OpenSet, RejectsBadInputs) {
    const std::vector<int> truth{0};
    EXPECT_THROW(openset_accuracy(Tensor::zeros({1, 2}), truth, 1.0), std::invalid_argument);
    const std::vector<int> bad{5};
    EXPECT_THROW(openset_accuracy(Tensor::zeros({1, 2}), bad, 0.3), std::invalid_argument);
}

TEST(MetricRow, CsvLayout) {
    std::ostringstream os;
    write_metric_row(os, "run", 3, "target_acc", 0.5);
    EXPECT_EQ(os.str(), "run,3,target_acc,0.5\n");
}
