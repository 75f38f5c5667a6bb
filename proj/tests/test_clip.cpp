#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dcf/clip.hpp"
#include "dcf/optim.hpp"
#include "support/oracles.hpp"

using dcf::Rng;
using TensorD = dcf::Tensor<double>;

namespace {

TensorD random_unit_rows(std::size_t b, std::size_t d, Rng& rng) {
    return dcf::l2_normalize_rows(TensorD::randn({b, d}, rng));
}

std::set<std::size_t> support(const TensorD& f) {
    std::set<std::size_t> s;
    for (std::size_t i = 0; i < f.numel(); ++i) {
        if (f[i] != 0) s.insert(i);
    }
    return s;
}

}  // namespace

// --- text stub -------------------------------------------------------------

TEST(Tokenizer, LowercasesAndSplitsOnNonAlnum) {
    const auto t = dcf::tokenize("Cardiomegaly IS present!  x-ray;2nd");
    const std::vector<std::string> want{"cardiomegaly", "is", "present", "x", "ray", "2nd"};
    EXPECT_EQ(t, want);
}

TEST(Tokenizer, SentencesBreakOnTerminators) {
    const auto s = dcf::tokenize_sentences("a b. c; d\ne! f? ");
    ASSERT_EQ(s.size(), 5u);
    EXPECT_EQ(s[0], (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(s[4], (std::vector<std::string>{"f"}));
}

TEST(Fnv1a, KnownVectors) {
    EXPECT_EQ(dcf::fnv1a64(""), 14695981039346656037ULL);
    EXPECT_EQ(dcf::fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(dcf::fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(TextFeatures, CaseAndPunctuationInvariant) {
    const auto a = dcf::text_features<double>("Cardiomegaly is present.");
    const auto b = dcf::text_features<double>("cardiomegaly IS present!");
    EXPECT_EQ(a.vec(), b.vec());
}

TEST(TextFeatures, Deterministic) {
    const auto a = dcf::text_features<double>("sphere is not present. box is present.");
    const auto b = dcf::text_features<double>("sphere is not present. box is present.");
    EXPECT_EQ(a.vec(), b.vec());
}

TEST(TextFeatures, DisjointTokensGiveDisjointSupport) {
    // Pairs checked collision-free by construction: their supports must not
    // share a bucket, and each support has exactly one bucket per n-gram.
    const std::vector<std::pair<std::string, std::string>> pairs{
        {"sphere is present", "box lies elsewhere"},
        {"alpha beta", "gamma delta"},
        {"one", "two"},
    };
    for (const auto& [x, y] : pairs) {
        const auto sx = support(dcf::text_features<double>(x));
        const auto sy = support(dcf::text_features<double>(y));
        const std::size_t wx = dcf::tokenize(x).size(), wy = dcf::tokenize(y).size();
        auto grams = [](std::size_t w) {
            std::size_t n = 0;
            for (std::size_t k = 1; k <= dcf::kMaxNgram && k <= w; ++k) n += w - k + 1;
            return n;
        };
        ASSERT_EQ(sx.size(), grams(wx)) << x;
        ASSERT_EQ(sy.size(), grams(wy)) << y;
        for (std::size_t i : sx) EXPECT_EQ(sy.count(i), 0u) << x << " / " << y;
    }
}

TEST(TextFeatures, ScaledByInverseSqrtWordCount) {
    const auto f = dcf::text_features<double>("one two three four");
    // 4 unigrams + 3 bigrams + 2 trigrams, each 1/sqrt(4)
    const double sum = std::accumulate(f.data().begin(), f.data().end(), 0.0);
    EXPECT_NEAR(sum, 9 * 0.5, 1e-15);
}

TEST(TextFeatures, NegationChangesFeatures) {
    const auto pos = dcf::text_features<double>("sphere is present.");
    const auto neg = dcf::text_features<double>("sphere is not present.");
    EXPECT_NE(pos.vec(), neg.vec());
}

TEST(TextStub, EmptyStringIsFiniteAndDeterministic) {
    Rng rng(3);
    dcf::TextStub<double> stub;
    stub.init(rng);
    stub.head().linear().bias().value = TensorD::randn({dcf::kEmbedDim}, rng);
    const auto z = stub.encode("");
    ASSERT_EQ(z.shape(), dcf::Shape{dcf::kEmbedDim});
    double n = 0;
    for (double v : z.data()) {
        ASSERT_TRUE(std::isfinite(v));
        n += v * v;
    }
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
    // Direction equals the bias direction.
    const auto& bias = stub.head().linear().bias().value;
    double bn = 0;
    for (double v : bias.data()) bn += v * v;
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(z[i], bias[i] / std::sqrt(bn), 1e-12);
    EXPECT_EQ(stub.encode("").vec(), z.vec());
}

TEST(TextStub, ZeroBiasEmptyStringIsZeroNotNan) {
    dcf::TextStub<double> stub;
    const auto z = stub.encode("");
    for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

// --- projection heads ------------------------------------------------------

TEST(ProjectImage, ShapeAndUnitRows) {
    Rng rng(5);
    dcf::ProjectionHead<double> head(256);
    head.init(rng);
    const auto z = head.forward(TensorD::randn({3, 256}, rng), false);
    ASSERT_EQ(z.shape(), (dcf::Shape{3, 512}));
    for (std::size_t i = 0; i < 3; ++i) {
        double n = 0;
        for (std::size_t j = 0; j < 512; ++j) n += z(i, j) * z(i, j);
        EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
    }
}

TEST(ProjectImage, ZeroInputGivesNormalizedBias) {
    Rng rng(6);
    dcf::ProjectionHead<double> head(8, 4);
    head.linear().bias().value = TensorD({4}, {3, 0, 4, 0});
    const auto z = head.forward(TensorD::zeros({2, 8}), false);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_DOUBLE_EQ(z(i, 0), 0.6);
        EXPECT_DOUBLE_EQ(z(i, 2), 0.8);
    }
}

TEST(ProjectImage, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    dcf::ProjectionHead<double> head(6, 5);
    head.init(rng, 0.5);
    head.linear().bias().value = TensorD::randn({5}, rng, 0.3);
    TensorD x = TensorD::randn({3, 6}, rng);
    const TensorD r = TensorD::randn({3, 5}, rng);
    auto loss = [&] { return oracle::dot(r, head.forward(x, false)); };
    dcf::ParamList<double> params;
    head.collect("image_proj", params);
    dcf::zero_grads(params);
    head.forward(x, true);
    const TensorD gx = head.backward(r);
    EXPECT_LT(oracle::fd_max_rel_err(x, gx, loss), 1e-6);
    for (auto& p : params) EXPECT_LT(oracle::fd_max_rel_err(*p.value, *p.grad, loss), 1e-6) << p.path;
}

TEST(L2Normalize, BackwardMatchesFiniteDifferences) {
    Rng rng(8);
    TensorD x = TensorD::randn({4, 7}, rng);
    const TensorD r = TensorD::randn({4, 7}, rng);
    const TensorD gx = dcf::l2_normalize_rows_backward(x, r);
    auto loss = [&] { return oracle::dot(r, dcf::l2_normalize_rows(x)); };
    EXPECT_LT(oracle::fd_max_rel_err(x, gx, loss), 1e-6);
}

// --- cosine similarity -----------------------------------------------------

TEST(CosineSim, OneHotRowsGiveIdentity) {
    TensorD z = TensorD::zeros({3, 5});
    for (std::size_t i = 0; i < 3; ++i) z(i, i) = 1;
    const auto s = dcf::cosine_sim_matrix(z, z);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(s(i, j), i == j ? 1.0 : 0.0);
}

TEST(CosineSim, OppositeVectorsGiveMinusOne) {
    Rng rng(9);
    const TensorD a = TensorD::randn({1, 16}, rng);
    const auto s = dcf::cosine_sim_matrix(a, dcf::scale(a, -1.0));
    EXPECT_NEAR(s(0, 0), -1.0, 1e-15);
}

TEST(CosineSim, MatchesLoopOracle) {
    Rng rng(10);
    const TensorD a = TensorD::randn({5, 9}, rng);
    const TensorD b = TensorD::randn({4, 9}, rng);
    const auto s = dcf::cosine_sim_matrix(a, b);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t k = 0; k < 9; ++k) {
                ab += a(i, k) * b(j, k);
                aa += a(i, k) * a(i, k);
                bb += b(j, k) * b(j, k);
            }
            EXPECT_NEAR(s(i, j), ab / std::sqrt(aa * bb), 1e-12);
        }
    }
}

// --- contrastive loss ------------------------------------------------------

TEST(ClipLoss, SingletonBatchIsZero) {
    Rng rng(11);
    const TensorD z = random_unit_rows(1, 8, rng);
    const TensorD w = random_unit_rows(1, 8, rng);
    EXPECT_EQ(dcf::clip_loss(z, w).loss, 0.0);
}

TEST(ClipLoss, IdenticalRowsGiveTwoLogB) {
    Rng rng(12);
    for (std::size_t b : {2u, 4u, 8u}) {
        const TensorD row = random_unit_rows(1, 16, rng);
        TensorD z({b, 16});
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < 16; ++j) z(i, j) = row(0, j);
        EXPECT_NEAR(dcf::clip_loss(z, z).loss, 2 * std::log(static_cast<double>(b)), 1e-9) << "B=" << b;
    }
    EXPECT_NEAR(2 * std::log(4.0), 2.77259, 1e-5);
}

TEST(ClipLoss, OrthogonalPairsClosedForm) {
    TensorD z = TensorD::zeros({2, 4});
    z(0, 0) = 1;
    z(1, 1) = 1;
    const double want = 2 * std::log(1 + std::exp(-1.0));
    EXPECT_NEAR(dcf::clip_loss(z, z).loss, want, 1e-9);
    EXPECT_NEAR(want, 0.62652, 1e-5);
}

TEST(ClipLoss, RejectsBadInput) {
    Rng rng(13);
    EXPECT_THROW(TensorD({0, 512}), dcf::ShapeError);
    const TensorD a = random_unit_rows(2, 4, rng);
    const TensorD b = random_unit_rows(3, 4, rng);
    EXPECT_THROW(dcf::clip_loss(a, b), dcf::ShapeError);
    EXPECT_THROW(dcf::clip_loss(a, a, 0.0), std::invalid_argument);
}

TEST(ClipLoss, PermutationInvariant) {
    Rng rng(14);
    const TensorD zt = random_unit_rows(6, 10, rng);
    const TensorD zv = random_unit_rows(6, 10, rng);
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    TensorD pt(zt.shape()), pv(zv.shape());
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 10; ++j) {
            pt(i, j) = zt(perm[i], j);
            pv(i, j) = zv(perm[i], j);
        }
    EXPECT_NEAR(dcf::clip_loss(zt, zv).loss, dcf::clip_loss(pt, pv).loss, 1e-12);
}

TEST(ClipLoss, SwapSymmetric) {
    Rng rng(15);
    const TensorD zt = random_unit_rows(5, 7, rng);
    const TensorD zv = random_unit_rows(5, 7, rng);
    for (double tau : {1.0, 0.1}) {
        EXPECT_EQ(dcf::clip_loss(zt, zv, tau).loss, dcf::clip_loss(zv, zt, tau).loss);
    }
}

TEST(ClipLoss, VanishesAsTemperatureShrinks) {
    TensorD z = TensorD::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i) z(i, i) = 1;
    double prev = dcf::clip_loss(z, z, 1.0).loss;
    for (double tau : {0.5, 0.1, 0.02, 0.005}) {
        const double l = dcf::clip_loss(z, z, tau).loss;
        EXPECT_TRUE(l < prev || l == 0.0) << "tau=" << tau;
        prev = l;
    }
    EXPECT_LT(prev, 1e-12);
}

TEST(ClipLoss, NonIncreasingInDiagonalMargin) {
    // Unit rows with fixed off-diagonal similarity c and diagonal 1 - m (via
    // a two-component construction); loss must not increase with m going up.
    // Family: zt_i = e_i, zv_i = a e_i + b u with u shared, a^2 + b^2 = 1.
    const std::size_t bsz = 4, d = 5;
    double prev = 1e300;
    for (int step = 0; step <= 10; ++step) {
        const double a = 0.1 * step;  // diagonal similarity grows with a
        const double b = std::sqrt(1 - a * a);
        TensorD zt = TensorD::zeros({bsz, d}), zv = TensorD::zeros({bsz, d});
        for (std::size_t i = 0; i < bsz; ++i) {
            zt(i, i) = 1;
            zv(i, i) = a;
            zv(i, d - 1) = b;
        }
        // Off-diagonal zt_i . zv_j = 0 for all a, diagonal = a.
        const double l = dcf::clip_loss(zt, zv).loss;
        EXPECT_LE(l, prev + 1e-15) << "a=" << a;
        prev = l;
    }
}

TEST(ClipLoss, LogitGradientRowsAndColumnsSumToZero) {
    Rng rng(16);
    const auto r = dcf::clip_loss(random_unit_rows(7, 9, rng), random_unit_rows(7, 9, rng), 0.3);
    for (std::size_t i = 0; i < 7; ++i) {
        double row = 0, col = 0;
        for (std::size_t j = 0; j < 7; ++j) {
            row += r.grad_logits_row(i, j);
            col += r.grad_logits_col(j, i);
        }
        EXPECT_NEAR(row, 0.0, 1e-10);
        EXPECT_NEAR(col, 0.0, 1e-10);
    }
}

TEST(ClipLoss, GradientMatchesFiniteDifferences) {
    Rng rng(17);
    for (double tau : {1.0, 0.1}) {
        TensorD zt = random_unit_rows(5, 6, rng);
        TensorD zv = random_unit_rows(5, 6, rng);
        const auto r = dcf::clip_loss(zt, zv, tau);
        auto loss = [&] { return static_cast<double>(dcf::clip_loss(zt, zv, tau).loss); };
        EXPECT_LT(oracle::fd_max_rel_err(zt, r.grad_zt, loss), 1e-6) << "tau=" << tau;
        EXPECT_LT(oracle::fd_max_rel_err(zv, r.grad_zv, loss), 1e-6) << "tau=" << tau;
    }
}

TEST(ClipLoss, EndToEndThroughHeadsMatchesFiniteDifferences) {
    Rng rng(18);
    dcf::ProjectionHead<double> img(6, 5), txt(4, 5);
    img.init(rng, 0.5);
    txt.init(rng, 0.5);
    TensorD xi = TensorD::randn({3, 6}, rng);
    TensorD xt = TensorD::randn({3, 4}, rng);
    auto loss = [&] {
        return static_cast<double>(dcf::clip_loss(txt.forward(xt, false), img.forward(xi, false)).loss);
    };
    dcf::ParamList<double> params;
    img.collect("image_proj", params);
    txt.collect("text_proj", params);
    dcf::zero_grads(params);
    const auto r = dcf::clip_loss(txt.forward(xt, true), img.forward(xi, true));
    const TensorD gxi = img.backward(r.grad_zv);
    const TensorD gxt = txt.backward(r.grad_zt);
    EXPECT_LT(oracle::fd_max_rel_err(xi, gxi, loss), 1e-6);
    EXPECT_LT(oracle::fd_max_rel_err(xt, gxt, loss), 1e-6);
    for (auto& p : params) EXPECT_LT(oracle::fd_max_rel_err(*p.value, *p.grad, loss), 1e-6) << p.path;
}

// --- AdamW -----------------------------------------------------------------

namespace {

struct Single {
    dcf::Param<double> p;
    dcf::ParamList<double> list;
    explicit Single(std::vector<double> v) {
        const std::size_t n = v.size();
        p.reset(TensorD({n}, std::move(v)));
        p.register_in("w", list);
    }
};

}  // namespace

TEST(AdamW, FirstStepIsMinusLr) {
    Single s({2.0, -1.0});
    s.p.grad = TensorD({2}, {1.0, 1.0});
    dcf::AdamW<double> opt({1e-3, 0.9, 0.999, 1e-8, 0.0});
    opt.step(s.list);
    // m_hat = 1, v_hat = 1: delta = -lr / (1 + eps)
    EXPECT_NEAR(s.p.value[0], 2.0 - 1e-3 / (1 + 1e-8), 1e-15);
    EXPECT_NEAR(s.p.value[1], -1.0 - 1e-3 / (1 + 1e-8), 1e-15);
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ZeroGradientAppliesDecoupledDecayOnly) {
    Single s({3.0});
    s.p.grad = TensorD({1}, {0.0});
    dcf::AdamW<double> opt({1e-2, 0.9, 0.999, 1e-8, 0.1});
    opt.step(s.list);
    EXPECT_DOUBLE_EQ(s.p.value[0], 3.0 * (1 - 1e-2 * 0.1));
}

TEST(AdamW, DefaultsMatchDocumentedValues) {
    const dcf::AdamWConfig c;
    EXPECT_EQ(c.lr, 1e-5);
    EXPECT_EQ(c.beta1, 0.9);
    EXPECT_EQ(c.beta2, 0.999);
    EXPECT_EQ(c.eps, 1e-8);
    EXPECT_EQ(c.weight_decay, 0.01);
}

TEST(AdamW, IdenticalRunsGiveIdenticalParameters) {
    auto run = [] {
        Rng rng(19);
        Single s({0.5, -0.25, 1.0});
        dcf::AdamW<double> opt({1e-2});
        for (int t = 0; t < 20; ++t) {
            s.p.grad = TensorD::randn({3}, rng);
            opt.step(s.list);
        }
        return s.p.value.vec();
    };
    EXPECT_EQ(run(), run());
}

TEST(AdamW, MatchesReferenceRecurrence) {
    Rng rng(20);
    Single s({0.3});
    dcf::AdamW<double> opt({0.05, 0.8, 0.95, 1e-6, 0.02});
    double w = 0.3, m = 0, v = 0;
    for (int t = 1; t <= 10; ++t) {
        const double g = rng.normal();
        s.p.grad = TensorD({1}, {g});
        opt.step(s.list);
        w *= 1 - 0.05 * 0.02;
        m = 0.8 * m + 0.2 * g;
        v = 0.95 * v + 0.05 * g * g;
        w -= 0.05 * (m / (1 - std::pow(0.8, t))) / (std::sqrt(v / (1 - std::pow(0.95, t))) + 1e-6);
        EXPECT_NEAR(s.p.value[0], w, 1e-14);
    }
}

TEST(AdamW, MomentStateRoundTrips) {
    Rng rng(21);
    Single a({1.0, 2.0}), b({1.0, 2.0});
    dcf::AdamW<double> oa({1e-2}), ob({1e-2});
    for (int t = 0; t < 3; ++t) {
        a.p.grad = TensorD::randn({2}, rng);
        oa.step(a.list);
    }
    b.p.value = a.p.value;
    const auto st = oa.state();
    ASSERT_EQ(st.size(), 2u);
    EXPECT_EQ(st[0].path, "adam.m.w");
    EXPECT_EQ(st[1].path, "adam.v.w");
    ob.load_moments("w", *st[0].value, *st[1].value);
    ob.set_steps(oa.steps());
    a.p.grad = b.p.grad = TensorD({2}, {0.3, -0.7});
    oa.step(a.list);
    ob.step(b.list);
    EXPECT_EQ(a.p.value.vec(), b.p.value.vec());
}
