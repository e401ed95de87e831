#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "specadapt/adapters.hpp"
#include "specadapt/errors.hpp"
#include "specadapt/rng.hpp"
#include "specadapt/train.hpp"

#include <cmath>

using namespace specadapt;

namespace {

BaseWeight base_for(AdapterKind kind, const Matrix& w) {
    const bool spectral =
        kind == AdapterKind::SpectralA || kind == AdapterKind::SpectralR || kind == AdapterKind::SVDiff;
    return spectral ? BaseWeight::spectral(w) : BaseWeight::dense(w);
}

std::size_t valid_rank(AdapterKind kind, std::size_t requested, std::size_t n, std::size_t m) {
    switch (kind) {
    case AdapterKind::OFT:
        return std::min(requested, n);
    case AdapterKind::DoRAVector:
        return 1;
    default:
        return std::min(requested, std::min(n, m));
    }
}

} // namespace

TEST_CASE("zero initialization reproduces the base for every kind and rank") {
    for (int trial = 0; trial < 3; ++trial) {
        Rng rng(100 + trial);
        const Matrix w = Matrix::random_gaussian(6, 9, rng);
        const double tol = 1e-9 * (1.0 + frobenius_norm(w));
        for (AdapterKind kind : kAllKinds) {
            if (kind == AdapterKind::DoRAVector) {
                const Matrix wv = Matrix::random_gaussian(12, 1, rng);
                const BaseWeight bv = BaseWeight::dense(wv);
                const AdapterState st = init_adapter(kind, bv, 1, {}, 7);
                CHECK(frobenius_norm(effective_weight(bv, st) - wv) <= 1e-9 * (1.0 + frobenius_norm(wv)));
                continue;
            }
            const BaseWeight base = base_for(kind, w);
            for (std::size_t r : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
                const std::size_t rank = valid_rank(kind, r, 6, 9);
                const AdapterState st = init_adapter(kind, base, rank, top_columns(rank), 42 + r);
                CHECK_MESSAGE(frobenius_norm(effective_weight(base, st) - w) <= tol,
                              "kind=", kind_name(kind), " rank=", rank);
            }
        }
    }
}

TEST_CASE("spectral_r initializes with identity rotations") {
    Rng rng(3);
    const BaseWeight base = BaseWeight::spectral(Matrix::random_gaussian(10, 10, rng));
    const AdapterState st = init_adapter(AdapterKind::SpectralR, base, 8, top_columns(8), 1);
    const auto& s = st.as<SpectralRState>();
    CHECK(cayley(s.raw_u) == Matrix::identity(8));
    CHECK(cayley(s.raw_v) == Matrix::identity(8));
}

TEST_CASE("lora initializes with zero delta and seeded a") {
    Rng rng(4);
    const Matrix w = Matrix::random_gaussian(5, 7, rng);
    const BaseWeight base = BaseWeight::dense(w);
    const AdapterState st = init_adapter(AdapterKind::LoRA, base, 4, {}, 9);
    const auto& s = st.as<LoRAState>();
    CHECK(max_abs(s.b) == 0.0);
    CHECK(max_abs(s.a) > 0.0);
    CHECK(effective_weight(base, st) == w);
    // same seed, same frozen init
    const AdapterState again = init_adapter(AdapterKind::LoRA, base, 4, {}, 9);
    CHECK(again.as<LoRAState>().a == s.a);
}

TEST_CASE("cayley map") {
    CHECK(cayley(Matrix(3, 3)) == Matrix::identity(3));

    // symmetric generators have zero skew part
    const Matrix sym{{2, 1}, {1, -3}};
    CHECK(cayley(sym) == Matrix::identity(2));

    // closed-form 2x2: for raw = [[0,1],[-1,0]], Q = raw and
    // (I+Q)(I-Q)^{-1} = [[0,1],[-1,0]] by explicit inversion
    const Matrix raw{{0, 1}, {-1, 0}};
    const Matrix i_plus{{1, 1}, {-1, 1}};
    const double det = 1.0 * 1.0 - (-1.0) * 1.0;
    const Matrix i_minus_inv{{1.0 / det, 1.0 / det}, {-1.0 / det, 1.0 / det}};
    const Matrix expected = i_plus * i_minus_inv;
    const Matrix got = cayley(raw);
    CHECK(frobenius_norm(got - expected) <= 1e-14);
    CHECK(orthogonality_defect(got) <= 1e-14);
}

TEST_CASE("cayley produces exact rotations over random generators") {
    for (int trial = 0; trial < 1000; ++trial) {
        Rng rng(trial);
        const std::size_t n = 1 + rng.below(32);
        const Matrix rot = cayley(Matrix::random_gaussian(n, n, rng));
        CHECK(orthogonality_defect(rot) <= 1e-10);
        CHECK(std::abs(determinant(rot) - 1.0) <= 1e-8);
    }
}

TEST_CASE("effective weight formulas") {
    SUBCASE("spectral_r with zero generators reproduces the reconstruction exactly") {
        Rng rng(6);
        const BaseWeight base = BaseWeight::spectral(Matrix::random_gaussian(7, 5, rng));
        const AdapterState st = init_adapter(AdapterKind::SpectralR, base, 3, top_columns(3), 2);
        CHECK(effective_weight(base, st) == reconstruct(*base.decomposition));
    }

    SUBCASE("spectral_a hand expansion on diag(5, 3)") {
        const BaseWeight base = BaseWeight::spectral(Matrix{{5, 0}, {0, 3}});
        AdapterState st = init_adapter(AdapterKind::SpectralA, base, 1, top_columns(1), 0);
        const double eps = 0.25;
        st.as<SpectralAState>().a_u(0, 0) = eps;
        const Matrix w = effective_weight(base, st);
        CHECK(w(0, 0) == doctest::Approx(5.0 * (1.0 + eps)).epsilon(1e-12));
        CHECK(w(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(w(1, 0) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(w(1, 1) == doctest::Approx(3.0).epsilon(1e-12));
    }

    SUBCASE("lora outer product on a zero base") {
        const BaseWeight base = BaseWeight::dense(Matrix(3, 3));
        AdapterState st = init_adapter(AdapterKind::LoRA, base, 1, {}, 0);
        auto& lora = st.as<LoRAState>();
        lora.a = Matrix{{1}, {0}, {0}};
        lora.b = Matrix{{1}, {0}, {0}};
        const Matrix w = effective_weight(base, st);
        CHECK(w(0, 0) == 1.0);
        CHECK(frobenius_norm(w) == 1.0);
    }

    SUBCASE("svdiff shifts are clamped at zero") {
        const BaseWeight base = BaseWeight::spectral(Matrix{{4, 0}, {0, 1}});
        AdapterState st = init_adapter(AdapterKind::SVDiff, base, 0, {}, 0);
        st.as<SVDiffState>().delta_s = {-10.0, 1.0};
        const Matrix w = effective_weight(base, st);
        CHECK(w(0, 0) == doctest::Approx(0.0));
        CHECK(w(1, 1) == doctest::Approx(2.0));
    }

    SUBCASE("oft with a non-dividing block count uses a short final block") {
        Rng rng(7);
        const Matrix w = Matrix::random_gaussian(7, 4, rng);
        const BaseWeight base = BaseWeight::dense(w);
        AdapterState st = init_adapter(AdapterKind::OFT, base, 3, {}, 0); // blocks 3,3,1
        const auto& oft = st.as<OFTState>();
        CHECK(oft.block_sizes == std::vector<std::size_t>{3, 3, 1});
        std::vector<double> params(num_trainable(st));
        Rng prng(8);
        for (double& p : params) {
            p = prng.normal();
        }
        unpack_params(st, params);
        const Matrix multiplier = oft_multiplier(st.as<OFTState>(), 7);
        CHECK(orthogonality_defect(multiplier) <= 1e-10);
        CHECK(frobenius_norm(effective_weight(base, st) - multiplier * w) <= 1e-12);
    }

    SUBCASE("oft rejects unachievable block counts") {
        const BaseWeight base = BaseWeight::dense(Matrix(6, 6));
        CHECK_THROWS_AS((void)init_adapter(AdapterKind::OFT, base, 4, {}, 0), std::invalid_argument);
    }
}

TEST_CASE("merge equals effective weight and preserves spectral_r singular values") {
    Rng rng(20);
    const Matrix w = Matrix::random_gaussian(9, 6, rng);
    const BaseWeight base = BaseWeight::spectral(w);

    AdapterState st = init_adapter(AdapterKind::SpectralR, base, 4, top_columns(4), 5);
    std::vector<double> params(num_trainable(st));
    for (double& p : params) {
        p = rng.normal();
    }
    unpack_params(st, params);

    const Matrix merged = merge(base, st);
    CHECK(merged == effective_weight(base, st));

    // rotations leave the singular values untouched
    const SpectralDecomposition after = svd_thin(merged);
    for (std::size_t i = 0; i < after.s.size(); ++i) {
        CHECK(after.s[i] == doctest::Approx(base.decomposition->s[i]).epsilon(1e-9));
    }

    // lora merge is the exact definition
    AdapterState lora = init_adapter(AdapterKind::LoRA, BaseWeight::dense(w), 2, {}, 3);
    auto& ls = lora.as<LoRAState>();
    ls.a = Matrix::random_gaussian(9, 2, rng);
    ls.b = Matrix::random_gaussian(6, 2, rng);
    CHECK(merge(BaseWeight::dense(w), lora) == w + multiply_bt(ls.a, ls.b));
}

TEST_CASE("re_decompose_rotated substitutes rotated columns in place") {
    Rng rng(30);
    const Matrix w = Matrix::random_gaussian(8, 8, rng);
    const BaseWeight base = BaseWeight::spectral(w);
    const SpectralDecomposition& d = *base.decomposition;

    SUBCASE("zero rotation returns the input") {
        const AdapterState st = init_adapter(AdapterKind::SpectralR, base, 3, top_columns(3), 0);
        const SpectralDecomposition out = re_decompose_rotated(d, st);
        CHECK(out.u == d.u);
        CHECK(out.v == d.v);
        CHECK(out.s == d.s);
        CHECK(out.canonical);
    }

    SUBCASE("trained rotation yields valid factors of the merged weight") {
        AdapterState st = init_adapter(AdapterKind::SpectralR, base, 3, top_columns(3), 0);
        std::vector<double> params(num_trainable(st));
        for (double& p : params) {
            p = rng.normal();
        }
        unpack_params(st, params);
        const SpectralDecomposition out = re_decompose_rotated(d, st);
        CHECK(orthogonality_defect(out.u) <= 1e-9);
        CHECK(orthogonality_defect(out.v) <= 1e-9);
        CHECK(!out.canonical); // distinct singular values in the block
        const Matrix merged = merge(base, st);
        CHECK(frobenius_norm(reconstruct(out) - merged) <= 1e-9 * (1.0 + frobenius_norm(merged)));
        // a fresh decomposition of the merged weight agrees on s
        const SpectralDecomposition fresh = svd_thin(merged);
        for (std::size_t i = 0; i < fresh.s.size(); ++i) {
            CHECK(fresh.s[i] == doctest::Approx(out.s[i]).epsilon(1e-9));
        }
    }

    SUBCASE("rotation of an equal-singular-value block stays a canonicalizable SVD") {
        SpectralDecomposition deg;
        deg.u = Matrix::identity(4);
        deg.v = Matrix::identity(4);
        deg.s = {2.0, 2.0, 1.0, 0.5};
        const BaseWeight dbase = BaseWeight::from_decomposition(deg);
        AdapterState st = init_adapter(AdapterKind::SpectralR, dbase, 2, top_columns(2), 0);
        std::vector<double> params(num_trainable(st));
        for (double& p : params) {
            p = rng.normal();
        }
        unpack_params(st, params);
        const SpectralDecomposition out = re_decompose_rotated(deg, st);
        CHECK(out.canonical);
        const SpectralDecomposition fresh = svd_thin(merge(dbase, st));
        for (std::size_t i = 0; i < fresh.s.size(); ++i) {
            CHECK(fresh.s[i] == doctest::Approx(out.s[i]).epsilon(1e-9));
        }
    }

    SUBCASE("rank-1 block rotation is always the identity") {
        const AdapterState st = init_adapter(AdapterKind::SpectralR, base, 1, top_columns(1), 0);
        AdapterState perturbed = st;
        std::vector<double> params(num_trainable(perturbed), 3.7); // 1x1 skew part is 0
        unpack_params(perturbed, params);
        const SpectralDecomposition out = re_decompose_rotated(d, perturbed);
        CHECK(out.u == d.u);
        CHECK(out.v == d.v);
    }
}

TEST_CASE("trainable parameter counts match the reference formulas") {
    CHECK(trainable_param_count(AdapterKind::LoRA, 1024, 1024, 1) == 2048);
    CHECK(trainable_param_count(AdapterKind::SpectralR, 1024, 1024, 32) == 2048);
    CHECK(trainable_param_count(AdapterKind::SVDiff, 1024, 1024, 0) == 1024);
    CHECK(trainable_param_count(AdapterKind::LiDB, 1024, 1024, 4) == 600);
    CHECK(trainable_param_count(AdapterKind::OFT, 1024, 1024, 16) == 4096);
    CHECK(trainable_param_count(AdapterKind::VeRA, 1024, 1024, 16) == 1040);
    CHECK(trainable_param_count(AdapterKind::SpectralA, 512, 256, 3) == (512 + 256) * 3);
    CHECK(trainable_param_count(AdapterKind::DoRAVector, 16, 1, 1) == 18);
}

TEST_CASE("available budgets") {
    CHECK(available_budgets(AdapterKind::SVDiff, 512, 512, 10) == std::vector<std::size_t>{512});
    CHECK(available_budgets(AdapterKind::OFT, 6, 6, 6) == std::vector<std::size_t>{1, 4, 9, 36});
    CHECK(available_budgets(AdapterKind::SpectralR, 64, 64, 4) == std::vector<std::size_t>{2, 8, 18, 32});
    CHECK(available_budgets(AdapterKind::LoRA, 8, 12, 3) == std::vector<std::size_t>{20, 40, 60});
}

TEST_CASE("budget formulas count exactly the scalars the optimizer updates") {
    Rng rng(44);
    const Matrix w = Matrix::random_gaussian(8, 10, rng);
    for (AdapterKind kind : kAllKinds) {
        if (kind == AdapterKind::DoRAVector) {
            const BaseWeight bv = BaseWeight::dense(Matrix::random_gaussian(9, 1, rng));
            const AdapterState st = init_adapter(kind, bv, 1, {}, 0);
            CHECK(num_trainable(st) == trainable_param_count(kind, 9, 1, 1));
            continue;
        }
        const BaseWeight base = base_for(kind, w);
        const std::size_t rank = valid_rank(kind, 2, 8, 10);
        const AdapterState st = init_adapter(kind, base, rank, top_columns(rank), 0);
        CHECK(num_trainable(st) == trainable_param_count(kind, 8, 10, rank, st.options));
    }
}

TEST_CASE("column-disjoint spectral adapters touch disjoint factor columns") {
    Rng rng(50);
    const Matrix w = Matrix::random_gaussian(10, 12, rng);
    const BaseWeight base = BaseWeight::spectral(w);
    const SpectralDecomposition& d = *base.decomposition;

    AdapterState first = init_adapter(AdapterKind::SpectralA, base, 3, ColumnSelect{0, 3}, 1);
    AdapterState second = init_adapter(AdapterKind::SpectralA, base, 3, ColumnSelect{3, 3}, 2);
    for (AdapterState* st : {&first, &second}) {
        std::vector<double> params(num_trainable(*st));
        for (double& p : params) {
            p = rng.normal();
        }
        unpack_params(*st, params);
    }

    const auto [u1, v1] = spectral_factors(d, first);
    // merging the first leaves the second's selected base columns bit-identical
    for (std::size_t j = 3; j < 6; ++j) {
        for (std::size_t i = 0; i < d.u.rows(); ++i) {
            CHECK(u1(i, j) == d.u(i, j));
        }
        for (std::size_t i = 0; i < d.v.rows(); ++i) {
            CHECK(v1(i, j) == d.v(i, j));
        }
    }
}

TEST_CASE("frozen tensors are bit-identical through a training run") {
    Rng rng(60);
    const Matrix w = Matrix::random_gaussian(6, 8, rng);
    const Matrix inputs = Matrix::random_gaussian(8, 12, rng);
    const Matrix targets = Matrix::random_gaussian(6, 12, rng);

    for (AdapterKind kind : {AdapterKind::VeRA, AdapterKind::LiDB}) {
        const BaseWeight base = BaseWeight::dense(w);
        AdapterState st = init_adapter(kind, base, 3, {}, 17);
        const Matrix frozen1 = kind == AdapterKind::VeRA ? st.as<VeRAState>().frozen_a : st.as<LiDBState>().frozen_a_aux;
        const Matrix frozen2 = kind == AdapterKind::VeRA ? st.as<VeRAState>().frozen_b : st.as<LiDBState>().frozen_b_aux;

        AdapterRegressionProblem problem(base, std::move(st), inputs, targets);
        TrainConfig tc;
        tc.optimizer = Optimizer::AdamW;
        tc.learning_rate = 1e-2;
        tc.steps = 50;
        (void)train(problem, tc);

        const AdapterState& after = problem.state();
        if (kind == AdapterKind::VeRA) {
            CHECK(after.as<VeRAState>().frozen_a == frozen1);
            CHECK(after.as<VeRAState>().frozen_b == frozen2);
        } else {
            CHECK(after.as<LiDBState>().frozen_a_aux == frozen1);
            CHECK(after.as<LiDBState>().frozen_b_aux == frozen2);
        }
        // base weight is untouched by construction of the value-typed API
        CHECK(problem.base().w == w);
    }
}

TEST_CASE("dora / additive spectral vector correspondence") {
    Rng rng(70);
    std::vector<double> w0(16);
    for (double& x : w0) {
        x = rng.normal();
    }

    SUBCASE("identity parameters match trivially") {
        const std::vector<double> zero(16, 0.0);
        const std::vector<double> spectral = spectral_vector_forward(w0, zero, 0.0);
        const std::vector<double> dora = dora_vector_forward(w0, norm2(w0), zero, 0.0);
        for (std::size_t i = 0; i < w0.size(); ++i) {
            CHECK(spectral[i] == doctest::Approx(w0[i]).epsilon(1e-12));
            CHECK(dora[i] == doctest::Approx(w0[i]).epsilon(1e-12));
        }
    }

    SUBCASE("pure magnitude change maps to a scaled dora magnitude") {
        const std::vector<double> zero(16, 0.0);
        double magnitude = 0.0;
        const auto err = dora_match_single(w0, zero, 0.5, &magnitude);
        REQUIRE(err.has_value());
        CHECK(*err <= 1e-13);
        CHECK(magnitude == doctest::Approx(1.5 * norm2(w0)).epsilon(1e-12));
    }

    SUBCASE("100 random samples match to 1e-12") {
        const DoraMatchReport report = dora_spectral_vector_match(w0, 100, 11);
        CHECK(report.samples_requested == 100);
        CHECK(report.samples_matched + report.samples_skipped == 100);
        CHECK(report.max_error <= 1e-12);
        CHECK(report.magnitude_correspondence_error <= 1e-12);
    }

    SUBCASE("degenerate direction is skipped") {
        std::vector<double> a_prime(16);
        const double nrm = norm2(w0);
        for (std::size_t i = 0; i < w0.size(); ++i) {
            a_prime[i] = -w0[i] / nrm;
        }
        CHECK(!dora_match_single(w0, a_prime, 0.3).has_value());
    }
}

TEST_CASE("spectral adapters validate column selections") {
    Rng rng(80);
    const BaseWeight base = BaseWeight::spectral(Matrix::random_gaussian(6, 6, rng));
    CHECK_THROWS_AS((void)init_adapter(AdapterKind::SpectralA, base, 4, ColumnSelect{4, 4}, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)init_adapter(AdapterKind::SpectralR, base, 2, ColumnSelect{0, 3}, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)effective_weight(BaseWeight::dense(Matrix(3, 3)),
                                           init_adapter(AdapterKind::LoRA, BaseWeight::dense(Matrix(4, 4)), 1, {}, 0)),
                    std::invalid_argument);
}
