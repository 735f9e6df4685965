#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "nattn/io.hpp"
#include "nattn/matrix.hpp"
#include "nattn/rng.hpp"
#include "nattn/svd.hpp"

using namespace nattn;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, uint64_t seed) {
    SplitMix64 rng(seed);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.next_normal();
    return m;
}

// Brute-force oracle: full sort by (score desc, index asc), take k, ascending.
std::vector<std::size_t> top_k_oracle(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    if (k < idx.size()) idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

double max_offdiag_identity_error(const Matrix& m) {
    double err = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
            err = std::max(err, std::abs(m(i, j) - (i == j ? 1.0 : 0.0)));
    return err;
}

}  // namespace

TEST_CASE("matmul basics") {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(max_abs_diff(matmul(Matrix::identity(2), m), m) == 0.0);

    const Matrix ones = Matrix::from_rows({{1}, {1}});
    const Matrix r = matmul(m, ones);
    CHECK(r(0, 0) == 3.0);
    CHECK(r(1, 0) == 7.0);

    const Matrix z(2, 2);
    CHECK(frobenius_norm(matmul(z, m)) == 0.0);

    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
}

TEST_CASE("row_softmax values and stability") {
    const Matrix sym = row_softmax(Matrix::from_rows({{0, 0}}));
    CHECK(sym(0, 0) == Catch::Approx(0.5).margin(1e-15));

    const Matrix big = row_softmax(Matrix::from_rows({{1000, 1000}}));
    CHECK(big(0, 0) == Catch::Approx(0.5).margin(1e-15));

    const Matrix hand = row_softmax(Matrix::from_rows({{std::log(2.0), 0.0}}));
    CHECK(hand(0, 0) == Catch::Approx(2.0 / 3.0).margin(1e-15));
    CHECK(hand(0, 1) == Catch::Approx(1.0 / 3.0).margin(1e-15));

    Matrix bad(1, 2);
    bad.data()[0] = std::nan("");
    CHECK_THROWS_AS(row_softmax(bad), InvalidInputError);
}

TEST_CASE("row_softmax rows sum to one and shift invariance") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const Matrix logits = random_matrix(7, 13, 100 + seed);
        const Matrix alpha = row_softmax(logits);
        Matrix shifted = logits;
        for (std::size_t i = 0; i < shifted.rows(); ++i)
            for (std::size_t j = 0; j < shifted.cols(); ++j) shifted(i, j) += 3.25;
        const Matrix alpha2 = row_softmax(shifted);
        for (std::size_t i = 0; i < alpha.rows(); ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < alpha.cols(); ++j) {
                CHECK(alpha(i, j) >= 0.0);
                sum += alpha(i, j);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
        CHECK(max_abs_diff(alpha, alpha2) <= 1e-12);
    }
}

TEST_CASE("thin_svd identity and diagonal spectra") {
    const auto id = thin_svd(Matrix::identity(4));
    REQUIRE(id.sigma.size() == 4);
    for (double s : id.sigma) CHECK(s == Catch::Approx(1.0).margin(1e-12));

    const auto diag = thin_svd(Matrix::from_rows({{3, 0}, {0, 2}}));
    CHECK(diag.sigma[0] == Catch::Approx(3.0).margin(1e-12));
    CHECK(diag.sigma[1] == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("thin_svd reconstruction, orthonormality, ordering") {
    // Covers tall, wide, and the 64x77 extreme from the contract.
    const std::vector<std::pair<std::size_t, std::size_t>> shapes = {
        {8, 5}, {5, 8}, {1, 7}, {7, 1}, {16, 16}, {64, 77}, {77, 64}};
    uint64_t seed = 7;
    for (auto [r, c] : shapes) {
        const Matrix x = random_matrix(r, c, seed++);
        const auto svd = thin_svd(x);
        const std::size_t m = std::min(r, c);
        REQUIRE(svd.sigma.size() == m);
        REQUIRE(svd.U.rows() == r);
        REQUIRE(svd.U.cols() == m);
        REQUIRE(svd.Vt.rows() == m);
        REQUIRE(svd.Vt.cols() == c);

        for (std::size_t i = 0; i + 1 < m; ++i) CHECK(svd.sigma[i] >= svd.sigma[i + 1]);
        for (double s : svd.sigma) CHECK(s >= 0.0);

        const double rel =
            frobenius_norm(svd.reconstruct() - x) / std::max(frobenius_norm(x), 1e-300);
        CHECK(rel <= 1e-8);
        CHECK(max_offdiag_identity_error(matmul(transpose(svd.U), svd.U)) <= 1e-9);
        CHECK(max_offdiag_identity_error(matmul(svd.Vt, transpose(svd.Vt))) <= 1e-9);
    }
}

TEST_CASE("thin_svd sign convention and determinism") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix x = random_matrix(9, 6, 500 + seed);
        const auto a = thin_svd(x);
        const auto b = thin_svd(x);
        CHECK(std::memcmp(a.U.data().data(), b.U.data().data(),
                          a.U.size() * sizeof(double)) == 0);
        CHECK(std::memcmp(a.Vt.data().data(), b.Vt.data().data(),
                          a.Vt.size() * sizeof(double)) == 0);
        for (std::size_t j = 0; j < a.U.cols(); ++j) {
            std::size_t arg = 0;
            double best = -1.0;
            for (std::size_t i = 0; i < a.U.rows(); ++i)
                if (std::abs(a.U(i, j)) > best) {
                    best = std::abs(a.U(i, j));
                    arg = i;
                }
            CHECK(a.U(arg, j) >= 0.0);
        }
    }
}

TEST_CASE("thin_svd rank deficient input keeps orthonormal factors") {
    // Rank-1 matrix: outer product.
    Matrix x(6, 4);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            x(i, j) = (1.0 + static_cast<double>(i)) * (2.0 - 0.5 * static_cast<double>(j));
    const auto svd = thin_svd(x);
    CHECK(svd.sigma[1] <= 1e-10 * svd.sigma[0]);
    CHECK(max_offdiag_identity_error(matmul(transpose(svd.U), svd.U)) <= 1e-9);
    const double rel = frobenius_norm(svd.reconstruct() - x) / frobenius_norm(x);
    CHECK(rel <= 1e-8);
}

TEST_CASE("thin_svd input validation") {
    Matrix bad(2, 2);
    bad.data()[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(thin_svd(bad), InvalidInputError);
    CHECK_THROWS_AS(thin_svd(Matrix()), InvalidInputError);
    CHECK_THROWS_AS(thin_svd(Matrix::identity(2), 0.0), InvalidParameterError);
}

TEST_CASE("top_k_indices examples") {
    CHECK(top_k_indices({1, 2, 3}, 5) == std::vector<std::size_t>{0, 1, 2});
    CHECK(top_k_indices({0.5, 0.9, 0.1, 0.9}, 2) == std::vector<std::size_t>{1, 3});
    CHECK(top_k_indices({2, 2, 2, 2}, 2) == std::vector<std::size_t>{0, 1});
    CHECK(top_k_indices({}, 3).empty());
}

TEST_CASE("top_k_indices matches brute force on random vectors") {
    SplitMix64 rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.next_below(40);
        std::vector<double> scores(n);
        // Coarse quantization forces plenty of ties.
        for (double& s : scores) s = static_cast<double>(rng.next_below(8));
        const std::size_t k = 1 + rng.next_below(n + 4);
        CHECK(top_k_indices(scores, k) == top_k_oracle(scores, k));
    }
}

TEST_CASE("nn_resize index map") {
    const std::vector<double> src = {1, 2, 3, 4};
    CHECK(nn_resize(src, 2, 2, 2, 2) == src);

    // 2x2 -> 4x4 replicates each cell into a 2x2 block.
    const auto up = nn_resize(src, 2, 2, 4, 4);
    const std::vector<double> expected = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    CHECK(up == expected);

    const std::vector<double> flat(12, 7.5);
    const auto down = nn_resize(flat, 4, 3, 2, 2);
    for (double v : down) CHECK(v == 7.5);

    CHECK_THROWS_AS(nn_resize(src, 2, 2, 0, 2), DimensionError);
    CHECK_THROWS_AS(nn_resize(src, 4, 2, 2, 2), DimensionError);
}

TEST_CASE("nn_resize idempotent for equal grids") {
    SplitMix64 rng(55);
    std::vector<double> src(35);
    for (double& v : src) v = rng.next_double();
    CHECK(nn_resize(src, 7, 5, 7, 5) == src);
    // Down then up then down again reaches a fixed point on the same grid.
    const auto once = nn_resize(src, 7, 5, 3, 2);
    CHECK(nn_resize(once, 3, 2, 3, 2) == once);
}

TEST_CASE("matrix csv round trip and validation") {
    const Matrix m = random_matrix(5, 3, 99);
    const std::string path = "numkernel_roundtrip.csv";
    write_matrix_csv(m, path);
    const Matrix back = read_matrix_csv(path);
    REQUIRE(back.rows() == 5);
    REQUIRE(back.cols() == 3);
    CHECK(max_abs_diff(m, back) == 0.0);

    {
        std::ofstream out("numkernel_ragged.csv", std::ios::binary);
        out << "2,3\n1,2,3\n4,5\n";
    }
    CHECK_THROWS_AS(read_matrix_csv("numkernel_ragged.csv"), InvalidInputError);
    std::remove(path.c_str());
    std::remove("numkernel_ragged.csv");
}
