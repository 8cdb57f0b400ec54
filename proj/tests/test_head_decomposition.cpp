#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sing/error.hpp"
#include "sing/head_decomposition.hpp"
#include "sing/rng.hpp"
#include "sing/tensor_store.hpp"

using namespace sing;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return v;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Decompose, AxisAlignedRows) {
  const auto d = decompose_head(mat({{1, 0, 0}, {0, 1, 0}}));
  EXPECT_EQ(d.rank, 2);
  EXPECT_EQ(d.null_dim(), 1);
  EXPECT_LT(max_abs(d.proj_null - Vector(vec({0, 0, 1})).asDiagonal().toDenseMatrix()), 1e-12);
  EXPECT_LT(max_abs(d.proj_principal - Vector(vec({1, 1, 0})).asDiagonal().toDenseMatrix()), 1e-12);
}

TEST(Decompose, IdentityHasNoNullSpace) {
  const auto d = decompose_head(Matrix::Identity(3, 3));
  EXPECT_EQ(d.rank, 3);
  EXPECT_EQ(d.null_dim(), 0);
  EXPECT_EQ(max_abs(d.proj_null), 0.0);
}

TEST(Decompose, RankOneHeadMatchesGramSchmidt) {
  const Matrix w = mat({{1, 1}, {2, 2}});
  const auto d = decompose_head(w);
  EXPECT_EQ(d.rank, 1);
  const Matrix expected = mat({{0.5, -0.5}, {-0.5, 0.5}});
  EXPECT_LT(max_abs(d.proj_null - expected), 1e-12);
  EXPECT_LT(max_abs(d.proj_null - oracle::null_projector(w)), 1e-12);
  // v v^T with v = (1,-1)/sqrt(2)
  const Vector v = vec({1, -1}) / std::sqrt(2.0);
  EXPECT_LT(max_abs(d.proj_null - v * v.transpose()), 1e-12);
}

TEST(Decompose, ZeroHeadHasFullNullSpace) {
  const auto d = decompose_head(Matrix::Zero(2, 4));
  EXPECT_EQ(d.rank, 0);
  EXPECT_LT(max_abs(d.proj_null - Matrix::Identity(4, 4)), 1e-15);
  EXPECT_EQ(max_abs(d.proj_principal), 0.0);
}

TEST(Decompose, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(decompose_head(Matrix(0, 3)), ValidationError);
  Matrix w = Matrix::Ones(2, 2);
  w(1, 1) = std::nan("");
  EXPECT_THROW(decompose_head(w), ValidationError);
  w(1, 1) = INFINITY;
  EXPECT_THROW(decompose_head(w), ValidationError);
  EXPECT_THROW(decompose_head(Matrix::Ones(2, 2), RankTolerance::absolute(-1.0)), ValidationError);
}

TEST(Decompose, RankMatchesBareissOnIntegerMatrices) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 1 + static_cast<int>(rng.below(6));
    const int m = 1 + static_cast<int>(rng.below(8));
    // low-rank products of small integer factors hit every rank
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(c, m))));
    std::vector<std::vector<std::int64_t>> a(c, std::vector<std::int64_t>(k)), b(k, std::vector<std::int64_t>(m));
    for (auto& r : a)
      for (auto& x : r) x = static_cast<std::int64_t>(rng.below(7)) - 3;
    for (auto& r : b)
      for (auto& x : r) x = static_cast<std::int64_t>(rng.below(7)) - 3;
    std::vector<std::vector<std::int64_t>> w(c, std::vector<std::int64_t>(m, 0));
    Matrix wd(c, m);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < m; ++j) {
        for (int l = 0; l < k; ++l) w[i][j] += a[i][l] * b[l][j];
        wd(i, j) = static_cast<double>(w[i][j]);
      }
    const auto d = decompose_head(wd);
    EXPECT_EQ(d.rank, oracle::bareiss_rank(w)) << "trial " << trial;
    EXPECT_EQ(d.rank + d.null_dim(), m);
  }
}

TEST(Decompose, ProjectorIdentitiesOnRandomHeads) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = static_cast<Eigen::Index>(1 + rng.below(40));
    const auto m = static_cast<Eigen::Index>(c + rng.below(60));
    const Matrix w = rng.normal_matrix(c, m);
    const auto d = decompose_head(w);
    const auto check = check_decomposition(d, w);
    EXPECT_LT(check.idempotency, 1e-8);
    EXPECT_LT(check.symmetry, 1e-8);
    EXPECT_LT(check.completeness, 1e-8);
    EXPECT_LT(check.cross, 1e-8);
    EXPECT_LT(check.orthonormality, 1e-8);
    EXPECT_LE(check.null_leak, d.rank_tolerance * check.weight_norm * 10 + 1e-300);
    EXPECT_LT(check.null_leak / check.weight_norm, 1e-10);
    EXPECT_LT(max_abs(d.proj_null - oracle::null_projector(w)), 1e-8);
    EXPECT_EQ(d.rank, c);
  }
}

TEST(Decompose, ToleranceModes) {
  // singular values 10, 1e-3, 0
  Matrix w = Matrix::Zero(3, 4);
  w(0, 0) = 10.0;
  w(1, 1) = 1e-3;
  EXPECT_EQ(decompose_head(w).rank, 2);
  EXPECT_EQ(decompose_head(w, RankTolerance::relative(1e-2)).rank, 1);
  EXPECT_EQ(decompose_head(w, RankTolerance::relative(1e-5)).rank, 2);
  EXPECT_EQ(decompose_head(w, RankTolerance::absolute(1e-3)).rank, 1);  // strictly above tau
  EXPECT_EQ(decompose_head(w, RankTolerance::absolute(5e-4)).rank, 2);
  const auto d = decompose_head(w);
  EXPECT_DOUBLE_EQ(d.rank_tolerance, 4 * 10.0 * std::numeric_limits<double>::epsilon());
  EXPECT_EQ(d.rank_mode, RankTolerance::Mode::machine);
  EXPECT_EQ(parse_rank_mode("relative"), RankTolerance::Mode::relative);
  EXPECT_EQ(to_string(RankTolerance::Mode::absolute), "absolute");
  EXPECT_THROW(parse_rank_mode("loose"), ValidationError);
}

TEST(Decompose, IsDeterministic) {
  Rng rng(2);
  const Matrix w = rng.normal_matrix(5, 9);
  const auto a = decompose_head(w);
  const auto b = decompose_head(w);
  EXPECT_TRUE(a.proj_null == b.proj_null);
  EXPECT_TRUE(a.proj_principal == b.proj_principal);
}

TEST(Project, Examples) {
  const auto d = decompose_head(mat({{1, 0, 0}, {0, 1, 0}}));
  const Vector f = vec({3, 4, 5});
  EXPECT_LT((project(d, f, Subspace::null) - vec({0, 0, 5})).norm(), 1e-12);
  EXPECT_LT((project(d, f, Subspace::principal) - vec({3, 4, 0})).norm(), 1e-12);
  const auto d2 = decompose_head(mat({{1, 1}}));
  EXPECT_LT((project(d2, vec({2, 0}), Subspace::principal) - vec({1, 1})).norm(), 1e-12);
  EXPECT_THROW(project(d2, vec({1, 2, 3}), Subspace::null), ValidationError);
}

TEST(Project, PartsSumToFeature) {
  Rng rng(8);
  const auto d = decompose_head(rng.normal_matrix(4, 10));
  for (int i = 0; i < 50; ++i) {
    const Vector f = rng.normal_vector(10);
    const Vector sum = project(d, f, Subspace::null) + project(d, f, Subspace::principal);
    EXPECT_LE((sum - f).norm(), 1e-8 * f.norm());
  }
}

TEST(Logits, Examples) {
  const Matrix w = mat({{1, 0, 0}, {0, 1, 0}});
  EXPECT_EQ(logits(w, std::nullopt, vec({3, 4, 5})), vec({3, 4}));
  EXPECT_EQ(logits(w, vec({1, 1}), vec({3, 4, 5})), vec({4, 5}));
  const Matrix w1 = mat({{1, 1}});
  EXPECT_DOUBLE_EQ(logits(w1, std::nullopt, vec({2, 0}))(0), 2.0);
  EXPECT_DOUBLE_EQ(logits(w1, std::nullopt, vec({1, 1}))(0), 2.0);
  EXPECT_THROW(logits(w, std::nullopt, vec({1, 2})), ValidationError);
  EXPECT_THROW(logits(w, vec({1}), vec({1, 2, 3})), ValidationError);
}

TEST(Logits, NullPerturbationInvariance) {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix w = rng.normal_matrix(8, 20);
    const auto d = decompose_head(w);
    const Vector f = rng.normal_vector(20);
    const Vector v = 10.0 * rng.normal_vector(20);
    const double drift = (logits(w, std::nullopt, f + d.proj_null * v) - logits(w, std::nullopt, f)).norm();
    EXPECT_LE(drift, 1e-4 * (1.0 + w.norm() * v.norm()));
  }
}

TEST(DecompositionIo, RoundTrip) {
  oracle::TempDir dir("decomp");
  Rng rng(4);
  const auto d = decompose_head(rng.normal_matrix(3, 7), RankTolerance::relative(1e-6));
  save_decomposition(d, dir.path());
  const auto back = load_decomposition(dir.path());
  EXPECT_EQ(back.rank, d.rank);
  EXPECT_EQ(back.rank_mode, RankTolerance::Mode::relative);
  EXPECT_EQ(back.rank_tolerance, d.rank_tolerance);
  EXPECT_TRUE(back.singular_values == d.singular_values);
  EXPECT_TRUE(back.left_vectors == d.left_vectors);
  EXPECT_TRUE(back.principal_basis == d.principal_basis);
  EXPECT_TRUE(back.null_basis == d.null_basis);
  EXPECT_TRUE(back.proj_null == d.proj_null);
  EXPECT_TRUE(back.proj_principal == d.proj_principal);
}

TEST(DecompositionIo, FullRankAndZeroHeadsRoundTrip) {
  for (const Matrix& w : {Matrix(Matrix::Identity(3, 3)), Matrix(Matrix::Zero(2, 3))}) {
    oracle::TempDir dir("decomp_edge");
    const auto d = decompose_head(w);
    save_decomposition(d, dir.path());
    const auto back = load_decomposition(dir.path());
    EXPECT_EQ(back.rank, d.rank);
    EXPECT_EQ(back.null_dim(), d.null_dim());
    EXPECT_TRUE(back.proj_null == d.proj_null);
  }
}

TEST(DecompositionIo, RejectsOtherDirectories) {
  oracle::TempDir dir("notdecomp");
  TensorDirectoryWriter w(dir.path());
  w.add("x", Labels{1});
  w.commit();
  EXPECT_THROW(load_decomposition(dir.path()), ValidationError);
}
