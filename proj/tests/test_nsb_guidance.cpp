#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "auvform/nsb_guidance.hpp"

using namespace auvform;

namespace {

FormationSpec table_formation() {
  return FormationSpec{{{0, 10, 5}, {0, -10, 5}, {0, 0, -10}}};
}

std::vector<Vec3> random_positions(std::mt19937_64& rng, int n, double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) out.emplace_back(d(rng), d(rng), d(rng));
  return out;
}

VecX stacked(const std::vector<Vec3>& p) {
  VecX out(3 * p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out.segment<3>(3 * i) = p[i];
  return out;
}

std::vector<Vec3> unstacked(const VecX& x) {
  std::vector<Vec3> out;
  for (Eigen::Index i = 0; i < x.size() / 3; ++i) out.push_back(x.segment<3>(3 * i));
  return out;
}

MatX random_matrix(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> d;
  MatX m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = d(rng);
  return m;
}

}  // namespace

TEST(FormationSpec, TableOffsetsValidate) {
  EXPECT_NO_THROW(table_formation().validate());
  FormationSpec bad{{{1, 0, 0}, {0, 0, 0}}};
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(FormationSpec{}.validate(), ConfigError);
}

TEST(ColavTask, InactiveWhenFarApart) {
  const std::vector<Vec3> p = {{0, 0, 0}, {20, 0, 0}, {0, 30, 0}};
  const TaskOutput t = colav_task(p, 10.0);
  EXPECT_FALSE(t.active);
  EXPECT_EQ(t.sigma.size(), 0);
  EXPECT_EQ(t.jacobian.cols(), 9);
}

TEST(ColavTask, TwoVehicleGradient) {
  const std::vector<Vec3> p = {{0, 0, 0}, {6, 0, 0}};
  const TaskOutput t = colav_task(p, 10.0);
  ASSERT_TRUE(t.active);
  ASSERT_EQ(t.sigma.size(), 1);
  EXPECT_EQ(t.sigma[0], 6.0);
  EXPECT_EQ(t.sigma_d[0], 10.0);
  EXPECT_EQ(t.sigma_d_dot[0], 0.0);
  Eigen::RowVectorXd row(6);
  row << -1, 0, 0, 1, 0, 0;
  EXPECT_EQ(t.jacobian, row);
}

TEST(ColavTask, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::vector<Vec3> p = random_positions(rng, 4, 4.0);
    const TaskOutput t = colav_task(p, 100.0);
    const VecX x = stacked(p);
    const double h = 1e-6;
    for (Eigen::Index c = 0; c < x.size(); ++c) {
      VecX xp = x, xm = x;
      xp[c] += h;
      xm[c] -= h;
      const VecX fd = (colav_task(unstacked(xp), 100.0, t.pairs).sigma -
                       colav_task(unstacked(xm), 100.0, t.pairs).sigma) /
                      (2 * h);
      EXPECT_LT((fd - t.jacobian.col(c)).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(ColavTask, CoincidentVehiclesThrow) {
  const std::vector<Vec3> p = {{1, 1, 1}, {1, 1, 1}};
  EXPECT_THROW(colav_task(p, 10.0), DomainError);
}

TEST(ColavPairs, Hysteresis) {
  std::vector<Vec3> p = {{0, 0, 0}, {9.9, 0, 0}};
  auto pairs = update_colav_pairs(p, {}, 10.0, 0.5);
  ASSERT_EQ(pairs.size(), 1u);
  p[1].x() = 10.3;
  pairs = update_colav_pairs(p, pairs, 10.0, 0.5);
  EXPECT_EQ(pairs.size(), 1u);
  EXPECT_TRUE(update_colav_pairs(p, {}, 10.0, 0.5).empty());
  p[1].x() = 10.6;
  EXPECT_TRUE(update_colav_pairs(p, pairs, 10.0, 0.5).empty());
}

TEST(FormationTask, ZeroErrorInFormation) {
  const FormationSpec f = table_formation();
  const Vec3 p_b(5, -2, 7);
  std::vector<Vec3> p;
  for (const Vec3& o : f.offsets) p.push_back(p_b + o);
  const TaskOutput t = formation_task(p, 0, 0, f);
  EXPECT_EQ(t.sigma.size(), 6);
  EXPECT_LT(t.error().norm(), 1e-14);
}

TEST(FormationTask, JacobianIsTheLinearMap) {
  std::mt19937_64 rng(2);
  const FormationSpec f = table_formation();
  const std::vector<Vec3> p = random_positions(rng, 3, 20.0);
  const TaskOutput t = formation_task(p, 0.2, 1.0, f);
  const VecX x = stacked(p);
  EXPECT_LT((t.jacobian * x - t.sigma).norm(), 1e-12);
  EXPECT_NEAR(t.jacobian(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(t.jacobian(0, 3), -1.0 / 3.0, 1e-15);
  const double h = 1e-3;
  for (Eigen::Index c = 0; c < x.size(); ++c) {
    VecX xp = x, xm = x;
    xp[c] += h;
    xm[c] -= h;
    const VecX fd = (formation_task(unstacked(xp), 0.2, 1.0, f).sigma -
                     formation_task(unstacked(xm), 0.2, 1.0, f).sigma) /
                    (2 * h);
    EXPECT_LT((fd - t.jacobian.col(c)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(FormationTask, DesiredValueRotatesWithPathFrame) {
  const FormationSpec f = table_formation();
  const std::vector<Vec3> p = {{1, 2, 3}, {4, 5, 6}, {7, 8, 10}};
  const TaskOutput t0 = formation_task(p, 0, 0, f);
  const TaskOutput t1 = formation_task(p, 0.3, -1.2, f);
  const Mat3 R = path_rotation(0.3, -1.2);
  for (int i = 0; i < 2; ++i) {
    EXPECT_LT((t1.sigma_d.segment<3>(3 * i) - R * t0.sigma_d.segment<3>(3 * i)).norm(),
              1e-14);
  }
}

TEST(FormationTask, FeedforwardMatchesDifferencedDesiredValue) {
  const FormationSpec f = table_formation();
  const PathPtr sp = spiral_path(40, 20, kPi / 100);
  const std::vector<Vec3> p = {{1, 2, 3}, {4, 5, 6}, {7, 8, 10}};
  const double xi = 37.0, xi_dot = 0.8, h = 1e-5;
  const PathPoint pt = eval_path(*sp, xi);
  const TaskOutput t =
      formation_task(p, pt.theta_p, pt.psi_p, f, path_frame_rate(pt, xi_dot));
  const PathPoint a = eval_path(*sp, xi + xi_dot * h), b = eval_path(*sp, xi - xi_dot * h);
  const VecX fd = (formation_task(p, a.theta_p, a.psi_p, f).sigma_d -
                   formation_task(p, b.theta_p, b.psi_p, f).sigma_d) /
                  (2 * h);
  EXPECT_LT((fd - t.sigma_d_dot).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(PseudoInverse, PenroseConditions) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 1 + trial % 6, cols = 9;
    MatX J = random_matrix(rng, rows, cols);
    if (rows > 2) J.row(rows - 1) = J.row(0) + J.row(1);
    const MatX Jp = pseudo_inverse(J);
    EXPECT_LT((J * Jp * J - J).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((Jp * J * Jp - Jp).cwiseAbs().maxCoeff(), 1e-10);
    const MatX JpJ = Jp * J;
    EXPECT_LT((JpJ - JpJ.transpose()).cwiseAbs().maxCoeff(), 1e-10);
    const MatX P = null_space_projector(J);
    EXPECT_LT((P * P - P).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ClikVelocity, ZeroErrorZeroVelocity) {
  const FormationSpec f = table_formation();
  std::vector<Vec3> p;
  for (const Vec3& o : f.offsets) p.push_back(o);
  const TaskOutput t = formation_task(p, 0, 0, f);
  EXPECT_LT(clik_velocity(t, 0.05).norm(), 1e-15);
}

TEST(ClikVelocity, SquareJacobianMatchesDirectSolve) {
  std::mt19937_64 rng(6);
  TaskOutput t;
  t.jacobian = random_matrix(rng, 6, 6);
  t.sigma = VecX::Random(6);
  t.sigma_d = VecX::Random(6);
  t.sigma_d_dot = VecX::Random(6);
  MatX L = random_matrix(rng, 6, 6);
  L = L * L.transpose() + MatX::Identity(6, 6);
  const VecX expected = t.jacobian.lu().solve(t.sigma_d_dot - L * t.error());
  EXPECT_LT((clik_velocity(t, L) - expected).norm(), 1e-10 * expected.norm());
  EXPECT_THROW(clik_velocity(t, MatX::Identity(3, 3)), ConfigError);
}

TEST(ClikVelocity, KinematicFormationErrorDecaysExponentially) {
  const FormationSpec f = table_formation();
  std::vector<Vec3> p = {{3, -4, 2}, {-5, 1, 8}, {2, 6, -3}};
  const double gain = 0.05, dt = 0.05;
  const double e0 = formation_task(p, 0, 0, f).error().norm();
  for (int k = 1; k <= 4000; ++k) {
    auto rhs = [&](const std::vector<Vec3>& x) {
      return unstacked(clik_velocity(formation_task(x, 0, 0, f), gain));
    };
    auto add = [](std::vector<Vec3> x, const std::vector<Vec3>& v, double h) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * v[i];
      return x;
    };
    const auto k1 = rhs(p);
    const auto k2 = rhs(add(p, k1, dt / 2));
    const auto k3 = rhs(add(p, k2, dt / 2));
    const auto k4 = rhs(add(p, k3, dt));
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] += dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    }
    if (k % 1000 == 0) {
      const double t = k * dt;
      const double e = formation_task(p, 0, 0, f).error().norm();
      EXPECT_NEAR(e / e0, std::exp(-gain * t), 0.05 * std::exp(-gain * t));
    }
  }
}

TEST(LosVelocity, OnPath) {
  const LosOutput los = los_velocity(Vec3::Zero(), 0.2, -0.7, 1.0, 5.0);
  EXPECT_EQ(los.gamma, 0.2);
  EXPECT_EQ(los.chi, -0.7);
  EXPECT_NEAR(los.velocity.norm(), 1.0, 1e-15);
  EXPECT_EQ(los.lookahead, 5.0);
}

TEST(LosVelocity, VerticalSaturation) {
  const LosOutput los = los_velocity(Vec3(0, 0, 1e9), 0.0, 0.0, 1.0, 5.0);
  EXPECT_NEAR(los.gamma, kPi / 4, 1e-8);
}

TEST(LosVelocity, NormAndSignInvariants) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> d(-50, 50), a(-0.7, 0.7);
  for (int k = 0; k < 1000; ++k) {
    const Vec3 e(d(rng), d(rng), d(rng));
    const double th = a(rng), ps = 4 * a(rng);
    const LosOutput los = los_velocity(e, th, ps, 1.3, 5.0);
    EXPECT_NEAR(los.velocity.norm(), 1.3, 1e-12);
    EXPECT_EQ(los.gamma - th > 0, e.z() > 0);
    EXPECT_EQ(ps - los.chi > 0, e.y() > 0);
  }
  EXPECT_THROW(los_velocity(Vec3::Zero(), 0, 0, 1.0, 0.0), ConfigError);
  EXPECT_THROW(los_velocity(Vec3::Zero(), 0, 0, 0.0, 5.0), ConfigError);
}

TEST(NsbCombine, HierarchyIsPreserved) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<Vec3> p = random_positions(rng, 3, 6.0);
    const TaskOutput colav = colav_task(p, 100.0);
    const TaskOutput form = formation_task(p, 0.1, 0.4, table_formation());
    const VecX v1 = clik_velocity(colav, 1.0);
    const VecX v2 = clik_velocity(form, 0.05);
    const VecX v3 = stack_velocity(Vec3(0.9, 0.3, -0.1), 3);
    const VecX out = nsb_combine(v1, v2, v3, colav.jacobian, form.jacobian, true);
    EXPECT_LT((colav.jacobian * (out - v1)).cwiseAbs().maxCoeff(), 1e-10);
    const VecX layer3 = null_space_projector(form.jacobian) * v3;
    EXPECT_LT((form.jacobian * layer3).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(NsbCombine, InactiveColavStationaryFrame) {
  const FormationSpec f = table_formation();
  std::vector<Vec3> p;
  for (const Vec3& o : f.offsets) p.push_back(o + Vec3(1, 2, 3));
  const TaskOutput form = formation_task(p, 0, 0, f);
  const VecX v2 = clik_velocity(form, 0.05);
  const VecX v3 = stack_velocity(Vec3(1, 0, 0), 3);
  const VecX out = nsb_combine(VecX(), v2, v3, MatX(0, 9), form.jacobian, false);
  EXPECT_LT((out - null_space_projector(form.jacobian) * v3).norm(), 1e-14);
  EXPECT_LT((out - v3).norm(), 1e-14);
}

TEST(StackVelocity, Kronecker) {
  const VecX s = stack_velocity(Vec3(1, 2, 3), 2);
  VecX expected(6);
  expected << 1, 2, 3, 1, 2, 3;
  EXPECT_EQ(s, expected);
}

TEST(Decompose, AlignedForward) {
  const Decomposition d = decompose_references(Vec3(1, 0, 0), 0, 0, 0, 0);
  EXPECT_EQ(d.command.u_d, 1.0);
  EXPECT_EQ(d.command.theta_d, 0.0);
  EXPECT_EQ(d.command.psi_d, 0.0);
}

TEST(Decompose, VerticalCommandIsClamped) {
  const Decomposition d = decompose_references(Vec3(0, 0, -1), 0, 0, 0, 0);
  EXPECT_NEAR(d.gamma_nsb, kPi / 2, 1e-15);
  EXPECT_TRUE(d.clamped);
  EXPECT_NEAR(d.command.theta_d, 80.0 * kPi / 180.0, 1e-15);
  EXPECT_LT(std::abs(d.command.theta_d), kPi / 2);
}

TEST(Decompose, SideslipCompensation) {
  const Decomposition d = decompose_references(Vec3(1, 0, 0), 0.2, 0, 0, 0);
  EXPECT_EQ(d.command.u_d, 1.0);
  EXPECT_NEAR(d.command.psi_d - d.chi_nsb, -std::asin(0.2 / std::sqrt(1.04)), 1e-15);
  EXPECT_NEAR(d.command.psi_d - d.chi_nsb, -0.1974, 1e-4);
}

TEST(Decompose, DegenerateHoldsPrevious) {
  const GuidanceCommand prev{0.7, 0.1, -0.4};
  const Decomposition d = decompose_references(Vec3::Zero(), 0.1, 0.1, 0, 0, prev);
  EXPECT_TRUE(d.degenerate);
  EXPECT_EQ(d.command.u_d, prev.u_d);
  EXPECT_EQ(d.command.theta_d, prev.theta_d);
  EXPECT_EQ(d.command.psi_d, prev.psi_d);
}

TEST(Decompose, SurgeFloorWhenOpposite) {
  const Decomposition d = decompose_references(Vec3(-2, 0, 0), 0, 0, 0, 0);
  EXPECT_NEAR(d.command.u_d, 0.05 * 2.0, 1e-15);
  EXPECT_GE(d.command.u_d, 0.0);
}

TEST(Decompose, LosRoundTripRecoversAngles) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> d(-20, 20), a(-0.6, 0.6);
  for (int k = 0; k < 500; ++k) {
    const double th = a(rng), ps = 5 * a(rng);
    const LosOutput los = los_velocity(Vec3(d(rng), d(rng), d(rng)), th, ps, 1.0, 5.0);
    const Decomposition dec = decompose_references(los.velocity, 0, 0, los.gamma, los.chi);
    EXPECT_NEAR(dec.gamma_nsb, los.gamma, 1e-12);
    EXPECT_NEAR(wrap_angle(dec.chi_nsb - los.chi), 0.0, 1e-12);
    EXPECT_NEAR(dec.command.u_d, 1.0, 1e-12);
  }
}
