import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from src.config import PlannerConfig
from src.demos import DemoDataset, DemoStep
from src.errors import ContractError, NumericalError, ParseError
from src.planner import (GMM, POSE_COLUMNS, BimanualTrajectory, Gaussian, StepReference, TaskFrame,
                         build_reference, fit_gmm_em, frame_transform, fuse_steps, integrator_chain, load_waypoints,
                         lqt_solve, plan_bimanual, product_of_gaussians, relative_pose_error, relative_trajectory,
                         save_trajectory, save_waypoints, segment_schedule, smoothness_report, waypoint_steps)
from src.utils import read_json
from test_model import make_subgraph

IDENTITY_Q = [1.0, 0.0, 0.0, 0.0]
OFFSET = np.array([-0.18, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])


def pose(x, y=0.0, z=0.05):
    return [x, y, z] + IDENTITY_Q


def gentle_waypoints(middle_offset=0.0):
    return np.array([
        [pose(-0.09), pose(0.09)],
        [pose(-0.04 + middle_offset, 0.02), pose(0.14, 0.02)],
        [pose(0.01, 0.04, 0.03), pose(0.19, 0.04, 0.03)],
    ])


def coordinated_demos(rollouts=2, steps=10, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for rid in range(rollouts):
        rollout = []
        for t in range(steps):
            right = np.array(pose(0.09 + 0.01 * t, 0.005 * t))
            left = right + OFFSET + np.concatenate([rng.normal(0.0, 1e-3, 3), np.zeros(4)])
            rollout.append(DemoStep(rollout_id=rid, t=t, zeta=np.stack([left, right]), subgraph=make_subgraph()))
        data.append(rollout)
    return DemoDataset(rollouts=data)


class TestGaussianAlgebra(unittest.TestCase):
    def test_product_of_two(self):
        fused = product_of_gaussians([Gaussian([0.0], [[1.0]]), Gaussian([2.0], [[1.0]])])
        np.testing.assert_allclose(fused.mean, [1.0])
        np.testing.assert_allclose(fused.covariance, [[0.5]])
        with self.assertRaises(ContractError):
            product_of_gaussians([])

    def test_product_is_order_invariant_and_tighter(self):
        rng = np.random.default_rng(2)
        gaussians = []
        for _ in range(3):
            root = rng.normal(size=(3, 3))
            gaussians.append(Gaussian(rng.normal(size=3), root @ root.T + 0.1 * np.eye(3)))
        fused = product_of_gaussians(gaussians)
        for order in ([2, 0, 1], [1, 2, 0]):
            again = product_of_gaussians([gaussians[i] for i in order])
            np.testing.assert_allclose(again.mean, fused.mean, atol=1e-12)
            np.testing.assert_allclose(again.covariance, fused.covariance, atol=1e-12)
        for g in gaussians:
            self.assertGreaterEqual(np.linalg.eigvalsh(g.covariance - fused.covariance).min(), -1e-12)

    def test_fuse_steps_matches_pairwise_product(self):
        rng = np.random.default_rng(0)
        means = [rng.normal(size=(4, 2)), rng.normal(size=(4, 2))]
        covs = [np.array([np.diag(rng.uniform(0.1, 2.0, 2)) for _ in range(4)]) for _ in range(2)]
        fused = fuse_steps(means, covs)
        for t in range(4):
            expected = product_of_gaussians([Gaussian(means[0][t], covs[0][t]), Gaussian(means[1][t], covs[1][t])])
            np.testing.assert_allclose(fused.means[t], expected.mean)
            np.testing.assert_allclose(fused.covariances[t], expected.covariance)

    def test_frame_transform(self):
        g = Gaussian([1.0, -1.0], np.diag([1.0, 2.0]))
        moved = frame_transform(g, TaskFrame(A=2 * np.eye(2), b=[1.0, 1.0]))
        np.testing.assert_allclose(moved.mean, [3.0, -1.0])
        np.testing.assert_allclose(moved.covariance, np.diag([4.0, 8.0]))
        with self.assertRaises(ContractError):
            frame_transform(g, TaskFrame.identity(3))

    def test_relative_trajectory(self):
        left, right = np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.5, 0.5], [1.0, 1.0]])
        np.testing.assert_allclose(relative_trajectory(left, right, TaskFrame.identity(2)), left - right)
        np.testing.assert_allclose(relative_trajectory(left, right, TaskFrame(A=2 * np.eye(2), b=[0.5, 0.5])),
                                   (left - right - 0.5) / 2)

    def test_non_positive_definite_covariance(self):
        with self.assertRaises(np.linalg.LinAlgError):
            Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_build_reference_fuses_frames(self):
        gmm = GMM([0.5, 0.5], [Gaussian([0.0], [[1.0]]), Gaussian([4.0], [[2.0]])])
        ref = build_reference([gmm, gmm], [TaskFrame.identity(1), TaskFrame.identity(1)], 4)
        np.testing.assert_allclose(ref.means[:, 0], [0.0, 0.0, 4.0, 4.0])
        np.testing.assert_allclose(ref.covariances[:, 0, 0], [0.5, 0.5, 1.0, 1.0])
        np.testing.assert_array_equal(segment_schedule(3, 7), [0, 0, 0, 1, 1, 2, 2])


class TestGMM(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.data = np.concatenate([rng.normal(0.0, 0.1, (100, 2)), rng.normal(5.0, 0.1, (100, 2))])

    def test_recovers_time_ordered_clusters(self):
        for init in ("segments", "kmeans"):
            with self.subTest(init=init):
                gmm = fit_gmm_em(self.data, 2, seed=0, init=init)
                np.testing.assert_allclose(gmm.components[0].mean, [0.0, 0.0], atol=0.05)
                np.testing.assert_allclose(gmm.components[1].mean, [5.0, 5.0], atol=0.05)
                np.testing.assert_allclose(gmm.weights, [0.5, 0.5], atol=1e-6)
                self.assertTrue(np.all(np.diff(gmm.log_likelihoods) >= -1e-6))

    def test_single_component_is_sample_moments(self):
        gmm = fit_gmm_em(self.data, 1, reg=1e-6)
        np.testing.assert_allclose(gmm.components[0].mean, self.data.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(gmm.components[0].covariance, np.cov(self.data.T, bias=True) + 1e-6 * np.eye(2),
                                   atol=1e-12)
        np.testing.assert_allclose(gmm.weights, [1.0])

    def test_reversed_phase_reverses_order(self):
        times = np.linspace(1.0, 0.0, len(self.data))
        gmm = fit_gmm_em(self.data, 2, times=times)
        np.testing.assert_allclose(gmm.components[0].mean, [5.0, 5.0], atol=0.05)

    def test_log_likelihood(self):
        gmm = fit_gmm_em(self.data, 2)
        self.assertAlmostEqual(gmm.log_likelihood(self.data), gmm.log_likelihoods[-1], delta=1e-6)

    def test_bad_requests(self):
        with self.assertRaises(ContractError):
            fit_gmm_em(self.data[:3], 4)
        with self.assertRaises(ContractError):
            fit_gmm_em(self.data, 2, init="random")
        with self.assertRaises(ContractError):
            GMM([0.7, 0.7], [Gaussian([0.0], [[1.0]]), Gaussian([1.0], [[1.0]])])


class TestLQT(unittest.TestCase):
    def test_integrator_chain(self):
        a, b = integrator_chain(1, 2, 0.1)
        np.testing.assert_allclose(a, [[1.0, 0.1], [0.0, 1.0]])
        np.testing.assert_allclose(b, [[0.005], [0.1]])
        a3, b3 = integrator_chain(2, 3, 0.5)
        self.assertEqual(a3.shape, (6, 6))
        self.assertEqual(b3.shape, (6, 2))
        self.assertAlmostEqual(a3[0, 4], 0.125)

    def test_batch_and_riccati_agree(self):
        rng = np.random.default_rng(1)
        t = 30
        means = np.cumsum(rng.normal(0.0, 0.05, (t, 2)), axis=0)
        var = np.where(np.arange(t) % 10 == 0, 1e-2, 1.0)
        ref = StepReference(means=means, covariances=var[:, None, None] * np.eye(2)[None])
        batch = lqt_solve(ref, 2, 0.1, 1e-3, method="batch")
        riccati = lqt_solve(ref, 2, 0.1, 1e-3, method="riccati")
        np.testing.assert_allclose(batch.states, riccati.states, atol=1e-6)
        np.testing.assert_allclose(batch.controls, riccati.controls, atol=1e-5)
        self.assertEqual(batch.positions.shape, (t, 2))

    def test_tight_reference_is_tracked(self):
        means = np.linspace(0.0, 1.0, 50)[:, None]
        ref = StepReference(means=means, covariances=np.full((50, 1, 1), 1e-6))
        result = lqt_solve(ref, 1, 0.02, 1e-6, method="riccati")
        np.testing.assert_allclose(result.positions[:, 0], means[:, 0], atol=1e-3)

    def test_stationary_reference_needs_no_control(self):
        means = np.tile([0.3, -0.2], (40, 1))
        ref = StepReference(means=means, covariances=np.tile(np.eye(2), (40, 1, 1)))
        for method in ("batch", "riccati"):
            with self.subTest(method=method):
                result = lqt_solve(ref, 2, 0.1, 1e-3, method=method)
                np.testing.assert_allclose(result.controls, 0.0, atol=1e-9)
                np.testing.assert_allclose(result.positions, means, atol=1e-9)

    def test_short_horizon_matches_normal_equations(self):
        dt, weight = 0.5, 0.1
        means = np.array([0.0, 1.0, -0.5, 2.0])
        variances = np.array([1.0, 0.5, 2.0, 0.25])
        ref = StepReference(means=means[:, None], covariances=variances[:, None, None])
        # x_t = x_0 + dt * sum(u_s for s < t), with x_0 = means[0]
        su = dt * np.tril(np.ones((4, 3)), k=-1)
        q = np.diag(1.0 / variances)
        u = np.linalg.solve(su.T @ q @ su + weight * np.eye(3), su.T @ q @ (means - means[0]))
        for method in ("batch", "riccati"):
            with self.subTest(method=method):
                result = lqt_solve(ref, 1, dt, weight, method=method)
                np.testing.assert_allclose(result.controls[:, 0], u, atol=1e-10)
                np.testing.assert_allclose(result.positions[:, 0], means[0] + su @ u, atol=1e-10)

    def test_heavy_control_weight_freezes_state(self):
        means = np.linspace(0.0, 1.0, 20)[:, None]
        ref = StepReference(means=means, covariances=np.ones((20, 1, 1)))
        norms = [np.linalg.norm(lqt_solve(ref, 1, 0.1, w, method="batch").controls) for w in (1e-3, 1.0, 1e3, 1e8)]
        self.assertTrue(all(b < a for a, b in zip(norms, norms[1:])))
        frozen = lqt_solve(ref, 1, 0.1, 1e8, method="riccati")
        self.assertLess(np.abs(frozen.controls).max(), 1e-6)
        np.testing.assert_allclose(frozen.positions[:, 0], 0.0, atol=1e-6)

    def test_ill_conditioned_normal_equations(self):
        covs = np.array([1.0, 1e-14, 1e2, 1e2])[:, None, None]
        ref = StepReference(means=np.zeros((4, 1)), covariances=covs)
        with self.assertRaises(NumericalError):
            lqt_solve(ref, 1, 1.0, 1e-6, method="batch")

    def test_bad_arguments(self):
        ref = StepReference(means=np.zeros((3, 1)), covariances=np.ones((3, 1, 1)))
        with self.assertRaises(ContractError):
            lqt_solve(ref, 0, 0.1, 1e-3)
        with self.assertRaises(ContractError):
            lqt_solve(ref, 1, 0.1, 0.0)
        with self.assertRaises(ContractError):
            lqt_solve(ref, 1, 0.1, 1e-3, method="ilqr")
        with self.assertRaises(ContractError):
            lqt_solve(ref, 2, 0.1, 1e-3, x0=np.zeros(3))


class TestPlanBimanual(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.demos = coordinated_demos()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_waypoints_are_reached(self):
        config = PlannerConfig(points=300, total_time=3.0, n_frames=1)
        plan = plan_bimanual(gentle_waypoints(), self.demos, config, method="riccati")
        np.testing.assert_array_equal(plan.waypoint_steps, waypoint_steps(3, 300))
        self.assertEqual(len(plan.trajectory), 300)
        self.assertIsNone(plan.coordination_mean)
        report = smoothness_report(plan)
        self.assertLess(report["left_waypoint_error_max"], 5e-3)
        self.assertLess(report["right_waypoint_error_max"], 5e-3)
        self.assertLess(report["left_max_acceleration"], config.max_acceleration)
        self.assertNotIn("relative_pose_error_mean", report)

    def test_coordination_holds_relative_pose(self):
        waypoints = gentle_waypoints(middle_offset=0.05)
        on = plan_bimanual(waypoints, self.demos, PlannerConfig(points=200, total_time=2.0, n_components=2))
        off = plan_bimanual(waypoints, self.demos, PlannerConfig(points=200, total_time=2.0, n_frames=1))
        self.assertEqual(on.coordination_gmm.n_components, 2)
        np.testing.assert_allclose(on.coordination_mean[0, :3], OFFSET[:3], atol=5e-3)
        self.assertLess(relative_pose_error(on), relative_pose_error(off, on.coordination_mean))
        self.assertIn("relative_pose_error_mean", smoothness_report(on))

    def test_default_resolution(self):
        plan = plan_bimanual(gentle_waypoints(), self.demos, PlannerConfig())
        self.assertEqual(len(plan.trajectory), 10000)
        self.assertAlmostEqual(plan.trajectory.timestamps[1], 1e-3)
        quat_norms = np.linalg.norm(plan.trajectory.left_pose[:, 3:], axis=1)
        np.testing.assert_allclose(quat_norms, 1.0)

    def test_rejects_bad_waypoints(self):
        with self.assertRaises(ContractError):
            plan_bimanual(gentle_waypoints()[:1], self.demos)
        with self.assertRaises(ContractError):
            plan_bimanual(gentle_waypoints(), self.demos, PlannerConfig(points=2))
        bad = gentle_waypoints()
        bad[1, 0, 0] = np.nan
        with self.assertRaises(ContractError):
            plan_bimanual(bad, self.demos)

    def test_trajectory_validation(self):
        with self.assertRaises(ContractError):
            BimanualTrajectory(timestamps=np.array([0.0, 0.0]), left=np.zeros((2, 7)), right=np.zeros((2, 7)))
        with self.assertRaises(ContractError):
            BimanualTrajectory(timestamps=np.array([0.0, 1.0]), left=np.zeros((2, 7)), right=np.zeros((3, 7)))

    def test_save_trajectory(self):
        plan = plan_bimanual(gentle_waypoints(), self.demos, PlannerConfig(points=50, total_time=1.0, n_frames=1))
        path = save_trajectory(plan.trajectory, self.tmp / "trajectory.csv")
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ["t"] + POSE_COLUMNS)
        self.assertEqual(len(frame), 50)
        header = read_json(self.tmp / "trajectory.json")
        self.assertAlmostEqual(header["dt"], 0.02)
        self.assertEqual((header["order"], header["points"]), (2, 50))


class TestWaypointFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def write(self, text):
        path = self.tmp / "waypoints.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_save_and_load(self):
        path = save_waypoints(gentle_waypoints(), self.tmp / "waypoints.csv")
        np.testing.assert_allclose(load_waypoints(path), gentle_waypoints())

    def test_errors_carry_line_numbers(self):
        header = ",".join(POSE_COLUMNS)
        row = ",".join(["0.1"] * 14)
        bad = ",".join(["0.1"] * 13 + ["abc"])
        with self.assertRaises(ParseError) as ctx:
            load_waypoints(self.write("\n".join([header, row, bad, row]) + "\n"))
        self.assertEqual(ctx.exception.line, 3)
        with self.assertRaises(ParseError) as ctx:
            load_waypoints(self.write(",".join(POSE_COLUMNS[:-1]) + "\n" + ",".join(["0.1"] * 13) + "\n"))
        self.assertEqual(ctx.exception.line, 1)
        with self.assertRaises(ParseError):
            load_waypoints(self.write("\n".join([header, row]) + "\n"))
        with self.assertRaises(ParseError) as ctx:
            load_waypoints(self.write(""))
        self.assertEqual(ctx.exception.line, 1)
        with self.assertRaises(FileNotFoundError):
            load_waypoints(self.tmp / "missing.csv")


if __name__ == "__main__":
    unittest.main()
