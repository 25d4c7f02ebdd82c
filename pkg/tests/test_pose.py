import numpy as np
import pytest

from splatpuppet import geometry as geo
from splatpuppet.pose import (PoseSolution, RigidTrajectory, extract_rigid_keypoints,
                              filter_outlier_frames, fit_camera,
                              match_keypoints_to_landmarks, track_trajectory)
from splatpuppet.render import Camera


# -- keypoint extraction --------------------------------------------------------

def test_constant_flow_any_interior_pixel_eligible():
    flows = np.ones((3, 20, 20, 2)) * 0.7
    kps = extract_rigid_keypoints(flows, count=4)
    assert kps.shape == (4, 2)
    # interior only: centers at least half a pixel inside the border ring
    assert np.all(kps >= 1.0) and np.all(kps <= 19.0)


def test_rigid_left_half_preferred():
    rng = np.random.default_rng(0)
    T, H, W = 12, 40, 60
    flows = np.zeros((T, H, W, 2))
    ys, xs = np.mgrid[0:H, 0:W]
    for t in range(T):
        # rigid translation left half; sinusoidally deforming right half
        flows[t, :, :, 0] = 0.8
        wobble = np.sin(2 * np.pi * (xs / 6.0 + t / 5.0)) * np.cos(ys / 3.0)
        right = xs >= W // 2
        flows[t, :, :, 0] += np.where(right, 1.5 * wobble * np.sin(2 * np.pi * t / 7), 0)
        flows[t, :, :, 1] += np.where(right, 1.2 * np.cos(2 * np.pi * (ys / 5.0 - t / 9.0)), 0)
    kps = extract_rigid_keypoints(flows, count=20)
    frac_left = np.mean(kps[:, 0] < W // 2)
    assert frac_left >= 0.95


def test_count_zero_returns_empty():
    assert extract_rigid_keypoints(np.zeros((2, 8, 8, 2)), 0).shape == (0, 2)


def test_warns_when_spacing_exhausts_candidates(caplog):
    flows = np.zeros((2, 12, 12, 2))
    with caplog.at_level("WARNING"):
        kps = extract_rigid_keypoints(flows, count=50)
    assert len(kps) < 50
    assert any("keypoints" in r.message for r in caplog.records)


# -- tracking ---------------------------------------------------------------------

def test_zero_flow_keeps_points_static():
    kps = np.array([[4.5, 6.5], [10.5, 3.5]])
    traj = track_trajectory(kps, np.zeros((5, 16, 16, 2)))
    assert np.all(traj.valid)
    for t in range(6):
        np.testing.assert_array_equal(traj.positions[t], kps)


def test_uniform_flow_integrates_linearly():
    kps = np.array([[2.5, 2.5]])
    flows = np.zeros((4, 32, 32, 2))
    flows[..., 0] = 1.0
    traj = track_trajectory(kps, flows)
    for t in range(5):
        np.testing.assert_allclose(traj.positions[t], [[2.5 + t, 2.5]])


def test_point_leaving_image_invalid_thereafter():
    kps = np.array([[30.5, 8.5]])
    flows = np.zeros((6, 16, 32, 2))
    flows[..., 0] = 1.0
    traj = track_trajectory(kps, flows)
    # surpasses x = 32 after two steps
    assert traj.valid[0, 0] and traj.valid[1, 0]
    assert not traj.valid[2, 0]
    assert not traj.valid[5, 0]


# -- camera fitting -----------------------------------------------------------------

def _synthetic_case(seed=0, T=30, K=12, noise=0.0):
    # wide spread, real depth variation and a generous rotation range keep the
    # focal/translation/rotation ambiguities well conditioned
    rng = np.random.default_rng(seed)
    W = H = 64
    F_true = 77.0
    X = np.column_stack([rng.uniform(-1.2, 1.2, K), rng.uniform(-1.2, 1.2, K),
                         rng.uniform(-1.0, 1.0, K)])
    aa_true = np.zeros((T, 3))
    aa_true[:, 1] = np.radians(20.0) * np.sin(2 * np.pi * np.arange(T) / 25)
    aa_true[:, 0] = np.radians(4.0) * np.sin(2 * np.pi * np.arange(T) / 17 + 0.5)
    tr_true = np.tile([0.0, 0.0, 2.2], (T, 1)) + 0.02 * rng.standard_normal((T, 3))
    R = np.asarray(geo.axis_angle_to_rotmat(aa_true))
    p = np.einsum("tij,kj->tik", R, X) + tr_true[:, :, None]
    u = F_true * p[:, 0] / p[:, 2] + W / 2
    v = F_true * p[:, 1] / p[:, 2] + H / 2
    pts = np.stack([u, v], axis=2)
    if noise:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    traj = RigidTrajectory(positions=pts, valid=np.ones((T, K), bool))
    init = PoseSolution(base_rot=np.eye(3), axis_angle=np.zeros((T, 3)),
                        trans=np.tile([0.0, 0.0, 2.2 * 0.95], (T, 1)),
                        focal=0.9 * F_true, width=W, height=H)
    return traj, X, init, aa_true, tr_true, F_true


def _pose_errors(sol, aa_true, tr_true, F_true):
    rot = [geo.rotation_angle_deg(sol.rotation(t),
                                  np.asarray(geo.axis_angle_to_rotmat(aa_true[t])))
           for t in range(sol.frame_count)]
    tr = np.linalg.norm(sol.trans - tr_true, axis=1)
    return np.array(rot), tr, abs(sol.focal - F_true) / F_true


def test_noiseless_roundtrip_recovers_camera():
    traj, X, init, aa_true, tr_true, F_true = _synthetic_case()
    sol, report = fit_camera(traj, X, init)
    rot, tr, f_rel = _pose_errors(sol, aa_true, tr_true, F_true)
    assert rot.max() <= 0.1
    assert tr.max() <= 1e-3
    assert f_rel <= 1e-3


def test_fixed_point_when_init_already_exact():
    traj, X, init, aa_true, tr_true, F_true = _synthetic_case(T=10)
    exact = PoseSolution(base_rot=np.eye(3), axis_angle=aa_true.copy(),
                         trans=tr_true.copy(), focal=F_true,
                         width=init.width, height=init.height)
    sol, report = fit_camera(traj, X, exact, max_iters=50)
    assert report.loss_history[0] == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(sol.axis_angle, aa_true, atol=1e-9)
    np.testing.assert_allclose(sol.trans, tr_true, atol=1e-9)
    assert sol.focal == pytest.approx(F_true, rel=1e-12)


def test_noisy_montecarlo_median_rotation_error():
    errs = []
    for trial in range(20):
        traj, X, init, aa_true, tr_true, F_true = _synthetic_case(
            seed=100 + trial, T=30, K=16, noise=0.5)
        sol, _ = fit_camera(traj, X, init, max_iters=2000)
        rot, _, _ = _pose_errors(sol, aa_true, tr_true, F_true)
        errs.append(np.median(rot))
    assert np.median(errs) <= 1.0


def test_loss_non_increasing_over_accepted_iterations():
    traj, X, init, *_ = _synthetic_case(T=8, noise=0.3)
    _, report = fit_camera(traj, X, init, max_iters=300)
    hist = np.array(report.loss_history)
    assert np.all(np.diff(hist) <= 0.0)


def test_underconstrained_frames_skipped():
    traj, X, init, aa_true, tr_true, F_true = _synthetic_case(T=10)
    traj.valid[3, :] = False
    traj.valid[7, :-3] = False  # 3 valid points < 4 minimum
    sol, _ = fit_camera(traj, X, init)
    assert not sol.constrained[3] and not sol.constrained[7]
    rot, tr, f_rel = _pose_errors(sol, aa_true, tr_true, F_true)
    keep = sol.constrained
    assert rot[keep].max() <= 0.1 and f_rel <= 1e-3


def test_landmark_count_mismatch_rejected():
    traj, X, init, *_ = _synthetic_case(T=5)
    with pytest.raises(ValueError):
        fit_camera(traj, X[:-1], init)


# -- outlier filtering ----------------------------------------------------------------

def _solution_with_residuals(res):
    T = len(res)
    sol = PoseSolution(base_rot=np.eye(3), axis_angle=np.zeros((T, 3)),
                       trans=np.zeros((T, 3)), focal=10.0, width=8, height=8)
    sol.residuals = np.asarray(res, dtype=np.float64)
    return sol


def test_filter_worked_example():
    # mean 3, std 6, threshold 15: only the 21 is flagged
    sol = filter_outlier_frames(_solution_with_residuals([1] * 9 + [21]))
    assert sol.mcc_eligible.tolist() == [True] * 9 + [False]


def test_filter_equal_residuals_none_flagged():
    sol = filter_outlier_frames(_solution_with_residuals([2.0] * 8))
    assert sol.mcc_eligible.all()


def test_filter_skipped_below_three_frames():
    sol = filter_outlier_frames(_solution_with_residuals([1.0, 100.0]))
    assert sol.mcc_eligible.all()


def test_eligibility_invariant_to_frame_order():
    res = np.array([1, 1, 5, 1, 40, 1, 1, 2, 1, 1], dtype=float)
    a = filter_outlier_frames(_solution_with_residuals(res)).mcc_eligible
    perm = np.array([4, 0, 9, 2, 7, 1, 3, 5, 8, 6])
    b = filter_outlier_frames(_solution_with_residuals(res[perm])).mcc_eligible
    assert np.array_equal(a[perm], b)


# -- pose JSON round trip ----------------------------------------------------------

def test_pose_json_roundtrip(tmp_path):
    traj, X, init, *_ = _synthetic_case(T=6)
    sol, _ = fit_camera(traj, X, init, max_iters=200)
    sol = filter_outlier_frames(sol)
    path = tmp_path / "pose.json"
    sol.save(path)
    back = PoseSolution.load(path)
    assert back.focal == pytest.approx(sol.focal, rel=1e-12)
    for t in range(6):
        assert geo.rotation_angle_deg(back.rotation(t), sol.rotation(t)) < 1e-4
    np.testing.assert_allclose(back.trans, sol.trans, atol=1e-12)
    assert np.array_equal(back.mcc_eligible, sol.mcc_eligible)


def test_keypoint_landmark_matching():
    rng = np.random.default_rng(5)
    X = np.column_stack([rng.uniform(-0.5, 0.5, 6), rng.uniform(-0.5, 0.5, 6),
                         np.full(6, 0.0)])
    cam = Camera(rot=np.eye(3), trans=np.array([0, 0, 3.0]), focal=50.0,
                 width=48, height=48)
    p = X @ np.eye(3).T + np.array([0, 0, 3.0])
    proj = np.column_stack([50.0 * p[:, 0] / p[:, 2] + 24,
                            50.0 * p[:, 1] / p[:, 2] + 24])
    kps = proj[[3, 1, 4]] + 0.4
    li, ki = match_keypoints_to_landmarks(kps, X, cam, max_px=3.0)
    assert li.tolist() == [3, 1, 4]
    far = np.array([[1.0, 1.0]])
    li2, _ = match_keypoints_to_landmarks(far, X, cam, max_px=3.0)
    assert len(li2) == 0
