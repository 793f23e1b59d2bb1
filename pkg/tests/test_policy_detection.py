import numpy as np
import pytest

from rme.dataset import WindowDataset
from rme.detection import (
    ADDED,
    REMOVED,
    DatasetCollector,
    DetectionConfig,
    MismatchDetector,
    TorqueWindow,
    activation_condition,
    collect_dataset,
)
from rme.errors import DomainError
from rme.policy import LimitCycleDS, PointAttractorDS, lyapunov_decrease_check
from rme.robot.dynamics import EePose
from rme.robot.so3 import exp_map


def _random_poses(rng, n, spread=0.5):
    return [EePose(rng.normal(size=3) * spread, exp_map(rng.normal(size=3) * 0.8)) for _ in range(n)]


def test_point_attractor_decreases_lyapunov():
    rng = np.random.default_rng(0)
    policy = PointAttractorDS.with_gains(EePose(np.zeros(3), np.eye(3)), 20.0, 10.0)
    rep = lyapunov_decrease_check(policy, _random_poses(rng, 500))
    assert rep.violations == 0
    assert policy.desired_velocity(policy.target) == pytest.approx(np.zeros(6))


def test_limit_cycle_decreases_lyapunov_and_circulates():
    rng = np.random.default_rng(1)
    policy = LimitCycleDS(center=np.zeros(3), radius=0.15, omega=0.6, k_radial=3.0)
    rep = lyapunov_decrease_check(policy, _random_poses(rng, 500, 0.3))
    assert rep.violations == 0
    on_cycle = EePose(np.array([0.0, 0.15, 0.0]), np.eye(3))
    f = policy.desired_velocity(on_cycle)
    assert np.linalg.norm(f[:3]) == pytest.approx(0.6 * 0.15)
    assert policy.radial_error(on_cycle) == pytest.approx(0.0)
    # the circulating part does no work against V
    split = policy.split(EePose(np.array([0.1, 0.3, 0.05]), np.eye(3)))
    grad = policy.lyapunov_gradient(EePose(np.array([0.1, 0.3, 0.05]), np.eye(3)))
    assert grad @ split.f_nc == pytest.approx(0.0, abs=1e-12)


def test_policy_validation():
    with pytest.raises(DomainError):
        PointAttractorDS(EePose(np.zeros(3), np.eye(3)), A=np.eye(6))
    with pytest.raises(DomainError):
        LimitCycleDS(center=np.zeros(3), u=np.array([1.0, 0, 0]), v=np.array([1.0, 0, 0]))


def _wrench(fz):
    return np.array([0.0, 0.0, fz, 0.0, 0.0, 0.0])


def _feed(det, taus, wrenches, start=0):
    events = []
    for k, (tau, w) in enumerate(zip(taus, wrenches)):
        ev = det.update(start + k, tau, w)
        if ev is not None:
            events.append(ev)
    return events


def test_step_then_stable_fires_once_window_is_settled():
    det = MismatchDetector()
    n = 1200
    taus = np.zeros((n, 7))
    taus[300:, 1] = 3.0  # step at tick 300, |tau|^2 = 9
    wr = [_wrench(-7.0 if k >= 300 else 0.0) for k in range(n)]
    events = _feed(det, taus, wr)
    assert events, "a stable step must be detected"
    first = events[0]
    assert first.sign == ADDED
    # fires once samples 271..500 are all post-step: tick >= 300 + 229
    assert first.tick == 300 + 229


def test_removal_sign():
    det = MismatchDetector()
    n = 1200
    taus = np.zeros((n, 7))
    taus[:300, 1] = 3.0
    wr = [_wrench(-7.0 if k < 300 else 0.0) for k in range(n)]
    # after removal the mean force is ~0, so the principal-force test decides
    wr = [w + _wrench(0.5) for w in wr]
    events = _feed(det, taus, wr)
    assert events and events[0].sign == REMOVED


def test_pulse_is_not_detected():
    det = MismatchDetector()
    n = 1500
    taus = np.zeros((n, 7))
    taus[400:600, 0] = 4.0  # 200 ms push that goes away again
    wr = [_wrench(0.0) + np.r_[10.0 if 400 <= k < 600 else 0.0, 0, 0, 0, 0, 0] for k in range(n)]
    assert not _feed(det, taus, wr)


def test_drift_is_not_detected():
    # slow ramp: large first/last difference but never stable
    det = MismatchDetector()
    n = 1500
    taus = np.zeros((n, 7))
    taus[:, 0] = np.linspace(0, 4, n)
    wr = [_wrench(-5.0)] * n
    assert not _feed(det, taus, wr)


def test_side_force_and_principal_axis_reject():
    cfg = DetectionConfig()
    sq = np.r_[np.zeros(100), np.full(400, 9.0)]
    lateral = np.tile([3.0, 0.0, -5.0, 0, 0, 0], (500, 1))
    fired, snap = activation_condition(cfg, sq, lateral)
    assert not fired and not snap["side_forces"]
    sideways = np.tile([2.0, 0.0, 1.0, 0, 0, 0], (500, 1))
    fired, snap = activation_condition(cfg, sq, sideways)
    assert not fired and not snap["principal_force"]
    ok = np.tile([0.5, 0.2, -5.0, 0, 0, 0], (500, 1))
    assert activation_condition(cfg, sq, ok)[0]
    strict = DetectionConfig(min_principal_force=6.0)
    assert not activation_condition(strict, sq, ok)[0]


def test_suppression_and_rearm():
    det = MismatchDetector()
    taus = np.zeros((1200, 7))
    taus[300:, 1] = 3.0
    wr = [_wrench(-7.0)] * 1200
    det.suppress(2000)
    assert not _feed(det, taus, wr)
    det.rearm(clear=True)
    assert not det.window.full


def test_ring_buffer_order_and_monotonic_ticks():
    buf = TorqueWindow(4)
    for k in range(6):
        buf.push(k, float(k), np.zeros(6))
    sq, _ = buf.ordered()
    assert sq.tolist() == [2.0, 3.0, 4.0, 5.0]
    with pytest.raises(DomainError):
        buf.push(5, 0.0, np.zeros(6))


def test_detection_config_validation():
    with pytest.raises(DomainError):
        DetectionConfig(end_window=(490, 501))
    with pytest.raises(DomainError):
        DetectionConfig(stabilization_threshold=0.0)


def test_collector_window_and_gap_abort():
    stream = [(k * 1e-3, np.zeros(7), np.full(7, k)) for k in range(300)]
    win = collect_dataset(iter(stream))
    assert isinstance(win, WindowDataset) and len(win) == 200
    assert win.tau_ext[-1, 0] == 199
    gappy = stream[:50] + stream[60:]
    assert collect_dataset(iter(gappy)) is None
    assert collect_dataset(iter(stream[:100])) is None
    with pytest.raises(DomainError):
        DatasetCollector(duration=0.0)
