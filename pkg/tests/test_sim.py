import numpy as np
import pytest

from rme.errors import DomainError
from rme.robot.dynamics import MismatchParams
from rme.sim.engine import MIN_PAYLOAD_KG, compose, run
from rme.sim.scenario import bundled_scenarios, load_scenario, scenario_from_dict


def _position_error(log):
    target = log["x"][0, :3]  # the default point attractor holds the home pose
    return np.linalg.norm(log["x"][:, :3] - target, axis=1)


def test_bundled_scenarios_parse():
    names = bundled_scenarios()
    assert {"nominal", "static_0.7kg", "sequential", "joint_limit"} <= set(names)
    for name in names:
        assert load_scenario(name).duration > 0


def test_nominal_regulation():
    log = run(load_scenario("nominal"))
    assert _position_error(log)[-1] < 1e-4
    assert not log.meta["detections"]


def test_oracle_compensation_removes_steady_state_error():
    scen = load_scenario("static_0.7kg").with_overrides(estimation={"mode": "oracle"}, duration=3.0)
    log = run(scen)
    assert log.meta["fault"] is None
    assert _position_error(log)[-1] < 1e-4


def test_uncompensated_payload_sags():
    scen = load_scenario("static_0.7kg").with_overrides(estimation={"enabled": False})
    log = run(scen)
    assert _position_error(log)[-1] > 1e-3


def test_identical_seed_identical_log():
    scen = load_scenario("pulse").with_overrides(duration=0.8)
    a, b = run(scen), run(scen)
    np.testing.assert_array_equal(a.matrix(), b.matrix())
    c = run(scen.with_overrides(seed=3))
    assert not np.array_equal(a.matrix(), c.matrix())


def test_compose_adds_mass_and_weights_com():
    total = compose(MismatchParams(0.5, np.array([0.0, 0.0, 0.1])), MismatchParams(0.5, np.array([0.1, 0.0, 0.0])))
    assert total.m == pytest.approx(1.0)
    np.testing.assert_allclose(total.r, [0.05, 0.0, 0.05])
    gone = compose(MismatchParams(1.0, np.array([0.0, 0.0, 0.1])), MismatchParams(-1.0 + MIN_PAYLOAD_KG / 2, np.zeros(3)))
    np.testing.assert_array_equal(gone.r, np.zeros(3))


def test_scenario_validation():
    with pytest.raises(DomainError):
        scenario_from_dict({"schema_version": 99})
    with pytest.raises(DomainError):
        scenario_from_dict({"dt": 0.01})
    with pytest.raises(DomainError):
        scenario_from_dict({"events": [{"type": "attach_mass", "t": 1.0, "m": 0.1, "r": [0, 0, 0]},
                                       {"type": "detach_mass", "t": 0.5}]})
    with pytest.raises(DomainError):
        load_scenario("does_not_exist")
