"""Closed-loop simulation: plant, controller, detector and estimator in one tick loop."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from rme.controller.cpic import augment_with_compensation, cpic_solve, joint_limit_constraints
from rme.controller.damping import DampingDesign, damping_matrix, tank_impedance_wrench
from rme.controller.passivity import EnergyTank, passivity_audit, storage
from rme.dataset import WindowDataset
from rme.detection import DatasetCollector, DetectionConfig, MismatchDetector
from rme.errors import SimulationFault
from rme.policy import policy_from_dict
from rme.robot.chain import KinematicChain, load_chain
from rme.robot.dynamics import (
    MismatchParams,
    mismatch_torque_from,
    pseudo_wrench_from_jacobian,
    snapshot,
    solve_mass_matrix,
)
from rme.robot.so3 import log_map
from rme.sim import runlog as rl
from rme.sim.scenario import Scenario


MIN_PAYLOAD_KG = 0.02


@dataclass
class Payload:
    """Point payload stored as mass and first moment, so that composition is linear."""

    m: float = 0.0
    moment: np.ndarray = None

    def __post_init__(self):
        if self.moment is None:
            self.moment = np.zeros(3)

    @classmethod
    def from_params(cls, theta: MismatchParams) -> "Payload":
        return cls(theta.m, theta.m * np.asarray(theta.r, dtype=float))

    def __add__(self, other: "Payload") -> "Payload":
        return Payload(self.m + other.m, self.moment + other.moment)

    @property
    def params(self) -> MismatchParams:
        # below the estimator's mass resolution the CoM is noise divided by noise
        r = self.moment / self.m if abs(self.m) > MIN_PAYLOAD_KG else np.zeros(3)
        return MismatchParams(self.m, r)

    def clamped(self) -> "Payload":
        """What the controller may compensate: no negative mass."""
        return self if self.m > 0.0 else Payload()


def compose(previous: MismatchParams, residual: MismatchParams) -> MismatchParams:
    """Total payload after a residual estimate: masses add, CoM is mass-weighted."""
    return (Payload.from_params(previous) + Payload.from_params(residual)).params


TIMING_KEYS = ("wall_ms", "total_wall_ms")


@dataclass
class EstimateRecord:
    detect_tick: int
    sign: str
    collect_end_tick: int = -1
    publish_tick: int = -1
    residual: list | None = None
    total: list | None = None
    report: dict | None = None
    wall_detect: float = 0.0
    wall_publish: float = 0.0
    window: WindowDataset | None = None

    def as_dict(self) -> dict:
        """Replayable fields only; wall-clock numbers live in :meth:`timing`."""
        out = {k: v for k, v in self.__dict__.items() if not k.startswith("wall_") and k != "window"}
        if self.report is not None:
            out["report"] = {k: v for k, v in self.report.items() if k not in TIMING_KEYS}
        return out

    def timing(self) -> dict:
        report = self.report or {}
        return {
            "detect_tick": self.detect_tick,
            "wall_latency_s": self.wall_publish - self.wall_detect if self.wall_publish else None,
            **{k: report[k] for k in TIMING_KEYS if k in report},
        }


def _estimator_from_config(scenario: Scenario, chain: KinematicChain):
    from rme.pipeline import build_estimator

    return build_estimator(scenario.config["estimation"], chain)


def run(scenario: Scenario, estimator=None, chain: KinematicChain | None = None,
        log_meta: bool = True, record: bool = True) -> rl.RunLog:
    """Simulate ``scenario``; returns the RunLog (truncated with a fault record on failure).

    ``estimator(window, seed) -> (residual MismatchParams, report dict)`` is
    built from the scenario when omitted and estimation is enabled.
    """
    cfg = scenario.config
    chain = chain or load_chain(cfg["chain"])
    n = chain.n
    dt = scenario.dt
    ticks = int(round(scenario.duration / dt))
    rng = np.random.default_rng(scenario.seed)
    noise_std = np.broadcast_to(np.asarray(cfg["noise"]["tau_std"], dtype=float), (n,))

    q = np.array(cfg["initial_q"] if cfg["initial_q"] is not None else chain.home, dtype=float)
    dq = np.zeros(n)
    home_pose = snapshot(chain, chain.home, np.zeros(n)).kin.pose
    policy = policy_from_dict(cfg["policy"], home_pose)

    ccfg = cfg["controller"]
    design = DampingDesign(np.asarray(ccfg["damping"], dtype=float), float(ccfg["eps_f"]),
                           alignment=ccfg["alignment"])
    gains = design.field_gains
    tank = EnergyTank(**ccfg["tank"])
    ramp = float(ccfg["field_ramp"])
    xdot_prev = np.zeros(6)
    k1, k2 = ccfg["cbf_gains"]

    ecfg = cfg["estimation"]
    mode = ecfg["mode"]
    estimating = bool(ecfg["enabled"]) and mode in ("inline", "async")
    if estimating and estimator is None:
        estimator = _estimator_from_config(scenario, chain)
    detector = MismatchDetector(DetectionConfig.from_dict(cfg["detection"]))
    window_size = int(round(ecfg["window_ms"] * 1e-3 / dt))
    publish_delay = int(round(float(ecfg["publish_delay"]) / dt))
    guard = int(round(float(ecfg["guard"]) / dt))

    true_payloads: list[Payload] = []
    applied = Payload()  # compensation currently in the controller
    published = MismatchParams(0.0, np.zeros(3))  # total estimate, unclamped
    events = list(scenario.events)
    next_event = 0
    wrench_events = [e for e in events if e.kind == "external_wrench"]

    log = rl.RunLog.allocate(n, ticks) if record else None
    records: list[EstimateRecord] = []
    detections: list[dict] = []
    collector: DatasetCollector | None = None
    pending = None  # (publish_tick or future, record)
    executor = ThreadPoolExecutor(max_workers=1) if mode == "async" and estimating else None
    warm: tuple = ()
    fault = None
    state = rl.DETECTION_ARMED
    k = 0

    try:
        for k in range(ticks):
            t = k * dt
            while next_event < len(events) and events[next_event].t <= t + 1e-12:
                ev = events[next_event]
                if ev.kind == "attach_mass":
                    true_payloads.append(Payload.from_params(MismatchParams(ev.m, ev.r)))
                elif ev.kind == "detach_mass":
                    true_payloads.clear()
                next_event += 1
            true_total = sum(true_payloads, Payload())
            if mode == "oracle" and ecfg["enabled"]:
                applied = true_total
                published = true_total.params

            snap = snapshot(chain, q, dq)
            if not np.all(np.isfinite(snap.M)):
                raise SimulationFault("non-finite mass matrix")
            pose = snap.kin.pose
            split = policy.split(pose)
            f = split.f
            D = damping_matrix(design, f)
            J = snap.J
            xdot = J @ dq
            G_x = np.linalg.solve(J @ J.T + (1e-12) * np.eye(6), J @ snap.G)
            # Tank flows use the extrapolated mid-step velocity: the held torque
            # acts over the whole step, not just at its start.
            xdot_mid = xdot + 0.5 * (xdot - xdot_prev) if k > 0 else xdot
            xdot_prev = xdot
            p_nc = float(xdot_mid @ (gains * split.f_nc))
            beta = tank.gate(p_nc) * min(1.0, t / ramp) if ramp > 0 else tank.gate(p_nc)
            F_c = tank_impedance_wrench(xdot, split.f_c, split.f_nc, D, G_x, gains, beta)
            cons = joint_limit_constraints(chain, q, k1, k2) if ccfg["constraints"] else []
            cmd = cpic_solve(chain, snap, F_c, cons, warm, ccfg["null_damping"],
                             ccfg["null_weight"], ccfg["qp_max_iter"])
            warm = cmd.active_constraint_set
            theta_applied = applied.params if applied.m > 0 else None
            augment_with_compensation(cmd, chain, snap, theta_applied)
            tau_comp = cmd.tau_hat_c - cmd.tau_c - cmd.tau_null

            F_ext = sum((e.wrench_at(t) for e in wrench_events), np.zeros(6))
            tau_mm_true = (
                mismatch_torque_from(snap.kin, J, true_total.params, chain.gravity)
                if true_total.m > 0 else np.zeros(n)
            )
            tau_ext_true = J.T @ F_ext + tau_mm_true
            tau_meas = tau_ext_true + noise_std * rng.standard_normal(n)

            tau_total = cmd.tau_hat_c + tau_ext_true
            if cfg["integrator"] == "rk4":
                q_new, dq_new = _rk4_step(chain, q, dq, tau_total, dt)
            else:
                ddq = solve_mass_matrix(snap.M, tau_total - snap.bias)
                dq_new = dq + dt * ddq
                q_new = q + dt * dq_new
            if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(dq_new))):
                raise SimulationFault(f"non-finite state at t={t:.4f}")

            S = storage(snap.M, dq, split.U_t, split.U_r, gains, tank.level)
            supply = float(0.5 * (dq + dq_new) @ (tau_ext_true + tau_comp))
            tank.step(dt, float(xdot_mid @ D @ xdot), beta * p_nc)
            flagged = bool(cmd.active_constraint_set) or cmd.clipped or cmd.rank_deficient

            # Estimator side sees the residual relative to the compensated model.
            resid = tau_meas - (
                mismatch_torque_from(snap.kin, J, applied.params, chain.gravity)
                if applied.m > 0 else 0.0
            )
            if mode != "oracle":
                wrench_hat = pseudo_wrench_from_jacobian(J, resid)
                event = detector.update(k, resid, wrench_hat)
                if event is not None and estimating and collector is None and pending is None:
                    detections.append({"tick": k, "sign": event.sign, "means": event.means})
                    records.append(EstimateRecord(k, event.sign, wall_detect=time.perf_counter()))
                    detector.suppress(ticks + 1)
                    collector = DatasetCollector(window_size * dt, 1.0 / dt)
                    state = rl.DETECTION_COLLECTING
                elif event is not None:
                    detections.append({"tick": k, "sign": event.sign, "means": event.means})
                    detector.suppress(k + window_size)
                elif collector is not None:
                    window = collector.push(t, q, resid)
                    if collector.aborted:
                        collector = None
                        detector.rearm()
                        state = rl.DETECTION_ARMED
                    elif window is not None:
                        collector = None
                        rec = records[-1]
                        rec.collect_end_tick = k
                        rec.window = window
                        seed = scenario.seed * 1000 + len(records)
                        window.meta.update({"scenario": scenario.name, "detect_tick": rec.detect_tick,
                                            "sign": rec.sign})
                        if executor is not None:
                            pending = (executor.submit(estimator, window, seed), rec)
                        else:
                            pending = (k + publish_delay, rec, estimator(window, seed))
                        state = rl.DETECTION_ESTIMATING
                if pending is not None:
                    ready = pending[0].done() if executor is not None else k >= pending[0]
                    if ready:
                        residual, report = (pending[0].result() if executor is not None else pending[2])
                        rec = pending[1]
                        published = compose(applied.params, residual)
                        applied = Payload.from_params(published).clamped()
                        rec.publish_tick = k
                        rec.residual = residual.as_vector().tolist()
                        rec.total = published.as_vector().tolist()
                        rec.report = report
                        rec.wall_publish = time.perf_counter()
                        pending = None
                        detector.rearm(clear=True)
                        detector.suppress(k + guard)
                        state = rl.DETECTION_SUPPRESSED
                elif state == rl.DETECTION_SUPPRESSED and k > detector.suppressed_until:
                    state = rl.DETECTION_ARMED

            if record:
                d = log.data
                d["t"][k] = t
                d["q"][k] = q
                d["dq"][k] = dq
                d["x"][k, :3] = pose.position
                d["x"][k, 3:] = log_map(pose.orientation)
                d["xdot"][k] = xdot
                d["tau_c"][k] = cmd.tau_c
                d["tau_hat_c"][k] = cmd.tau_hat_c
                d["tau_ext_true"][k] = tau_ext_true
                d["tau_ext_measured"][k] = tau_meas
                d["theta_true"][k] = true_total.params.as_vector()
                d["theta_hat"][k] = published.as_vector()
                d["detection_state"][k] = state
                d["active_constraints"][k] = sum(1 << i for i in cmd.active_constraint_set)
                d["flagged"][k] = flagged
                d["S"][k] = S
                d["V"][k] = policy.lyapunov(pose)
                d["supply"][k] = supply
                d["tank"][k] = tank.level
            q, dq = q_new, dq_new
        k = ticks
    except SimulationFault as exc:
        fault = {"tick": k, "message": str(exc)}
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    if log is None:
        log = rl.RunLog(n, {})
    else:
        if fault is not None:
            log.truncate(k)
        if len(log) > 1:
            audit = passivity_audit(log["t"], log["S"], log["supply"], log["flagged"].astype(bool))
            log.data["passivity_residual"][:-1] = audit.residual
    log.meta.update({
        "scenario": scenario.config if log_meta else scenario.name,
        "config_hash": scenario.config_hash(),
        "seed": scenario.seed,
        "ticks": len(log) if record else k,
        "detections": detections,
        "estimates": [r.as_dict() for r in records],
        "fault": fault,
        "final_q": q.tolist(),
    })
    log.timing = [r.timing() for r in records]
    log.windows = [r.window for r in records if r.window is not None]
    return log


def _rk4_step(chain, q, dq, tau, dt):
    """Classical RK4 with the commanded torque held over the step."""
    from rme.robot.dynamics import forward_dynamics

    def deriv(qq, vv):
        return vv, forward_dynamics(chain, qq, vv, tau)

    k1q, k1v = deriv(q, dq)
    k2q, k2v = deriv(q + 0.5 * dt * k1q, dq + 0.5 * dt * k1v)
    k3q, k3v = deriv(q + 0.5 * dt * k2q, dq + 0.5 * dt * k2v)
    k4q, k4v = deriv(q + dt * k3q, dq + dt * k3v)
    return (q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q),
            dq + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v))
