import numpy as np
import pytest

from rme.errors import DomainError, SimulationFault
from rme.robot.chain import load_chain, planar_two_link
from rme.robot.dynamics import (
    MismatchParams,
    coriolis_matrix,
    dynamics_terms,
    forward_dynamics,
    inverse_dynamics,
    jacobian,
    mass_matrix,
    mass_matrix_derivative,
    mismatch_basis,
    mismatch_torque,
    mismatch_torque_jacobian,
    pseudo_wrench,
    solve_mass_matrix,
)

sp = pytest.importorskip("sympy")


def _two_link_oracle(m1, m2, l1, l2, g, eps):
    """M, C, G of the planar arm from its Lagrangian, derived symbolically."""
    q1, q2, d1, d2 = sp.symbols("q1 q2 d1 d2")
    q, dq = [q1, q2], [d1, d2]
    p1 = sp.Matrix([l1 * sp.cos(q1), l1 * sp.sin(q1)])
    p2 = p1 + sp.Matrix([l2 * sp.cos(q1 + q2), l2 * sp.sin(q1 + q2)])
    v1 = p1.jacobian(q) * sp.Matrix(dq)
    v2 = p2.jacobian(q) * sp.Matrix(dq)
    T = (m1 * v1.dot(v1) + m2 * v2.dot(v2) + eps * d1**2 + eps * (d1 + d2) ** 2) / 2
    V = g * (m1 * p1[1] + m2 * p2[1])
    M = sp.hessian(T, dq)
    C = sp.zeros(2, 2)
    for k in range(2):
        for j in range(2):
            C[k, j] = sum(
                (sp.diff(M[k, j], q[i]) + sp.diff(M[k, i], q[j]) - sp.diff(M[i, j], q[k])) / 2 * dq[i]
                for i in range(2))
    G = sp.Matrix([sp.diff(V, qi) for qi in q])
    return (sp.lambdify((q1, q2), M, "numpy"), sp.lambdify((q1, q2, d1, d2), C, "numpy"),
            sp.lambdify((q1, q2), G, "numpy"))


@pytest.fixture(scope="module")
def panda():
    return load_chain("panda")


def test_two_link_matches_lagrangian():
    params = dict(m1=1.3, m2=0.7, l1=0.9, l2=0.6)
    chain = planar_two_link(**params, gravity=9.81)
    Mf, Cf, Gf = _two_link_oracle(**params, g=9.81, eps=1e-6)
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, dq = rng.uniform(-np.pi, np.pi, 2), rng.uniform(-3, 3, 2)
        terms = dynamics_terms(chain, q, dq)
        np.testing.assert_allclose(terms.M, Mf(*q), atol=1e-10, rtol=0)
        np.testing.assert_allclose(terms.C, Cf(*q, *dq), atol=1e-10, rtol=0)
        np.testing.assert_allclose(terms.G, np.ravel(Gf(*q)), atol=1e-10, rtol=0)


def test_rnea_equals_m_c_g(panda):
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = rng.uniform(panda.lower, panda.upper)
        dq, ddq = rng.normal(size=(2, 7))
        t = dynamics_terms(panda, q, dq)
        np.testing.assert_allclose(inverse_dynamics(panda, q, dq, ddq), t.M @ ddq + t.C @ dq + t.G,
                                   atol=1e-9)


def test_id_fd_round_trip(panda):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        q = rng.uniform(panda.lower, panda.upper)
        dq, ddq = rng.normal(size=(2, 7))
        tau = inverse_dynamics(panda, q, dq, ddq)
        worst = max(worst, np.abs(forward_dynamics(panda, q, dq, tau) - ddq).max())
    assert worst <= 1e-8


def test_skew_symmetry(panda):
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = rng.uniform(panda.lower, panda.upper)
        dq = rng.normal(size=7)
        Mdot = np.einsum("kij,k->ij", mass_matrix_derivative(panda, q), dq)
        N = Mdot - 2 * coriolis_matrix(panda, q, dq)
        assert np.abs(N + N.T).max() <= 1e-8


def test_mass_matrix_derivative_matches_finite_difference(panda):
    rng = np.random.default_rng(4)
    q = rng.uniform(panda.lower, panda.upper)
    dM = mass_matrix_derivative(panda, q)
    h = 1e-6
    for k in range(7):
        e = np.zeros(7)
        e[k] = h
        fd = (mass_matrix(panda, q + e) - mass_matrix(panda, q - e)) / (2 * h)
        np.testing.assert_allclose(dM[k], fd, atol=1e-7)


def test_jacobian_matches_finite_difference_of_position(panda):
    from rme.robot.dynamics import ee_pose

    q = panda.home + 0.1
    J = jacobian(panda, q)
    h = 1e-7
    for k in range(7):
        e = np.zeros(7)
        e[k] = h
        fd = (ee_pose(panda, q + e).position - ee_pose(panda, q - e).position) / (2 * h)
        np.testing.assert_allclose(J[:3, k], fd, atol=1e-7)


def test_payload_torque_matches_extra_link_mass(panda):
    """A point mass on the EE acts like gravity on that mass through J^T."""
    q = panda.home + 0.05
    theta = MismatchParams(0.8, np.array([0.02, -0.01, 0.1]))
    tau = mismatch_torque(panda, q, theta)
    # Work check: virtual displacement dq moves the payload CoM by Jp(dq).
    from rme.robot.dynamics import ee_pose

    def com(qq):
        pose = ee_pose(panda, qq)
        return pose.position + pose.orientation @ theta.r

    h = 1e-6
    for k in range(7):
        e = np.zeros(7)
        e[k] = h
        dcom = (com(q + e) - com(q - e)) / (2 * h)
        assert tau[k] == pytest.approx(theta.m * panda.gravity @ dcom, abs=1e-7)


def test_mismatch_basis_and_jacobian(panda):
    rng = np.random.default_rng(5)
    qs = rng.uniform(panda.lower, panda.upper, size=(5, 7))
    theta = MismatchParams(1.1, np.array([0.03, 0.04, 0.12]))
    a, B = mismatch_basis(panda, qs)
    for i, q in enumerate(qs):
        np.testing.assert_allclose(theta.m * (a[i] + B[i] @ theta.r), mismatch_torque(panda, q, theta),
                                   atol=1e-12)
        Jt = mismatch_torque_jacobian(panda, q, theta)
        for k in range(4):
            e = np.zeros(4)
            e[k] = 1e-6
            fd = (mismatch_torque(panda, q, MismatchParams.from_vector(theta.as_vector() + e))
                  - mismatch_torque(panda, q, MismatchParams.from_vector(theta.as_vector() - e))) / 2e-6
            np.testing.assert_allclose(Jt[:, k], fd, atol=1e-7)


def test_pseudo_wrench_recovers_ee_wrench(panda):
    q = panda.home
    F = np.array([1.0, -2.0, 3.0, 0.1, 0.2, -0.1])
    J = jacobian(panda, q)
    # vanishing damping inverts J^T exactly; the default damping shrinks along small singular directions
    np.testing.assert_allclose(pseudo_wrench(panda, q, J.T @ F, damping=1e-12), F, atol=1e-8)
    U, s, Vt = np.linalg.svd(J)
    shrunk = U @ (s**2 / (s**2 + 1e-2) * (U.T @ F))
    np.testing.assert_allclose(pseudo_wrench(panda, q, J.T @ F), shrunk, atol=1e-10)
    with pytest.raises(DomainError):
        pseudo_wrench(panda, q, np.zeros(7), damping=0.0)


def test_domain_errors(panda):
    with pytest.raises(DomainError):
        inverse_dynamics(panda, np.zeros(6), np.zeros(7), np.zeros(7))
    with pytest.raises(DomainError):
        inverse_dynamics(panda, np.full(7, np.nan), np.zeros(7), np.zeros(7))
    with pytest.raises(SimulationFault):
        solve_mass_matrix(np.diag([1.0, 0.0]), np.ones(2))
    with pytest.raises(DomainError):
        load_chain("no_such_robot")
