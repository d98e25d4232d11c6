"""Backward Euler stepping, Dirichlet handling, static solves."""
import numpy as np
import pytest
from scipy import sparse

from needlesim.geometry import box_surface
from needlesim.hex_fem import CorotationalFem, Material
from needlesim.hex_mesh import HexMesh
from needlesim.integrator import (
    StepError,
    assemble_system,
    commit_step,
    kinetic_energy,
    solve_free_motion,
    static_solve,
)

MAT = Material(young_modulus=1e6, poisson_ratio=0.3, density=1000.0)


def box_fem(size=(2.0, 2.0, 2.0), resolution=(2, 2, 2), material=MAT):
    mesh = HexMesh.voxelize_domain(box_surface((0, 0, 0), size), resolution)
    return mesh, CorotationalFem(mesh, material)


def zeros_K(n):
    return sparse.csr_matrix((n, n))


# ------------------------------------------------------------ linear algebra

def test_explicit_limit_without_stiffness():
    M = np.array([2.0, 4.0, 8.0])
    f = np.array([1.0, -2.0, 4.0])
    sysm = assemble_system(M, zeros_K(3), f, np.zeros(3), tau=0.01)
    dv = solve_free_motion(sysm)
    assert dv == pytest.approx(0.01 * f / M, rel=1e-14)


def test_scalar_mass_spring_closed_form():
    # m = 1, k = 1, c = 0, tau = 0.01, x displaced by 1, v = 0:
    # dv = -tau k x / (m + tau^2 k).
    tau, k, x = 0.01, 1.0, 1.0
    K = sparse.csr_matrix(np.array([[k]]))
    f = np.array([-k * x])
    sysm = assemble_system(np.array([1.0]), K, f, np.zeros(1), tau)
    dv = solve_free_motion(sysm)
    closed = -tau * k * x / (1.0 + tau * tau * k)
    assert dv[0] == pytest.approx(closed, abs=1e-12)
    assert dv[0] == pytest.approx(-0.0099990001, abs=1e-10)


def test_equilibrium_is_stationary():
    K = sparse.csr_matrix(np.diag([2.0, 3.0]))
    sysm = assemble_system(np.ones(2), K, np.zeros(2), np.zeros(2), 0.01,
                           alpha=0.1, beta=0.1)
    assert solve_free_motion(sysm) == pytest.approx(np.zeros(2), abs=1e-15)


def test_random_spd_system_matches_dense_oracle():
    rng = np.random.default_rng(33)
    B = rng.standard_normal((50, 50))
    Kd = B @ B.T + 50 * np.eye(50)
    M = rng.uniform(1, 2, 50)
    f = rng.standard_normal(50)
    v = rng.standard_normal(50)
    tau = 0.02
    sysm = assemble_system(M, sparse.csr_matrix(Kd), f, v, tau, alpha=0.05, beta=0.01)
    dv = solve_free_motion(sysm)
    A = np.diag(M * (1 + tau * 0.05)) + (tau * 0.01 + tau ** 2) * Kd
    b = tau * f - tau ** 2 * (Kd @ v)
    assert dv == pytest.approx(np.linalg.solve(A, b), rel=1e-10)


def test_zero_rhs_gives_zero_update():
    K = sparse.csr_matrix(np.eye(4))
    sysm = assemble_system(np.ones(4), K, np.zeros(4), np.zeros(4), 0.01)
    assert solve_free_motion(sysm) == pytest.approx(np.zeros(4))


# ----------------------------------------------------------------- stepping

def test_commit_updates_position_with_new_velocity():
    x, v = np.zeros(3), np.zeros(3)
    x, v = commit_step(x, v, np.array([1.0, 0, 0]), 0.01)
    assert x == pytest.approx([0.01, 0, 0])
    x, v = commit_step(x, v, np.zeros(3), 0.01)
    assert x == pytest.approx([0.02, 0, 0])


def test_commit_rejects_non_finite():
    with pytest.raises(StepError):
        commit_step(np.zeros(1), np.zeros(1), np.array([np.nan]), 0.01)


def test_free_fall_matches_scalar_recurrence():
    g = -9.81
    tau = 0.01
    M = np.array([3.0])
    x = np.array([0.0])
    v = np.array([0.0])
    xs, vs = 0.0, 0.0
    for _ in range(100):
        sysm = assemble_system(M, zeros_K(1), M * g, v, tau)
        dv = solve_free_motion(sysm)
        x, v = commit_step(x, v, dv, tau)
        vs = vs + tau * g
        xs = xs + tau * vs
    assert v[0] == pytest.approx(vs, abs=1e-12)
    assert x[0] == pytest.approx(xs, abs=1e-12)


def test_one_step_consistency_is_second_order():
    # Harmonic oscillator: one-step error vs the exact flow shrinks ~4x
    # when tau is halved.
    def one_step_error(tau):
        x, v = np.array([1.0]), np.array([0.0])
        K = sparse.csr_matrix([[1.0]])
        sysm = assemble_system(np.ones(1), K, -x, v, tau)
        x, v = commit_step(x, v, solve_free_motion(sysm), tau)
        return abs(x[0] - np.cos(tau))

    r = one_step_error(0.01) / one_step_error(0.005)
    assert 3.0 < r < 5.0


# ------------------------------------------------------- Dirichlet handling

def test_prescribed_velocity_enforced_exactly():
    mesh, fem = box_fem()
    n = fem.n_dofs
    M = fem.lumped_mass()
    x = mesh.nodes.ravel().copy()
    v = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    drive = np.flatnonzero(mesh.nodes[:, 0] < 1e-12)
    fixed[3 * drive] = True       # x-components of the left face
    target = 0.002
    for _ in range(3):
        f_int, K, _ = fem.forces_and_tangent(x)
        C = 0.1 * sparse.diags(M) + 0.1 * K
        f = -f_int - C @ v
        pres = np.zeros(n)
        pres[fixed] = target - v[fixed]
        sysm = assemble_system(M, K, f, v, 0.01, alpha=0.1, beta=0.1,
                               fixed=fixed, prescribed_dv=pres)
        dv = solve_free_motion(sysm)
        x, v = commit_step(x, v, dv, 0.01)
        assert v[fixed] == pytest.approx(np.full(fixed.sum(), target), abs=1e-14)


def test_unforced_steps_dissipate_energy():
    mesh, fem = box_fem()
    n = fem.n_dofs
    M = fem.lumped_mass()
    rng = np.random.default_rng(9)
    x = mesh.nodes.ravel() + 1e-4 * rng.standard_normal(n)
    v = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    clamp = np.flatnonzero(mesh.nodes[:, 2] < 1e-12)
    fixed[(3 * clamp[:, None] + np.arange(3)).ravel()] = True
    x[fixed] = mesh.nodes.ravel()[fixed]
    prev = None
    for _ in range(200):
        f_int, K, R = fem.forces_and_tangent(x)
        C = 0.1 * sparse.diags(M) + 0.1 * K
        f = -f_int - C @ v
        sysm = assemble_system(M, K, f, v, 0.01, alpha=0.1, beta=0.1, fixed=fixed)
        x, v = commit_step(x, v, solve_free_motion(sysm), 0.01)
        e = kinetic_energy(M, v) + fem.elastic_energy(x)
        if prev is not None:
            assert e <= prev + 1e-10
        prev = e


# -------------------------------------------------------------- static solve

def test_static_solve_reproduces_affine_field():
    mesh, fem = box_fem()
    A = 1e-3 * np.array([[0.5, 0.2, 0.0], [0.2, -0.3, 0.1], [0.0, 0.1, 0.4]])
    u_affine = (mesh.nodes @ A.T).ravel()
    boundary = np.flatnonzero(
        np.any((mesh.nodes < 1e-12) | (mesh.nodes > 2 - 1e-12), axis=1))
    fixed = np.zeros(fem.n_dofs, dtype=bool)
    fixed[(3 * boundary[:, None] + np.arange(3)).ravel()] = True
    x = static_solve(fem, np.zeros(fem.n_dofs), fixed, prescribed_u=u_affine)
    u = x - mesh.nodes.ravel()
    assert np.linalg.norm(u - u_affine) <= 1e-9 * np.linalg.norm(u_affine)


def test_static_solve_with_t_junctions_keeps_continuity():
    mesh, fem = box_fem(resolution=(2, 1, 1), size=(2.0, 1.0, 1.0))
    mesh.refine_element(1)
    mesh.detect_t_junctions()
    fem.refresh_topology()
    T = mesh.build_t_matrix()
    fixed = np.zeros(fem.n_dofs, dtype=bool)
    clamp = np.flatnonzero(mesh.nodes[:, 0] < 1e-12)
    fixed[(3 * clamp[:, None] + np.arange(3)).ravel()] = True
    f_ext = np.zeros(fem.n_dofs)
    pull = np.flatnonzero(mesh.nodes[:, 0] > 2 - 1e-12)
    f_ext[3 * pull] = 0.5
    x = static_solve(fem, f_ext, fixed, T=T)
    u = x - mesh.nodes.ravel()
    for j in mesh.flattened_t_junctions():
        us = u.reshape(-1, 3)[j.slave]
        um = np.array(j.weights) @ u.reshape(-1, 3)[j.masters]
        assert np.linalg.norm(us - um) <= 1e-8
    # The loaded face actually moved.
    assert u.reshape(-1, 3)[pull, 0].min() > 1e-9
