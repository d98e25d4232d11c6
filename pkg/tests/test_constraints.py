"""Constraint solver tests: dense regime-enumeration oracle vs projected
Gauss-Seidel, complementarity/cone invariants, tip state machine, shaft
placement arithmetic and material anchoring."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from needlesim.constraints import (
    BILATERAL,
    ConstraintPoint,
    CoupledSystem,
    InteractionParameters,
    RowMeta,
    RowsBuilder,
    assemble_coupled,
    material_anchor,
    shaft_arclengths,
    solve_constraints,
    update_tip_state,
)
from needlesim.geometry import box_surface
from needlesim.hex_mesh import HexMesh, shape_values


def make_system(W, a0, meta):
    W = np.asarray(W, dtype=float)
    a0 = np.asarray(a0, dtype=float)
    return CoupledSystem(W=W, a0=a0, Js=[], solvers=[], meta=meta,
                         bias=np.zeros(len(a0)))


# ------------------------------------------------------------------ oracle

def regime_enumeration(W, a0, meta, params, caps=None, tol=1e-7):
    """Brute force over regime assignments.  Each regime is a square linear
    system in lambda; a candidate is kept when its inequality side conditions
    hold.  Axial box bounds must be supplied via `caps` (the caller constructs
    cases where the transverse multipliers - and hence the bounds - do not
    depend on the axial regime)."""
    m = len(a0)
    caps = caps or {}
    per_point = []
    for pr in meta.points:
        if pr.kind == "tjunction":
            per_point.append([tuple(("eq", r) for r in pr.rows.values())])
        elif pr.kind == "surface":
            rn, r1, r2 = pr.rows["normal"], pr.rows["t1"], pr.rows["t2"]
            opts = [
                (("lam0", rn), ("lam0", r1), ("lam0", r2)),
                (("eq", rn), ("eq", r1), ("eq", r2)),
            ]
            for s in (1.0, -1.0):
                opts.append((("eq", rn), ("slip", r1, rn, s), ("lam0", r2)))
            per_point.append(opts)
        else:
            ra, r1, r2 = pr.rows["axial"], pr.rows["t1"], pr.rows["t2"]
            per_point.append([
                (("eq", r1), ("eq", r2), ("eq", ra)),
                (("eq", r1), ("eq", r2), ("cap_lo", ra)),
                (("eq", r1), ("eq", r2), ("cap_hi", ra)),
            ])

    candidates = []
    import itertools
    for combo in itertools.product(*per_point):
        E = np.zeros((m, m))
        rhs = np.zeros(m)
        specs = [c for group in combo for c in group]
        for k, spec in enumerate(specs):
            tag, r = spec[0], spec[1]
            if tag == "eq":
                E[k] = W[r]
                rhs[k] = -a0[r]
            elif tag == "lam0":
                E[k, r] = 1.0
            elif tag == "slip":
                _, r, rn, s = spec
                E[k, r] = 1.0
                E[k, rn] = -s * params.friction
            elif tag == "cap_lo":
                E[k, r] = 1.0
                rhs[k] = caps[r][0]
            elif tag == "cap_hi":
                E[k, r] = 1.0
                rhs[k] = caps[r][1]
        try:
            lam = np.linalg.solve(E, rhs)
        except np.linalg.LinAlgError:
            continue
        a = a0 + W @ lam
        ok = True
        for spec in specs:
            tag, r = spec[0], spec[1]
            if tag == "lam0" and meta.kinds[r] == 1:  # separated normal
                ok &= a[r] >= -tol
            elif tag == "eq" and meta.kinds[r] == 1:  # active normal
                ok &= lam[r] >= -tol
            elif tag == "slip":
                _, r, rn, s = spec
                ok &= lam[rn] >= -tol and a[r] * s <= tol
            elif tag == "cap_lo":
                ok &= a[r] >= -tol
            elif tag == "cap_hi":
                ok &= a[r] <= tol
        for pr in meta.points:
            if pr.kind == "surface":
                rn, r1, r2 = pr.rows["normal"], pr.rows["t1"], pr.rows["t2"]
                tmag = np.hypot(lam[r1], lam[r2])
                ok &= tmag <= params.friction * lam[rn] + tol * (1 + abs(lam[rn]))
            elif pr.kind in ("tip", "shaft"):
                ra = pr.rows["axial"]
                lo, hi = caps[ra]
                ok &= lo - tol <= lam[ra] <= hi + tol
        if ok:
            candidates.append(lam)
    return candidates


def assert_matches_oracle(solution, candidates, atol=1e-8):
    assert candidates, "oracle found no consistent regime"
    dists = [np.max(np.abs(solution.lam - c)) for c in candidates]
    assert min(dists) < atol, f"PGS disagrees with all regimes: {dists}"


# ------------------------------------------------- bilateral-only examples

def test_single_point_pin_unit_compliance():
    # A = identity, three rows pinning one node: W = I and each multiplier
    # cancels the free velocity exactly (post-solve velocity zero).
    meta = RowMeta()
    meta.add_point(0, "tjunction")
    n = 6
    builder = RowsBuilder([n])
    for axis in range(3):
        builder.add(0, axis, axis, 1.0)
    J = builder.matrices(3)[0]
    v_free = np.array([0.3, -0.2, 0.5, 1.0, 2.0, 3.0])
    solvers = [lambda b: b.copy()]
    sys = assemble_coupled(solvers, [J], [v_free], np.zeros(3), meta)
    assert np.allclose(sys.W, np.eye(3))
    sol = solve_constraints(sys, InteractionParameters())
    assert np.allclose(sol.lam, -v_free[:3], atol=1e-12)
    v_post = v_free + sol.corrections[0]
    assert np.allclose(v_post[:3], 0.0, atol=1e-12)
    assert np.allclose(v_post[3:], v_free[3:])


def test_disjoint_points_give_block_diagonal_compliance():
    rng = np.random.default_rng(3)
    masses = rng.uniform(1.0, 3.0, 12)
    A = np.diag(masses)
    meta = RowMeta()
    meta.add_point(0, "tjunction")
    meta.add_point(1, "tjunction")
    builder = RowsBuilder([12])
    # first point ties node 0 to node 1, second pins node 3
    for axis in range(3):
        builder.add(0, axis, axis, 1.0)
        builder.add(0, axis, 3 + axis, -1.0)
        builder.add(0, 3 + axis, 9 + axis, 1.0)
    J = builder.matrices(6)[0]
    v_free = rng.normal(size=12)
    sys = assemble_coupled([lambda b: np.linalg.solve(A, b)], [J], [v_free],
                           np.zeros(6), meta)
    W_oracle = np.asarray(J @ np.linalg.inv(A) @ J.T)
    assert np.allclose(sys.W, W_oracle, atol=1e-12)
    assert np.allclose(sys.W[:3, 3:], 0.0)
    sol = solve_constraints(sys, InteractionParameters())
    assert np.max(np.abs(sol.a)) < 1e-9
    v_post = v_free + sol.corrections[0]
    assert np.allclose(v_post[:3] - v_post[3:6], 0.0, atol=1e-9)
    assert np.allclose(v_post[9:], 0.0, atol=1e-9)


def test_rank_deficient_bilateral_block_is_regularized():
    meta = RowMeta()
    meta.add_point(0, "tjunction")
    meta.add_point(1, "tjunction")
    builder = RowsBuilder([6])
    for axis in range(3):          # identical rows twice -> singular W_BB
        builder.add(0, axis, axis, 1.0)
        builder.add(0, 3 + axis, axis, 1.0)
    J = builder.matrices(6)[0]
    v_free = np.array([1.0, -2.0, 0.5, 0, 0, 0])
    sys = assemble_coupled([lambda b: b.copy()], [J], [v_free], np.zeros(6), meta)
    sol = solve_constraints(sys, InteractionParameters())
    assert sol.regularized
    assert np.max(np.abs(sol.a)) < 1e-4
    v_post = v_free + sol.corrections[0]
    assert np.allclose(v_post[:3], 0.0, atol=1e-4)


# ------------------------------------------------------------ contact cases

def test_penetrating_contact_closes_gap():
    # Free motion carries the point 1 mm through the surface; the normal
    # multiplier must be positive and the post-solve row value (gap rate
    # plus stabilisation) zero.
    meta = RowMeta()
    meta.add_point(0, "surface")
    tau = 0.01
    gap = -1e-3
    W = np.eye(3) * 2.0
    a0 = np.array([-0.05 + gap / tau, 0.0, 0.0])
    params = InteractionParameters(friction=0.0)
    sol = solve_constraints(make_system(W, a0, meta), params, tol=1e-12)
    assert sol.lam[0] > 0
    assert abs(sol.a[0]) < 1e-10          # post-step gap = tau * a = 0
    assert np.allclose(sol.lam[1:], 0.0)
    cands = regime_enumeration(W, a0, meta, params)
    assert_matches_oracle(sol, cands)


def test_separating_contact_is_inactive():
    meta = RowMeta()
    meta.add_point(0, "surface")
    W = np.eye(3)
    a0 = np.array([0.3, 0.1, -0.2])       # already separating
    params = InteractionParameters(friction=0.5)
    sol = solve_constraints(make_system(W, a0, meta), params, tol=1e-12)
    assert np.allclose(sol.lam, 0.0, atol=1e-12)
    cands = regime_enumeration(W, a0, meta, params)
    assert_matches_oracle(sol, cands)


@pytest.mark.parametrize("tangential_speed,expect_state",
                         [(0.01, "stick"), (0.6, "slip")])
def test_contact_friction_regimes_match_enumeration(tangential_speed, expect_state):
    meta = RowMeta()
    meta.add_point(0, "surface")
    # t2 decoupled with zero drive so slip happens along t1 only.
    W = np.array([[1.5, 0.2, 0.0],
                  [0.2, 1.1, 0.0],
                  [0.0, 0.0, 1.0]])
    a0 = np.array([-1.0, tangential_speed, 0.0])
    params = InteractionParameters(friction=0.4)
    sol = solve_constraints(make_system(W, a0, meta), params, tol=1e-12,
                            max_iter=2000)
    cands = regime_enumeration(W, a0, meta, params)
    assert_matches_oracle(sol, cands)
    tmag = np.hypot(sol.lam[1], sol.lam[2])
    if expect_state == "stick":
        assert abs(sol.a[1]) < 1e-9 and abs(sol.a[2]) < 1e-9
        assert tmag < params.friction * sol.lam[0] - 1e-6
    else:
        assert np.isclose(tmag, params.friction * sol.lam[0], atol=1e-9)
        assert sol.a[1] * sol.lam[1] <= 1e-12   # friction opposes slip


def test_random_contact_cases_match_enumeration():
    rng = np.random.default_rng(11)
    params = InteractionParameters(friction=0.35)
    for _ in range(25):
        w = rng.uniform(0.5, 2.0, 3)
        c = rng.uniform(-0.3, 0.3)
        W = np.array([[w[0], c, 0.0], [c, w[1], 0.0], [0.0, 0.0, w[2]]])
        if np.linalg.eigvalsh(W).min() < 0.05:
            continue
        meta = RowMeta()
        meta.add_point(0, "surface")
        a0 = np.array([rng.uniform(-1.5, 0.5), rng.uniform(-1.0, 1.0), 0.0])
        sol = solve_constraints(make_system(W, a0, meta), params, tol=1e-12,
                                max_iter=5000)
        cands = regime_enumeration(W, a0, meta, params)
        assert_matches_oracle(sol, cands)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3),
       st.integers(0, 10**6))
def test_contact_kkt_invariants(a0_list, seed):
    # Full 3x3 coupling allowed: invariants must hold regardless of regime.
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(3, 3))
    W = R @ R.T + 0.5 * np.eye(3)
    meta = RowMeta()
    meta.add_point(0, "surface")
    a0 = np.asarray(a0_list)
    params = InteractionParameters(friction=0.3)
    sol = solve_constraints(make_system(W, a0, meta), params, tol=1e-11,
                            max_iter=5000)
    lam_n, a_n = sol.lam[0], sol.a[0]
    assert lam_n >= -1e-12
    assert a_n >= -1e-7
    assert abs(lam_n * a_n) < 1e-7
    assert np.hypot(sol.lam[1], sol.lam[2]) <= params.friction * lam_n + 1e-8


# --------------------------------------------------------- axial box cases

def tip_case(a0_axial, params):
    meta = RowMeta()
    meta.add_point(0, "tip")
    W = np.eye(3)
    a0 = np.array([a0_axial, 0.3, -0.4])
    sol = solve_constraints(make_system(W, a0, meta), params, tol=1e-12)
    # transverse bilateral: lam_t = -a0_t -> magnitude 0.5
    assert np.allclose(sol.lam[1:], [-0.3, 0.4], atol=1e-10)
    return sol, W, a0, meta


def test_tip_axial_cap_is_asymmetric():
    params = InteractionParameters(friction=0.2, cutting_strength=0.1)
    lo, hi = -(0.2 * 0.5 + 0.1), 0.2 * 0.5   # -0.2 / +0.1

    sol, W, a0, meta = tip_case(2.0, params)     # strong advance demand
    assert np.isclose(sol.lam[0], lo, atol=1e-9)
    assert sol.a[0] > 0                          # tip cuts forward
    caps = {0: (lo, hi)}
    assert_matches_oracle(sol, regime_enumeration(W, a0, meta, params, caps))

    sol, W, a0, meta = tip_case(-2.0, params)    # strong retraction demand
    assert np.isclose(sol.lam[0], hi, atol=1e-9)
    assert sol.a[0] < 0                          # slides out against friction
    assert_matches_oracle(sol, regime_enumeration(W, a0, meta, params, caps))

    sol, W, a0, meta = tip_case(0.05, params)    # small demand: sticks
    assert np.isclose(sol.lam[0], -0.05, atol=1e-9)
    assert abs(sol.a[0]) < 1e-10
    assert_matches_oracle(sol, regime_enumeration(W, a0, meta, params, caps))


def test_shaft_axial_friction_box_is_symmetric():
    params = InteractionParameters(friction=0.2, cutting_strength=0.1)
    meta = RowMeta()
    meta.add_point(0, "shaft")
    W = np.eye(3)
    cap = 0.2 * 0.5
    for a_ax, expect in [(2.0, -cap), (-2.0, cap), (0.05, -0.05)]:
        a0 = np.array([a_ax, 0.3, -0.4])
        sol = solve_constraints(make_system(W, a0, meta), params, tol=1e-12)
        assert np.isclose(sol.lam[0], expect, atol=1e-9)
        caps = {0: (-cap, cap)}
        assert_matches_oracle(sol, regime_enumeration(W, a0, meta, params, caps))


def test_six_row_mixed_system_matches_enumeration():
    # One pin (bilateral block) + one frictional contact, coupled through a
    # shared dense inverse mass: exercises the elimination path end to end.
    rng = np.random.default_rng(7)
    n = 9
    R = rng.normal(size=(n, n))
    A = R @ R.T + n * np.eye(n)
    meta = RowMeta()
    meta.add_point(0, "tjunction")
    meta.add_point(1, "surface")
    builder = RowsBuilder([n])
    for axis in range(3):
        builder.add(0, axis, axis, 1.0)
    frame = np.eye(3)
    for k in range(3):
        for d in range(3):
            if frame[k, d]:
                builder.add(0, 3 + k, 3 + d, frame[k, d])
    J = builder.matrices(6)[0]
    v_free = rng.normal(size=n)
    bias = np.array([0, 0, 0, -0.5, 0, 0.0])
    sys = assemble_coupled([lambda b: np.linalg.solve(A, b)], [J], [v_free],
                           bias, meta)
    # decouple t2 for the oracle's slip enumeration
    sys.W[5, :5] = sys.W[:5, 5] = 0.0
    sys.a0[5] = 0.0
    params = InteractionParameters(friction=0.4)
    sol = solve_constraints(sys, params, tol=1e-12, max_iter=5000)
    cands = regime_enumeration(sys.W, sys.a0, meta, params)
    assert_matches_oracle(sol, cands)
    assert np.max(np.abs(sol.a[:3])) < 1e-9     # bilateral exactly satisfied


def test_action_reaction_conserves_momentum():
    # Needle node tied to a tissue point: equal and opposite impulses.
    m_n, m_t = 0.02, 0.5
    n_needle, n_tissue = 6, 24
    meta = RowMeta()
    meta.add_point(0, "tjunction")
    builder = RowsBuilder([n_needle, n_tissue])
    w = shape_values(np.array([0.25, 0.5, 0.75]))
    for axis in range(3):
        builder.add(0, axis, axis, 1.0)                   # needle side +
        for i in range(8):
            builder.add(1, axis, 3 * i + axis, -w[i])     # tissue side -
    Jn, Jt = builder.matrices(3)
    rng = np.random.default_rng(5)
    vn = rng.normal(size=n_needle)
    vt = rng.normal(size=n_tissue)
    sys = assemble_coupled([lambda b: b / m_n, lambda b: b / m_t],
                           [Jn, Jt], [vn, vt], np.zeros(3), meta)
    sol = solve_constraints(sys, InteractionParameters())
    p_needle = m_n * sol.corrections[0].reshape(-1, 3).sum(axis=0)
    p_tissue = m_t * sol.corrections[1].reshape(-1, 3).sum(axis=0)
    assert np.allclose(p_needle + p_tissue, 0.0, atol=1e-12)
    # relative velocity of the attached points is zero afterwards
    v_rel = Jn @ (vn + sol.corrections[0]) + Jt @ (vt + sol.corrections[1])
    assert np.allclose(v_rel, 0.0, atol=1e-10)


# ------------------------------------------------------- tip state machine

def test_tip_state_puncture_threshold():
    p = InteractionParameters(puncture_strength=0.01)
    assert update_tip_state("on_surface", 0.005, 0.0, p)[0] == "on_surface"
    state, motion = update_tip_state("on_surface", 0.02, 0.0, p)
    assert state == "inserted" and motion == "cutting"


def test_tip_state_cutting_threshold():
    p = InteractionParameters(friction=0.3, cutting_strength=0.05)
    # threshold = 0.3 * 0.1 + 0.05 = 0.08
    assert update_tip_state("inserted", 0.04, 0.1, p)[1] == "sticking"
    assert update_tip_state("inserted", 0.09, 0.1, p)[1] == "cutting"


def test_tip_state_zero_thresholds_always_cut():
    p = InteractionParameters(friction=0.0, cutting_strength=0.0)
    for lam in (1e-6, 0.01, 5.0):
        assert update_tip_state("inserted", lam, 0.3, p)[1] == "cutting"


def test_tip_state_surface_slide_vs_stick():
    p = InteractionParameters(friction=0.5, puncture_strength=1.0)
    assert update_tip_state("on_surface", 0.1, 0.01, p)[1] == "sticking"
    assert update_tip_state("on_surface", 0.1, 0.05, p)[1] == "sliding"


def test_free_state_is_inert():
    assert update_tip_state("free", 0.0, 0.0, InteractionParameters()) == \
        ("free", "inactive")


# ----------------------------------------------------------- shaft spacing

def test_shaft_point_count_example():
    s = shaft_arclengths(0.01, 0.002)
    assert len(s) == 5
    assert np.allclose(np.diff(s), 0.002)
    assert s[0] == pytest.approx(0.001)
    assert s[-1] == pytest.approx(0.009)   # strictly behind the tip


def test_shaft_point_count_grows_with_depth():
    counts = [len(shaft_arclengths(d, 0.002)) for d in np.linspace(0, 0.02, 41)]
    assert counts[0] == 0
    assert all(b - a in (0, 1) for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 10


def test_shaft_points_empty_below_one_spacing():
    assert len(shaft_arclengths(0.0019, 0.002)) == 0
    assert len(shaft_arclengths(0.0, 0.002)) == 0


# ------------------------------------------------------- material anchoring

def test_material_anchor_round_trip():
    mesh = HexMesh.voxelize_domain(box_surface((0, 0, 0), (0.02, 0.01, 0.01)),
                                   (4, 2, 2))
    rest = mesh.nodes

    def displacement(p):
        s = p / 0.02
        return 0.0002 * np.stack([np.sin(3 * s[:, 0] + 1),
                                  np.cos(2 * s[:, 1]),
                                  np.sin(s[:, 2] + 0.5)], axis=1)

    x = rest + displacement(rest)
    eid0 = mesh.active_element_ids()[3]
    xi0 = np.array([0.3, 0.6, 0.2])
    ids = mesh.elements[eid0].node_ids
    world = shape_values(xi0) @ x[ids]

    eid, xi, ok = material_anchor(mesh, x, world)
    assert ok
    back = shape_values(xi) @ x[mesh.elements[eid].node_ids]
    assert np.linalg.norm(back - world) < 1e-9


def test_material_anchor_rigid_mesh_is_exact():
    mesh = HexMesh.voxelize_domain(box_surface((0, 0, 0), (0.02, 0.02, 0.02)),
                                   (2, 2, 2))
    p = np.array([0.013, 0.007, 0.011])
    eid, xi, ok = material_anchor(mesh, mesh.nodes, p)
    assert ok
    assert np.allclose(mesh.world_position(eid, xi), p, atol=1e-12)


# -------------------------------------------------------------- parameters

def test_interaction_parameters_validation():
    with pytest.raises(ValueError):
        InteractionParameters(friction=-0.1)
    with pytest.raises(ValueError):
        InteractionParameters(shaft_spacing=0.0)
    with pytest.raises(ValueError):
        InteractionParameters(puncture_strength=-1.0)
