import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TS, small_problem
from momploc.errors import ConfigError
from momploc.geometry import Direction, PulseShape, UraGeometry, axis_steering, ura_steering
from momploc.momp import (
    MompConfig,
    MompEntry,
    SparseChannelEstimate,
    atom_norms,
    build_dictionaries,
    build_measurement,
    composite_atom,
    compress_columns,
    default_grids,
    model_observation,
    momp_solve,
    refine_support,
    residual_model,
    snap_grid,
)
from momploc.scene import PathOrder, PathParams
from momploc.sounding import (
    PilotSequence,
    channel_from_paths,
    make_codebooks,
    stacked_combiner,
    synthesize_observation,
    whiten_combiners,
)


def kron_dictionary(prob):
    """Explicit measured Kronecker dictionary, columns in (j1, j2, j3) C order."""
    psi = prob["psi"]
    n1, n2, n3 = psi.shape
    cols = [composite_atom(psi, (a, b, c)).ravel() for a in range(n1) for b in range(n2) for c in range(n3)]
    return prob["phi"].dense() @ np.array(cols).T


def exhaustive_omp(y, a, n_paths, stop_fraction=1e-3):
    """Textbook OMP over the full dictionary (normalized correlations, LS refit)."""
    norms = np.sum(np.abs(a) ** 2, axis=0)
    y2 = np.vdot(y, y).real
    support, r = [], y.copy()
    while len(support) < n_paths and np.vdot(r, r).real > stop_fraction * y2:
        score = np.sum(np.abs(a.conj().T @ r) ** 2, axis=1) / norms
        score[support] = -np.inf
        # ties (within 1e-9 relative) go to the lowest index
        support.append(int(np.flatnonzero(score >= score.max() * (1 - 1e-9))[0]))
        b, *_ = np.linalg.lstsq(a[:, support], y, rcond=None)
        r = y - a[:, support] @ b
    return support


def random_sparse(rng, prob, k, n_o):
    psi = prob["psi"]
    n1, n2, n3 = psi.shape
    flat = rng.choice(n1 * n2 * n3, size=k, replace=False)
    js = [tuple(int(v) for v in np.unravel_index(f, (n1, n2, n3))) for f in flat]
    betas = rng.standard_normal((k, n_o)) + 1j * rng.standard_normal((k, n_o))
    y = sum(prob["phi"].apply(composite_atom(psi, j)[:, :, None]) * b[None, :] for j, b in zip(js, betas))
    return js, betas, y


@pytest.mark.parametrize("seed", range(10, 20))
def test_matches_exhaustive_omp(seed):
    rng = np.random.default_rng([seed, 1])
    prob = small_problem(seed=seed)
    a = kron_dictionary(prob)
    assert a.shape[1] <= 4096
    js, _, y = random_sparse(rng, prob, 2, 8)
    est = momp_solve(y, prob["phi"], prob["psi"], n_paths=4)
    flat_est = [int(np.ravel_multi_index(e.index, prob["psi"].shape)) for e in est.entries]
    assert flat_est == exhaustive_omp(y, a, 4)


def test_dictionary_examples():
    g = UraGeometry(4, 2)
    pulse = PulseShape(TS)
    gx = np.array([-0.5, 0.0, 0.25])
    gt = np.array([0.0, TS, 2.5 * TS, 3 * TS])
    psi = build_dictionaries(g, 5, pulse, (gx, np.array([0.0, 0.5]), gt))
    np.testing.assert_allclose(psi.psi1[:, 1], np.ones(4))
    for j, u in enumerate(gx):
        np.testing.assert_allclose(psi.psi1[:, j], np.conj(axis_steering(4, u)))
    np.testing.assert_allclose(psi.psi3[:, 1], [0, 1, 0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(psi.psi3[:, 3], [0, 0, 0, 1, 0], atol=1e-15)
    assert psi.shape == (3, 2, 4)
    with pytest.raises(ConfigError):
        build_dictionaries(g, 5, pulse, (gx, np.array([]), gt))


def test_default_grids():
    gx, gy, gt = default_grids(UraGeometry(4, 8), 64, TS)
    assert gx.size == 8 and gy.size == 16 and gt.size == 256
    assert gx[0] == -1.0 and gx[-1] < 1.0
    assert gt[4] == pytest.approx(TS)


def test_measurement_entry_formula(rng):
    prob = small_problem()
    phi, pilots, cb = prob["phi"], prob["pilots"], prob["cb"]
    dense = phi.dense()
    n_y = prob["geom_t"].n_y
    for _ in range(30):
        mt, q = rng.integers(cb.m_t), rng.integers(pilots.q)
        i1, i2, i3 = rng.integers(2), rng.integers(2), rng.integers(4)
        s = pilots.s[q - i3] if q - i3 >= 0 else np.zeros(pilots.n_rf)
        expected = (cb.f[mt] @ s)[i1 * n_y + i2]
        assert phi.entry(mt, q, i1, i2, i3) == pytest.approx(expected, abs=1e-15)
        col = (i1 * n_y + i2) * phi.n_taps + i3
        assert dense[pilots.q * mt + q, col] == pytest.approx(expected, abs=1e-15)


def test_measurement_zero_pilots():
    cb = make_codebooks(4, 2, 2, 4, 2, 2)
    phi = build_measurement(cb, PilotSequence(np.zeros((8, 2), dtype=complex)), 3, UraGeometry(2, 2))
    assert not np.any(phi.dense())


def test_measurement_single_symbol():
    cb = make_codebooks(4, 1, 1, 4, 1, 1, seed=2)
    s = PilotSequence(np.array([[1.5 - 0.5j]]))
    phi = build_measurement(cb, s, 3, UraGeometry(2, 2))
    dense = phi.dense().reshape(4, 3)
    np.testing.assert_allclose(dense[:, 0], cb.f[0][:, 0] * s.s[0, 0])
    assert not np.any(dense[:, 1:])


def test_apply_adjoint_consistent(rng):
    phi = small_problem()["phi"]
    dense = phi.dense()
    x = rng.standard_normal((4, 4, 3)) + 1j * rng.standard_normal((4, 4, 3))
    np.testing.assert_allclose(phi.apply(x), dense @ x.reshape(16, 3), atol=1e-13)
    r = rng.standard_normal((phi.n_rows, 5)) + 1j * rng.standard_normal((phi.n_rows, 5))
    np.testing.assert_allclose(phi.adjoint(r).reshape(16, 5), dense.conj().T @ r, atol=1e-13)


def test_atom_norms_match_dense():
    prob = small_problem()
    a = kron_dictionary(prob)
    np.testing.assert_allclose(atom_norms(prob["phi"], prob["psi"]).ravel(), np.sum(np.abs(a) ** 2, axis=0), rtol=1e-12)


def test_model_consistency_small(rng):
    prob = small_problem(n_r=(2, 2))
    psi, phi, cb = prob["psi"], prob["phi"], prob["cb"]
    # on-grid directions: local DoD components from the grids with non-negative z
    paths, betas, idx = [], [], []
    w = stacked_combiner(whiten_combiners(cb.w))
    for j in [(1, 2, 3), (2, 1, 6), (3, 3, 0)]:
        ux, uy, tau = psi.grid_x[j[0]], psi.grid_y[j[1]], psi.grid_tau[j[2]]
        dod = Direction.from_vector([ux, uy, np.sqrt(1 - ux * ux - uy * uy)])
        doa = Direction.from_vector(rng.standard_normal(3))
        alpha = complex(rng.standard_normal(), rng.standard_normal())
        paths.append(PathParams(alpha, doa, dod, tau + 2e-9, PathOrder.FIRST))
        betas.append(alpha * w.conj().T @ ura_steering(prob["geom_r"], doa))
        idx.append(j)
    ch = channel_from_paths(paths, prob["geom_t"], prob["geom_r"], 4, prob["pulse"], 2e-9)
    y = synthesize_observation(ch, cb, prob["pilots"], 0.0).y
    est = SparseChannelEstimate([MompEntry(*j, beta=b) for j, b in zip(idx, betas)], 0.0)
    model = model_observation(phi, psi, est, y.shape[1])
    assert np.linalg.norm(y - model) <= 1e-9 * np.linalg.norm(y)
    assert residual_model(y, phi, psi, est) <= 1e-12 * np.vdot(y, y).real


def test_single_path_exact(rng):
    prob = small_problem()
    js, betas, y = random_sparse(rng, prob, 1, 8)
    est = momp_solve(y, prob["phi"], prob["psi"])
    assert [e.index for e in est.entries] == js
    assert np.linalg.norm(est.entries[0].beta - betas[0]) <= 1e-6 * np.linalg.norm(betas[0])
    assert est.residual_norm <= 1e-12 * np.vdot(y, y).real


def test_zero_observation():
    prob = small_problem()
    est = momp_solve(np.zeros((prob["phi"].n_rows, 8), dtype=complex), prob["phi"], prob["psi"])
    assert est.entries == [] and est.residual_norm == 0.0
    assert residual_model(np.zeros((prob["phi"].n_rows, 8)), prob["phi"], prob["psi"], est) == 0.0


def test_input_validation():
    prob = small_problem()
    with pytest.raises(ConfigError):
        momp_solve(np.ones((3, 2)), prob["phi"], prob["psi"])
    with pytest.raises(ConfigError):
        momp_solve(np.ones((prob["phi"].n_rows, 2)), prob["phi"], prob["psi"], n_paths=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.floats(0.0, 0.5))
def test_residual_monotone_and_consistent(seed, k, noise):
    rng = np.random.default_rng(seed)
    prob = small_problem()
    _, _, y = random_sparse(rng, prob, k, 8)
    y = y + noise * np.linalg.norm(y) / np.sqrt(y.size) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    est = momp_solve(y, prob["phi"], prob["psi"], n_paths=6)
    tr = np.array(est.trace)
    assert tr[0] == pytest.approx(np.vdot(y, y).real)
    assert np.all(np.diff(tr) <= 1e-9 * tr[0])
    assert len(est.entries) <= 6
    assert len({e.index for e in est.entries}) == len(est.entries)
    # reported misfit is the model misfit at the returned estimate
    assert residual_model(y, prob["phi"], prob["psi"], est) == pytest.approx(est.residual_norm, rel=1e-8, abs=1e-12 * tr[0])
    empty = SparseChannelEstimate([], 0.0)
    assert residual_model(y, prob["phi"], prob["psi"], empty) == pytest.approx(tr[0])


def test_ls_optimality(rng):
    prob = small_problem()
    phi, psi = prob["phi"], prob["psi"]
    _, _, y = random_sparse(rng, prob, 3, 8)
    y = y + 0.1 * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    est = momp_solve(y, phi, psi, n_paths=5)
    r = y - model_observation(phi, psi, est, y.shape[1])
    for e in est.entries:
        atom = phi.apply(composite_atom(psi, e.index)[:, :, None])[:, 0]
        corr = np.abs(atom.conj() @ r) / (np.linalg.norm(atom) * np.linalg.norm(y))
        assert corr.max() <= 1e-8


def test_duplicate_atoms_suppressed(rng):
    prob = small_problem()
    g = prob["psi"]
    gx = np.concatenate([g.grid_x, g.grid_x[:1]])  # last atom duplicates the first
    psi = build_dictionaries(prob["geom_t"], 4, prob["pulse"], (gx, g.grid_y, g.grid_tau))
    y = sum(prob["phi"].apply(composite_atom(psi, j)[:, :, None]) * rng.standard_normal(8)[None, :]
            for j in [(0, 1, 2), (2, 3, 5)])
    y = y + 0.05 * rng.standard_normal(y.shape)
    est = momp_solve(y, prob["phi"], psi, n_paths=6, cfg=MompConfig(stop_fraction=0.0))
    keys = [(psi.grid_x[e.j1], psi.grid_y[e.j2], psi.grid_tau[e.j3]) for e in est.entries]
    assert len(set(keys)) == len(keys)
    assert np.all(np.isfinite([b for e in est.entries for b in e.beta]))


def test_early_stop_fraction(rng):
    prob = small_problem()
    _, _, y = random_sparse(rng, prob, 2, 8)
    est = momp_solve(y, prob["phi"], prob["psi"], n_paths=10)
    assert len(est.entries) == 2
    full = momp_solve(y + 1e-3 * rng.standard_normal(y.shape), prob["phi"], prob["psi"], n_paths=5,
                      cfg=MompConfig(stop_fraction=0.0))
    assert len(full.entries) == 5


def test_compress_columns(rng):
    a = rng.standard_normal((40, 3)) + 1j * rng.standard_normal((40, 3))
    b = rng.standard_normal((3, 10)) + 1j * rng.standard_normal((3, 10))
    y = a @ b
    yc, vh, lost = compress_columns(y, 3)
    assert yc.shape == (40, 3) and lost == pytest.approx(0.0, abs=1e-9 * np.vdot(y, y).real)
    np.testing.assert_allclose(yc @ vh, y, atol=1e-10 * np.abs(y).max())
    same, none, zero = compress_columns(y, None)
    assert same is y and none is None and zero == 0.0
    yc1, _, lost1 = compress_columns(y, 1)
    assert np.vdot(yc1, yc1).real + lost1 == pytest.approx(np.vdot(y, y).real)


def test_compressed_solve_matches_full(rng):
    prob = small_problem()
    js, betas, y = random_sparse(rng, prob, 2, 8)
    full = momp_solve(y, prob["phi"], prob["psi"])
    comp = momp_solve(y, prob["phi"], prob["psi"], cfg=MompConfig(max_rank=2))
    assert [e.index for e in comp.entries] == [e.index for e in full.entries]
    for a, b in zip(comp.entries, full.entries):
        np.testing.assert_allclose(a.beta, b.beta, atol=1e-9 * np.abs(b.beta).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_refine_never_worse(seed):
    rng = np.random.default_rng(seed)
    prob = small_problem()
    _, _, y = random_sparse(rng, prob, 3, 8)
    y = y + 0.3 * np.linalg.norm(y) / np.sqrt(y.size) * rng.standard_normal(y.shape)
    est = momp_solve(y, prob["phi"], prob["psi"], n_paths=3, cfg=MompConfig(stop_fraction=0.0))
    ref = refine_support(y, prob["phi"], prob["psi"], est)
    assert ref.residual_norm <= est.residual_norm * (1 + 1e-12)
    assert len(ref.entries) == len(est.entries)
    assert len({e.index for e in ref.entries}) == len(ref.entries)
    assert residual_model(y, prob["phi"], prob["psi"], ref) == pytest.approx(ref.residual_norm, rel=1e-8)


def test_refine_keeps_exact_support(rng):
    prob = small_problem()
    js, _, y = random_sparse(rng, prob, 2, 8)
    est = momp_solve(y, prob["phi"], prob["psi"])
    ref = refine_support(y, prob["phi"], prob["psi"], est)
    assert sorted(e.index for e in ref.entries) == sorted(js)
    assert refine_support(y, prob["phi"], prob["psi"], SparseChannelEstimate([], 1.0)).entries == []


def test_snap_grid():
    g = np.linspace(-1, 1, 8, endpoint=False)
    out = snap_grid(g, [0.3, -0.74])
    assert out.size == 8
    assert 0.3 in out and -0.74 in out
    # two values nearest the same point keep both
    out2 = snap_grid(g, [0.26, 0.24])
    assert 0.26 in out2 and 0.24 in out2 and out2.size == 9
    assert np.all(np.diff(out2) > 0)


def test_estimate_roundtrip(rng):
    prob = small_problem()
    _, _, y = random_sparse(rng, prob, 2, 8)
    est = momp_solve(y, prob["phi"], prob["psi"])
    d = est.to_dict(prob["psi"])
    assert d["entries"][0]["tau"] == prob["psi"].grid_tau[est.entries[0].j3]
    back = SparseChannelEstimate.from_dict(d)
    assert [e.index for e in back.entries] == [e.index for e in est.entries]
    for a, b in zip(back.entries, est.entries):
        np.testing.assert_array_equal(a.beta, b.beta)
    assert back.residual_norm == est.residual_norm
